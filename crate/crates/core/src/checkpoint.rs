//! Versioned binary checkpoint: model config, every named parameter tensor,
//! and the frozen coding tables, all little-endian, with a trailing FNV-1a 64
//! digest. The digest doubles as the checkpoint identity embedded in
//! bitstream headers, so an encoder/decoder pair can prove they share
//! weights and tables.

use crate::entropy::{CdfTable, GaussianConditional};
use crate::model::{CodingTables, Metric, ModelConfig, TrainMeta, Variant, WynerModel};
use crate::tensor::Tensor;
use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"WDCK";
pub const VERSION: u8 = 1;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn write_table(out: &mut Vec<u8>, t: &CdfTable) {
    out.write_i64::<LittleEndian>(t.offset).unwrap();
    out.push(t.precision);
    out.write_u32::<LittleEndian>(t.cdf.len() as u32).unwrap();
    for &c in &t.cdf {
        out.write_u32::<LittleEndian>(c).unwrap();
    }
}

fn read_table(r: &mut Cursor<&[u8]>) -> Result<CdfTable> {
    let offset = r.read_i64::<LittleEndian>()?;
    let precision = r.read_u8()?;
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len < 2 {
        return Err(Error::Checkpoint("CDF table shorter than one symbol".into()));
    }
    let mut cdf = Vec::with_capacity(len);
    for _ in 0..len {
        cdf.push(r.read_u32::<LittleEndian>()?);
    }
    Ok(CdfTable {
        offset,
        precision,
        cdf,
    })
}

/// Canonical body serialization (everything except the digest trailer).
fn serialize_body(model: &WynerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(model.config.variant.tag());
    out.write_u16::<LittleEndian>(model.config.n as u16).unwrap();
    out.write_u16::<LittleEndian>(model.config.n_w as u16).unwrap();
    out.push(model.meta.metric.tag());
    out.write_f64::<LittleEndian>(model.meta.lambda).unwrap();
    out.write_f64::<LittleEndian>(model.meta.alpha).unwrap();
    out.write_f64::<LittleEndian>(model.meta.beta).unwrap();
    out.write_u32::<LittleEndian>(model.params.len() as u32).unwrap();
    for (_, name, tensor) in model.params.iter() {
        out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in tensor.data() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    match &model.coding {
        None => out.push(0),
        Some(c) => {
            out.push(1);
            out.push(c.precision);
            out.write_f64::<LittleEndian>(c.tail_mass).unwrap();
            out.write_u32::<LittleEndian>(c.v_tables.len() as u32).unwrap();
            for t in &c.v_tables {
                write_table(&mut out, t);
            }
            out.write_u32::<LittleEndian>(c.z_tables.len() as u32).unwrap();
            for t in &c.z_tables {
                write_table(&mut out, t);
            }
            match &c.gaussian {
                None => out.push(0),
                Some(gauss) => {
                    out.push(1);
                    out.write_u32::<LittleEndian>(gauss.scales.len() as u32).unwrap();
                    for &s in &gauss.scales {
                        out.write_f64::<LittleEndian>(s).unwrap();
                    }
                    for t in &gauss.tables {
                        write_table(&mut out, t);
                    }
                }
            }
        }
    }
    out
}

/// Checkpoint identity: digest of the canonical body. Identical weights,
/// config and tables give identical ids on any platform.
pub fn digest(model: &WynerModel) -> u64 {
    fnv1a64(&serialize_body(model))
}

pub fn to_bytes(model: &WynerModel) -> Vec<u8> {
    let mut body = serialize_body(model);
    let d = fnv1a64(&body);
    body.write_u64::<LittleEndian>(d).unwrap();
    body
}

pub fn save(model: &WynerModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<WynerModel> {
    if bytes.len() < 8 + 5 {
        return Err(Error::Checkpoint("file shorter than header".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum(format!(
            "checkpoint digest {stored:016x} != computed {computed:016x}"
        )));
    }
    let mut r = Cursor::new(body);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let version = r.read_u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let variant = Variant::from_tag(r.read_u8()?)?;
    let n = r.read_u16::<LittleEndian>()? as usize;
    let n_w = r.read_u16::<LittleEndian>()? as usize;
    let metric = Metric::from_tag(r.read_u8()?)?;
    let lambda = r.read_f64::<LittleEndian>()?;
    let alpha = r.read_f64::<LittleEndian>()?;
    let beta = r.read_f64::<LittleEndian>()?;

    let mut model = WynerModel::new(ModelConfig { n, n_w, variant }, 0);
    model.meta = TrainMeta {
        lambda,
        alpha,
        beta,
        metric,
    };

    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model layout expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let id = model
            .params
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                shape,
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = Tensor::new(shape, data)?;
    }

    let coding_flag = r.read_u8()?;
    if coding_flag == 1 {
        let precision = r.read_u8()?;
        let tail_mass = r.read_f64::<LittleEndian>()?;
        let v_count = r.read_u32::<LittleEndian>()? as usize;
        let mut v_tables = Vec::with_capacity(v_count);
        for _ in 0..v_count {
            v_tables.push(read_table(&mut r)?);
        }
        let z_count = r.read_u32::<LittleEndian>()? as usize;
        let mut z_tables = Vec::with_capacity(z_count);
        for _ in 0..z_count {
            z_tables.push(read_table(&mut r)?);
        }
        let gaussian = if r.read_u8()? == 1 {
            let sc = r.read_u32::<LittleEndian>()? as usize;
            let mut scales = Vec::with_capacity(sc);
            for _ in 0..sc {
                scales.push(r.read_f64::<LittleEndian>()?);
            }
            let mut tables = Vec::with_capacity(sc);
            for _ in 0..sc {
                tables.push(read_table(&mut r)?);
            }
            Some(GaussianConditional { scales, tables })
        } else {
            None
        };
        model.coding = Some(CodingTables {
            precision,
            tail_mass,
            v_tables,
            z_tables,
            gaussian,
            digest: computed,
        });
    }
    if r.position() != body.len() as u64 {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<WynerModel> {
    from_bytes(&std::fs::read(path)?)
}
