//! The `WDSC` container: a fixed little-endian header, one range-coded
//! payload per latent stream, and a trailing CRC32 over everything before
//! it. The layout is normative; golden vectors in the test suite pin it
//! byte for byte.
//!
//! ```text
//! offset size  field
//! 0      4     magic "WDSC"
//! 4      1     version (currently 1)
//! 5      1     variant: 0 = factorized, 1 = hyperprior
//! 6      2     lambda id (opaque tag from the checkpoint)
//! 8      2     image height
//! 10     2     image width
//! 12     2     latent channel count
//! 14     8     checkpoint id (FNV-1a 64 of the checkpoint bytes)
//! 22     4*k   payload lengths (k = 1 or 2 by variant)
//! ..     ..    payloads
//! end-4  4     CRC32 (IEEE) of all preceding bytes
//! ```

use crate::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::Cursor;

pub const MAGIC: [u8; 4] = *b"WDSC";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub variant: u8,
    pub lambda_id: u16,
    pub image_h: u16,
    pub image_w: u16,
    pub latent_channels: u16,
    pub checkpoint_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub payloads: Vec<Vec<u8>>,
}

impl BitstreamHeader {
    fn payload_count(&self) -> usize {
        match self.variant {
            0 => 1,
            1 => 2,
            _ => 0,
        }
    }
}

impl Bitstream {
    /// Total payload size in bits; headers are not transmitted cost in the
    /// reported rate.
    pub fn payload_bits(&self) -> u64 {
        self.payloads.iter().map(|p| p.len() as u64 * 8).sum()
    }

    pub fn bpp(&self) -> f64 {
        self.payload_bits() as f64
            / (self.header.image_h as f64 * self.header.image_w as f64)
    }
}

/// CRC32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Serialize a header and payloads into container bytes.
pub fn pack(header: &BitstreamHeader, payloads: &[Vec<u8>]) -> Result<Vec<u8>> {
    if header.payload_count() == 0 {
        return Err(Error::Bitstream(format!(
            "unknown variant {}",
            header.variant
        )));
    }
    if payloads.len() != header.payload_count() {
        return Err(Error::Bitstream(format!(
            "variant {} carries {} payloads, got {}",
            header.variant,
            header.payload_count(),
            payloads.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(header.variant);
    out.write_u16::<LittleEndian>(header.lambda_id)?;
    out.write_u16::<LittleEndian>(header.image_h)?;
    out.write_u16::<LittleEndian>(header.image_w)?;
    out.write_u16::<LittleEndian>(header.latent_channels)?;
    out.write_u64::<LittleEndian>(header.checkpoint_id)?;
    for p in payloads {
        out.write_u32::<LittleEndian>(
            u32::try_from(p.len())
                .map_err(|_| Error::Bitstream("payload longer than u32".into()))?,
        )?;
    }
    for p in payloads {
        out.extend_from_slice(p);
    }
    let crc = crc32(&out);
    out.write_u32::<LittleEndian>(crc)?;
    Ok(out)
}

/// Parse container bytes; every header field and the checksum are verified.
pub fn unpack(bytes: &[u8]) -> Result<Bitstream> {
    if bytes.len() < 26 {
        return Err(Error::Bitstream("container shorter than header".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Checksum(format!(
            "container CRC {stored:#010x} != computed {computed:#010x}"
        )));
    }
    let mut r = Cursor::new(body);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::Bitstream(format!("bad magic {magic:02x?}")));
    }
    let version = r.read_u8()?;
    if version != VERSION {
        return Err(Error::Bitstream(format!("unsupported version {version}")));
    }
    let variant = r.read_u8()?;
    let header = BitstreamHeader {
        variant,
        lambda_id: r.read_u16::<LittleEndian>()?,
        image_h: r.read_u16::<LittleEndian>()?,
        image_w: r.read_u16::<LittleEndian>()?,
        latent_channels: r.read_u16::<LittleEndian>()?,
        checkpoint_id: r.read_u64::<LittleEndian>()?,
    };
    let count = header.payload_count();
    if count == 0 {
        return Err(Error::Bitstream(format!("unknown variant {variant}")));
    }
    let mut lens = Vec::with_capacity(count);
    for _ in 0..count {
        lens.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let mut offset = r.position() as usize;
    let mut payloads = Vec::with_capacity(count);
    for len in lens {
        if offset + len > body.len() {
            return Err(Error::Bitstream("payload length overruns container".into()));
        }
        payloads.push(body[offset..offset + len].to_vec());
        offset += len;
    }
    if offset != body.len() {
        return Err(Error::Bitstream("trailing bytes after payloads".into()));
    }
    Ok(Bitstream { header, payloads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> BitstreamHeader {
        BitstreamHeader {
            variant: 0,
            lambda_id: 3,
            image_h: 128,
            image_w: 256,
            latent_channels: 8,
            checkpoint_id: 0xDEAD_BEEF_0123_4567,
        }
    }

    #[test]
    fn pack_unpack_identity() {
        let payloads = vec![vec![1u8, 2, 3, 4, 5]];
        let bytes = pack(&header(), &payloads).unwrap();
        let bs = unpack(&bytes).unwrap();
        assert_eq!(bs.header, header());
        assert_eq!(bs.payloads, payloads);
        assert_eq!(bs.payload_bits(), 40);
    }

    #[test]
    fn empty_payload_round_trips() {
        let bytes = pack(&header(), &[Vec::new()]).unwrap();
        let bs = unpack(&bytes).unwrap();
        assert_eq!(bs.payloads, vec![Vec::<u8>::new()]);
    }

    #[test]
    fn hyperprior_variant_carries_two_payloads() {
        let mut h = header();
        h.variant = 1;
        assert!(pack(&h, &[vec![1]]).is_err());
        let bytes = pack(&h, &[vec![1, 2], vec![3]]).unwrap();
        let bs = unpack(&bytes).unwrap();
        assert_eq!(bs.payloads.len(), 2);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = pack(&header(), &[vec![9u8; 16]]).unwrap();
        for i in 0..bytes.len() {
            let mut corrupt = bytes.clone();
            corrupt[i] ^= 0x40;
            assert!(unpack(&corrupt).is_err(), "flip at byte {i} went undetected");
        }
    }

    #[test]
    fn unknown_version_and_variant_are_rejected() {
        let bytes = pack(&header(), &[vec![1, 2, 3]]).unwrap();
        // bump version and fix up the checksum so only the version differs
        let mut v2 = bytes.clone();
        v2[4] = 9;
        let n = v2.len();
        let crc = crc32(&v2[..n - 4]);
        v2[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(unpack(&v2), Err(Error::Bitstream(_))));

        let mut hv = header();
        hv.variant = 7;
        assert!(pack(&hv, &[vec![]]).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = pack(&header(), &[vec![1u8; 32]]).unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(unpack(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn crc32_known_vector() {
        // standard check value for "123456789"
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pack_unpack_arbitrary_payloads(
            p0 in proptest::collection::vec(any::<u8>(), 0..200),
            lambda_id in any::<u16>(),
            hw in (1u16..512, 1u16..512),
        ) {
            let h = BitstreamHeader {
                variant: 0,
                lambda_id,
                image_h: hw.0,
                image_w: hw.1,
                latent_channels: 4,
                checkpoint_id: 42,
            };
            let bytes = pack(&h, &[p0.clone()]).unwrap();
            let bs = unpack(&bytes).unwrap();
            prop_assert_eq!(bs.header, h);
            prop_assert_eq!(bs.payloads, vec![p0]);
        }
    }
}
