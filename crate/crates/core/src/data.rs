//! Stereo pair ingestion and synthesis.
//!
//! Folder datasets follow the stereo-camera convention: two sibling
//! directories of 8-bit RGB images with matching basenames, left view and
//! right view. Each image is center-cropped to 370x740 and bilinearly
//! downsampled to 128x256; files without a counterpart or too small for the
//! crop are skipped with a counted warning. The left view serves as the
//! decoder-side image, the right view is the one that gets coded.
//!
//! The synthetic generator stands in for stereo correlation at desk scale:
//! each pair renders one smooth low-frequency base image twice, the second
//! view shifted horizontally by a small disparity, then both views get
//! independent pixel noise.

use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const KITTI_CROP_H: usize = 370;
pub const KITTI_CROP_W: usize = 740;
pub const KITTI_OUT_H: usize = 128;
pub const KITTI_OUT_W: usize = 256;

/// A stereo pair in `[0,1]`, equal `[3,H,W]` shapes.
#[derive(Clone, Debug)]
pub struct StereoPair {
    pub left: Tensor,
    pub right: Tensor,
}

/// Deterministic random access to stereo pairs.
pub trait PairSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<StereoPair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Load an 8-bit RGB image file into a `[3,H,W]` tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Save a `[3,H,W]` tensor (clamped to [0,1]) as an 8-bit RGB PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    if t.shape().len() != 3 || t.shape()[0] != 3 {
        return Err(Error::Shape(format!("expected [3,H,W], got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + c] = (t.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, raw).unwrap();
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Bilinear resample of a `[C,H,W]` tensor (half-pixel centers).
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let data = src.data();
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let ch = i / (out_h * out_w);
        let oy = (i / out_w) % out_h;
        let ox = i % out_w;
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |y: usize, x: usize| data[(ch * h + y) * w + x];
        at(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + at(y0, x1) * (1.0 - dy) * dx
            + at(y1, x0) * dy * (1.0 - dx)
            + at(y1, x1) * dy * dx
    })
}

/// Center crop of a `[C,H,W]` tensor.
pub fn center_crop(src: &Tensor, crop_h: usize, crop_w: usize) -> Result<Tensor> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if h < crop_h || w < crop_w {
        return Err(Error::Shape(format!(
            "{h}x{w} image smaller than {crop_h}x{crop_w} crop"
        )));
    }
    let (y0, x0) = ((h - crop_h) / 2, (w - crop_w) / 2);
    let data = src.data();
    Ok(Tensor::from_fn(&[c, crop_h, crop_w], |i| {
        let ch = i / (crop_h * crop_w);
        let y = (i / crop_w) % crop_h;
        let x = i % crop_w;
        data[(ch * h + y0 + y) * w + x0 + x]
    }))
}

/// The full preprocessing of one view: center crop then bilinear downsample.
pub fn preprocess_view(src: &Tensor) -> Result<Tensor> {
    let cropped = center_crop(src, KITTI_CROP_H, KITTI_CROP_W)?;
    Ok(bilinear_resize(&cropped, KITTI_OUT_H, KITTI_OUT_W))
}

const VIEW_DIR_CANDIDATES: [(&str, &str); 4] = [
    ("left", "right"),
    ("image_2", "image_3"),
    ("image_0", "image_1"),
    ("colored_0", "colored_1"),
];

/// A stereo folder dataset, paired up front, decoded lazily per access.
pub struct StereoFolder {
    pairs: Vec<(PathBuf, PathBuf)>,
    warnings: usize,
}

impl StereoFolder {
    /// Scan `root` for one of the left/right directory conventions, pair
    /// files by identical name, and pre-check dimensions from the image
    /// headers. Unpaired or undersized files are skipped and counted.
    pub fn open(root: &Path) -> Result<Self> {
        let (left_dir, right_dir) = VIEW_DIR_CANDIDATES
            .iter()
            .map(|(l, r)| (root.join(l), root.join(r)))
            .find(|(l, r)| l.is_dir() && r.is_dir())
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "{}: no left/right view directories found (tried {:?})",
                    root.display(),
                    VIEW_DIR_CANDIDATES
                ))
            })?;
        let list = |dir: &Path| -> Result<Vec<String>> {
            let mut names: Vec<String> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            Ok(names)
        };
        let left_names = list(&left_dir)?;
        let right_names = list(&right_dir)?;
        let mut warnings = 0usize;
        let mut pairs = Vec::new();
        let big_enough = |p: &Path| -> bool {
            image::image_dimensions(p)
                .map(|(w, h)| h as usize >= KITTI_CROP_H && w as usize >= KITTI_CROP_W)
                .unwrap_or(false)
        };
        let mut li = 0;
        let mut ri = 0;
        while li < left_names.len() && ri < right_names.len() {
            match left_names[li].cmp(&right_names[ri]) {
                std::cmp::Ordering::Less => {
                    warnings += 1;
                    li += 1;
                }
                std::cmp::Ordering::Greater => {
                    warnings += 1;
                    ri += 1;
                }
                std::cmp::Ordering::Equal => {
                    let l = left_dir.join(&left_names[li]);
                    let r = right_dir.join(&right_names[ri]);
                    if big_enough(&l) && big_enough(&r) {
                        pairs.push((l, r));
                    } else {
                        warnings += 1;
                    }
                    li += 1;
                    ri += 1;
                }
            }
        }
        warnings += (left_names.len() - li) + (right_names.len() - ri);
        Ok(StereoFolder { pairs, warnings })
    }

    /// Count of files skipped for missing counterparts or wrong dimensions.
    pub fn warnings(&self) -> usize {
        self.warnings
    }

    /// Train/test split by sorted index: the published 1576/790 counts when
    /// the full 2366-pair dataset is present, proportional otherwise. The
    /// test slice doubles as the validation set.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.pairs.len();
        let n_train = if n == 2366 {
            1576
        } else {
            ((n as f64 * 1576.0 / 2366.0).round() as usize).clamp(usize::from(n > 1), n)
        };
        ((0..n_train).collect(), (n_train..n).collect())
    }
}

impl PairSource for StereoFolder {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn get(&self, index: usize) -> Result<StereoPair> {
        let (l, r) = &self.pairs[index];
        Ok(StereoPair {
            left: preprocess_view(&load_image(l)?)?,
            right: preprocess_view(&load_image(r)?)?,
        })
    }
}

/// A fixed subset of another source, by indices.
pub struct Subset<'a, S: PairSource + ?Sized> {
    pub source: &'a S,
    pub indices: Vec<usize>,
}

impl<'a, S: PairSource + ?Sized> PairSource for Subset<'a, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> Result<StereoPair> {
        self.source.get(self.indices[index])
    }
}

/// Pairs decoded once and served from memory; worthwhile when a small
/// dataset is traversed many times (folder decoding is the bottleneck at
/// desk scale).
pub struct InMemoryPairs {
    pairs: Vec<StereoPair>,
}

impl InMemoryPairs {
    pub fn from_source(source: &dyn PairSource, indices: &[usize]) -> Result<Self> {
        let pairs = indices
            .iter()
            .map(|&i| source.get(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(InMemoryPairs { pairs })
    }
}

impl PairSource for InMemoryPairs {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn get(&self, index: usize) -> Result<StereoPair> {
        Ok(self.pairs[index].clone())
    }
}

/// Synthetic correlated pairs: one smooth base per index, rendered twice
/// with a 1..=4 px horizontal disparity and independent per-view noise.
#[derive(Clone, Debug)]
pub struct SyntheticPairs {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub max_disparity: usize,
}

impl SyntheticPairs {
    pub fn new(seed: u64, count: usize, height: usize, width: usize) -> Self {
        SyntheticPairs {
            seed,
            count,
            height,
            width,
            noise_sigma: 0.02,
            max_disparity: 4,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl PairSource for SyntheticPairs {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<StereoPair> {
        if index >= self.count {
            return Err(Error::Dataset(format!(
                "pair {index} out of range ({} pairs)",
                self.count
            )));
        }
        let (h, w) = (self.height, self.width);
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)));
        let disparity = if self.max_disparity == 0 {
            0
        } else {
            1 + (rng.random::<u32>() as usize % self.max_disparity)
        };
        // low-frequency base on a wide canvas so the shifted view stays in
        // bounds; ~10 px grid cells keep the views highly correlated
        let wide = w + self.max_disparity;
        let (gh, gw) = (h.div_ceil(10) + 1, wide.div_ceil(10) + 1);
        let coarse = Tensor::from_fn(&[3, gh, gw], |_| 0.15 + 0.7 * rng.random::<f64>());
        let canvas = bilinear_resize(&coarse, h, wide);
        let mut view = |offset: usize| -> Tensor {
            let mut t = Tensor::from_fn(&[3, h, w], |i| {
                let c = i / (h * w);
                let y = (i / w) % h;
                let x = i % w;
                canvas.data()[(c * h + y) * wide + x + offset]
            });
            if self.noise_sigma > 0.0 {
                for v in t.data_mut() {
                    *v = (*v + self.noise_sigma * gauss(&mut rng)).clamp(0.0, 1.0);
                }
            }
            t
        };
        let left = view(0);
        let right = view(disparity);
        Ok(StereoPair { left, right })
    }
}
