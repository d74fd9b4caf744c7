//! Dataset ingestion and synthetic cross-domain generation.
//!
//! Real data enters through IDX files (big-endian, standard magics).
//! Synthetic domains are materialized deterministically from
//! `(generator, seed, size)` and come in two flavors:
//!
//! - unlabeled texture domains for cross-domain generator training:
//!   `stripes`, `blobs`, `checker`, `value-noise` — each with distinct
//!   low-level statistics;
//! - labeled 10-class domains standing in for "real" classification data:
//!   `glyphs` (stroke patterns) and `forms` (region patterns), visually
//!   disjoint from each other so classifiers can be trained on genuinely
//!   different distributions.
//!
//! All images are `(n, 1, 28, 28)` tensors in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const SYNTH_SIDE: usize = 28;

/// Train/val/test index lists; disjoint and exhaustive.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// An immutable, materialized dataset.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub name: String,
    images: Tensor,
    labels: Option<Vec<usize>>,
    splits: Option<Splits>,
}

impl DatasetHandle {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Option<Vec<usize>>) -> Result<DatasetHandle> {
        if images.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "dataset images",
                lhs: images.shape().to_vec(),
                rhs: vec![4],
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != images.shape()[0] {
                return Err(Error::CountMismatch {
                    images: images.shape()[0],
                    labels: labels.len(),
                });
            }
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::NonFinite("dataset images outside [0,1]"));
        }
        Ok(DatasetHandle {
            name: name.into(),
            images,
            labels,
            splits: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    /// Gather a batch of images by index.
    pub fn batch(&self, idxs: &[usize]) -> Tensor {
        self.images.gather_axis0(idxs)
    }

    pub fn labels_for(&self, idxs: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| idxs.iter().map(|&i| l[i]).collect())
    }

    /// Attach seeded, disjoint, exhaustive split tags.
    pub fn split(mut self, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetHandle> {
        let (ft, fv, fe) = fractions;
        let arr = [ft, fv, fe];
        if arr.iter().any(|&f| f < 0.0) || (ft + fv + fe - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions(arr));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(seed);
        order.shuffle(&mut rng);
        let c1 = (ft * n as f64).round() as usize;
        let c2 = ((ft + fv) * n as f64).round() as usize;
        let c1 = c1.min(n);
        let c2 = c2.clamp(c1, n);
        self.splits = Some(Splits {
            train: order[..c1].to_vec(),
            val: order[c1..c2].to_vec(),
            test: order[c2..].to_vec(),
        });
        Ok(self)
    }
}

/// How to materialize a dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DomainKind {
    Synthetic {
        generator: String,
    },
    IdxFiles {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    ImageDir {
        root: PathBuf,
    },
}

/// Deterministic dataset recipe: `(kind, seed, size)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub seed: u64,
    /// Sample count for synthetic domains; cap for file-backed ones (0 = all).
    pub size: usize,
}

/// Materialize a dataset from its spec.
pub fn materialize(name: &str, spec: &DomainSpec) -> Result<DatasetHandle> {
    match &spec.kind {
        DomainKind::Synthetic { generator } => {
            let mut handle = synth_domain(generator, spec.seed, spec.size)?;
            handle.name = name.to_string();
            Ok(handle)
        }
        DomainKind::IdxFiles { images, labels } => {
            let mut handle = load_idx(images, labels.as_deref())?;
            handle.name = name.to_string();
            if spec.size > 0 && spec.size < handle.len() {
                let idxs: Vec<usize> = (0..spec.size).collect();
                let trimmed = handle.batch(&idxs);
                let labels = handle.labels_for(&idxs);
                handle = DatasetHandle::new(name, trimmed, labels)?;
            }
            Ok(handle)
        }
        DomainKind::ImageDir { root } => {
            #[cfg(feature = "image-dir")]
            {
                let mut handle = load_image_dir(root)?;
                handle.name = name.to_string();
                Ok(handle)
            }
            #[cfg(not(feature = "image-dir"))]
            {
                let _ = root;
                Err(Error::Config(
                    "image_dir data source requires the `image-dir` feature".into(),
                ))
            }
        }
    }
}

/// Parse IDX images (magic 0x00000803) and optionally labels (0x00000801).
/// Pixel bytes scale to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<DatasetHandle> {
    let bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    if bytes.len() < 16 {
        return Err(Error::IdxTruncated(format!("{images_path:?}: header")));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_be_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_be_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = 16 + n * h * w;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated(format!(
            "{images_path:?}: {} pixel bytes, need {}",
            bytes.len() - 16,
            n * h * w
        )));
    }
    let data: Vec<f64> = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::from_vec(&[n, 1, h, w], data)?;

    let labels = match labels_path {
        None => None,
        Some(path) => {
            let lb = fs::read(path).map_err(|e| Error::io(path, e))?;
            if lb.len() < 8 {
                return Err(Error::IdxTruncated(format!("{path:?}: header")));
            }
            let magic = u32::from_be_bytes(lb[0..4].try_into().expect("4 bytes"));
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::IdxMagic {
                    got: magic,
                    expected: IDX_LABELS_MAGIC,
                });
            }
            let ln = u32::from_be_bytes(lb[4..8].try_into().expect("4 bytes")) as usize;
            if lb.len() < 8 + ln {
                return Err(Error::IdxTruncated(format!("{path:?}: label bytes")));
            }
            if ln != n {
                return Err(Error::CountMismatch { images: n, labels: ln });
            }
            Some(lb[8..8 + ln].iter().map(|&b| b as usize).collect())
        }
    };

    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    DatasetHandle::new(name, images, labels)
}

/// Registered synthetic domain generators.
pub const SYNTH_GENERATORS: &[&str] = &["stripes", "blobs", "checker", "value-noise", "glyphs", "forms"];

/// Materialize a synthetic domain. Texture generators are unlabeled;
/// `glyphs` and `forms` carry balanced 10-class labels.
pub fn synth_domain(generator: &str, seed: u64, size: usize) -> Result<DatasetHandle> {
    if size == 0 {
        return Err(Error::InvalidArgument("synthetic domain size must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let side = SYNTH_SIDE;
    let mut data = Vec::with_capacity(size * side * side);
    let mut labels: Option<Vec<usize>> = None;
    for i in 0..size {
        match generator {
            "stripes" => render_stripes(&mut data, side, &mut rng),
            "blobs" => render_blobs(&mut data, side, &mut rng),
            "checker" => render_checker(&mut data, side, &mut rng),
            "value-noise" => render_value_noise(&mut data, side, &mut rng),
            "glyphs" => {
                let class = i % 10;
                render_glyph(&mut data, side, class, &mut rng);
                labels.get_or_insert_with(Vec::new).push(class);
            }
            "forms" => {
                let class = i % 10;
                render_form(&mut data, side, class, &mut rng);
                labels.get_or_insert_with(Vec::new).push(class);
            }
            other => return Err(Error::UnknownDomain(other.to_string())),
        }
    }
    let images = Tensor::from_vec(&[size, 1, side, side], data)?;
    DatasetHandle::new(generator, images, labels)
}

fn push_plane(data: &mut Vec<f64>, side: usize, f: impl Fn(f64, f64) -> f64) {
    for i in 0..side {
        for j in 0..side {
            data.push(f(i as f64, j as f64).clamp(0.0, 1.0));
        }
    }
}

fn render_stripes(data: &mut Vec<f64>, side: usize, rng: &mut ChaCha12Rng) {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let wavelength: f64 = rng.random_range(3.0..9.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    push_plane(data, side, |i, j| {
        0.5 + 0.5 * (std::f64::consts::TAU * (i * c + j * s) / wavelength + phase).sin()
    });
}

fn render_blobs(data: &mut Vec<f64>, side: usize, rng: &mut ChaCha12Rng) {
    let bg: f64 = rng.random_range(0.02..0.12);
    let count = rng.random_range(2..=5);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(4.0..side as f64 - 4.0),
                rng.random_range(4.0..side as f64 - 4.0),
                rng.random_range(1.5..4.0),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    push_plane(data, side, |i, j| {
        let mut v = bg;
        for &(ci, cj, sigma, amp) in &blobs {
            let d2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
            v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        v
    });
}

fn render_checker(data: &mut Vec<f64>, side: usize, rng: &mut ChaCha12Rng) {
    let cell = rng.random_range(2..=6) as f64;
    let oi: f64 = rng.random_range(0.0..cell);
    let oj: f64 = rng.random_range(0.0..cell);
    let lo: f64 = rng.random_range(0.0..0.2);
    let hi: f64 = rng.random_range(0.8..1.0);
    push_plane(data, side, |i, j| {
        let parity = (((i + oi) / cell).floor() + ((j + oj) / cell).floor()) as i64 % 2;
        if parity == 0 {
            hi
        } else {
            lo
        }
    });
}

fn render_value_noise(data: &mut Vec<f64>, side: usize, rng: &mut ChaCha12Rng) {
    let grid = rng.random_range(4..=7usize);
    let coarse: Vec<f64> = (0..(grid + 1) * (grid + 1)).map(|_| rng.random_range(0.0..1.0)).collect();
    let scale = grid as f64 / side as f64;
    push_plane(data, side, |i, j| {
        let (gi, gj) = (i * scale, j * scale);
        let (i0, j0) = (gi.floor() as usize, gj.floor() as usize);
        let (fi, fj) = (gi - i0 as f64, gj - j0 as f64);
        let at = |a: usize, b: usize| coarse[a.min(grid) * (grid + 1) + b.min(grid)];
        let top = at(i0, j0) * (1.0 - fj) + at(i0, j0 + 1) * fj;
        let bot = at(i0 + 1, j0) * (1.0 - fj) + at(i0 + 1, j0 + 1) * fj;
        top * (1.0 - fi) + bot * fi
    });
}

/// Distance from point to segment, for stroke rendering.
fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) };
    let (ex, ey) = (px - t * dx, py - t * dy);
    (ex * ex + ey * ey).sqrt()
}

struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
}

/// Stroke-pattern classes: bars, diagonals, and their combinations.
fn render_glyph(data: &mut Vec<f64>, side: usize, class: usize, rng: &mut ChaCha12Rng) {
    let s = side as f64;
    let cx = s / 2.0 + rng.random_range(-3.0..3.0);
    let cy = s / 2.0 + rng.random_range(-3.0..3.0);
    let r: f64 = rng.random_range(7.0..10.0);
    let h = Stroke {
        a: (cx, cy - r),
        b: (cx, cy + r),
    };
    let v = Stroke {
        a: (cx - r, cy),
        b: (cx + r, cy),
    };
    let d1 = Stroke {
        a: (cx - r * 0.8, cy - r * 0.8),
        b: (cx + r * 0.8, cy + r * 0.8),
    };
    let d2 = Stroke {
        a: (cx + r * 0.8, cy - r * 0.8),
        b: (cx - r * 0.8, cy + r * 0.8),
    };
    let hi = Stroke {
        a: (cx - 4.0, cy - r),
        b: (cx - 4.0, cy + r),
    };
    let lo = Stroke {
        a: (cx + 4.0, cy - r),
        b: (cx + 4.0, cy + r),
    };
    let left = Stroke {
        a: (cx - r, cy - 4.0),
        b: (cx + r, cy - 4.0),
    };
    let right = Stroke {
        a: (cx - r, cy + 4.0),
        b: (cx + r, cy + 4.0),
    };
    let strokes: Vec<&Stroke> = match class {
        0 => vec![&h],
        1 => vec![&v],
        2 => vec![&d1],
        3 => vec![&d2],
        4 => vec![&h, &v],
        5 => vec![&d1, &d2],
        6 => vec![&hi, &lo],
        7 => vec![&left, &right],
        8 => vec![&h, &d1],
        _ => vec![&v, &d2],
    };
    let thickness: f64 = rng.random_range(1.2..2.2);
    let ink: f64 = rng.random_range(0.75..1.0);
    let bg: f64 = rng.random_range(0.0..0.08);
    let noise: Vec<f64> = (0..side * side).map(|_| rng.random_range(-0.05..0.05)).collect();
    push_plane_indexed(data, side, |i, j, idx| {
        let mut val = bg + noise[idx];
        for st in &strokes {
            let d = seg_dist((i, j), st.a, st.b);
            if d < thickness {
                val = val.max(ink * (1.0 - (d / thickness).powi(2)) + noise[idx]);
            }
        }
        val
    });
}

/// Region-pattern classes: disks, rings, boxes, diamonds, dots, ramps.
fn render_form(data: &mut Vec<f64>, side: usize, class: usize, rng: &mut ChaCha12Rng) {
    let s = side as f64;
    let cx = s / 2.0 + rng.random_range(-2.5..2.5);
    let cy = s / 2.0 + rng.random_range(-2.5..2.5);
    let r: f64 = rng.random_range(6.0..9.5);
    let ink: f64 = rng.random_range(0.75..1.0);
    let bg: f64 = rng.random_range(0.0..0.08);
    let noise: Vec<f64> = (0..side * side).map(|_| rng.random_range(-0.05..0.05)).collect();
    push_plane_indexed(data, side, |i, j, idx| {
        let (di, dj) = (i - cx, j - cy);
        let circle = (di * di + dj * dj).sqrt();
        let boxd = di.abs().max(dj.abs());
        let diamond = di.abs() + dj.abs();
        let inside = match class {
            0 => circle <= r,
            1 => circle <= r && circle >= r * 0.55,
            2 => boxd <= r * 0.8,
            3 => boxd <= r * 0.8 && boxd >= r * 0.45,
            4 => dj >= di - 2.0 && circle <= r, // wedge
            5 => diamond <= r,
            6 => diamond <= r && diamond >= r * 0.5,
            7 => circle <= r && di < 0.0, // half disk
            8 => {
                let (qi, qj) = (if di < 0.0 { -1.0 } else { 1.0 }, if dj < 0.0 { -1.0 } else { 1.0 });
                let (ci, cj) = (qi * r * 0.5, qj * r * 0.5);
                ((di - ci).powi(2) + (dj - cj).powi(2)).sqrt() <= r * 0.28
            }
            _ => false,
        };
        let val = if class == 9 {
            // gradient ramp across the image
            bg + (j / s) * ink
        } else if inside {
            ink
        } else {
            bg
        };
        val + noise[idx]
    });
}

fn push_plane_indexed(data: &mut Vec<f64>, side: usize, mut f: impl FnMut(f64, f64, usize) -> f64) {
    for i in 0..side {
        for j in 0..side {
            data.push(f(i as f64, j as f64, i * side + j).clamp(0.0, 1.0));
        }
    }
}

/// Load a `<root>/<class>/<image>.png` tree as a labeled grayscale dataset.
/// Class directories are sorted by name; images within a class are sorted
/// by file name. All images must share dimensions.
#[cfg(feature = "image-dir")]
pub fn load_image_dir(root: &Path) -> Result<DatasetHandle> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0usize;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)?.into_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::Config(format!(
                        "image {file:?} is {h}x{w}, expected {}x{}",
                        d.0, d.1
                    )))
                }
                _ => {}
            }
            data.extend(img.pixels().map(|p| f64::from(p.0[0]) / 255.0));
            labels.push(class);
            n += 1;
        }
    }
    let (h, w) = dims.ok_or_else(|| Error::Config(format!("no png images under {root:?}")))?;
    let images = Tensor::from_vec(&[n, 1, h, w], data)?;
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image-dir".into());
    DatasetHandle::new(name, images, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_image_bytes(n: usize, h: usize, w: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(n as u32).to_be_bytes());
        b.extend_from_slice(&(h as u32).to_be_bytes());
        b.extend_from_slice(&(w as u32).to_be_bytes());
        b.extend((0..n * h * w).map(pixel));
        b
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");
        fs::write(&img_path, idx_image_bytes(3, 28, 28, |i| (i % 256) as u8)).unwrap();
        fs::write(&lbl_path, idx_label_bytes(&[1, 0, 7])).unwrap();

        let ds = load_idx(&img_path, Some(&lbl_path)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), (1, 28, 28));
        assert_eq!(ds.labels(), Some(&[1usize, 0, 7][..]));
        assert!(ds.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((ds.images().data()[255] - 1.0).abs() < 1e-12);

        // labels omitted: usable, unlabeled
        let ds = load_idx(&img_path, None).unwrap();
        assert!(ds.labels().is_none());
    }

    #[test]
    fn idx_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");

        // bad magic
        let mut bad = idx_image_bytes(1, 4, 4, |_| 0);
        bad[3] = 0x01;
        fs::write(&img_path, &bad).unwrap();
        assert!(matches!(load_idx(&img_path, None), Err(Error::IdxMagic { .. })));

        // truncated pixels
        let mut cut = idx_image_bytes(2, 4, 4, |_| 0);
        cut.truncate(16 + 5);
        fs::write(&img_path, &cut).unwrap();
        assert!(matches!(load_idx(&img_path, None), Err(Error::IdxTruncated(_))));

        // count mismatch
        fs::write(&img_path, idx_image_bytes(3, 4, 4, |_| 0)).unwrap();
        fs::write(&lbl_path, idx_label_bytes(&[0, 1])).unwrap();
        assert!(matches!(
            load_idx(&img_path, Some(&lbl_path)),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn synthetic_domains_are_deterministic() {
        for gen in SYNTH_GENERATORS {
            let a = synth_domain(gen, 11, 20).unwrap();
            let b = synth_domain(gen, 11, 20).unwrap();
            assert_eq!(a.images().data(), b.images().data(), "{gen}");
            let c = synth_domain(gen, 12, 20).unwrap();
            assert_ne!(a.images().data(), c.images().data(), "{gen}");
            assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(matches!(synth_domain("plasma", 0, 4), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn texture_domains_have_distinct_means() {
        let stripes = synth_domain("stripes", 0, 100).unwrap();
        let blobs = synth_domain("blobs", 0, 100).unwrap();
        let mean = |d: &DatasetHandle| d.images().data().iter().sum::<f64>() / d.images().len() as f64;
        assert!((mean(&stripes) - mean(&blobs)).abs() > 0.05);
    }

    #[test]
    fn labeled_domains_are_balanced_ten_class() {
        for gen in ["glyphs", "forms"] {
            let ds = synth_domain(gen, 5, 200).unwrap();
            let labels = ds.labels().expect("labeled domain");
            let mut counts = [0usize; 10];
            for &l in labels {
                counts[l] += 1;
            }
            assert!(counts.iter().all(|&c| c == 20), "{gen}: {counts:?}");
            assert_eq!(ds.num_classes(), Some(10));
        }
        for gen in ["stripes", "blobs", "checker", "value-noise"] {
            assert!(synth_domain(gen, 5, 10).unwrap().labels().is_none());
        }
    }

    #[test]
    fn split_matches_requested_counts() {
        let ds = synth_domain("stripes", 3, 100).unwrap();
        let ds = ds.split((0.8, 0.1, 0.1), 7).unwrap();
        let sp = ds.splits().unwrap();
        assert_eq!(sp.train.len(), 80);
        assert_eq!(sp.val.len(), 10);
        assert_eq!(sp.test.len(), 10);

        let again = synth_domain("stripes", 3, 100).unwrap().split((0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(again.splits().unwrap().train, sp.train);

        assert!(matches!(
            synth_domain("stripes", 3, 10).unwrap().split((0.5, 0.1, 0.1), 7),
            Err(Error::BadFractions(_))
        ));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_exhaustive(n in 3usize..200, seed in 0u64..1000, ft in 0.1f64..0.8) {
            let fv = (1.0 - ft) / 2.0;
            let ds = synth_domain("checker", 1, n).unwrap().split((ft, fv, 1.0 - ft - fv), seed).unwrap();
            let sp = ds.splits().unwrap();
            let mut seen = vec![false; n];
            for &i in sp.train.iter().chain(&sp.val).chain(&sp.test) {
                prop_assert!(!seen[i], "index {} appears twice", i);
                seen[i] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn materialize_respects_size_cap() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        fs::write(&img_path, idx_image_bytes(10, 4, 4, |_| 128)).unwrap();
        let spec = DomainSpec {
            kind: DomainKind::IdxFiles {
                images: img_path,
                labels: None,
            },
            seed: 0,
            size: 4,
        };
        let ds = materialize("capped", &spec).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.name, "capped");
    }
}
