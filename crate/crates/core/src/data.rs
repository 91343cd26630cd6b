//! Datasets: synthetic blobs and moons, and IDX image/label files.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...sample_shape]`
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(LabError::InvalidShape(format!("{} inputs but {} labels", x.rows(), y.len())));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.x.shape()[1..].to_vec()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect(), classes: self.classes }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }
}

const TAG_CENTERS: u64 = 21;
const TAG_SAMPLES: u64 = 22;

/// Isotropic Gaussian clusters with centers drawn uniformly from a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Blobs {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
    seed: u64,
}

impl Blobs {
    pub fn new(classes: usize, dim: usize, spread: f64, center_box: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[TAG_CENTERS]);
        let centers = (0..classes)
            .map(|_| (0..dim).map(|_| r.gen_range(-center_box..center_box)).collect())
            .collect();
        Self { centers, spread, seed }
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    fn draw(&self, centers: &[Vec<f64>], n: usize, tag: u64) -> Dataset {
        let dim = self.dim();
        let mut r = rng::stream(self.seed, &[TAG_SAMPLES, tag]);
        let mut data = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % centers.len();
            for &m in &centers[c] {
                let e: f64 = r.sample(StandardNormal);
                data.push(m + self.spread * e);
            }
            y.push(c);
        }
        Dataset { x: Tensor::new(vec![n, dim], data).expect("blob shape"), y, classes: centers.len() }
    }

    /// `n` samples, labels cycling through the classes. Different `tag`s give
    /// independent draws from the same clusters.
    pub fn sample(&self, n: usize, tag: u64) -> Dataset {
        self.draw(&self.centers, n, tag)
    }

    /// Clusters whose centers are moved a `fraction` of the way toward the
    /// nearest other center. At 0.5 each one sits on the boundary between
    /// two training classes. Labels name the source cluster.
    pub fn shifted(&self, fraction: f64, n: usize, tag: u64) -> Dataset {
        let moved: Vec<Vec<f64>> = self
            .centers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let nearest = self
                    .centers
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .min_by(|a, b| dist2(c, a.1).total_cmp(&dist2(c, b.1)))
                    .map(|(_, o)| o.clone())
                    .unwrap_or_else(|| c.clone());
                c.iter().zip(&nearest).map(|(a, b)| a + fraction * (b - a)).collect()
            })
            .collect();
        self.draw(&moved, n, tag ^ 0x5EED)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Two interleaving half circles.
pub fn moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, &[TAG_SAMPLES]);
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t: f64 = r.gen_range(0.0..std::f64::consts::PI);
        let (px, py) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let e1: f64 = r.sample(StandardNormal);
        let e2: f64 = r.sample(StandardNormal);
        data.push(px + noise * e1);
        data.push(py + noise * e2);
        y.push(c);
    }
    Dataset { x: Tensor::new(vec![n, 2], data).expect("moons shape"), y, classes: 2 }
}

/// Rotates every `[.., H, W]` image by 90° counter-clockwise.
pub fn rotate90(images: &Tensor) -> Tensor {
    let s = images.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = images.len() / (h * w);
    let mut out = vec![0.0; images.len()];
    let d = images.data();
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                // (i, j) -> (w-1-j, i) in an output of size [w, h]
                out[base + (w - 1 - j) * h + i] = d[base + i * w + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let k = shape.len();
    shape.swap(k - 2, k - 1);
    Tensor::new(shape, out).expect("rotation preserves size")
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LabError::Format { context: format!("truncated IDX {what}"), offset })
}

/// Parses an IDX image file into `[N, 1, rows, cols]` with pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "header")?;
    if magic != IDX_IMAGES {
        return Err(LabError::Format { context: format!("bad IDX image magic {magic:#010x}"), offset: 0 });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(LabError::Format {
            context: format!("truncated IDX pixel data (need {need} bytes)"),
            offset: bytes.len(),
        });
    }
    let data = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "header")?;
    if magic != IDX_LABELS {
        return Err(LabError::Format { context: format!("bad IDX label magic {magic:#010x}"), offset: 0 });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    if bytes.len() < 8 + n {
        return Err(LabError::Format { context: "truncated IDX labels".into(), offset: bytes.len() });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let x = parse_idx_images(&std::fs::read(images)?)?;
    let y = parse_idx_labels(&std::fs::read(labels)?)?;
    if x.rows() != y.len() {
        return Err(LabError::Format {
            context: format!("image count {} does not match label count {}", x.rows(), y.len()),
            offset: 4,
        });
    }
    Ok((x, y))
}
