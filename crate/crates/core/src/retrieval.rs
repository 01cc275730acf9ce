//! Global-descriptor image retrieval: the coarse pose prior.
//!
//! Two training-free descriptors are provided behind one interface: a
//! standardized 32x32 tiny-image (default, D = 1024) and a 16x16-cell
//! 8-bin gradient-orientation histogram (D = 2048). Nearest neighbors are
//! found by exact linear scan over cosine similarity; at a few hundred
//! database images exactness beats anything fancier.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::features::GrayImage;
use crate::mapcloud::TimedPose;

const DB_MAGIC: &[u8; 6] = b"CVDB1\0";
const DB_VERSION: u32 = 1;

/// Deviations below this are treated as no signal; the descriptor becomes
/// the zero vector (any two constant images compare equal).
const STD_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("image {width}x{height} too small, descriptors need at least 32x32")]
    ImageTooSmall { width: usize, height: usize },
    #[error("retrieval database is empty")]
    EmptyDatabase,
    #[error("bad magic bytes, not a CVDB1 file")]
    BadMagic,
    #[error("corrupt database: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Descriptor family tag, stored in the database file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DescriptorKind {
    /// Standardized 32x32 tiny image, D = 1024.
    Tiny,
    /// 16x16 cells x 8 orientation bins of gradient magnitude, D = 2048.
    GradHist,
}

impl DescriptorKind {
    pub fn dimension(self) -> usize {
        match self {
            DescriptorKind::Tiny => 32 * 32,
            DescriptorKind::GradHist => 16 * 16 * 8,
        }
    }

    fn tag(self) -> u8 {
        match self {
            DescriptorKind::Tiny => 0,
            DescriptorKind::GradHist => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, RetrievalError> {
        match tag {
            0 => Ok(DescriptorKind::Tiny),
            1 => Ok(DescriptorKind::GradHist),
            _ => Err(RetrievalError::Corrupt(format!(
                "unknown descriptor kind tag {tag}"
            ))),
        }
    }
}

impl std::str::FromStr for DescriptorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(DescriptorKind::Tiny),
            "gradhist" => Ok(DescriptorKind::GradHist),
            other => Err(format!("unknown descriptor kind {other:?}")),
        }
    }
}

/// L2-normalized global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub values: Vec<f32>,
}

impl GlobalDescriptor {
    /// Cosine similarity; descriptors are unit length so this is the dot
    /// product, accumulated in f64.
    pub fn similarity(&self, other: &GlobalDescriptor) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Computes the global descriptor of a grayscale image. Deterministic:
/// identical bytes give an identical descriptor.
pub fn compute_descriptor(
    image: &GrayImage,
    kind: DescriptorKind,
) -> Result<GlobalDescriptor, RetrievalError> {
    if image.width < 32 || image.height < 32 {
        return Err(RetrievalError::ImageTooSmall {
            width: image.width,
            height: image.height,
        });
    }
    let raw = match kind {
        DescriptorKind::Tiny => tiny_descriptor(image),
        DescriptorKind::GradHist => gradhist_descriptor(image),
    };
    Ok(GlobalDescriptor {
        values: l2_normalize(raw),
    })
}

/// Bilinear resize to 32x32, subtract the mean, divide by the standard
/// deviation, flatten. Affine brightness changes cancel exactly.
fn tiny_descriptor(image: &GrayImage) -> Vec<f64> {
    let resized = bilinear_resize(image, 32, 32);
    let n = resized.len() as f64;
    let mean = resized.iter().sum::<f64>() / n;
    let var = resized.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_EPS {
        return vec![0.0; resized.len()];
    }
    resized.iter().map(|v| (v - mean) / std).collect()
}

/// Magnitude-weighted gradient-orientation histograms on a 16x16 cell grid.
fn gradhist_descriptor(image: &GrayImage) -> Vec<f64> {
    const CELLS: usize = 16;
    const BINS: usize = 8;
    let mut hist = vec![0.0f64; CELLS * CELLS * BINS];
    let (w, h) = (image.width, image.height);
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let gx = f64::from(image.get(u + 1, v)) - f64::from(image.get(u - 1, v));
            let gy = f64::from(image.get(u, v + 1)) - f64::from(image.get(u, v - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx); // [-pi, pi]
            let frac = (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
            let bin = ((frac * BINS as f64) as usize).min(BINS - 1);
            let cu = (u * CELLS / w).min(CELLS - 1);
            let cv = (v * CELLS / h).min(CELLS - 1);
            hist[(cv * CELLS + cu) * BINS + bin] += mag;
        }
    }
    hist
}

fn bilinear_resize(image: &GrayImage, ow: usize, oh: usize) -> Vec<f64> {
    let sx = image.width as f64 / ow as f64;
    let sy = image.height as f64 / oh as f64;
    let mut out = Vec::with_capacity(ow * oh);
    for j in 0..oh {
        // center-aligned source coordinate, clamped to the pixel grid
        let y = ((j as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let b = y - y0 as f64;
        for i in 0..ow {
            let x = ((i as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let a = x - x0 as f64;
            let p00 = f64::from(image.get(x0, y0));
            let p01 = f64::from(image.get(x1, y0));
            let p10 = f64::from(image.get(x0, y1));
            let p11 = f64::from(image.get(x1, y1));
            out.push((1.0 - b) * ((1.0 - a) * p00 + a * p01) + b * ((1.0 - a) * p10 + a * p11));
        }
    }
    out
}

fn l2_normalize(raw: Vec<f64>) -> Vec<f32> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < STD_EPS {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v / norm) as f32).collect()
}

/// One database entry: descriptor plus the image's timed camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub image_id: u32,
    pub descriptor: GlobalDescriptor,
    pub timed_pose: TimedPose,
}

/// Immutable retrieval database; image ids are dense in [0, M).
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDatabase {
    pub entries: Vec<DbEntry>,
    pub kind: DescriptorKind,
}

impl RetrievalDatabase {
    /// Builds the database from images paired with their timed poses.
    /// Image ids are assigned densely in input order.
    pub fn build(
        images: &[GrayImage],
        poses: &[TimedPose],
        kind: DescriptorKind,
    ) -> Result<Self, RetrievalError> {
        assert_eq!(images.len(), poses.len(), "one pose per image required");
        if images.is_empty() {
            return Err(RetrievalError::EmptyDatabase);
        }
        let descriptors: Vec<Result<GlobalDescriptor, RetrievalError>> =
            crate::parallel::map_slice(images, |img| compute_descriptor(img, kind));
        let mut entries = Vec::with_capacity(images.len());
        for (i, (descriptor, pose)) in descriptors.into_iter().zip(poses).enumerate() {
            entries.push(DbEntry {
                image_id: i as u32,
                descriptor: descriptor?,
                timed_pose: *pose,
            });
        }
        Ok(Self { entries, kind })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binary database file: magic, u32 version, u32 M, u32 D, u8 kind,
    /// then per entry { u32 id, D * f32, f64 timestamp, 7 * f64 pose }.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let dim = self.kind.dimension();
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(DB_MAGIC)?;
        w.write_u32::<LittleEndian>(DB_VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        w.write_u32::<LittleEndian>(dim as u32)?;
        w.write_u8(self.kind.tag())?;
        for e in &self.entries {
            debug_assert_eq!(e.descriptor.values.len(), dim);
            w.write_u32::<LittleEndian>(e.image_id)?;
            for &v in &e.descriptor.values {
                w.write_f32::<LittleEndian>(v)?;
            }
            w.write_f64::<LittleEndian>(e.timed_pose.timestamp)?;
            let t = e.timed_pose.pose.translation;
            let q = e.timed_pose.pose.rotation.quaternion();
            for v in [t.x, t.y, t.z, q.i, q.j, q.k, q.w] {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != DB_MAGIC {
            return Err(RetrievalError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DB_VERSION {
            return Err(RetrievalError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let m = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let kind = DescriptorKind::from_tag(r.read_u8()?)?;
        if dim != kind.dimension() {
            return Err(RetrievalError::Corrupt(format!(
                "dimension {dim} does not match descriptor kind"
            )));
        }
        let mut entries = Vec::with_capacity(m);
        for i in 0..m {
            let image_id = r.read_u32::<LittleEndian>()?;
            if image_id as usize != i {
                return Err(RetrievalError::Corrupt(format!(
                    "image ids not dense: expected {i}, got {image_id}"
                )));
            }
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(r.read_f32::<LittleEndian>()?);
            }
            let timestamp = r.read_f64::<LittleEndian>()?;
            let mut p = [0.0f64; 7];
            for v in &mut p {
                *v = r.read_f64::<LittleEndian>()?;
            }
            entries.push(DbEntry {
                image_id,
                descriptor: GlobalDescriptor { values },
                timed_pose: TimedPose {
                    timestamp,
                    pose: crate::geometry::Pose::from_parts(
                        p[0], p[1], p[2], p[3], p[4], p[5], p[6],
                    ),
                },
            });
        }
        Ok(Self { entries, kind })
    }
}

/// Exact top-k by descending cosine similarity, ties broken by ascending
/// image id. Returns min(k, M) results.
pub fn query_top_k(
    db: &RetrievalDatabase,
    query: &GlobalDescriptor,
    k: usize,
) -> Result<Vec<(u32, f64)>, RetrievalError> {
    assert!(k >= 1, "k must be at least 1");
    if db.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    let mut scored: Vec<(u32, f64)> = db
        .entries
        .iter()
        .map(|e| (e.image_id, e.descriptor.similarity(query)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("similarities are finite")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored)
}
