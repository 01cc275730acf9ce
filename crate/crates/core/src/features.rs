//! Multi-scale dense feature pyramids with sub-pixel sampling and spatial
//! gradients, plus the 8-bit grayscale image type and PGM (P5) I/O the rest
//! of the crate consumes.
//!
//! A pyramid level carries three standardized channels: intensity,
//! x-gradient and y-gradient. Coarser levels are built by Gaussian blur of
//! the finer intensity plane followed by 2x decimation, so level pixel `i`
//! sits at full-resolution coordinate `scale * i`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3x2, Vector2, Vector3};
use thiserror::Error;

/// Channels per pyramid level: standardized intensity, x-gradient,
/// y-gradient.
pub const CHANNELS: usize = 3;

/// Standard deviations below this carry no signal; the standardized plane
/// is zeroed instead of amplifying rounding noise.
const STD_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} too small, need at least {min}x{min}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    /// The sampling point fell outside the 1-px interior margin. Signals
    /// that the point must be dropped from the residual set.
    #[error("sample point ({u:.3}, {v:.3}) outside interior of {width}x{height} level")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("bad PGM: {0}")]
    BadFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.pixels[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: u8) {
        self.pixels[v * self.width + u] = value;
    }

    /// Reads a binary (P5) 8-bit PGM.
    pub fn load_pgm(path: &Path) -> Result<Self, FeatureError> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut header = Vec::new();
        // magic, width, height, maxval; '#' comments allowed between tokens
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = Vec::new();
            let n = reader.read_until(b'\n', &mut line)?;
            if n == 0 {
                return Err(FeatureError::BadFormat("truncated header".into()));
            }
            header.extend_from_slice(&line);
            let text = String::from_utf8_lossy(&line);
            let text = text.split('#').next().unwrap_or("");
            tokens.extend(text.split_whitespace().map(|s| s.to_string()));
        }
        if tokens[0] != "P5" {
            return Err(FeatureError::BadFormat(format!(
                "expected P5 magic, got {:?}",
                tokens[0]
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| FeatureError::BadFormat(format!("bad header token {s:?}")))
        };
        let width = parse(&tokens[1])?;
        let height = parse(&tokens[2])?;
        let maxval = parse(&tokens[3])?;
        if maxval != 255 {
            return Err(FeatureError::BadFormat(format!(
                "only maxval 255 supported, got {maxval}"
            )));
        }
        let mut pixels = vec![0u8; width * height];
        reader.read_exact(&mut pixels)?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Writes a binary (P5) 8-bit PGM.
    pub fn save_pgm(&self, path: &Path) -> Result<(), FeatureError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(file, "P5\n{} {}\n255\n", self.width, self.height)?;
        file.write_all(&self.pixels)?;
        Ok(())
    }
}

/// One pyramid level; `scale` is the power-of-two divisor relative to the
/// original image.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub scale: u32,
    pub width: usize,
    pub height: usize,
    channels: [Vec<f64>; CHANNELS],
}

impl PyramidLevel {
    #[inline]
    fn at(&self, c: usize, u: usize, v: usize) -> f64 {
        self.channels[c][v * self.width + u]
    }

    /// Raw channel plane, row-major.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    /// Bilinear sample of all channels at `uv`, with the analytic spatial
    /// gradient of the bilinear surface. Requires the point to lie inside
    /// the 1-px interior margin `[1, w-2] x [1, h-2]`.
    pub fn sample(&self, uv: &Vector2<f64>) -> Result<(Vector3<f64>, Matrix3x2<f64>), FeatureError> {
        let (u, v) = (uv.x, uv.y);
        if !(u >= 1.0
            && u <= (self.width - 2) as f64
            && v >= 1.0
            && v <= (self.height - 2) as f64)
        {
            return Err(FeatureError::OutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let u0 = u.floor();
        let v0 = v.floor();
        let a = u - u0;
        let b = v - v0;
        let (iu, iv) = (u0 as usize, v0 as usize);
        let mut f = Vector3::zeros();
        let mut g = Matrix3x2::zeros();
        for c in 0..CHANNELS {
            let f00 = self.at(c, iu, iv);
            let f01 = self.at(c, iu + 1, iv);
            let f10 = self.at(c, iu, iv + 1);
            let f11 = self.at(c, iu + 1, iv + 1);
            f[c] = (1.0 - b) * ((1.0 - a) * f00 + a * f01) + b * ((1.0 - a) * f10 + a * f11);
            g[(c, 0)] = (1.0 - b) * (f01 - f00) + b * (f11 - f10);
            g[(c, 1)] = (1.0 - a) * (f10 - f00) + a * (f11 - f01);
        }
        Ok((f, g))
    }
}

/// Dense feature pyramid, levels ordered coarse to fine.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Finest (full-resolution) level.
    pub fn finest(&self) -> &PyramidLevel {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Pyramid construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PyramidParams {
    pub levels: usize,
    pub sigma: f64,
}

impl Default for PyramidParams {
    fn default() -> Self {
        Self {
            levels: 5,
            sigma: 1.0,
        }
    }
}

/// Builds an `levels`-deep pyramid. Each coarser intensity plane is the
/// Gaussian blur (sigma, truncated at 3 sigma, reflected borders) of the
/// finer one decimated 2x; gradients are central differences with one-sided
/// edges; every channel is standardized to zero mean, unit deviation.
pub fn build_pyramid(
    image: &GrayImage,
    levels: usize,
    sigma: f64,
) -> Result<FeaturePyramid, FeatureError> {
    assert!(levels >= 1, "need at least one pyramid level");
    let min = 1usize << (levels - 1);
    if image.width < min || image.height < min {
        return Err(FeatureError::ImageTooSmall {
            width: image.width,
            height: image.height,
            min,
        });
    }

    let mut planes: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(levels);
    let full: Vec<f64> = image.pixels.iter().map(|&p| f64::from(p)).collect();
    planes.push((image.width, image.height, full));
    for _ in 1..levels {
        let (w, h, plane) = planes.last().unwrap();
        let blurred = gaussian_blur(plane, *w, *h, sigma);
        planes.push(decimate2(&blurred, *w, *h));
    }

    // planes[0] is finest; emit coarse -> fine
    let mut out = Vec::with_capacity(levels);
    for (idx, (w, h, plane)) in planes.iter().enumerate().rev() {
        let (gx, gy) = gradients(plane, *w, *h);
        out.push(PyramidLevel {
            scale: 1 << idx,
            width: *w,
            height: *h,
            channels: [standardize(plane), standardize(&gx), standardize(&gy)],
        });
    }
    Ok(FeaturePyramid { levels: out })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mirror index with reflect-101 borders (-1 -> 1, n -> n-2).
#[inline]
fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    // n == 1 degenerates to the single pixel
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian_blur(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    // horizontal pass
    for v in 0..h {
        let row = &plane[v * w..(v + 1) * w];
        for u in 0..w {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let src = reflect(u as i64 + ki as i64 - radius, w as i64);
                acc += kw * row[src];
            }
            tmp[v * w + u] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for (ki, &kw) in kernel.iter().enumerate() {
                let src = reflect(v as i64 + ki as i64 - radius, h as i64);
                acc += kw * tmp[src * w + u];
            }
            out[v * w + u] = acc;
        }
    }
    out
}

fn decimate2(plane: &[f64], w: usize, h: usize) -> (usize, usize, Vec<f64>) {
    let ow = (w + 1) / 2;
    let oh = (h + 1) / 2;
    let mut out = Vec::with_capacity(ow * oh);
    for v in 0..oh {
        for u in 0..ow {
            out.push(plane[(2 * v) * w + 2 * u]);
        }
    }
    (ow, oh, out)
}

/// Central differences in the interior, one-sided full-step differences at
/// the edges, so a linear ramp has an exactly constant gradient.
fn gradients(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            gx[i] = if w == 1 {
                0.0
            } else if u == 0 {
                plane[i + 1] - plane[i]
            } else if u == w - 1 {
                plane[i] - plane[i - 1]
            } else {
                0.5 * (plane[i + 1] - plane[i - 1])
            };
            gy[i] = if h == 1 {
                0.0
            } else if v == 0 {
                plane[i + w] - plane[i]
            } else if v == h - 1 {
                plane[i] - plane[i - w]
            } else {
                0.5 * (plane[i + w] - plane[i - w])
            };
        }
    }
    (gx, gy)
}

/// Zero-mean unit-deviation standardization. Planes with deviation below
/// the epsilon guard are exactly zeroed.
fn standardize(plane: &[f64]) -> Vec<f64> {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_EPS {
        vec![0.0; plane.len()]
    } else {
        plane.iter().map(|v| (v - mean) / std).collect()
    }
}
