//! Local binary patterns.
//!
//! Each pixel is compared against P neighbours; neighbour `p` contributes
//! bit `p` when it is at least as bright as the centre. Neighbours are
//! enumerated clockwise starting from the top-left one. Pixels outside the
//! image are read by edge replication, so an [`LbpImage`] always has the
//! dimensions of its source.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::GrayImage;
use crate::error::{Error, Result};

/// Clockwise from top-left, as `(dx, dy)` with y pointing down.
const SQUARE_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

pub const MAX_NEIGHBORS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbpImage {
    width: usize,
    height: usize,
    neighbors: usize,
    codes: Vec<u32>,
}

impl LbpImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of bits per code.
    pub fn neighbors(&self) -> usize {
        self.neighbors
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.codes[y * self.width + x]
    }

    fn map_codes(mut self, f: impl Fn(u32) -> u32) -> Self {
        for c in &mut self.codes {
            *c = f(*c);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fixed 3x3 square neighbourhood.
    Basic,
    /// P samples on a circle of radius R.
    Circular,
}

/// How circular neighbours falling between pixels are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbpConfig {
    pub variant: Variant,
    pub neighbors: usize,
    pub radius: f64,
    pub rotation_invariant: bool,
    pub cell_size: usize,
    pub sampling: Sampling,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Basic,
            neighbors: 8,
            radius: 1.0,
            rotation_invariant: false,
            cell_size: 16,
            sampling: Sampling::Bilinear,
        }
    }
}

impl LbpConfig {
    pub fn circular(neighbors: usize, radius: f64) -> Self {
        Self {
            variant: Variant::Circular,
            neighbors,
            radius,
            ..Self::default()
        }
    }

    /// Bits per code of the images this configuration produces.
    pub fn code_bits(&self) -> usize {
        match self.variant {
            Variant::Basic => 8,
            Variant::Circular => self.neighbors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=MAX_NEIGHBORS).contains(&self.neighbors) {
            return Err(Error::invalid(format!(
                "LBP neighbour count {} outside [4, {MAX_NEIGHBORS}]",
                self.neighbors
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid(format!("LBP radius {} must be positive", self.radius)));
        }
        if self.cell_size == 0 {
            return Err(Error::invalid("LBP cell size must be positive"));
        }
        Ok(())
    }
}

/// Code of the centre pixel of a 3x3 window given as rows.
pub fn lbp_code_3x3(window: &[[u8; 3]; 3]) -> u8 {
    let center = window[1][1];
    SQUARE_OFFSETS
        .iter()
        .enumerate()
        .fold(0u8, |code, (p, &(dx, dy))| {
            let g = window[(1 + dy) as usize][(1 + dx) as usize];
            code | (((g >= center) as u8) << p)
        })
}

/// 3x3 LBP of every pixel.
pub fn lbp_basic(img: &GrayImage) -> Result<LbpImage> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::invalid(format!("LBP needs at least a 3x3 image, got {w}x{h}")));
    }
    let mut codes = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut window = [[0u8; 3]; 3];
            for (wy, row) in window.iter_mut().enumerate() {
                for (wx, v) in row.iter_mut().enumerate() {
                    *v = img.get_clamped(x + wx as isize - 1, y + wy as isize - 1);
                }
            }
            codes.push(lbp_code_3x3(&window) as u32);
        }
    }
    Ok(LbpImage {
        width: w,
        height: h,
        neighbors: 8,
        codes,
    })
}

/// Offset of circular neighbour `p`, clockwise from the top-left direction.
/// Components within 1e-9 of an integer are snapped so axis-aligned samples
/// land exactly on pixels.
pub fn circular_offset(p: usize, neighbors: usize, radius: f64) -> (f64, f64) {
    let theta = 0.75 * PI - 2.0 * PI * p as f64 / neighbors as f64;
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    (snap(radius * theta.cos()), snap(-radius * theta.sin()))
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let v00 = img.get_clamped(xi, yi) as f64;
    let v10 = img.get_clamped(xi + 1, yi) as f64;
    let v01 = img.get_clamped(xi, yi + 1) as f64;
    let v11 = img.get_clamped(xi + 1, yi + 1) as f64;
    // Written as corrections to v00 so a flat neighbourhood returns v00 exactly.
    v00 + fx * (v10 - v00) + fy * (v01 - v00) + fx * fy * (v00 - v10 - v01 + v11)
}

/// LBP with `cfg.neighbors` samples on a circle of radius `cfg.radius`.
pub fn lbp_circular(img: &GrayImage, cfg: &LbpConfig) -> Result<LbpImage> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    if cfg.radius >= w.min(h) as f64 / 2.0 {
        return Err(Error::invalid(format!(
            "LBP radius {} too large for a {w}x{h} image",
            cfg.radius
        )));
    }
    let offsets: Vec<(f64, f64)> = (0..cfg.neighbors)
        .map(|p| circular_offset(p, cfg.neighbors, cfg.radius))
        .collect();
    let mut codes = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let center = img.get(x, y) as f64;
            let mut code = 0u32;
            for (p, &(dx, dy)) in offsets.iter().enumerate() {
                let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                let g = match cfg.sampling {
                    Sampling::Bilinear => bilinear(img, sx, sy),
                    Sampling::Nearest => {
                        img.get_clamped(sx.round() as isize, sy.round() as isize) as f64
                    }
                };
                if g >= center {
                    code |= 1 << p;
                }
            }
            codes.push(code);
        }
    }
    Ok(LbpImage {
        width: w,
        height: h,
        neighbors: cfg.neighbors,
        codes,
    })
}

/// Smallest value among the `bits` cyclic rotations of `code`.
pub fn rotation_invariant_code(code: u32, bits: usize) -> u32 {
    debug_assert!((1..=32).contains(&bits));
    let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
    let code = code & mask;
    (0..bits)
        .map(|k| {
            if k == 0 {
                code
            } else {
                ((code >> k) | (code << (bits - k))) & mask
            }
        })
        .min()
        .unwrap_or(code)
}

/// Runs the configured variant, then the rotation-invariant mapping if enabled.
pub fn lbp_transform(img: &GrayImage, cfg: &LbpConfig) -> Result<LbpImage> {
    cfg.validate()?;
    let out = match cfg.variant {
        Variant::Basic => lbp_basic(img)?,
        Variant::Circular => lbp_circular(img, cfg)?,
    };
    if cfg.rotation_invariant {
        let bits = out.neighbors;
        Ok(out.map_codes(|c| rotation_invariant_code(c, bits)))
    } else {
        Ok(out)
    }
}

/// Concatenated per-cell code histograms.
///
/// Cells are `cell_size` squares in row-major order; edge cells may be
/// partial. Each histogram has `2^P` bins and sums to one.
pub fn lbp_histogram_features(lbp: &LbpImage, cfg: &LbpConfig) -> Result<Vec<f64>> {
    if cfg.cell_size == 0 {
        return Err(Error::invalid("LBP cell size must be positive"));
    }
    let bins = 1usize << lbp.neighbors;
    let cs = cfg.cell_size;
    let cells_x = lbp.width.div_ceil(cs);
    let cells_y = lbp.height.div_ceil(cs);
    let mut out = vec![0.0; cells_x * cells_y * bins];
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let hist = &mut out[(cy * cells_x + cx) * bins..][..bins];
            let ys = cy * cs..((cy + 1) * cs).min(lbp.height);
            let xs = cx * cs..((cx + 1) * cs).min(lbp.width);
            let count = (ys.len() * xs.len()) as f64;
            for y in ys {
                for x in xs.clone() {
                    let code = lbp.get(x, y) as usize;
                    if code >= bins {
                        return Err(Error::invalid(format!(
                            "LBP code {code} does not fit in {} bits",
                            lbp.neighbors
                        )));
                    }
                    hist[code] += 1.0;
                }
            }
            hist.iter_mut().for_each(|v| *v /= count);
        }
    }
    Ok(out)
}
