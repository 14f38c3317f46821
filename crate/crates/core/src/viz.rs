//! Diagnostic rasters written as binary PPM (P6) or PGM (P5).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{Dataset, GrayImage, Keypoint, KeypointSet, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::lbp::LbpImage;

pub type Rgb = [u8; 3];

pub const EYE_COLOR: Rgb = [255, 0, 0];
pub const FACE_COLOR: Rgb = [0, 0, 255];
pub const DOT_COLOR: Rgb = [0, 0, 0];
const WHITE: Rgb = [255, 255, 255];

/// RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!("{} RGB bytes", 3 * width * height), data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            data: color.iter().copied().cycle().take(3 * width * height).collect(),
        }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().iter().flat_map(|&p| [p, p, p]).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Sets the pixel when `(x, y)` lies inside the raster.
    pub fn set_clipped(&mut self, x: isize, y: isize, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.set(x as usize, y as usize, c);
        }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        save_with(path.as_ref(), |w| self.write_ppm(w))
    }
}

fn save_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_pgm<W: Write>(img: &GrayImage, mut w: W) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width(), img.height())?;
    w.write_all(img.pixels())
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    save_with(path.as_ref(), |w| write_pgm(img, w))
}

/// A decoded netpbm file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Gray(GrayImage),
    Rgb(Raster),
}

/// Reads binary P5/P6 files with maxval 255, including `#` comments in the
/// header.
pub fn read_netpbm<R: Read>(mut r: R) -> Result<Decoded> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<netpbm input>", e))?;
    let bad = |m: &str| Error::Format(format!("netpbm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    match magic.as_str() {
        "P5" => {
            let n = width * height;
            if body.len() < n {
                return Err(bad("truncated raster"));
            }
            Ok(Decoded::Gray(GrayImage::new(width, height, body[..n].to_vec())?))
        }
        "P6" => {
            let n = 3 * width * height;
            if body.len() < n {
                return Err(bad("truncated raster"));
            }
            Ok(Decoded::Rgb(Raster::new(width, height, body[..n].to_vec())?))
        }
        _ => Err(bad("unsupported magic")),
    }
}

pub fn load_netpbm(path: impl AsRef<Path>) -> Result<Decoded> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_netpbm(std::io::BufReader::new(file))
}

pub fn marker_color(kp: Keypoint) -> Rgb {
    if kp.is_eye_region() {
        EYE_COLOR
    } else {
        FACE_COLOR
    }
}

/// The face in gray with a 3x3 marker centred on each present keypoint.
pub fn keypoint_overlay(img: &GrayImage, kp: &KeypointSet) -> Raster {
    let mut r = Raster::from_gray(img);
    for (k, p) in kp.present() {
        let (cx, cy) = (p.x.round() as isize, p.y.round() as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                r.set_clipped(cx + dx, cy + dy, marker_color(k));
            }
        }
    }
    r
}

pub fn render_keypoints(img: &GrayImage, kp: &KeypointSet, out: impl AsRef<Path>) -> Result<()> {
    keypoint_overlay(img, kp).save_ppm(out)
}

/// White canvas with a dark dot at every present position of `slot`.
pub fn keypoint_scatter(d: &Dataset, slot: Keypoint) -> Raster {
    let side = d.image_size().map_or(IMAGE_SIDE, |(w, _)| w);
    let mut r = Raster::filled(side, side, WHITE);
    for s in d.samples() {
        if let Some(p) = s.keypoints.get(slot) {
            r.set_clipped(p.x.round() as isize, p.y.round() as isize, DOT_COLOR);
        }
    }
    r
}

pub fn scatter_keypoint_distribution(d: &Dataset, slot: &str, out: impl AsRef<Path>) -> Result<()> {
    let kp = Keypoint::from_name(slot).ok_or_else(|| Error::invalid(format!("unknown keypoint `{slot}`")))?;
    keypoint_scatter(d, kp).save_ppm(out)
}

/// Codes as gray levels; codes wider than 8 bits are min-max scaled.
pub fn lbp_to_gray(lbp: &LbpImage) -> GrayImage {
    let codes = lbp.codes();
    let pixels = if lbp.neighbors() <= 8 {
        codes.iter().map(|&c| c.min(255) as u8).collect()
    } else {
        let lo = codes.iter().copied().min().unwrap_or(0) as f64;
        let hi = codes.iter().copied().max().unwrap_or(0) as f64;
        codes
            .iter()
            .map(|&c| {
                if hi > lo {
                    ((c as f64 - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    };
    GrayImage::new(lbp.width(), lbp.height(), pixels).expect("dimensions carried over")
}

pub fn render_lbp(lbp: &LbpImage, out: impl AsRef<Path>) -> Result<()> {
    save_pgm(&lbp_to_gray(lbp), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::lbp::{lbp_transform, LbpConfig};

    fn face() -> GrayImage {
        GrayImage::from_fn(8, 8, |x, y| (x * 30 + y) as u8)
    }

    #[test]
    fn empty_set_leaves_image_plain() {
        let img = face();
        assert_eq!(keypoint_overlay(&img, &KeypointSet::empty()), Raster::from_gray(&img));
    }

    #[test]
    fn marker_centre_and_corner_clip() {
        let img = face();
        let kp = KeypointSet::empty()
            .with(Keypoint::LeftEyeCenter, 4.4, 2.6)
            .with(Keypoint::NoseTip, 0.0, 0.0);
        let r = keypoint_overlay(&img, &kp);
        assert_eq!(r.get(4, 3), EYE_COLOR);
        assert_eq!(r.get(3, 2), EYE_COLOR);
        assert_eq!(r.get(0, 0), FACE_COLOR);
        assert_eq!(r.get(1, 1), FACE_COLOR);
        assert_eq!(r.get(2, 2), [img.get(2, 2); 3]);
    }

    #[test]
    fn scatter_census() {
        let img = GrayImage::filled(96, 96, 10);
        let positions = [(48.0, 48.0), (48.2, 47.9), (10.0, 90.0), (95.0, 0.0)];
        let samples: Vec<Sample> = positions
            .iter()
            .map(|&(x, y)| Sample {
                image: img.clone(),
                keypoints: KeypointSet::empty().with(Keypoint::NoseTip, x, y),
            })
            .chain(std::iter::once(Sample {
                image: img.clone(),
                keypoints: KeypointSet::empty(),
            }))
            .collect();
        let d = Dataset::new(samples, Keypoint::ALL.to_vec()).unwrap();
        let r = keypoint_scatter(&d, Keypoint::NoseTip);
        let dark = (0..96)
            .flat_map(|y| (0..96).map(move |x| (x, y)))
            .filter(|&(x, y)| r.get(x, y) != WHITE)
            .count();
        assert_eq!(dark, 3);
        assert_eq!(r.get(48, 48), DOT_COLOR);
        let blank = keypoint_scatter(&d, Keypoint::MouthCenterTopLip);
        assert_eq!(blank, Raster::filled(96, 96, WHITE));
    }

    #[test]
    fn lbp_gray_levels() {
        let flat = lbp_transform(&GrayImage::filled(6, 6, 77), &LbpConfig::default()).unwrap();
        assert!(lbp_to_gray(&flat).pixels().iter().all(|&p| p == 255));
        let mut cfg = LbpConfig::circular(12, 1.5);
        cfg.cell_size = 4;
        let img = GrayImage::from_fn(10, 10, |x, y| ((x * 7 + y * 13) % 50) as u8);
        let lbp = lbp_transform(&img, &cfg).unwrap();
        let g = lbp_to_gray(&lbp);
        let (lo, hi) = (
            *lbp.codes().iter().min().unwrap(),
            *lbp.codes().iter().max().unwrap(),
        );
        for (c, p) in lbp.codes().iter().zip(g.pixels()) {
            let expect = ((*c - lo) as f64 / (hi - lo) as f64 * 255.0).round() as u8;
            assert_eq!(*p, expect);
        }
        assert!(g.pixels().contains(&255));
    }

    #[test]
    fn netpbm_round_trips() {
        let img = face();
        let mut buf = Vec::new();
        write_pgm(&img, &mut buf).unwrap();
        assert_eq!(read_netpbm(buf.as_slice()).unwrap(), Decoded::Gray(img.clone()));
        let r = keypoint_overlay(&img, &KeypointSet::empty().with(Keypoint::NoseTip, 3.0, 3.0));
        let mut buf = Vec::new();
        r.write_ppm(&mut buf).unwrap();
        assert_eq!(read_netpbm(buf.as_slice()).unwrap(), Decoded::Rgb(r));
        let commented = b"P5\n# note\n2 1\n255\n\x01\x02";
        match read_netpbm(&commented[..]).unwrap() {
            Decoded::Gray(g) => assert_eq!(g.pixels(), &[1, 2]),
            other => panic!("{other:?}"),
        }
        assert!(read_netpbm(&b"P3\n1 1\n255\n0 0 0"[..]).is_err());
    }

    #[test]
    fn files_are_byte_identical_across_calls() {
        let dir = tempfile::tempdir().unwrap();
        let img = face();
        let kp = KeypointSet::empty().with(Keypoint::MouthCenterBottomLip, 5.0, 6.0);
        let a = dir.path().join("a.ppm");
        let b = dir.path().join("b.ppm");
        render_keypoints(&img, &kp, &a).unwrap();
        render_keypoints(&img, &kp, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let err = render_keypoints(&img, &kp, dir.path().join("missing/dir/x.ppm")).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
