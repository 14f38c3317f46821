//! Synthetic face table with the same shape as the Kaggle training data.
//!
//! Faces are drawn as a bright oval with dark blobs at the eyes, nose and
//! mouth, so pixel intensities carry real information about the keypoint
//! positions. The first `n_full` rows carry all fifteen keypoints; the rest
//! only the four near-complete ones, like the real file.

use crate::dataset::{Dataset, GrayImage, Keypoint, KeypointSet, Point, Sample};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_full: usize,
    pub n_partial: usize,
    pub side: usize,
    pub seed: u64,
    /// Probability that a keypoint of a full row is dropped anyway.
    pub missing_rate: f64,
    /// Standard deviation of per-pixel noise, in intensity units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_full: 60,
            n_partial: 140,
            side: 96,
            seed: 17,
            missing_rate: 0.02,
            noise: 6.0,
        }
    }
}

pub const PARTIAL_SLOTS: [Keypoint; 4] = [
    Keypoint::LeftEyeCenter,
    Keypoint::RightEyeCenter,
    Keypoint::NoseTip,
    Keypoint::MouthCenterBottomLip,
];

// Mean layout on a 96-pixel face, (x, y). Left is the subject's left, so it
// sits on the right of the image.
fn base_layout(k: Keypoint) -> (f64, f64) {
    match k {
        Keypoint::LeftEyeCenter => (66.0, 38.0),
        Keypoint::RightEyeCenter => (30.0, 38.0),
        Keypoint::LeftEyeInnerCorner => (59.0, 39.0),
        Keypoint::LeftEyeOuterCorner => (73.0, 39.0),
        Keypoint::RightEyeInnerCorner => (37.0, 39.0),
        Keypoint::RightEyeOuterCorner => (23.0, 39.0),
        Keypoint::LeftEyebrowInnerEnd => (57.0, 29.0),
        Keypoint::LeftEyebrowOuterEnd => (79.0, 30.0),
        Keypoint::RightEyebrowInnerEnd => (39.0, 29.0),
        Keypoint::RightEyebrowOuterEnd => (17.0, 30.0),
        Keypoint::NoseTip => (48.0, 62.0),
        Keypoint::MouthLeftCorner => (63.0, 76.0),
        Keypoint::MouthRightCorner => (33.0, 76.0),
        Keypoint::MouthCenterTopLip => (48.0, 72.0),
        Keypoint::MouthCenterBottomLip => (48.0, 82.0),
    }
}

fn gaussian(rng: &mut SplitMix64) -> f64 {
    // Box-Muller; u1 kept away from zero.
    let u1 = rng.next_f64().max(1e-12);
    let u2 = rng.next_f64();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One face: keypoints for all fifteen slots and the rendered image.
fn face(rng: &mut SplitMix64, side: usize, noise: f64) -> (GrayImage, KeypointSet) {
    let s = side as f64 / 96.0;
    let dx = rng.uniform(-6.0, 6.0);
    let dy = rng.uniform(-5.0, 5.0);
    let zoom = rng.uniform(0.9, 1.1);
    let brightness = rng.uniform(-30.0, 30.0);

    let mut kp = KeypointSet::empty();
    for k in Keypoint::ALL {
        let (bx, by) = base_layout(k);
        let x = (48.0 + (bx - 48.0) * zoom + dx + rng.uniform(-1.0, 1.0)) * s;
        let y = (48.0 + (by - 48.0) * zoom + dy + rng.uniform(-1.0, 1.0)) * s;
        let clamp = |v: f64| v.clamp(0.0, side as f64 - 1e-3);
        kp.set(k, Some(Point::new(clamp(x), clamp(y))));
    }

    let blobs: Vec<(Point, f64, f64)> = [
        (Keypoint::LeftEyeCenter, 4.0, 110.0),
        (Keypoint::RightEyeCenter, 4.0, 110.0),
        (Keypoint::NoseTip, 3.5, 60.0),
        (Keypoint::MouthCenterTopLip, 3.0, 70.0),
        (Keypoint::MouthCenterBottomLip, 3.5, 80.0),
        (Keypoint::MouthLeftCorner, 2.5, 60.0),
        (Keypoint::MouthRightCorner, 2.5, 60.0),
        (Keypoint::LeftEyebrowInnerEnd, 2.5, 50.0),
        (Keypoint::RightEyebrowInnerEnd, 2.5, 50.0),
        (Keypoint::LeftEyebrowOuterEnd, 2.5, 50.0),
        (Keypoint::RightEyebrowOuterEnd, 2.5, 50.0),
    ]
    .iter()
    .map(|&(k, r, depth)| (kp.get(k).unwrap(), r * s * zoom, depth))
    .collect();

    let cx = (48.0 + dx) * s;
    let cy = (52.0 + dy) * s;
    let (rx, ry) = (34.0 * s * zoom, 44.0 * s * zoom);
    let img = GrayImage::from_fn(side, side, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let e = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
        let mut v = if e <= 1.0 { 170.0 } else { 60.0 } + brightness;
        for (p, r, depth) in &blobs {
            let d2 = (fx - p.x).powi(2) + (fy - p.y).powi(2);
            v -= depth * (-d2 / (2.0 * r * r)).exp();
        }
        v += noise * gaussian(rng);
        v.round().clamp(0.0, 255.0) as u8
    });
    (img, kp)
}

/// Generates the table described in the module docs.
pub fn synthetic_faces(cfg: &SynthConfig) -> Dataset {
    let mut rng = SplitMix64::new(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_full + cfg.n_partial);
    for i in 0..cfg.n_full + cfg.n_partial {
        let (image, full) = face(&mut rng, cfg.side, cfg.noise);
        let keypoints = if i < cfg.n_full {
            let mut kp = full;
            for k in Keypoint::ALL {
                if rng.next_f64() < cfg.missing_rate {
                    kp.set(k, None);
                }
            }
            kp
        } else {
            full.restricted_to(&PARTIAL_SLOTS)
        };
        samples.push(Sample { image, keypoints });
    }
    Dataset::new(samples, Keypoint::ALL.to_vec()).expect("uniform synthetic images")
}
