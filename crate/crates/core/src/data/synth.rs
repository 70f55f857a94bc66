use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`; `lo == hi` collapses it to a point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        // always draw so the stream layout does not depend on the interval
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::config(format!("{what} interval [{}, {}] is invalid", self.lo, self.hi)));
        }
        Ok(())
    }

    fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.lo, self.hi)
    }
}

impl std::str::FromStr for Interval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("interval `{s}` is not `lo:hi`"));
        let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
        Ok(Interval {
            lo: lo.trim().parse().map_err(|_| bad())?,
            hi: hi.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// Which rotation range a generated set draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "test" => Ok(Phase::Test),
            other => Err(Error::config(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// `(C, H, W)`; `C = 3` renders three nested center crops as channels.
    pub image_size: (usize, usize, usize),
    pub positive_ratio: f64,
    /// Chamber rotation in degrees.
    pub rotation_range_train: Interval,
    pub rotation_range_test: Interval,
    /// Maximum chamber offset in pixels along each axis.
    pub translation_range: f64,
    /// Full minor-axis length in pixels for normal samples.
    pub width_normal: Interval,
    /// Full minor-axis length in pixels for dilated (positive) samples.
    pub width_dilated: Interval,
    /// Full major-axis length in pixels.
    pub chamber_length: Interval,
    pub allow_width_overlap: bool,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 1000,
            image_size: (1, 32, 32),
            positive_ratio: 0.2,
            rotation_range_train: Interval::new(-15.0, 15.0),
            rotation_range_test: Interval::new(-45.0, 45.0),
            translation_range: 2.0,
            width_normal: Interval::new(6.0, 9.0),
            width_dilated: Interval::new(10.0, 13.0),
            chamber_length: Interval::new(14.0, 18.0),
            allow_width_overlap: false,
            noise_sigma: 0.1,
            seed: 10,
        }
    }
}

const TISSUE: f64 = 0.35;
const CHAMBER: f64 = 0.9;
const CONE_HALF_ANGLE_DEG: f64 = 40.0;
/// Chamber centre as a fraction of image height, measured from the cone apex.
const CENTER_DEPTH: f64 = 0.55;
/// Stream offset separating test-phase samples from train-phase samples.
const TEST_STREAM_BASE: u64 = 1 << 40;
const LABEL_STREAM: u64 = u64::MAX;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_size;
        if !(c == 1 || c == 3) || h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::config(format!(
                "image size {:?} must have 1 or 3 channels and positive extents",
                self.image_size
            )));
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio < 1.0) {
            return Err(Error::config("positive_ratio must lie in (0, 1)"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        self.rotation_range_train.validate("rotation_range_train")?;
        self.rotation_range_test.validate("rotation_range_test")?;
        self.width_normal.validate("width_normal")?;
        self.width_dilated.validate("width_dilated")?;
        self.chamber_length.validate("chamber_length")?;
        if self.width_normal.lo <= 0.0 || self.width_dilated.lo <= 0.0 || self.chamber_length.lo <= 0.0 {
            return Err(Error::config("chamber axes must be positive"));
        }
        if !self.allow_width_overlap && self.width_normal.overlaps(&self.width_dilated) {
            return Err(Error::config(format!(
                "width intervals {} and {} overlap; set allow_width_overlap to permit it",
                self.width_normal, self.width_dilated
            )));
        }
        if self.translation_range < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::config("translation_range and noise_sigma must be non-negative"));
        }
        // the chamber must stay inside the frame at any rotation and offset
        let reach = self
            .chamber_length
            .hi
            .max(self.width_normal.hi)
            .max(self.width_dilated.hi)
            / 2.0
            + self.translation_range;
        let (cx, cy) = (w as f64 / 2.0, CENTER_DEPTH * h as f64);
        if cx - reach < 0.0 || cx + reach > w as f64 || cy - reach < 0.0 || cy + reach > h as f64 {
            return Err(Error::config(format!(
                "chamber reach {reach:.2}px around ({cx:.1}, {cy:.1}) does not fit a {h}x{w} frame"
            )));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.n_samples as f64 * self.positive_ratio).round() as usize
    }
}

/// Pixels whose centres satisfy the rotated-ellipse inequality. `width` and
/// `length` are full axis lengths; rotation is measured from vertical.
pub fn chamber_mask(h: usize, w: usize, cx: f64, cy: f64, width: f64, length: f64, degrees: f64) -> Vec<bool> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (a, b) = (length / 2.0, width / 2.0);
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // major axis along the rotated vertical
            let along = dx * sin + dy * cos;
            let across = dx * cos - dy * sin;
            mask[y * w + x] = (along / a).powi(2) + (across / b).powi(2) <= 1.0;
        }
    }
    mask
}

fn in_cone(h: usize, w: usize, x: usize, y: usize) -> bool {
    let dx = x as f64 + 0.5 - w as f64 / 2.0;
    let dy = y as f64 + 0.5;
    let r = (dx * dx + dy * dy).sqrt();
    r <= h as f64 && dx.abs() <= dy * CONE_HALF_ANGLE_DEG.to_radians().tan()
}

/// Samples the training-phase dataset.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    generate_phase(cfg, Phase::Train)
}

/// Samples a dataset whose chamber rotations come from the phase's range.
/// Train and test phases use disjoint random streams.
pub fn generate_phase(cfg: &SynthConfig, phase: Phase) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < cfg.positives())).collect();
    let mut label_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    label_rng.set_stream(LABEL_STREAM - phase_offset(phase));
    labels.shuffle(&mut label_rng);

    let (c, h, w) = cfg.image_size;
    let mut ds = Dataset::empty(c, h, w);
    for (i, &label) in labels.iter().enumerate() {
        let (img, y) = render_sample(cfg, phase, i as u64, label);
        ds.push(&img, label, y);
    }
    Ok(ds)
}

fn phase_offset(phase: Phase) -> u64 {
    match phase {
        Phase::Train => 0,
        Phase::Test => TEST_STREAM_BASE,
    }
}

/// Renders one sample from its own `(seed, index)` stream.
fn render_sample(cfg: &SynthConfig, phase: Phase, index: u64, label: u8) -> (Vec<f32>, f32) {
    let (c, h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase_offset(phase) + index);

    let widths = if label == 1 { cfg.width_dilated } else { cfg.width_normal };
    let width = widths.sample(&mut rng);
    let length = cfg.chamber_length.sample(&mut rng).max(width);
    let rotation = match phase {
        Phase::Train => cfg.rotation_range_train,
        Phase::Test => cfg.rotation_range_test,
    }
    .sample(&mut rng);
    let t = Interval::new(-cfg.translation_range, cfg.translation_range);
    let cx = w as f64 / 2.0 + t.sample(&mut rng);
    let cy = CENTER_DEPTH * h as f64 + t.sample(&mut rng);

    let mask = chamber_mask(h, w, cx, cy, width, length, rotation);
    let clean: Vec<f64> = (0..h * w)
        .map(|k| {
            if mask[k] {
                CHAMBER
            } else if in_cone(h, w, k % w, k / w) {
                TISSUE
            } else {
                0.0
            }
        })
        .collect();

    let planes: Vec<Vec<f64>> = if c == 1 {
        vec![clean]
    } else {
        [1.0, 0.75, 0.5].iter().map(|&f| center_crop(&clean, h, w, f)).collect()
    };
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut pixels = Vec::with_capacity(c * h * w);
    for plane in planes {
        for v in plane {
            let z = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push((v + z).clamp(0.0, 1.0) as f32);
        }
    }
    (pixels, (width / h as f64) as f32)
}

/// Nearest-neighbour upsampling of the central `fraction` of a plane back to full size.
fn center_crop(plane: &[f64], h: usize, w: usize, fraction: f64) -> Vec<f64> {
    let (ch, cw) = (h as f64 * fraction, w as f64 * fraction);
    let (y0, x0) = ((h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = (y0 + (y as f64 + 0.5) * fraction).floor() as usize;
        for x in 0..w {
            let sx = (x0 + (x as f64 + 0.5) * fraction).floor() as usize;
            out.push(plane[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}
