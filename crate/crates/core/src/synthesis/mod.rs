//! Paired-image synthesis with non-uniform illumination.
//!
//! A raw image and a binary mask yield a low-light input, where the masked
//! region's HSV value channel is deepened or surfaced and then blended by a
//! guided filter, plus a sharpened ground truth.

mod guided;

pub use guided::guided_filter;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{hsv_to_rgb, rgb_to_hsv, ColorError, ImageU8};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("EmptyMask: the mask selects no pixels")]
    EmptyMask,
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("guided-filter window {window} exceeds the {width}x{height} image")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Color(#[from] ColorError),
}

/// Per-pixel region selector; `true` marks the adjusted area.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, SynthError> {
        if data.len() != width * height {
            return Err(SynthError::DimMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Grayscale mask bytes; anything above 127 is masked.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self, SynthError> {
        Self::new(width, height, gray.iter().map(|&g| g > 127).collect())
    }

    /// Marks pixels whose luma is below `threshold` (in `[0, 1]`). Test utility.
    pub fn luminance_below(img: &ImageU8, threshold: f32) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.luminance().into_iter().map(|l| l < threshold).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// 0 / 255 bytes, one per pixel.
    pub fn to_gray(&self) -> Vec<u8> {
        self.data.iter().map(|&m| if m { 255 } else { 0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adjustment {
    Deepen,
    Surface,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideSource {
    /// Luma of the raw image.
    Luminance,
    /// The adjusted value channel itself.
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Brightness threshold on V in `[0, 255]`.
    pub alpha: f64,
    /// Guided-filter window side.
    pub kernel_g: usize,
    pub gamma_d: f64,
    pub gamma_s: f64,
    pub beta: f64,
    /// Guided-filter regulariser on the `[0, 1]` guide scale.
    pub epsilon_gf: f64,
    pub guide: GuideSource,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            alpha: 70.0,
            kernel_g: 64,
            gamma_d: 2.2,
            gamma_s: 0.5,
            beta: 0.9,
            epsilon_gf: 1e-2,
            guide: GuideSource::Luminance,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 255.0) {
            return bad("alpha must lie in (0, 255)");
        }
        if self.kernel_g < 2 || self.kernel_g % 2 != 0 {
            return bad("kernel_g must be even and at least 2");
        }
        if !(self.gamma_d > 1.0) {
            return bad("gamma_d must exceed 1");
        }
        if !(self.gamma_s > 0.0 && self.gamma_s < 1.0) {
            return bad("gamma_s must lie in (0, 1)");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if !(self.epsilon_gf > 0.0) {
            return bad("epsilon_gf must be positive");
        }
        Ok(())
    }
}

/// Independent RNG stream for image `index` of a dataset seeded with `seed`.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_dims(v_len: usize, mask: &BinaryMask) -> Result<(), SynthError> {
    if v_len != mask.width * mask.height {
        return Err(SynthError::DimMismatch {
            expected: (mask.width, mask.height),
            found: (v_len, 1),
        });
    }
    Ok(())
}

/// Mean of `v` over masked pixels.
pub fn masked_mean_brightness(v: &[f32], mask: &BinaryMask) -> Result<f64, SynthError> {
    check_dims(v.len(), mask)?;
    let (sum, count) = v
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m)
        .fold((0f64, 0usize), |(s, c), (&x, _)| (s + x as f64, c + 1));
    if count == 0 {
        return Err(SynthError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Deepen below the threshold (strictly); otherwise a uniform draw over all three.
pub fn select_adjustment<R: Rng + ?Sized>(b_avg: f64, alpha: f64, rng: &mut R) -> Adjustment {
    if b_avg < alpha {
        Adjustment::Deepen
    } else {
        [Adjustment::Surface, Adjustment::Deepen, Adjustment::None][rng.gen_range(0..3)]
    }
}

/// Gamma-adjusts masked V values on the normalised `[0, 1]` scale.
pub fn adjust_brightness(
    v: &[f32],
    mask: &BinaryMask,
    adjustment: Adjustment,
    cfg: &SynthConfig,
) -> Vec<f32> {
    let curve = |x: f32| -> f32 {
        let n = (x as f64 / 255.0).clamp(0.0, 1.0);
        let y = match adjustment {
            Adjustment::Deepen => cfg.beta * n.powf(cfg.gamma_d),
            Adjustment::Surface => n.powf(cfg.gamma_s),
            Adjustment::None => return x,
        };
        (255.0 * y).clamp(0.0, 255.0) as f32
    };
    v.iter()
        .zip(&mask.data)
        .map(|(&x, &m)| if m { curve(x) } else { x })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutcome {
    pub low: ImageU8,
    pub adjustment: Adjustment,
    pub b_avg: f64,
}

/// Runs the full synthesis with the adjustment drawn from `rng`.
pub fn synthesize_low<R: Rng + ?Sized>(
    raw: &ImageU8,
    mask: &BinaryMask,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<SynthOutcome, SynthError> {
    synthesize_inner(raw, mask, cfg, |b_avg| {
        select_adjustment(b_avg, cfg.alpha, rng)
    })
}

/// Runs the full synthesis with a fixed adjustment.
pub fn synthesize_low_forced(
    raw: &ImageU8,
    mask: &BinaryMask,
    cfg: &SynthConfig,
    adjustment: Adjustment,
) -> Result<SynthOutcome, SynthError> {
    synthesize_inner(raw, mask, cfg, |_| adjustment)
}

fn synthesize_inner(
    raw: &ImageU8,
    mask: &BinaryMask,
    cfg: &SynthConfig,
    choose: impl FnOnce(f64) -> Adjustment,
) -> Result<SynthOutcome, SynthError> {
    cfg.validate()?;
    if raw.width() != mask.width || raw.height() != mask.height {
        return Err(SynthError::DimMismatch {
            expected: (raw.width(), raw.height()),
            found: (mask.width, mask.height),
        });
    }
    let hsv = rgb_to_hsv(raw);
    let b_avg = masked_mean_brightness(hsv.value(), mask)?;
    let adjustment = choose(b_avg);
    let adjusted = adjust_brightness(hsv.value(), mask, adjustment, cfg);
    let guide = match cfg.guide {
        GuideSource::Luminance => raw.luminance(),
        GuideSource::Value => adjusted.iter().map(|v| v / 255.0).collect(),
    };
    let smooth = guided_filter(
        &guide,
        &adjusted,
        raw.width(),
        raw.height(),
        cfg.kernel_g,
        cfg.epsilon_gf,
    )?;
    let low = hsv_to_rgb(&hsv.with_value(smooth)?);
    Ok(SynthOutcome {
        low,
        adjustment,
        b_avg,
    })
}

/// Channel-wise 3x3 sharpening `[[0,-1,0],[-1,5,-1],[0,-1,0]]` with replicated
/// borders, clamped to `[0, 255]`.
pub fn sharpen_gt(raw: &ImageU8) -> ImageU8 {
    let (w, h) = (raw.width(), raw.height());
    let src = raw.data();
    let at = |x: usize, y: usize, c: usize| src[(y * w + x) * 3 + c] as i32;
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        let (up, down) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (left, right) = (x.saturating_sub(1), (x + 1).min(w - 1));
            for c in 0..3 {
                let v = 5 * at(x, y, c)
                    - at(x, up, c)
                    - at(x, down, c)
                    - at(left, y, c)
                    - at(right, y, c);
                out[(y * w + x) * 3 + c] = v.clamp(0, 255) as u8;
            }
        }
    }
    ImageU8::new(w, h, out).expect("same dimensions as the input")
}
