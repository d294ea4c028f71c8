//! Training losses: L1 contrast term, windowed SSIM structural term and an
//! optional perceptual term supplied through [`FeatureExtractor`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// SSIM stabilisers for a `[0, 1]` dynamic range.
pub const SSIM_C1: f32 = 0.01 * 0.01;
pub const SSIM_C2: f32 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction shape {pred:?} differs from target shape {target:?}")]
    ShapeMismatch {
        pred: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("lambda_p is {0} but no feature extractor was supplied")]
    MissingExtractor(f32),
    #[error("loss weights must be finite and nonnegative")]
    InvalidWeights,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c: f32,
    pub lambda_s: f32,
    pub lambda_p: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_s: 1.0,
            lambda_p: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f32| v.is_finite() && v >= 0.0;
        if ok(self.lambda_c) && ok(self.lambda_s) && ok(self.lambda_p) {
            Ok(())
        } else {
            Err(LossError::InvalidWeights)
        }
    }
}

/// A differentiable feature network for the perceptual term. Each returned
/// feature map is compared with a squared distance normalised by its element
/// count `C_j·H_j·W_j` (times the batch size).
pub trait FeatureExtractor {
    fn features(&self, tape: &mut Tape, x: &Var) -> Result<Vec<Var>>;
}

fn same_shape(pred: &Var, target: &Var) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(LossError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn l1_loss(tape: &mut Tape, pred: &Var, target: &Var) -> Result<Var> {
    same_shape(pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(&d)?;
    Ok(tape.mean(&a)?)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// The separable 2-D window as a `1 x 1 x k x k` kernel.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let g = gaussian_taps(size, sigma);
    Tensor::from_fn(&[1, 1, size, size], |i| (g[i / size] * g[i % size]) as f32)
}

/// `1 − mean SSIM` over valid 11x11 Gaussian windows, per channel.
pub fn ssim_loss(tape: &mut Tape, pred: &Var, target: &Var) -> Result<Var> {
    same_shape(pred, target)?;
    let (n, c, h, w) = pred.value().dims4("ssim_loss")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let planes = vec![n * c, 1, h, w];
    let x = tape.reshape(pred, planes.clone())?;
    let y = tape.reshape(target, planes)?;
    let g = tape.constant(gaussian_window(SSIM_WINDOW, SSIM_SIGMA));
    let blur = |tape: &mut Tape, v: &Var| tape.conv2d(v, &g, None, 1, 0);

    let mu_x = blur(tape, &x)?;
    let mu_y = blur(tape, &y)?;
    let xx = tape.mul(&x, &x)?;
    let yy = tape.mul(&y, &y)?;
    let xy = tape.mul(&x, &y)?;
    let e_xx = blur(tape, &xx)?;
    let e_yy = blur(tape, &yy)?;
    let e_xy = blur(tape, &xy)?;

    let mu_xx = tape.mul(&mu_x, &mu_x)?;
    let mu_yy = tape.mul(&mu_y, &mu_y)?;
    let mu_xy = tape.mul(&mu_x, &mu_y)?;
    let var_x = tape.sub(&e_xx, &mu_xx)?;
    let var_y = tape.sub(&e_yy, &mu_yy)?;
    let cov = tape.sub(&e_xy, &mu_xy)?;

    let l_num = tape.scale(&mu_xy, 2.0)?;
    let l_num = tape.add_scalar(&l_num, SSIM_C1)?;
    let c_num = tape.scale(&cov, 2.0)?;
    let c_num = tape.add_scalar(&c_num, SSIM_C2)?;
    let l_den = tape.add(&mu_xx, &mu_yy)?;
    let l_den = tape.add_scalar(&l_den, SSIM_C1)?;
    let c_den = tape.add(&var_x, &var_y)?;
    let c_den = tape.add_scalar(&c_den, SSIM_C2)?;

    let num = tape.mul(&l_num, &c_num)?;
    let den = tape.mul(&l_den, &c_den)?;
    let map = tape.div(&num, &den)?;
    let m = tape.mean(&map)?;
    let neg = tape.scale(&m, -1.0)?;
    Ok(tape.add_scalar(&neg, 1.0)?)
}

/// Sum over feature maps of the mean squared feature difference.
pub fn perceptual_loss(
    tape: &mut Tape,
    pred: &Var,
    target: &Var,
    extractor: &dyn FeatureExtractor,
) -> Result<Var> {
    same_shape(pred, target)?;
    let fp = extractor.features(tape, pred)?;
    let ft = extractor.features(tape, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fp.iter().zip(&ft) {
        same_shape(a, b)?;
        let d = tape.sub(a, b)?;
        let sq = tape.square(&d)?;
        let term = tape.mean(&sq)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `λc·L1 + λs·SSIM + λp·perceptual`. Terms with zero weight are not evaluated.
pub fn total_loss(
    tape: &mut Tape,
    pred: &Var,
    target: &Var,
    weights: &LossWeights,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<Var> {
    weights.validate()?;
    same_shape(pred, target)?;
    if weights.lambda_p > 0.0 && extractor.is_none() {
        return Err(LossError::MissingExtractor(weights.lambda_p));
    }
    let mut terms = Vec::new();
    if weights.lambda_c > 0.0 {
        let l = l1_loss(tape, pred, target)?;
        terms.push(tape.scale(&l, weights.lambda_c)?);
    }
    if weights.lambda_s > 0.0 {
        let l = ssim_loss(tape, pred, target)?;
        terms.push(tape.scale(&l, weights.lambda_s)?);
    }
    if let (true, Some(ex)) = (weights.lambda_p > 0.0, extractor) {
        let l = perceptual_loss(tape, pred, target, ex)?;
        terms.push(tape.scale(&l, weights.lambda_p)?);
    }
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    for t in it {
        acc = tape.add(&acc, &t)?;
    }
    Ok(acc)
}
