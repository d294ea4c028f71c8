//! Contrast correction: a standard-normal PDF map `φ` and a softplus map `ψ`
//! combined as `I' = sqrt(φ + ψ + φψ)`, then a per-image min-max
//! normalisation raised to `γ`. Applied after training, not differentiated.

use super::{NetError, Result};
use crate::tensor::Tensor;

const FLAT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcmTerms {
    pub phi: f64,
    pub psi: f64,
    pub intermediate: f64,
}

/// Per-pixel terms before normalisation.
pub fn ccm_terms(x: f64) -> CcmTerms {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let psi = x.exp().ln_1p();
    CcmTerms {
        phi,
        psi,
        intermediate: (phi + psi + phi * psi).sqrt(),
    }
}

/// Applies CCM to each image of an `N x C x H x W` tensor, with min and max
/// taken jointly over all channels. Images whose intermediate range is below
/// `1e-6` are returned unchanged.
pub fn ccm_forward(x: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(NetError::Config(format!(
            "gamma_ccm must be positive, got {gamma}"
        )));
    }
    let (n, c, h, w) = x.dims4("ccm")?;
    let per = c * h * w;
    let mut out = x.data().to_vec();
    for img in 0..n {
        let src = &x.data()[img * per..(img + 1) * per];
        let mid: Vec<f64> = src
            .iter()
            .map(|&v| ccm_terms(v as f64).intermediate)
            .collect();
        let lo = mid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < FLAT {
            continue;
        }
        for (o, m) in out[img * per..(img + 1) * per].iter_mut().zip(&mid) {
            *o = ((m - lo) / (hi - lo)).powf(gamma) as f32;
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}
