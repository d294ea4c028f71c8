//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every checked entry.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` where the maximum occurred.
    pub worst: (usize, usize),
    pub entries: usize,
    /// Entries whose stencil crosses a relu/abs kink; these are scored with
    /// the one-sided difference that stays on the centre's smooth piece.
    pub straddled: usize,
    /// Straddled entries where neither probe shares the centre's piece.
    pub unscored: usize,
}

/// Compares tape gradients of `forward` against central differences with step `eps`
/// for every entry of every tensor in `params`.
///
/// `forward` must build a scalar from the supplied parameter vars and be deterministic;
/// two forward passes that disagree bitwise are reported as an error.
///
/// A central difference across a kink averages two slopes. When the `+eps` and
/// `-eps` probes see different relu/abs sign patterns, the entry is scored with
/// the forward or backward difference whose probe matches the unperturbed
/// pattern, and left unscored if neither does.
pub fn grad_check<F>(forward: F, params: &[Tensor], eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(TensorError::Invalid(format!(
            "grad_check eps {eps} outside [1e-4, 1e-2]"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<(f32, Option<u64>)> {
        let mut tape = Tape::inference().track_kinks();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = forward(&mut tape, &vars)?;
        let value = loss
            .item()
            .ok_or_else(|| TensorError::NotScalar(loss.shape().to_vec()))?;
        Ok((value, tape.kink_pattern()))
    };

    let (first, centre) = eval(params)?;
    let (second, _) = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Invalid(format!(
            "grad_check: forward is not deterministic ({first} vs {second})"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = forward(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries: 0,
        straddled: 0,
        unscored: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(var) {
            Some(g) => g,
            None => {
                zeros = vec![0f32; params[p].numel()];
                &zeros
            }
        };
        for j in 0..params[p].numel() {
            let orig = params[p].data()[j];
            let plus = orig + eps;
            let minus = orig - eps;
            probe[p].data_mut()[j] = plus;
            let (f_plus, side_plus) = eval(&probe)?;
            probe[p].data_mut()[j] = minus;
            let (f_minus, side_minus) = eval(&probe)?;
            probe[p].data_mut()[j] = orig;
            report.entries += 1;
            let numeric = if side_plus == side_minus {
                (f_plus as f64 - f_minus as f64) / (plus as f64 - minus as f64)
            } else {
                report.straddled += 1;
                if side_plus == centre {
                    (f_plus as f64 - first as f64) / (plus as f64 - orig as f64)
                } else if side_minus == centre {
                    (first as f64 - f_minus as f64) / (orig as f64 - minus as f64)
                } else {
                    report.unscored += 1;
                    continue;
                }
            };
            let err = (analytic[j] as f64 - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, j);
            }
        }
    }
    Ok(report)
}
