//! Windowed multi-head self-attention followed by a 1x1 feed-forward network.
//!
//! The feature map is tiled into `window x window` tiles (edge tiles are
//! smaller when the size does not divide evenly). Small maps attend globally.
//! Everything is expressed with tape primitives: index gathers lay tokens out
//! as `[batch, tokens, head_dim]`, then two batched matmuls and a softmax.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::{NetError, Result};
use crate::autograd::{Tape, Var};

/// Upper bound on the score-matrix size of one attention chunk, in floats.
const CHUNK_SCORES: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnWindow {
    pub window: usize,
    pub global_tokens: usize,
}

impl AttnWindow {
    /// Tile side lengths used for an `h x w` map.
    pub fn tile(&self, h: usize, w: usize) -> (usize, usize) {
        if h * w <= self.global_tokens {
            (h, w)
        } else {
            (self.window.min(h), self.window.min(w))
        }
    }
}

pub struct AbVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wa: Var,
    pub ba: Var,
    pub wb: Var,
    pub bb: Var,
}

/// One batch of equally shaped windows.
struct Chunk {
    /// Flat NCHW positions laid out as `[batch, tokens, head_dim]`.
    q_index: Rc<Vec<usize>>,
    /// The same positions laid out as `[batch, head_dim, tokens]`.
    kt_index: Rc<Vec<usize>>,
    batch: usize,
    tokens: usize,
}

struct Plan {
    chunks: Vec<Chunk>,
    /// Maps each NCHW position to its slot in the concatenated chunk outputs.
    inverse: Rc<Vec<usize>>,
    head_dim: usize,
}

fn plan(n: usize, c: usize, h: usize, w: usize, heads: usize, attn: AttnWindow) -> Plan {
    let d = c / heads;
    let (th, tw) = attn.tile(h, w);
    let mut groups: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for y0 in (0..h).step_by(th) {
        for x0 in (0..w).step_by(tw) {
            let shape = ((th).min(h - y0), (tw).min(w - x0));
            groups.entry(shape).or_default().push((y0, x0));
        }
    }

    let mut chunks = Vec::new();
    let mut inverse = vec![0usize; n * c * h * w];
    let mut offset = 0usize;
    for ((wh, ww), origins) in groups {
        let t = wh * ww;
        let per_chunk = (CHUNK_SCORES / (t * t)).max(1);
        let mut items = Vec::with_capacity(n * heads * origins.len());
        for b in 0..n {
            for hd in 0..heads {
                items.extend(origins.iter().map(|&o| (b, hd, o)));
            }
        }
        for part in items.chunks(per_chunk) {
            let batch = part.len();
            let mut q_index = vec![0usize; batch * t * d];
            let mut kt_index = vec![0usize; batch * t * d];
            for (bi, &(img, head, (y0, x0))) in part.iter().enumerate() {
                for ty in 0..wh {
                    for tx in 0..ww {
                        let tok = ty * ww + tx;
                        for cd in 0..d {
                            let ch = head * d + cd;
                            let pos = ((img * c + ch) * h + y0 + ty) * w + x0 + tx;
                            let q = (bi * t + tok) * d + cd;
                            q_index[q] = pos;
                            kt_index[(bi * d + cd) * t + tok] = pos;
                            inverse[pos] = offset + q;
                        }
                    }
                }
            }
            offset += batch * t * d;
            chunks.push(Chunk {
                q_index: Rc::new(q_index),
                kt_index: Rc::new(kt_index),
                batch,
                tokens: t,
            });
        }
    }
    Plan {
        chunks,
        inverse: Rc::new(inverse),
        head_dim: d,
    }
}

/// Multi-head attention `softmax(Q Kᵀ / sqrt(C / heads)) V` over each window.
pub fn windowed_attention(
    tape: &mut Tape,
    q: &Var,
    k: &Var,
    v: &Var,
    heads: usize,
    attn: AttnWindow,
) -> Result<Var> {
    let (n, c, h, w) = q.value().dims4("attention")?;
    if heads == 0 || c % heads != 0 {
        return Err(NetError::Config(format!(
            "{c} channels do not split into {heads} heads"
        )));
    }
    let plan = plan(n, c, h, w, heads, attn);
    let d = plan.head_dim;
    let inv_sqrt = 1.0 / (d as f32).sqrt();
    let mut outputs = Vec::with_capacity(plan.chunks.len());
    for chunk in &plan.chunks {
        let (b, t) = (chunk.batch, chunk.tokens);
        let qg = tape.gather(q, chunk.q_index.clone(), vec![b, t, d])?;
        let qg = tape.scale(&qg, inv_sqrt)?;
        let kt = tape.gather(k, chunk.kt_index.clone(), vec![b, d, t])?;
        let scores = tape.batched_matmul(&qg, &kt)?;
        let probs = tape.softmax_lastdim(&scores)?;
        let vg = tape.gather(v, chunk.q_index.clone(), vec![b, t, d])?;
        outputs.push(tape.batched_matmul(&probs, &vg)?);
    }
    let flat = if outputs.len() == 1 {
        let only = outputs.pop().expect("one output");
        let len = only.value().numel();
        tape.reshape(&only, vec![len])?
    } else {
        tape.concat(&outputs)?
    };
    Ok(tape.gather(&flat, plan.inverse, vec![n, c, h, w])?)
}

/// `Z1 = MHSA(X) + X`, `out = FFN(Z1) + Z1` with a ReLU between the two 1x1 convolutions.
pub fn ab_forward(
    tape: &mut Tape,
    x: &Var,
    w: &AbVars,
    heads: usize,
    attn: AttnWindow,
) -> Result<Var> {
    let q = tape.conv2d(x, &w.wq, None, 1, 0)?;
    let k = tape.conv2d(x, &w.wk, None, 1, 0)?;
    let v = tape.conv2d(x, &w.wv, None, 1, 0)?;
    let a = windowed_attention(tape, &q, &k, &v, heads, attn)?;
    let z1 = tape.add(&a, x)?;
    let hidden = tape.conv2d(&z1, &w.wa, Some(&w.ba), 1, 0)?;
    let hidden = tape.relu(&hidden)?;
    let z2 = tape.conv2d(&hidden, &w.wb, Some(&w.bb), 1, 0)?;
    Ok(tape.add(&z1, &z2)?)
}
