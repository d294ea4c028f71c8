//! Shared inputs for integration tests: the finite-difference case list for
//! every tape op and procedurally lit scenes.

#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unir_core::color::ImageU8;
use unir_core::synthesis::BinaryMask;
use unir_core::tensor::TensorError;
use unir_core::{Tape, Tensor, Var};

pub type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

/// One gradient-check case: a label, the parameters and the scalar forward.
pub struct OpCase {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub forward: Forward,
}

fn random_tensor(r: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero so kinks of relu/abs sit outside the
/// finite-difference stencil.
pub fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.05f32..1.0);
        if r.gen() {
            m
        } else {
            -m
        }
    })
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output entry has a distinct weight.
pub fn project(tape: &mut Tape, out: &Var, seed: u64) -> Result<Var, TensorError> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let weights = random_tensor(&mut r, out.shape(), -1.0, 1.0);
    let w = tape.constant(weights);
    let p = tape.mul(out, &w)?;
    tape.sum(&p)
}

pub fn dims(r: &mut impl Rng) -> usize {
    r.gen_range(1..=6)
}

/// Randomly shaped cases covering every differentiable op on the tape.
pub fn op_cases(mut r: impl Rng, seed: u64) -> Vec<OpCase> {
    let mut cases = Vec::new();
    let mut check = |name: &'static str, params: Vec<Tensor>, forward: Forward| {
        cases.push(OpCase {
            name,
            params,
            forward,
        })
    };
    let (n, c, h, w) = (
        dims(&mut r).min(2),
        dims(&mut r).min(3),
        dims(&mut r).max(3),
        dims(&mut r).max(3),
    );
    let o = dims(&mut r).min(3);
    let x = random_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
    let k3 = random_tensor(&mut r, &[o, c, 3, 3], -0.5, 0.5);
    let k1 = random_tensor(&mut r, &[o, c, 1, 1], -0.5, 0.5);
    let bias = random_tensor(&mut r, &[o], -0.5, 0.5);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        check(
            "conv2d 3x3",
            vec![x.clone(), k3.clone(), bias.clone()],
            Box::new(move |tape, v| {
                let y = tape.conv2d(&v[0], &v[1], Some(&v[2]), stride, pad)?;
                project(tape, &y, seed)
            }),
        );
    }
    check(
        "conv2d 1x1",
        vec![x.clone(), k1.clone()],
        Box::new(move |tape, v| {
            let y = tape.conv2d(&v[0], &v[1], None, 1, 0)?;
            project(tape, &y, seed)
        }),
    );

    let shape = [dims(&mut r), dims(&mut r)];
    let a = away_from_zero(&mut r, &shape);
    let b = away_from_zero(&mut r, &shape);
    let unary: Vec<(&str, fn(&mut Tape, &Var) -> Result<Var, TensorError>)> = vec![
        ("relu", |t, v| t.relu(v)),
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("scale", |t, v| t.scale(v, -1.7)),
        ("add_scalar", |t, v| t.add_scalar(v, 0.3)),
        ("abs", |t, v| t.abs(v)),
        ("square", |t, v| t.square(v)),
        ("softmax", |t, v| t.softmax_lastdim(v)),
        ("mean", |t, v| t.mean(v)),
        ("sum", |t, v| t.sum(v)),
    ];
    for (name, f) in unary {
        check(
            name,
            vec![a.clone()],
            Box::new(move |tape, v| {
                let y = f(tape, &v[0])?;
                project(tape, &y, seed)
            }),
        );
    }
    let binary: Vec<(&str, fn(&mut Tape, &Var, &Var) -> Result<Var, TensorError>)> = vec![
        ("add", |t, x, y| t.add(x, y)),
        ("sub", |t, x, y| t.sub(x, y)),
        ("mul", |t, x, y| t.mul(x, y)),
        ("div", |t, x, y| t.div(x, y)),
    ];
    for (name, f) in binary {
        check(
            name,
            vec![a.clone(), b.clone()],
            Box::new(move |tape, v| {
                let y = f(tape, &v[0], &v[1])?;
                project(tape, &y, seed)
            }),
        );
    }

    let (bsz, m, k, p) = (
        dims(&mut r).min(3),
        dims(&mut r),
        dims(&mut r),
        dims(&mut r),
    );
    let ma = random_tensor(&mut r, &[bsz, m, k], -1.0, 1.0);
    let mb = random_tensor(&mut r, &[bsz, k, p], -1.0, 1.0);
    check(
        "batched_matmul",
        vec![ma.clone(), mb],
        Box::new(move |tape, v| {
            let y = tape.batched_matmul(&v[0], &v[1])?;
            project(tape, &y, seed)
        }),
    );
    check(
        "transpose_last2",
        vec![ma.clone()],
        Box::new(move |tape, v| {
            let y = tape.transpose_last2(&v[0])?;
            project(tape, &y, seed)
        }),
    );
    let len = ma.numel();
    let index: Rc<Vec<usize>> = Rc::new((0..len + 3).map(|_| r.gen_range(0..len)).collect());
    check(
        "gather",
        vec![ma.clone()],
        Box::new(move |tape, v| {
            let y = tape.gather(&v[0], index.clone(), vec![len + 3])?;
            project(tape, &y, seed)
        }),
    );
    check(
        "concat+reshape",
        vec![ma, a.clone()],
        Box::new(move |tape, v| {
            let flat = tape.concat(&[v[0].clone(), v[1].clone()])?;
            let n = flat.value().numel();
            let y = tape.reshape(&flat, vec![1, n])?;
            project(tape, &y, seed)
        }),
    );
    drop(check);
    cases
}

/// A smooth scene with a dark periphery, as produced by uneven lighting.
pub fn vignetted(rng: &mut impl Rng, w: usize, h: usize, floor: f64) -> (ImageU8, BinaryMask) {
    let (cx, cy) = (
        rng.gen_range(0.4..0.6) * w as f64,
        rng.gen_range(0.4..0.6) * h as f64,
    );
    let r0 = w.min(h) as f64 * 0.25;
    let tint = [
        rng.gen_range(20.0..80.0),
        rng.gen_range(100.0..200.0),
        rng.gen_range(120.0..240.0),
    ];
    let img = ImageU8::from_fn(w, h, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let light = if d < r0 {
            1.0
        } else {
            floor + (1.0 - floor) * (-(d - r0) / 8.0).exp()
        };
        let tex = 10.0 * ((x as f64 * 0.3).sin() + (y as f64 * 0.2).cos());
        tint.map(|c| ((c + tex) * light).clamp(0.0, 255.0) as u8)
    });
    let mask = BinaryMask::from_fn(w, h, |x, y| {
        ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() >= r0
    });
    (img, mask)
}
