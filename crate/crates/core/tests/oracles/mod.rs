//! Brute-force reference implementations used as test oracles.
//!
//! Everything here is written from the textbook definitions with plain loops
//! in `f64`, without calling into the crate under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unir_core::color::ImageU8;
use unir_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, width: usize, height: usize) -> ImageU8 {
    ImageU8::from_fn(width, height, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

/// A random image and a noisy, shifted copy of it, so metrics land mid-range.
pub fn related_pair(rng: &mut impl Rng, width: usize, height: usize) -> (ImageU8, ImageU8) {
    let a = ImageU8::from_fn(width, height, |x, y| {
        let base = ((x * 7 + y * 3) % 200) as i32;
        [0, 1, 2].map(|c| (base + c * 20 + rng.gen_range(0..40)).clamp(0, 255) as u8)
    });
    let data = a
        .data()
        .iter()
        .map(|&v| (v as i32 + rng.gen_range(-30..=30)).clamp(0, 255) as u8)
        .collect();
    let b = ImageU8::new(width, height, data).unwrap();
    (a, b)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn plane(img: &ImageU8, c: usize) -> Vec<f64> {
    img.pixels().map(|p| p[c] as f64).collect()
}

pub fn psnr(a: &ImageU8, b: &ImageU8) -> f64 {
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64.powi(2) / mse).log10()
    }
}

/// 2-D Gaussian weights of side `k`, normalised to sum 1.
pub fn gaussian_2d(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Mean over valid windows and planes of Gaussian-weighted SSIM.
pub fn ssim_planes(pa: &[Vec<f64>], pb: &[Vec<f64>], w: usize, h: usize, range: f64) -> f64 {
    let k = 11;
    let g = gaussian_2d(k, 1.5);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in pa.iter().zip(pb) {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let idx = (y0 + i) * w + x0 + j;
                        ma += g[i * k + j] * a[idx];
                        mb += g[i * k + j] * b[idx];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let idx = (y0 + i) * w + x0 + j;
                        let (da, db) = (a[idx] - ma, b[idx] - mb);
                        va += g[i * k + j] * da * da;
                        vb += g[i * k + j] * db * db;
                        cov += g[i * k + j] * da * db;
                    }
                }
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn ssim(a: &ImageU8, b: &ImageU8) -> f64 {
    let pa: Vec<_> = (0..3).map(|c| plane(a, c)).collect();
    let pb: Vec<_> = (0..3).map(|c| plane(b, c)).collect();
    ssim_planes(&pa, &pb, a.width(), a.height(), 255.0)
}

/// Universal quality index over 8x8 sliding windows; degenerate windows skipped.
pub fn uqi(a: &ImageU8, b: &ImageU8) -> f64 {
    let (w, h, k) = (a.width(), a.height(), 8);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let (pa, pb) = (plane(a, c), plane(b, c));
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let idx: Vec<usize> = (0..k * k).map(|t| (y0 + t / k) * w + x0 + t % k).collect();
                let ma = idx.iter().map(|&i| pa[i]).sum::<f64>() / n;
                let mb = idx.iter().map(|&i| pb[i]).sum::<f64>() / n;
                let va = idx.iter().map(|&i| (pa[i] - ma).powi(2)).sum::<f64>() / n;
                let vb = idx.iter().map(|&i| (pb[i] - mb).powi(2)).sum::<f64>() / n;
                let cov = idx
                    .iter()
                    .map(|&i| (pa[i] - ma) * (pb[i] - mb))
                    .sum::<f64>()
                    / n;
                let den = (va + vb) * (ma * ma + mb * mb);
                if den != 0.0 {
                    total += 4.0 * cov * ma * mb / den;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        if a == b {
            1.0
        } else {
            0.0
        }
    } else {
        total / count as f64
    }
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// CIE L*a*b* with the white point taken as XYZ of linear RGB (1, 1, 1).
pub fn lab(p: [u8; 3]) -> [f64; 3] {
    let white = [0, 1, 2].map(|i| SRGB_TO_XYZ[i][0] + SRGB_TO_XYZ[i][1] + SRGB_TO_XYZ[i][2]);
    lab_with_white(p, white)
}

/// CIE L*a*b* against an explicit reference white, using the ε/κ form of the CIE standard.
pub fn lab_with_white(p: [u8; 3], white: [f64; 3]) -> [f64; 3] {
    let lin = p.map(|c| {
        let v = c as f64 / 255.0;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    });
    let xyz = [0, 1, 2].map(|i| (0..3).map(|j| SRGB_TO_XYZ[i][j] * lin[j]).sum::<f64>());
    let eps = 216.0 / 24389.0;
    let kappa = 24389.0 / 27.0;
    let f = |t: f64| {
        if t > eps {
            t.powf(1.0 / 3.0)
        } else {
            (kappa * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (
        f(xyz[0] / white[0]),
        f(xyz[1] / white[1]),
        f(xyz[2] / white[2]),
    );
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn delta_e(a: &ImageU8, b: &ImageU8) -> f64 {
    let n = (a.width() * a.height()) as f64;
    a.pixels()
        .zip(b.pixels())
        .map(|(p, q)| {
            let (l1, l2) = (lab(p), lab(q));
            ((l1[0] - l2[0]).powi(2) + (l1[1] - l2[1]).powi(2) + (l1[2] - l2[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / n
}

/// UCIQE with Lab scaled to unit range, luminance contrast from the top and
/// bottom `max(1, n/100)` pixels, population chroma deviation and
/// saturation `C / sqrt(C² + L²)`.
pub fn uciqe(img: &ImageU8) -> f64 {
    let labs: Vec<[f64; 3]> = img.pixels().map(lab).collect();
    let n = labs.len();
    let chroma: Vec<f64> = labs
        .iter()
        .map(|p| ((p[1] / 100.0).powi(2) + (p[2] / 100.0).powi(2)).sqrt())
        .collect();
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let sigma_c = (chroma
        .iter()
        .map(|c| (c - mean_c) * (c - mean_c))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let mut l: Vec<f64> = labs.iter().map(|p| p[0] / 100.0).collect();
    l.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let k = std::cmp::max(1, n / 100);
    let con = l[n - k..].iter().sum::<f64>() / k as f64 - l[..k].iter().sum::<f64>() / k as f64;
    let sat = labs
        .iter()
        .zip(&chroma)
        .map(|(p, &c)| {
            let lum = p[0] / 100.0;
            let d = (c * c + lum * lum).sqrt();
            if d == 0.0 {
                0.0
            } else {
                c / d
            }
        })
        .sum::<f64>()
        / n as f64;
    0.4680 * sigma_c + 0.2745 * con + 0.2576 * sat
}

/// Window `[lo, hi)` of side `k` around `i`: offsets `-k/2 ..= k/2 - 1`, clipped.
pub fn gf_window(i: usize, k: usize, len: usize) -> (usize, usize) {
    let lo = i as isize - (k / 2) as isize;
    let hi = i as isize + (k - k / 2) as isize;
    (lo.max(0) as usize, (hi as usize).min(len))
}

/// Guided filter computed by direct summation over every window.
pub fn guided_filter(
    guide: &[f32],
    src: &[f32],
    w: usize,
    h: usize,
    k: usize,
    eps: f64,
) -> Vec<f64> {
    let n = w * h;
    let (mut a, mut b) = (vec![0f64; n], vec![0f64; n]);
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = gf_window(y, k, h);
            let (x0, x1) = gf_window(x, k, w);
            let cnt = ((y1 - y0) * (x1 - x0)) as f64;
            let (mut si, mut sp) = (0.0, 0.0);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    si += guide[yy * w + xx] as f64;
                    sp += src[yy * w + xx] as f64;
                }
            }
            let (mi, mp) = (si / cnt, sp / cnt);
            let (mut var, mut cov) = (0.0, 0.0);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let di = guide[yy * w + xx] as f64 - mi;
                    var += di * di;
                    cov += di * (src[yy * w + xx] as f64 - mp);
                }
            }
            let ak = (cov / cnt) / (var / cnt + eps);
            a[y * w + x] = ak;
            b[y * w + x] = mp - ak * mi;
        }
    }
    let mut out = vec![0f64; n];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = gf_window(y, k, h);
            let (x0, x1) = gf_window(x, k, w);
            let cnt = ((y1 - y0) * (x1 - x0)) as f64;
            let (mut sa, mut sb) = (0.0, 0.0);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    sa += a[yy * w + xx];
                    sb += b[yy * w + xx];
                }
            }
            out[y * w + x] = sa / cnt * guide[y * w + x] as f64 + sb / cnt;
        }
    }
    out
}

/// Contrast-correction intermediate `I'(x) = sqrt(φ + ψ + φψ)`.
pub fn ccm_intermediate(x: f64) -> f64 {
    let phi = (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let psi = (1.0 + x.exp()).ln();
    (phi + psi + phi * psi).sqrt()
}

/// Hand-rolled bias-corrected Adam over a gradient sequence for one scalar.
pub fn adam_scalar(mut p: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}
