//! Grayscale-guided filter with square windows of even side `k`.
//!
//! A window of side `k` centred on pixel `i` spans offsets `[-k/2, k/2 - 1]`
//! on each axis and is clipped at the image border; statistics are averaged
//! over the pixels actually covered.

use super::SynthError;

/// Summed-area table with one row and column of zero padding.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut sums = vec![0f64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0f64;
            for x in 0..w {
                row += values[y * w + x];
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    /// Sum over `[x0, x1) x [y0, y1)`.
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
            + self.sums[y0 * s + x0]
    }
}

/// Window bounds `[lo, hi)` along one axis of length `len`.
pub(crate) fn window(i: usize, k: usize, len: usize) -> (usize, usize) {
    let lo = i.saturating_sub(k / 2);
    let hi = (i + k - k / 2).min(len);
    (lo, hi)
}

fn box_mean(values: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let table = Integral::new(values, w, h);
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        let (y0, y1) = window(y, k, h);
        for x in 0..w {
            let (x0, x1) = window(x, k, w);
            let count = ((x1 - x0) * (y1 - y0)) as f64;
            out[y * w + x] = table.rect(x0, y0, x1, y1) / count;
        }
    }
    out
}

/// Edge-preserving smoothing of `src` steered by `guide`.
///
/// Per window, `src ≈ a·guide + b` with `a = cov(guide, src) / (var(guide) + eps)`
/// and `b = mean(src) − a·mean(guide)`; the output averages `a` and `b` over
/// all windows covering a pixel.
pub fn guided_filter(
    guide: &[f32],
    src: &[f32],
    width: usize,
    height: usize,
    k: usize,
    eps: f64,
) -> Result<Vec<f32>, SynthError> {
    let n = width * height;
    if guide.len() != n || src.len() != n {
        return Err(SynthError::DimMismatch {
            expected: (width, height),
            found: (guide.len().min(src.len()), 1),
        });
    }
    if k == 0 || width < k || height < k {
        return Err(SynthError::WindowTooLarge {
            window: k,
            width,
            height,
        });
    }
    let i: Vec<f64> = guide.iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    let ip: Vec<f64> = i.iter().zip(&p).map(|(a, b)| a * b).collect();
    let ii: Vec<f64> = i.iter().map(|a| a * a).collect();

    let mean_i = box_mean(&i, width, height, k);
    let mean_p = box_mean(&p, width, height, k);
    let mean_ip = box_mean(&ip, width, height, k);
    let mean_ii = box_mean(&ii, width, height, k);

    let mut a = vec![0f64; n];
    let mut b = vec![0f64; n];
    for j in 0..n {
        let cov = mean_ip[j] - mean_i[j] * mean_p[j];
        let var = (mean_ii[j] - mean_i[j] * mean_i[j]).max(0.0);
        a[j] = cov / (var + eps);
        b[j] = mean_p[j] - a[j] * mean_i[j];
    }
    let mean_a = box_mean(&a, width, height, k);
    let mean_b = box_mean(&b, width, height, k);
    Ok((0..n)
        .map(|j| (mean_a[j] * i[j] + mean_b[j]) as f32)
        .collect())
}
