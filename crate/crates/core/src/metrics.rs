//! Image quality metrics: PSNR, SSIM, UQI and DeltaE against a reference,
//! and the no-reference UCIQE score.
//!
//! UCIQE weights (0.4680, 0.2745, 0.2576) come from the original UCIQE
//! definition; Lab components enter it divided by 100.

use std::fmt::Write as _;

use thiserror::Error;

use crate::color::{srgb_to_lab, ImageU8};
use crate::objective::{gaussian_taps, SSIM_SIGMA, SSIM_WINDOW};

pub const UQI_WINDOW: usize = 8;
pub const UCIQE_WEIGHTS: [f64; 3] = [0.4680, 0.2745, 0.2576];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("row has {found} values, report has {expected} columns")]
    RowWidth { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_dims(a: &ImageU8, b: &ImageU8) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(MetricError::DimMismatch {
            a: (a.width(), a.height()),
            b: (b.width(), b.height()),
        })
    }
}

fn check_window(width: usize, height: usize, window: usize) -> Result<()> {
    if width < window || height < window {
        return Err(MetricError::TooSmall {
            width,
            height,
            window,
        });
    }
    Ok(())
}

/// Splits interleaved RGB into three planes of `f64`.
pub fn planes(img: &ImageU8) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for p in img.pixels() {
        for c in 0..3 {
            out[c].push(p[c] as f64);
        }
    }
    out
}

/// `10·log10(255² / MSE)` over all channels; identical images give `+inf`.
pub fn psnr(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    check_dims(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.data().len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Valid-window separable filter of one plane.
fn filter_valid(
    plane: &[f64],
    width: usize,
    height: usize,
    taps: &[f64],
) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (width - k + 1, height - k + 1);
    let mut rows = vec![0f64; ow * height];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    (out, ow, oh)
}

/// SSIM map values of one plane pair with dynamic range `range`.
pub fn ssim_plane(
    a: &[f64],
    b: &[f64],
    width: usize,
    height: usize,
    range: f64,
) -> Result<Vec<f64>> {
    check_window(width, height, SSIM_WINDOW)?;
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, _, _) = filter_valid(a, width, height, &taps);
    let (mu_b, _, _) = filter_valid(b, width, height, &taps);
    let (e_aa, _, _) = filter_valid(&prod(a, a), width, height, &taps);
    let (e_bb, _, _) = filter_valid(&prod(b, b), width, height, &taps);
    let (e_ab, _, _) = filter_valid(&prod(a, b), width, height, &taps);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean SSIM over valid 11x11 Gaussian windows of every channel, 8-bit constants.
pub fn ssim_metric(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    check_dims(a, b)?;
    let (pa, pb) = (planes(a), planes(b));
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let map = ssim_plane(&pa[c], &pb[c], a.width(), a.height(), 255.0)?;
        count += map.len();
        sum += map.iter().sum::<f64>();
    }
    Ok(sum / count as f64)
}

/// UQI window values of one plane pair; `None` for windows with a zero denominator.
pub fn uqi_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<Vec<Option<f64>>> {
    check_window(width, height, UQI_WINDOW)?;
    let k = UQI_WINDOW;
    let n = (k * k) as f64;
    let mut out = Vec::with_capacity((width - k + 1) * (height - k + 1));
    for y0 in 0..=height - k {
        for x0 in 0..=width - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let (p, q) = (a[y * width + x], b[y * width + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let den = (va + vb) * (ma * ma + mb * mb);
            out.push((den != 0.0).then(|| 4.0 * cov * ma * mb / den));
        }
    }
    Ok(out)
}

/// Universal quality index over 8x8 sliding windows of every channel.
///
/// Degenerate windows are skipped; when all are, the result is 1 for equal
/// images and 0 otherwise.
pub fn uqi(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    check_dims(a, b)?;
    let (pa, pb) = (planes(a), planes(b));
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for q in uqi_plane(&pa[c], &pb[c], a.width(), a.height())?
            .into_iter()
            .flatten()
        {
            sum += q;
            count += 1;
        }
    }
    Ok(match count {
        0 if a == b => 1.0,
        0 => 0.0,
        n => sum / n as f64,
    })
}

/// Mean CIE76 colour difference.
pub fn delta_e(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    check_dims(a, b)?;
    let (la, lb) = (srgb_to_lab(a), srgb_to_lab(b));
    let total: f64 = la
        .iter()
        .zip(&lb)
        .map(|(p, q)| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(total / la.len().max(1) as f64)
}

/// The three UCIQE statistics: chroma standard deviation, luminance contrast
/// (top-1% mean minus bottom-1% mean) and mean saturation.
pub fn uciqe_terms(img: &ImageU8) -> [f64; 3] {
    let lab = srgb_to_lab(img);
    let n = lab.len();
    if n == 0 {
        return [0.0; 3];
    }
    let nf = n as f64;
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for p in &lab {
        let l = p[0] / 100.0;
        let c = (p[1] / 100.0).hypot(p[2] / 100.0);
        let denom = c.hypot(l);
        if denom > 0.0 {
            sat_sum += c / denom;
        }
        lum.push(l);
        chroma.push(c);
    }
    let mean_c = chroma.iter().sum::<f64>() / nf;
    let sigma_c = (chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / nf).sqrt();

    lum.sort_by(f64::total_cmp);
    let k = (n / 100).max(1);
    let bottom = lum[..k].iter().sum::<f64>() / k as f64;
    let top = lum[n - k..].iter().sum::<f64>() / k as f64;
    [sigma_c, top - bottom, sat_sum / nf]
}

pub fn uciqe(img: &ImageU8) -> f64 {
    let t = uciqe_terms(img);
    UCIQE_WEIGHTS.iter().zip(&t).map(|(w, v)| w * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
    pub delta_e: f64,
    pub uciqe: f64,
}

impl PairMetrics {
    /// Full-reference metrics of `enhanced` against `reference`; UCIQE is of `enhanced`.
    pub fn compute(enhanced: &ImageU8, reference: &ImageU8) -> Result<Self> {
        Ok(Self {
            psnr: psnr(enhanced, reference)?,
            ssim: ssim_metric(enhanced, reference)?,
            uqi: uqi(enhanced, reference)?,
            delta_e: delta_e(enhanced, reference)?,
            uciqe: uciqe(enhanced),
        })
    }

    pub fn values(&self) -> Vec<f64> {
        vec![self.psnr, self.ssim, self.uqi, self.delta_e, self.uciqe]
    }
}

pub const FULL_COLUMNS: [&str; 5] = ["psnr", "ssim", "uqi", "delta_e", "uciqe"];
pub const NO_REFERENCE_COLUMNS: [&str; 1] = ["uciqe"];

/// Per-image metric rows plus a column-mean aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    columns: Vec<String>,
    rows: Vec<(String, Vec<f64>)>,
}

impl MetricsReport {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn full_reference() -> Self {
        Self::new(&FULL_COLUMNS)
    }

    pub fn no_reference() -> Self {
        Self::new(&NO_REFERENCE_COLUMNS)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[(String, Vec<f64>)] {
        &self.rows
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(MetricError::RowWidth {
                expected: self.columns.len(),
                found: values.len(),
            });
        }
        self.rows.push((id.into(), values));
        Ok(())
    }

    /// Arithmetic mean of each column (`+inf` if any entry is infinite).
    pub fn means(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        (0..self.columns.len())
            .map(|c| self.rows.iter().map(|r| r.1[c]).sum::<f64>() / n)
            .collect()
    }

    /// `image_id,<columns>` header, one line per row, then `MEAN`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        let mut line = |id: &str, values: &[f64]| {
            s.push_str(&csv_field(id));
            for v in values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        };
        for (id, values) in &self.rows {
            line(id, values);
        }
        line("MEAN", &self.means());
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
