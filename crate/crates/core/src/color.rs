//! 8-bit RGB images and the HSV / CIELAB conversions used by synthesis and metrics.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColorError {
    #[error("buffer of {actual} bytes does not hold a {width}x{height} RGB image")]
    BadLength {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("HSV component {channel} = {value} at pixel {index} is out of range")]
    OutOfRange {
        channel: &'static str,
        value: f32,
        index: usize,
    },
}

/// Row-major interleaved RGB, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ColorError> {
        if data.len() != width * height * 3 {
            return Err(ColorError::BadLength {
                width,
                height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn same_dims(&self, other: &ImageU8) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies the `w x h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageU8 {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        ImageU8 {
            width: w,
            height: h,
            data,
        }
    }

    /// Rec.601 luma scaled to `[0, 1]`, one value per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        self.pixels()
            .map(|[r, g, b]| {
                ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0) as f32
            })
            .collect()
    }
}

/// Planar HSV: hue in degrees `[0, 360)`, saturation in `[0, 1]`, value in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    width: usize,
    height: usize,
    h: Vec<f32>,
    s: Vec<f32>,
    v: Vec<f32>,
}

impl HsvImage {
    pub fn new(
        width: usize,
        height: usize,
        h: Vec<f32>,
        s: Vec<f32>,
        v: Vec<f32>,
    ) -> Result<Self, ColorError> {
        let n = width * height;
        if h.len() != n || s.len() != n || v.len() != n {
            return Err(ColorError::BadLength {
                width,
                height,
                actual: h.len().min(s.len()).min(v.len()),
            });
        }
        let checks: [(&'static str, &[f32], f32, bool); 3] = [
            ("H", &h, 360.0, false),
            ("S", &s, 1.0, true),
            ("V", &v, 255.0, true),
        ];
        for (channel, values, hi, inclusive) in checks {
            for (index, &value) in values.iter().enumerate() {
                let ok = value >= 0.0 && if inclusive { value <= hi } else { value < hi };
                if !ok {
                    return Err(ColorError::OutOfRange {
                        channel,
                        value,
                        index,
                    });
                }
            }
        }
        Ok(Self {
            width,
            height,
            h,
            s,
            v,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn hue(&self) -> &[f32] {
        &self.h
    }

    pub fn saturation(&self) -> &[f32] {
        &self.s
    }

    pub fn value(&self) -> &[f32] {
        &self.v
    }

    /// Replaces the V channel, clamping to `[0, 255]`.
    pub fn with_value(mut self, v: Vec<f32>) -> Result<Self, ColorError> {
        if v.len() != self.v.len() {
            return Err(ColorError::BadLength {
                width: self.width,
                height: self.height,
                actual: v.len(),
            });
        }
        self.v = v.into_iter().map(|x| x.clamp(0.0, 255.0)).collect();
        Ok(self)
    }
}

pub fn rgb_to_hsv_pixel([r, g, b]: [u8; 3]) -> (f32, f32, f32) {
    let (rf, gf, bf) = (r as f32, g as f32, b as f32);
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == rf {
        60.0 * ((gf - bf) / delta).rem_euclid(6.0)
    } else if max == gf {
        60.0 * ((bf - rf) / delta + 2.0)
    } else {
        60.0 * ((rf - gf) / delta + 4.0)
    };
    // rem_euclid can land on exactly 360 through rounding
    let h = if h >= 360.0 { 0.0 } else { h };
    (h, s, max)
}

pub fn hsv_to_rgb_pixel(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f32| (u + m).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

pub fn rgb_to_hsv(img: &ImageU8) -> HsvImage {
    let n = img.width * img.height;
    let (mut h, mut s, mut v) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for px in img.pixels() {
        let (ph, ps, pv) = rgb_to_hsv_pixel(px);
        h.push(ph);
        s.push(ps);
        v.push(pv);
    }
    HsvImage {
        width: img.width,
        height: img.height,
        h,
        s,
        v,
    }
}

pub fn hsv_to_rgb(img: &HsvImage) -> ImageU8 {
    let mut data = Vec::with_capacity(img.h.len() * 3);
    for i in 0..img.h.len() {
        data.extend_from_slice(&hsv_to_rgb_pixel(img.h[i], img.s[i], img.v[i]));
    }
    ImageU8 {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Linear sRGB to XYZ (D65, 2° observer).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Reference white as the image of RGB (1, 1, 1), so neutral greys get `a = b = 0`.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIE L*a*b* of one sRGB pixel.
pub fn srgb_pixel_to_lab([r, g, b]: [u8; 3]) -> [f64; 3] {
    let (r, g, b) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let white = white();
    let [x, y, z] = RGB_TO_XYZ.map(|m| m[0] * r + m[1] * g + m[2] * b);
    let (fx, fy, fz) = (
        lab_f(x / white[0]),
        lab_f(y / white[1]),
        lab_f(z / white[2]),
    );
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Per-pixel `(L, a, b)`, row-major.
pub fn srgb_to_lab(img: &ImageU8) -> Vec<[f64; 3]> {
    img.pixels().map(srgb_pixel_to_lab).collect()
}
