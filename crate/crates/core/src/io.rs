//! File formats: 8-bit PNG and binary PPM images, the little-endian weight
//! file, training checkpoints and the JSONL dataset manifest.
//!
//! Weight file layout (all integers `u32` little-endian):
//!
//! ```text
//! "UNIR" version count { name_len name ndim dims[ndim] f32[prod(dims)] }*
//! ```
//!
//! A checkpoint is a weight file followed by a second `count { entry }*`
//! section holding optimizer moments and a `u32` length-prefixed JSON trailer.

use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::color::ImageU8;
use crate::network::{param_specs, NetConfig, NetError, NetWeights};
use crate::synthesis::BinaryMask;
use crate::tensor::{Parameter, Tensor};

pub const MAGIC: &[u8; 4] = b"UNIR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("UnsupportedDepth: {0}-bit samples are not supported")]
    UnsupportedDepth(u32),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated data while reading {0}")]
    Truncated(&'static str),
    #[error("PNG decode error: {0}")]
    Png(String),
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("BadMagic: expected \"UNIR\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown weight file version {0}")]
    UnknownVersion(u32),
    #[error("tensor {name}: stored shape {stored:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        stored: Vec<usize>,
    },
    #[error("tensor {name}: expected at position {index}, found {found:?}")]
    NameMismatch {
        index: usize,
        name: String,
        found: Option<String>,
    },
    #[error("weight file holds {stored} tensors, config expects {expected}")]
    CountMismatch { expected: usize, stored: usize },
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("invalid tensor entry: {0}")]
    BadEntry(String),
    #[error("manifest line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("DuplicateId: {id} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("manifest record {id}: missing file {path}")]
    MissingFile { id: String, path: PathBuf },
    #[error("checkpoint trailer: {0}")]
    Trailer(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------- images

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Loads a PNG (8-bit gray, gray+alpha, RGB, RGBA or palette) or a binary PPM.
/// Alpha is dropped and gray is replicated to three channels.
pub fn load_image(path: &Path) -> Result<ImageU8> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        decode_png(&bytes)
    }
}

pub fn save_image(img: &ImageU8, path: &Path) -> Result<()> {
    let bytes = if is_ppm(path) {
        encode_ppm(img)
    } else {
        encode_png(img)?
    };
    write_file(path, &bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageU8> {
    use png::{BitDepth, ColorType, Transformations};
    let png_err = |e: png::DecodingError| IoError::Png(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    if reader.info().bit_depth == BitDepth::Sixteen {
        return Err(IoError::UnsupportedDepth(16));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| IoError::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let channels = match frame.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(IoError::UnsupportedFormat(format!("{other:?}"))),
    };
    if frame.bit_depth != BitDepth::Eight {
        return Err(IoError::UnsupportedDepth(frame.bit_depth as u32));
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * frame.line_size..][..w * channels];
        for px in row.chunks_exact(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(ImageU8::new(w, h, rgb).expect("buffer sized from header"))
}

pub fn encode_png(img: &ImageU8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| IoError::Png(e.to_string()))?;
        writer
            .write_image_data(img.data())
            .map_err(|e| IoError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(IoError::Truncated("PPM header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::Ppm(format!("expected a number at byte {start}")))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageU8> {
    if !bytes.starts_with(b"P6") {
        return Err(IoError::Ppm("missing P6 signature".into()));
    }
    let mut pos = 2;
    let w = ppm_token(bytes, &mut pos)?;
    let h = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(if maxval > 255 {
            IoError::UnsupportedDepth(16)
        } else {
            IoError::Ppm(format!("maxval {maxval} is not 255"))
        });
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(IoError::Ppm("missing separator after header".into()));
    }
    pos += 1;
    let n = w * h * 3;
    let data = bytes
        .get(pos..pos + n)
        .ok_or(IoError::Truncated("PPM pixels"))?;
    Ok(ImageU8::new(w, h, data.to_vec()).expect("length checked"))
}

pub fn encode_ppm(img: &ImageU8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

/// Loads a mask image; a pixel is selected when any channel exceeds 127.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = load_image(path)?;
    Ok(BinaryMask::from_fn(img.width(), img.height(), |x, y| {
        img.pixel(x, y).iter().any(|&c| c > 127)
    }))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let gray = mask.to_gray();
    let img = ImageU8::from_fn(mask.width(), mask.height(), |x, y| {
        [gray[y * mask.width() + x]; 3]
    });
    save_image(&img, path)
}

// ---------------------------------------------------------------- tensors

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(IoError::Truncated(what))?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(IoError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

/// Appends `count { entry }*` for `params`.
fn write_entries(out: &mut Vec<u8>, params: &[Parameter]) {
    push_u32(out, params.len());
    for p in params {
        push_u32(out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        push_u32(out, p.tensor.shape().len());
        for &d in p.tensor.shape() {
            push_u32(out, d);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_entries(r: &mut ByteReader) -> Result<Vec<Parameter>> {
    let count = r.u32("entry count")? as usize;
    let mut seen = HashSet::new();
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| IoError::BadEntry("name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(IoError::DuplicateName(name));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IoError::BadEntry(format!("{name}: dims overflow")))?;
        let data: Vec<f32> = r
            .take(bytes, "tensor payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| IoError::BadEntry(e.to_string()))?;
        params.push(Parameter::new(name, tensor));
    }
    Ok(params)
}

fn read_header(r: &mut ByteReader) -> Result<()> {
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    match r.u32("version")? {
        FORMAT_VERSION => Ok(()),
        v => Err(IoError::UnknownVersion(v)),
    }
}

/// Serialises named tensors in the weight file format.
pub fn encode_tensors(params: &[Parameter]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, FORMAT_VERSION as usize);
    write_entries(&mut out, params);
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Parameter>> {
    let mut r = ByteReader { bytes, pos: 0 };
    read_header(&mut r)?;
    read_entries(&mut r)
}

/// Checks stored tensors against the parameters `config` implies, reporting
/// the first entry whose name or shape disagrees.
pub fn weights_for_config(config: &NetConfig, stored: Vec<Parameter>) -> Result<NetWeights> {
    let specs = param_specs(config);
    for (i, spec) in specs.iter().enumerate() {
        let Some(p) = stored.get(i) else {
            return Err(IoError::NameMismatch {
                index: i,
                name: spec.name.clone(),
                found: None,
            });
        };
        if p.name != spec.name {
            return Err(IoError::NameMismatch {
                index: i,
                name: spec.name.clone(),
                found: Some(p.name.clone()),
            });
        }
        if p.tensor.shape() != spec.shape.as_slice() {
            return Err(IoError::ShapeMismatch {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                stored: p.tensor.shape().to_vec(),
            });
        }
    }
    if stored.len() != specs.len() {
        return Err(IoError::CountMismatch {
            expected: specs.len(),
            stored: stored.len(),
        });
    }
    Ok(NetWeights::from_params(config.clone(), stored)?)
}

pub fn save_weights(weights: &NetWeights, path: &Path) -> Result<()> {
    write_file(path, &encode_tensors(weights.params()))
}

pub fn load_weights(path: &Path, config: &NetConfig) -> Result<NetWeights> {
    weights_for_config(config, decode_tensors(&read_file(path)?)?)
}

/// Raw checkpoint sections.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub weights: Vec<Parameter>,
    pub moments: Vec<Parameter>,
    pub trailer: Value,
}

pub fn encode_checkpoint(data: &CheckpointData) -> Result<Vec<u8>> {
    let mut out = encode_tensors(&data.weights);
    write_entries(&mut out, &data.moments);
    let json = serde_json::to_vec(&data.trailer).map_err(|e| IoError::Trailer(e.to_string()))?;
    push_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = ByteReader { bytes, pos: 0 };
    read_header(&mut r)?;
    let weights = read_entries(&mut r)?;
    let moments = read_entries(&mut r)?;
    let len = r.u32("trailer length")? as usize;
    let json = r.take(len, "trailer")?;
    if !r.rest().is_empty() {
        return Err(IoError::Trailer(format!(
            "{} trailing bytes",
            r.rest().len()
        )));
    }
    let trailer = serde_json::from_slice(json).map_err(|e| IoError::Trailer(e.to_string()))?;
    Ok(CheckpointData {
        weights,
        moments,
        trailer,
    })
}

// ---------------------------------------------------------------- manifest

/// One dataset pair. Keys other than the known ones are kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub low_path: String,
    pub gt_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_params: Option<Value>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ManifestRecord {
    pub fn new(
        id: impl Into<String>,
        low_path: impl Into<String>,
        gt_path: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            low_path: low_path.into(),
            gt_path: gt_path.into(),
            mask_path: None,
            synth_params: None,
            extra: Map::new(),
        }
    }

    pub fn low(&self, base: &Path) -> PathBuf {
        base.join(&self.low_path)
    }

    pub fn gt(&self, base: &Path) -> PathBuf {
        base.join(&self.gt_path)
    }
}

pub fn encode_manifest(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("manifest records serialise"));
        s.push('\n');
    }
    s
}

/// Parses JSONL; blank lines are ignored and line numbers are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out: Vec<ManifestRecord> = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| IoError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.insert(rec.id.clone()) {
            return Err(IoError::DuplicateId {
                id: rec.id,
                line: line_no,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    write_file(path, encode_manifest(records).as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text)
}

/// Directory that relative manifest paths are resolved against.
pub fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Confirms every referenced image exists.
pub fn check_manifest_files(records: &[ManifestRecord], base: &Path) -> Result<()> {
    for r in records {
        for p in [r.low(base), r.gt(base)] {
            if !p.is_file() {
                return Err(IoError::MissingFile {
                    id: r.id.clone(),
                    path: p,
                });
            }
        }
    }
    Ok(())
}
