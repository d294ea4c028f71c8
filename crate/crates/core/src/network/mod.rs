//! The restoration network: illumination-enhancement blocks (IEB), windowed
//! multi-head attention blocks (AB), a 3x3 decoder convolution, the sigmoid
//! visual-refinement module (VRM) and the closed-form contrast-correction
//! module (CCM).
//!
//! Block order: IEB → AB → IEB → AB → IEB → IEB → Conv3x3 → VRM, followed by
//! CCM at inference. Every convolution has stride 1 and "same" padding, so
//! the output has the input's spatial size.

mod attention;
mod ccm;

pub use attention::{ab_forward, windowed_attention, AbVars, AttnWindow};
pub use ccm::{ccm_forward, ccm_terms, CcmTerms};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::color::ImageU8;
use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("expected {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("input must be N x 3 x H x W, got {0:?}")]
    InputShape(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_width: usize,
    /// Output widths of the four IEBs; empty means `base_width` everywhere.
    pub width_schedule: Vec<usize>,
    pub n_heads: usize,
    pub ffn_expansion: usize,
    pub attn_window: usize,
    /// Feature maps with at most this many pixels attend globally.
    pub global_attn_tokens: usize,
    pub gamma_ccm: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            width_schedule: Vec::new(),
            n_heads: 4,
            ffn_expansion: 3,
            attn_window: 16,
            global_attn_tokens: 4096,
            gamma_ccm: 1.4,
        }
    }
}

const IEB_COUNT: usize = 4;

impl NetConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            base_width: width,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        if self.width_schedule.is_empty() {
            vec![self.base_width; IEB_COUNT]
        } else {
            self.width_schedule.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.len() != IEB_COUNT {
            return Err(NetError::Config(format!(
                "width_schedule needs {IEB_COUNT} entries"
            )));
        }
        if self.n_heads == 0 || self.ffn_expansion == 0 || self.attn_window == 0 {
            return Err(NetError::Config(
                "n_heads, ffn_expansion and attn_window must be positive".into(),
            ));
        }
        if let Some(w) = widths.iter().find(|&&w| w == 0 || w % self.n_heads != 0) {
            return Err(NetError::Config(format!(
                "block width {w} is not a positive multiple of n_heads {}",
                self.n_heads
            )));
        }
        if !(self.gamma_ccm > 0.0) {
            return Err(NetError::Config("gamma_ccm must be positive".into()));
        }
        Ok(())
    }

    pub fn attn(&self) -> AttnWindow {
        AttnWindow {
            window: self.attn_window,
            global_tokens: self.global_attn_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Ieb { cin: usize, cout: usize },
    Ab { channels: usize },
    Conv { cin: usize, cout: usize },
    Vrm { cin: usize, cout: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
}

/// One row of the per-module layer table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub module: &'static str,
    pub conv_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: &'static str,
}

impl BlockKind {
    pub fn layer_row(&self) -> LayerRow {
        let (module, conv_layers, kernel, activation) = match self {
            BlockKind::Ieb { .. } => ("IEB", 2, 3, "ReLU"),
            // the two feed-forward convolutions; Q/K/V projections are listed with the attention
            BlockKind::Ab { .. } => ("AB", 2, 1, "ReLU"),
            BlockKind::Conv { .. } => ("Conv 3x3", 1, 3, "-"),
            BlockKind::Vrm { .. } => ("VRM", 1, 3, "Sigmoid"),
        };
        LayerRow {
            module,
            conv_layers,
            kernel,
            stride: 1,
            padding: kernel / 2,
            activation,
        }
    }
}

pub fn blocks(cfg: &NetConfig) -> Vec<Block> {
    let w = cfg.widths();
    let b = |name: &str, kind| Block {
        name: name.to_string(),
        kind,
    };
    vec![
        b("ieb1", BlockKind::Ieb { cin: 3, cout: w[0] }),
        b("ab1", BlockKind::Ab { channels: w[0] }),
        b(
            "ieb2",
            BlockKind::Ieb {
                cin: w[0],
                cout: w[1],
            },
        ),
        b("ab2", BlockKind::Ab { channels: w[1] }),
        b(
            "ieb3",
            BlockKind::Ieb {
                cin: w[1],
                cout: w[2],
            },
        ),
        b(
            "ieb4",
            BlockKind::Ieb {
                cin: w[2],
                cout: w[3],
            },
        ),
        b("conv", BlockKind::Conv { cin: w[3], cout: 3 }),
        b("vrm", BlockKind::Vrm { cin: 3, cout: 3 }),
    ]
}

/// Distinct layer-table rows in network order.
pub fn layer_table(cfg: &NetConfig) -> Vec<LayerRow> {
    let mut rows: Vec<LayerRow> = Vec::new();
    for block in blocks(cfg) {
        let row = block.kind.layer_row();
        if !rows.contains(&row) {
            rows.push(row);
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used for initialisation.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Weight and bias specs of one convolution.
pub fn conv_specs(
    prefix: &str,
    suffix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
) -> Vec<ParamSpec> {
    let fan_in = cin * k * k;
    let mut v = vec![ParamSpec {
        name: format!("{prefix}.w{suffix}"),
        shape: vec![cout, cin, k, k],
        fan_in,
    }];
    if bias {
        v.push(ParamSpec {
            name: format!("{prefix}.b{suffix}"),
            shape: vec![cout],
            fan_in,
        });
    }
    v
}

/// Every parameter of the network in canonical order.
pub fn param_specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for block in blocks(cfg) {
        let n = &block.name;
        match block.kind {
            BlockKind::Ieb { cin, cout } => {
                specs.extend(conv_specs(n, "1", cin, cout, 3, true));
                specs.extend(conv_specs(n, "2", cout, cout, 3, true));
                if cin != cout {
                    specs.extend(conv_specs(n, "m", cin, cout, 1, true));
                }
            }
            BlockKind::Ab { channels: c } => {
                let hidden = c * cfg.ffn_expansion;
                specs.extend(conv_specs(n, "q", c, c, 1, false));
                specs.extend(conv_specs(n, "k", c, c, 1, false));
                specs.extend(conv_specs(n, "v", c, c, 1, false));
                specs.extend(conv_specs(n, "a", c, hidden, 1, true));
                specs.extend(conv_specs(n, "b", hidden, c, 1, true));
            }
            BlockKind::Conv { cin, cout } | BlockKind::Vrm { cin, cout } => {
                specs.extend(conv_specs(n, "", cin, cout, 3, true));
            }
        }
    }
    specs
}

pub fn param_count(cfg: &NetConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Uniform width (a multiple of `n_heads`, at most 1024) whose parameter
/// count is nearest `target`; ties go to the smaller width.
pub fn find_width(target: usize, template: &NetConfig) -> usize {
    let step = template.n_heads.max(1);
    (1..=1024 / step)
        .map(|i| i * step)
        .min_by_key(|&w| {
            let cfg = NetConfig {
                base_width: w,
                width_schedule: Vec::new(),
                ..template.clone()
            };
            param_count(&cfg).abs_diff(target)
        })
        .unwrap_or(step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    config: NetConfig,
    params: Vec<Parameter>,
}

impl NetWeights {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let bound = 1.0 / (spec.fan_in as f32).sqrt();
                let t = Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound));
                Parameter::new(spec.name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| Parameter::new(spec.name, Tensor::zeros(&spec.shape)))
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles weights from named tensors, checking names, order and shapes.
    pub fn from_params(config: NetConfig, params: Vec<Parameter>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(NetError::ParamCount {
                expected: specs.len(),
                actual: params.len(),
            });
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                return Err(NetError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: p.tensor.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Registers every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect()
    }

    /// Copies gradients for `vars` (as returned by [`NetWeights::bind`]) into
    /// the parameters' grad slots.
    pub fn absorb_grads(&mut self, vars: &[Var], grads: &crate::autograd::Gradients) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(vars) {
            let g = grads
                .get(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }
}

pub struct IebVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub proj: Option<(Var, Var)>,
}

/// `ReLU(conv(ReLU(conv(x, W1)), W2) + R)` with `R` the identity or a 1x1 projection.
pub fn ieb_forward(tape: &mut Tape, x: &Var, w: &IebVars) -> Result<Var> {
    let y1 = tape.conv2d(x, &w.w1, Some(&w.b1), 1, 1)?;
    let y1 = tape.relu(&y1)?;
    let y2 = tape.conv2d(&y1, &w.w2, Some(&w.b2), 1, 1)?;
    let residual = match &w.proj {
        Some((wm, bm)) => tape.conv2d(x, wm, Some(bm), 1, 0)?,
        None => x.clone(),
    };
    let z = tape.add(&y2, &residual)?;
    Ok(tape.relu(&z)?)
}

/// `sigmoid(conv3x3(x, Ws))`.
pub fn vrm_forward(tape: &mut Tape, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let z = tape.conv2d(x, w, Some(b), 1, 1)?;
    Ok(tape.sigmoid(&z)?)
}

/// Network output before contrast correction, i.e. the VRM stage.
///
/// `vars` holds the parameters in [`param_specs`] order.
pub fn unirnet_forward(tape: &mut Tape, x: &Var, vars: &[Var], cfg: &NetConfig) -> Result<Var> {
    match x.shape() {
        [_, 3, _, _] => {}
        s => return Err(NetError::InputShape(s.to_vec())),
    }
    let expected = param_specs(cfg).len();
    if vars.len() != expected {
        return Err(NetError::ParamCount {
            expected,
            actual: vars.len(),
        });
    }
    let mut it = vars.iter().cloned();
    let mut next = || it.next().expect("length checked above");
    let mut h = x.clone();
    for block in blocks(cfg) {
        h = match block.kind {
            BlockKind::Ieb { cin, cout } => {
                let (w1, b1, w2, b2) = (next(), next(), next(), next());
                let proj = (cin != cout).then(|| (next(), next()));
                ieb_forward(
                    tape,
                    &h,
                    &IebVars {
                        w1,
                        b1,
                        w2,
                        b2,
                        proj,
                    },
                )?
            }
            BlockKind::Ab { .. } => {
                let w = AbVars {
                    wq: next(),
                    wk: next(),
                    wv: next(),
                    wa: next(),
                    ba: next(),
                    wb: next(),
                    bb: next(),
                };
                ab_forward(tape, &h, &w, cfg.n_heads, cfg.attn())?
            }
            BlockKind::Conv { .. } => {
                let (w, b) = (next(), next());
                tape.conv2d(&h, &w, Some(&b), 1, 1)?
            }
            BlockKind::Vrm { .. } => {
                let (w, b) = (next(), next());
                vrm_forward(tape, &h, &w, &b)?
            }
        };
    }
    Ok(h)
}

/// Images to an `N x 3 x H x W` tensor scaled to `[0, 1]`. All images must share dimensions.
pub fn images_to_tensor(images: &[&ImageU8]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| NetError::InputShape(vec![0]))?;
    let (w, h) = (first.width(), first.height());
    let plane = w * h;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if !img.same_dims(first) {
            return Err(NetError::InputShape(vec![n, 3, img.height(), img.width()]));
        }
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * plane + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// Inverse of [`images_to_tensor`]: `round(v * 255)` clamped to `[0, 255]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageU8>> {
    let (n, c, h, w) = t.dims4("tensor_to_images")?;
    if c != 3 {
        return Err(NetError::InputShape(t.shape().to_vec()));
    }
    let plane = h * w;
    let d = t.data();
    Ok((0..n)
        .map(|i| {
            let mut bytes = Vec::with_capacity(plane * 3);
            for p in 0..plane {
                for ch in 0..3 {
                    bytes.push(
                        (d[(i * 3 + ch) * plane + p] * 255.0)
                            .round()
                            .clamp(0.0, 255.0) as u8,
                    );
                }
            }
            ImageU8::new(w, h, bytes).expect("size computed from dims")
        })
        .collect())
}

/// Runs the network without recording, optionally followed by CCM.
pub fn infer(weights: &NetWeights, x: &Tensor, apply_ccm: bool) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let vars = weights.bind(&mut tape);
    let input = tape.constant(x.clone());
    let out = unirnet_forward(&mut tape, &input, &vars, weights.config())?;
    let out = out.value().clone();
    Ok(if apply_ccm {
        ccm_forward(&out, weights.config().gamma_ccm)?
    } else {
        out
    })
}

/// Enhances one 8-bit image.
pub fn enhance(weights: &NetWeights, img: &ImageU8, apply_ccm: bool) -> Result<ImageU8> {
    let x = images_to_tensor(&[img])?;
    let y = infer(weights, &x, apply_ccm)?;
    Ok(tensor_to_images(&y)?.remove(0))
}
