//! Supervised training: random paired patches, Adam and resumable checkpoints.
//!
//! The loss compares the network's sigmoid output (before contrast
//! correction) with the ground truth scaled to `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::autograd::Tape;
use crate::color::ImageU8;
use crate::io::{self, CheckpointData, IoError};
use crate::network::{images_to_tensor, unirnet_forward, NetConfig, NetError, NetWeights};
use crate::objective::{total_loss, LossError, LossWeights};
use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{id}: image {width}x{height} is smaller than the {patch}x{patch} patch")]
    Undersized {
        id: String,
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("{id}: low and ground-truth images differ in size")]
    PairDims { id: String },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: loss is {0}")]
    Diverged(f32),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epoch cadence for checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            patch_size: 128,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 10,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(TrainError::Config(
                "batch_size and patch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(TrainError::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using each parameter's stored gradient.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(TrainError::MissingGrad(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j] as f64;
            let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * g;
            let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = hp.lr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// A low-light input with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub low: ImageU8,
    pub gt: ImageU8,
}

impl TrainPair {
    pub fn new(id: impl Into<String>, low: ImageU8, gt: ImageU8) -> Result<Self> {
        let id = id.into();
        if !low.same_dims(&gt) {
            return Err(TrainError::PairDims { id });
        }
        Ok(Self { id, low, gt })
    }
}

/// The same uniformly placed `patch x patch` crop of both images.
pub fn sample_patch<R: Rng + ?Sized>(
    pair: &TrainPair,
    patch: usize,
    rng: &mut R,
) -> Result<(ImageU8, ImageU8)> {
    let (w, h) = (pair.low.width(), pair.low.height());
    if !pair.low.same_dims(&pair.gt) {
        return Err(TrainError::PairDims {
            id: pair.id.clone(),
        });
    }
    if w < patch || h < patch {
        return Err(TrainError::Undersized {
            id: pair.id.clone(),
            width: w,
            height: h,
            patch,
        });
    }
    let y0 = rng.gen_range(0..=h - patch);
    let x0 = rng.gen_range(0..=w - patch);
    Ok((
        pair.low.crop(x0, y0, patch, patch),
        pair.gt.crop(x0, y0, patch, patch),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub step_losses: Vec<f32>,
}

/// Loss log as CSV `epoch,loss`.
pub fn loss_log_csv(reports: &[EpochReport]) -> String {
    let mut s = String::from("epoch,loss\n");
    for r in reports {
        s.push_str(&format!("{},{}\n", r.epoch, r.mean_loss));
    }
    s
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub weights: NetWeights,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh weights initialised from `config.seed`.
    pub fn new(net: NetConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = NetWeights::init(net, config.seed)?;
        Self::with_weights(weights, config)
    }

    pub fn with_weights(weights: NetWeights, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(weights.params()),
            weights,
            config,
            epoch: 0,
            rng,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Loss on one batch and its gradients, without updating anything.
    pub fn batch_loss(&mut self, low: &[&ImageU8], gt: &[&ImageU8]) -> Result<f32> {
        let x = images_to_tensor(low)?;
        let y = images_to_tensor(gt)?;
        let mut tape = Tape::new();
        let vars = self.weights.bind(&mut tape);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let pred = unirnet_forward(&mut tape, &xv, &vars, self.weights.config())?;
        let loss = total_loss(&mut tape, &pred, &yv, &self.config.loss, None)?;
        let value = loss.item().expect("loss is scalar");
        let grads = tape.backward(&loss)?;
        self.weights.absorb_grads(&vars, &grads)?;
        Ok(value)
    }

    /// One optimisation step on a batch; returns the pre-update loss.
    pub fn step(&mut self, low: &[&ImageU8], gt: &[&ImageU8]) -> Result<f32> {
        let loss = self.batch_loss(low, gt)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged(loss));
        }
        adam_step(
            self.weights.params_mut(),
            &mut self.adam,
            &self.config.adam(),
        )?;
        Ok(loss)
    }

    /// One shuffled pass over `data` in batches of `batch_size` (the last may be short).
    pub fn run_epoch(&mut self, data: &[TrainPair]) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut step_losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let mut lows = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (l, g) = sample_patch(&data[i], self.config.patch_size, &mut self.rng)?;
                lows.push(l);
                gts.push(g);
            }
            let lr: Vec<&ImageU8> = lows.iter().collect();
            let gr: Vec<&ImageU8> = gts.iter().collect();
            step_losses.push(self.step(&lr, &gr)?);
        }
        self.epoch += 1;
        let mean_loss =
            step_losses.iter().map(|&l| l as f64).sum::<f64>() / step_losses.len() as f64;
        Ok(EpochReport {
            epoch: self.epoch,
            mean_loss,
            step_losses,
        })
    }

    /// Runs epochs until `config.epochs`, calling `on_epoch` after each.
    pub fn train<F>(&mut self, data: &[TrainPair], mut on_epoch: F) -> Result<Vec<EpochReport>>
    where
        F: FnMut(&Trainer, &EpochReport) -> Result<()>,
    {
        for pair in data {
            if pair.low.width() < self.config.patch_size
                || pair.low.height() < self.config.patch_size
            {
                return Err(TrainError::Undersized {
                    id: pair.id.clone(),
                    width: pair.low.width(),
                    height: pair.low.height(),
                    patch: self.config.patch_size,
                });
            }
        }
        let mut reports = Vec::new();
        while self.epoch < self.config.epochs {
            let report = self.run_epoch(data)?;
            on_epoch(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let mut moments = Vec::with_capacity(2 * self.adam.m.len());
        for (prefix, bufs) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (p, buf) in self.weights.params().iter().zip(bufs) {
                let t = Tensor::new(p.tensor.shape().to_vec(), buf.clone())
                    .expect("moment matches parameter");
                moments.push(Parameter::new(format!("{prefix}.{}", p.name), t));
            }
        }
        let seed: String = self
            .rng
            .get_seed()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let trailer = json!({
            "step": self.adam.step,
            "epoch": self.epoch,
            "train_config": self.config,
            "net_config": self.weights.config(),
            "rng": {
                "seed": seed,
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
        });
        CheckpointData {
            weights: self.weights.params().to_vec(),
            moments,
            trailer,
        }
    }

    pub fn from_checkpoint(data: CheckpointData) -> Result<Self> {
        let bad =
            |what: &str| TrainError::Checkpoint(format!("trailer field {what} missing or invalid"));
        let t = &data.trailer;
        let net: NetConfig =
            serde_json::from_value(t["net_config"].clone()).map_err(|_| bad("net_config"))?;
        let config: TrainConfig =
            serde_json::from_value(t["train_config"].clone()).map_err(|_| bad("train_config"))?;
        let step = t["step"].as_u64().ok_or_else(|| bad("step"))?;
        let epoch = t["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
        let seed_hex = t["rng"]["seed"].as_str().ok_or_else(|| bad("rng.seed"))?;
        let stream = t["rng"]["stream"]
            .as_u64()
            .ok_or_else(|| bad("rng.stream"))?;
        let word_pos: u128 = t["rng"]["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("rng.word_pos"))?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(bad("rng.seed"));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b =
                u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng.seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let weights = io::weights_for_config(&net, data.weights)?;
        let n = weights.params().len();
        if data.moments.len() != 2 * n {
            return Err(TrainError::Checkpoint(format!(
                "expected {} moment tensors, found {}",
                2 * n,
                data.moments.len()
            )));
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, moment) in data.moments.into_iter().enumerate() {
            let p = &weights.params()[i % n];
            let prefix = if i < n { "m" } else { "v" };
            if moment.name != format!("{prefix}.{}", p.name)
                || moment.tensor.shape() != p.tensor.shape()
            {
                return Err(TrainError::Checkpoint(format!(
                    "moment tensor {} does not match {}",
                    moment.name, p.name
                )));
            }
            if i < n {
                m.push(moment.tensor.into_data());
            } else {
                v.push(moment.tensor.into_data());
            }
        }
        config.validate()?;
        Ok(Self {
            weights,
            adam: AdamState { m, v, step },
            config,
            epoch,
            rng,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = io::encode_checkpoint(&self.to_checkpoint())?;
        Ok(io::write_file(path, &bytes)?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint(io::decode_checkpoint(&bytes)?)
    }
}
