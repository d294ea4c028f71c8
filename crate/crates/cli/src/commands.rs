//! Subcommand implementations. Each returns a small summary so tests can
//! inspect results without parsing stdout.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;
use unir_core::io::{self, IoError, ManifestRecord};
use unir_core::metrics::{uciqe, MetricError, MetricsReport, PairMetrics};
use unir_core::network::{
    enhance as enhance_image, find_width, layer_table, param_count, NetConfig, NetError, NetWeights,
};
use unir_core::synthesis::{image_rng, sharpen_gt, synthesize_low, Adjustment, SynthError};
use unir_core::training::{EpochReport, TrainError, TrainPair, Trainer};

use crate::{CliError, EnhanceArgs, EvalArgs, InfoArgs, Settings, SynthArgs, TrainArgs};

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Tensor(_) => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(e) => e.into(),
            TrainError::Net(e) => e.into(),
            TrainError::Config(_)
            | TrainError::Undersized { .. }
            | TrainError::PairDims { .. }
            | TrainError::Checkpoint(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ["png", "ppm"].iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Image files in `dir`, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn find_mask(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "ppm"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// Writes `<stem>_low.png`, `<stem>_gt.png` and `manifest.jsonl` into the output directory.
pub fn synth(args: &SynthArgs, settings: &Settings) -> Result<SynthSummary, CliError> {
    let cfg = settings.synth;
    cfg.validate()?;
    let raws = list_images(&args.raw_dir)?;
    if raws.is_empty() {
        return Err(CliError::Input(format!(
            "no PNG or PPM images in {}",
            args.raw_dir.display()
        )));
    }
    let mut jobs = Vec::with_capacity(raws.len());
    let mut missing = Vec::new();
    for raw in &raws {
        let s = stem(raw);
        match find_mask(&args.mask_dir, &s) {
            Some(mask) => jobs.push((s, raw.clone(), mask)),
            None => missing.push(s),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Input(format!(
            "missing masks for: {}",
            missing.join(", ")
        )));
    }
    // Masks are cheap to load; rejecting empty ones up front keeps failures from leaving partial output.
    for (s, _, mask) in &jobs {
        if io::load_mask(mask)?.count() == 0 {
            return Err(CliError::Input(format!("{s}: {}", SynthError::EmptyMask)));
        }
    }
    create_dir(&args.out_dir)?;

    let params = serde_json::to_value(cfg).expect("config serialises");
    let run = |(index, (s, raw_path, mask_path)): (usize, &(String, PathBuf, PathBuf))| -> Result<ManifestRecord, CliError> {
        let raw = io::load_image(raw_path)?;
        let mask = io::load_mask(mask_path)?;
        let mut rng = image_rng(cfg.seed, index as u64);
        let out = synthesize_low(&raw, &mask, &cfg, &mut rng).map_err(|e| CliError::Input(format!("{s}: {e}")))?;
        let gt = sharpen_gt(&raw);
        let (low_name, gt_name) = (format!("{s}_low.png"), format!("{s}_gt.png"));
        io::save_image(&out.low, &args.out_dir.join(&low_name))?;
        io::save_image(&gt, &args.out_dir.join(&gt_name))?;
        let mut rec = ManifestRecord::new(s.clone(), low_name, gt_name);
        rec.mask_path = Some(mask_path.display().to_string());
        rec.synth_params = Some(params.clone());
        rec.extra.insert("adjustment".into(), json!(out.adjustment));
        rec.extra.insert("b_avg".into(), json!(out.b_avg));
        Ok(rec)
    };
    let records = pool(settings.threads)?.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(run)
            .collect::<Result<Vec<_>, _>>()
    })?;
    let manifest = args.out_dir.join("manifest.jsonl");
    io::write_manifest(&records, &manifest)?;
    let deepened = records
        .iter()
        .filter(|r| r.extra["adjustment"] == json!(Adjustment::Deepen))
        .count();
    println!(
        "synthesised {} pairs ({deepened} deepened) into {}",
        records.len(),
        args.out_dir.display()
    );
    Ok(SynthSummary { manifest, records })
}

/// Loads every pair a manifest references.
pub fn load_pairs(manifest: &Path) -> Result<Vec<TrainPair>, CliError> {
    if !manifest.is_file() {
        return Err(CliError::Input(format!(
            "manifest not found: {}",
            manifest.display()
        )));
    }
    let records = io::read_manifest(manifest)?;
    if records.is_empty() {
        return Err(CliError::Input(format!(
            "{}: manifest has no records",
            manifest.display()
        )));
    }
    let base = io::manifest_base(manifest);
    io::check_manifest_files(&records, &base)?;
    records
        .iter()
        .map(|r| {
            let low = io::load_image(&r.low(&base))?;
            let gt = io::load_image(&r.gt(&base))?;
            Ok(TrainPair::new(r.id.clone(), low, gt)?)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub reports: Vec<EpochReport>,
    pub checkpoint: PathBuf,
    pub weights: PathBuf,
    pub loss_log: PathBuf,
}

/// `epoch,loss` rows of an existing log, if any.
fn read_loss_log(path: &Path) -> Vec<(usize, String)> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let (e, v) = l.split_once(',')?;
            Some((e.parse().ok()?, v.to_string()))
        })
        .collect()
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains to the configured epoch total, writing `epoch_NNNN.ckpt` at the
/// checkpoint cadence, then `last.ckpt`, `weights.bin` and `loss_log.csv`.
pub fn train(args: &TrainArgs, settings: &Settings) -> Result<TrainSummary, CliError> {
    let pairs = load_pairs(&args.manifest)?;
    create_dir(&args.out)?;
    let log_path = args.out.join("loss_log.csv");
    let (mut trainer, mut rows) = match &args.resume {
        Some(ckpt) => {
            let mut t = Trainer::load_checkpoint(ckpt)?;
            if settings.explicit.contains("epochs") {
                t.config.epochs = settings.train.epochs;
            }
            let done = t.epoch;
            let rows: Vec<_> = read_loss_log(&log_path)
                .into_iter()
                .filter(|(e, _)| *e <= done)
                .collect();
            println!(
                "resuming {} at epoch {done} of {}",
                ckpt.display(),
                t.config.epochs
            );
            (t, rows)
        }
        None => (
            Trainer::new(settings.net.clone(), settings.train.clone())?,
            Vec::new(),
        ),
    };
    println!(
        "training {} pairs, {} parameters, batch {}, lr {}",
        pairs.len(),
        trainer.weights.param_count(),
        trainer.config.batch_size,
        trainer.config.lr
    );
    let out = args.out.clone();
    let reports = trainer.train(&pairs, |t, r| {
        println!("epoch {} loss {}", r.epoch, r.mean_loss);
        let every = t.config.checkpoint_every;
        if every > 0 && r.epoch % every == 0 {
            t.save_checkpoint(&out.join(checkpoint_name(r.epoch)))?;
        }
        Ok(())
    })?;
    rows.extend(reports.iter().map(|r| (r.epoch, r.mean_loss.to_string())));
    let mut csv = String::from("epoch,loss\n");
    for (e, v) in &rows {
        csv.push_str(&format!("{e},{v}\n"));
    }
    io::write_file(&log_path, csv.as_bytes())?;
    let checkpoint = args.out.join("last.ckpt");
    trainer.save_checkpoint(&checkpoint)?;
    let weights = args.out.join("weights.bin");
    io::save_weights(&trainer.weights, &weights)?;
    Ok(TrainSummary {
        reports,
        checkpoint,
        weights,
        loss_log: log_path,
    })
}

/// Loads a checkpoint (using its stored config) or a plain weight file (using `net`).
pub fn load_any_weights(path: &Path, net: &NetConfig) -> Result<NetWeights, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let Ok(ckpt) = io::decode_checkpoint(&bytes) {
        return Ok(Trainer::from_checkpoint(ckpt)?.weights);
    }
    let stored = io::decode_tensors(&bytes)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    io::weights_for_config(net, stored)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Enhances one image or every image in a directory; returns the written paths.
pub fn enhance(args: &EnhanceArgs, settings: &Settings) -> Result<Vec<PathBuf>, CliError> {
    let weights = load_any_weights(&args.weights, &settings.net)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if args.input.is_dir() {
        create_dir(&args.out)?;
        list_images(&args.input)?
            .into_iter()
            .map(|p| {
                let out = args.out.join(format!("{}.png", stem(&p)));
                (p, out)
            })
            .collect()
    } else if args.input.is_file() {
        if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        vec![(args.input.clone(), args.out.clone())]
    } else {
        return Err(CliError::Input(format!(
            "input not found: {}",
            args.input.display()
        )));
    };
    let apply_ccm = !args.no_ccm;
    let outputs = pool(settings.threads)?.install(|| {
        jobs.par_iter()
            .map(|(src, dst)| -> Result<PathBuf, CliError> {
                let img = io::load_image(src)?;
                let out = enhance_image(&weights, &img, apply_ccm)?;
                io::save_image(&out, dst)?;
                Ok(dst.clone())
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    println!("enhanced {} images", outputs.len());
    Ok(outputs)
}

fn report_csv(report: &MetricsReport, out: &Path) -> Result<(), CliError> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    io::write_file(out, report.to_csv().as_bytes())?;
    Ok(())
}

/// Scores manifest pairs (full reference) or a directory (UCIQE only).
pub fn eval(args: &EvalArgs, settings: &Settings) -> Result<MetricsReport, CliError> {
    let pool = pool(settings.threads)?;
    let report = if let Some(manifest) = &args.pairs {
        if !manifest.is_file() {
            return Err(CliError::Input(format!(
                "manifest not found: {}",
                manifest.display()
            )));
        }
        let records = io::read_manifest(manifest)?;
        let base = io::manifest_base(manifest);
        io::check_manifest_files(&records, &base)?;
        let rows = pool.install(|| {
            records
                .par_iter()
                .map(|r| -> Result<(String, Vec<f64>), CliError> {
                    let enhanced = io::load_image(&r.low(&base))?;
                    let reference = io::load_image(&r.gt(&base))?;
                    let m = PairMetrics::compute(&enhanced, &reference)
                        .map_err(|e| CliError::Input(format!("pair {}: {e}", r.id)))?;
                    Ok((r.id.clone(), m.values()))
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut report = MetricsReport::full_reference();
        for (id, values) in rows {
            report.push(id, values)?;
        }
        report
    } else if let Some(dir) = &args.dir {
        let files = list_images(dir)?;
        let rows = pool.install(|| {
            files
                .par_iter()
                .map(|p| -> Result<(String, f64), CliError> {
                    Ok((stem(p), uciqe(&io::load_image(p)?)))
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut report = MetricsReport::no_reference();
        for (id, v) in rows {
            report.push(id, vec![v])?;
        }
        report
    } else {
        return Err(CliError::Input(
            "one of --pairs or --dir is required".into(),
        ));
    };
    report_csv(&report, &args.out)?;
    let means: Vec<String> = report
        .columns()
        .iter()
        .zip(report.means())
        .map(|(c, m)| format!("{c}={m:.4}"))
        .collect();
    println!("{} images: {}", report.rows().len(), means.join(" "));
    Ok(report)
}

/// Layer table and parameter count, optionally with a width search.
pub fn info(args: &InfoArgs, settings: &Settings) -> Result<String, CliError> {
    let net = &settings.net;
    net.validate()?;
    let mut s = format!(
        "{:<10} {:>5} {:>7} {:>7} {:>8}  {}\n",
        "module", "convs", "kernel", "stride", "padding", "activation"
    );
    for row in layer_table(net) {
        s.push_str(&format!(
            "{:<10} {:>5} {:>7} {:>7} {:>8}  {}\n",
            row.module,
            row.conv_layers,
            format!("{0}x{0}", row.kernel),
            row.stride,
            row.padding,
            row.activation
        ));
    }
    s.push_str(&format!("base width: {}\n", net.base_width));
    s.push_str(&format!("parameters: {}\n", param_count(net)));
    if let Some(target) = args.find_width {
        let w = find_width(target, net);
        let count = param_count(&NetConfig {
            base_width: w,
            width_schedule: Vec::new(),
            ..net.clone()
        });
        s.push_str(&format!("find_width({target}): {w} ({count} parameters)\n"));
    }
    Ok(s)
}
