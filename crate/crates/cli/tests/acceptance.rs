//! Acceptance run: prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test -p unir-cli --test acceptance -- C3 C5` runs a subset.

#[path = "../../core/tests/fixtures/mod.rs"]
mod fixtures;
#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::error::Error;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::Rng;
use unir_cli::{commands, Cli, Command as Sub};
use unir_core::color::{rgb_to_hsv, ImageU8};
use unir_core::io::{
    decode_checkpoint, decode_png, decode_ppm, decode_tensors, encode_checkpoint, encode_manifest,
    encode_png, encode_ppm, encode_tensors, load_mask, load_weights, parse_manifest, save_mask,
    ManifestRecord,
};
use unir_core::metrics::{delta_e, psnr, ssim_metric, uciqe, uqi};
use unir_core::network::{
    ccm_forward, ccm_terms, enhance, unirnet_forward, NetConfig, NetError, NetWeights,
};
use unir_core::objective::{l1_loss, ssim_loss, total_loss, LossWeights};
use unir_core::synthesis::{
    guided_filter, masked_mean_brightness, sharpen_gt, synthesize_low_forced, Adjustment,
    BinaryMask, SynthConfig,
};
use unir_core::tensor::TensorError;
use unir_core::training::{TrainConfig, TrainPair, Trainer};
use unir_core::{grad_check, GradCheckReport, Tape, Tensor, Var};

use oracles::{random_tensor, related_pair, rng};

type Check = Result<String, Box<dyn Error>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+).into());
        }
    };
}

fn net_error(e: NetError) -> TensorError {
    match e {
        NetError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), Box<dyn Error>> {
    ensure!(
        elapsed < limit,
        "{what} took {elapsed:.1?}, limit {limit:?}"
    );
    Ok(())
}

/// A check only counts when at most 1% of its entries had a kink on both sides.
fn scored(report: &GradCheckReport) -> bool {
    report.unscored * 100 <= report.entries
}

fn c1_gradients() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let (mut cases, mut straddled, mut entries, mut redraws) = (0, 0, 0, 0);
    let cfg = NetConfig {
        base_width: 4,
        n_heads: 2,
        attn_window: 8,
        ..NetConfig::default()
    };
    let mut draw = 100u64;
    for trial in 0..5u64 {
        let seed = 100 + trial;
        for case in fixtures::op_cases(rng(seed), seed) {
            let report = grad_check(|t, v| (case.forward)(t, v), &case.params, 1e-3)?;
            ensure!(
                scored(&report),
                "{} (seed {seed}): {} of {} entries unscored",
                case.name,
                report.unscored,
                report.entries
            );
            ensure!(
                report.max_rel_error <= 1e-3,
                "{} (seed {seed}): {:.3e}",
                case.name,
                report.max_rel_error
            );
            worst = worst.max(report.max_rel_error);
            cases += 1;
        }

        let report = loop {
            let weights = NetWeights::init(cfg.clone(), draw)?;
            let mut params = vec![random_tensor(&mut rng(draw), &[1, 3, 8, 8], 0.0, 1.0)];
            params.extend(weights.params().iter().map(|p| p.tensor.clone()));
            let report = grad_check(
                |tape, v| {
                    let out = unirnet_forward(tape, &v[0], &v[1..], &cfg).map_err(net_error)?;
                    fixtures::project(tape, &out, draw)
                },
                &params,
                1e-3,
            )?;
            draw += 1;
            if scored(&report) {
                break report;
            }
            redraws += 1;
            ensure!(
                redraws <= 10,
                "more than 10 network draws with kinks on both sides of the stencil"
            );
        };
        ensure!(
            report.max_rel_error <= 1e-3,
            "network (draw {}): {:.3e} at {:?}",
            draw - 1,
            report.max_rel_error,
            report.worst
        );
        worst = worst.max(report.max_rel_error);
        straddled += report.straddled;
        entries += report.entries;
    }
    within(start.elapsed(), Duration::from_secs(60), "gradient checks")?;
    Ok(format!(
        "{cases} op cases + 5 networks ({redraws} redrawn, {straddled} of {entries} entries one-sided), max rel error {worst:.2e}"
    ))
}

fn c2_architecture() -> Check {
    let cli = Cli::try_parse_from(["unir", "info", "--find-width", "340000"])?;
    let Sub::Info(args) = &cli.command else {
        unreachable!()
    };
    let settings = cli.settings()?;
    let text = commands::info(args, &settings)?;

    let expected = [
        ("IEB", "3x3", "1", "1", "ReLU"),
        ("AB", "1x1", "1", "0", "ReLU"),
        ("Conv 3x3", "3x3", "1", "1", "-"),
        ("VRM", "3x3", "1", "1", "Sigmoid"),
    ];
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .take(expected.len())
        .map(|l| l.split_whitespace().collect())
        .collect();
    for (row, (module, kernel, stride, pad, act)) in rows.iter().zip(expected) {
        let n = row.len();
        ensure!(n >= 6, "short table row {row:?}");
        let got = (
            row[..n - 5].join(" "),
            row[n - 4],
            row[n - 3],
            row[n - 2],
            row[n - 1],
        );
        ensure!(
            got == (module.to_string(), kernel, stride, pad, act),
            "row {got:?}, expected {module} {kernel}/{stride}/{pad}/{act}"
        );
    }
    ensure!(
        text.lines().filter(|l| l.contains("x")).count() >= expected.len(),
        "table has fewer than 4 rows"
    );

    let field = |prefix: &str| -> Option<usize> {
        let line = text.lines().find(|l| l.starts_with(prefix))?;
        line[prefix.len()..].split_whitespace().next()?.parse().ok()
    };
    let count = field("parameters:").ok_or("no parameter count")?;
    ensure!(
        (300_000..=400_000).contains(&count),
        "parameter count {count}"
    );
    let width = field("find_width(340000):").ok_or("no find_width line")?;
    let default = NetConfig::default().base_width;
    ensure!(
        width == default,
        "find_width(340000) = {width}, default width {default}"
    );
    Ok(format!(
        "4 rows match, {count} parameters, find_width(340000) = {width}"
    ))
}

fn c3_ccm() -> Check {
    let t = ccm_terms(0.0);
    for (name, got, want) in [
        ("phi", t.phi, 0.398942),
        ("psi", t.psi, 0.693147),
        ("I'", t.intermediate, 1.169885),
    ] {
        ensure!(
            (got - want).abs() <= 1e-5,
            "{name}(0) = {got}, expected {want}"
        );
    }

    let mut r = rng(3);
    let mut x = random_tensor(&mut r, &[1, 3, 16, 16], 0.05, 0.95);
    x.data_mut()[10] = 0.0;
    x.data_mut()[500] = 1.0;
    let y = ccm_forward(&x, 1.4)?;
    ensure!(
        y.data()[10] == 0.0 && y.data()[500] == 1.0,
        "endpoints map to {} and {}",
        y.data()[10],
        y.data()[500]
    );

    let n = 10_000;
    let grid = Tensor::from_fn(&[1, 1, 1, n + 1], |i| i as f32 / n as f32);
    let g = ccm_forward(&grid, 1.4)?;
    ensure!(
        g.data().windows(2).all(|p| p[0] <= p[1]),
        "output order broken on the grid"
    );
    let mid: Vec<f64> = (0..=n)
        .map(|i| ccm_terms(i as f64 / n as f64).intermediate)
        .collect();
    ensure!(
        mid.windows(2).all(|p| p[0] < p[1]),
        "intermediate not strictly increasing"
    );

    let mut worst = 0.0f64;
    for seed in 0..5 {
        let x = random_tensor(&mut rng(30 + seed), &[2, 3, 9, 11], 0.0, 1.0);
        let y = ccm_forward(&x, 1.4)?;
        let per = 3 * 9 * 11;
        for img in 0..2 {
            let mid: Vec<f64> = x.data()[img * per..(img + 1) * per]
                .iter()
                .map(|&v| oracles::ccm_intermediate(v as f64))
                .collect();
            let lo = mid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (m, &o) in mid.iter().zip(&y.data()[img * per..(img + 1) * per]) {
                worst = worst.max((((m - lo) / (hi - lo)).powf(1.4) - o as f64).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "out vs norm^1.4 differs by {worst:.2e}");
    Ok(format!(
        "I'(0) = {:.7}, grid of {} ordered, gamma error {worst:.1e}",
        t.intermediate,
        n + 1
    ))
}

fn scalar(v: Var) -> Result<f64, Box<dyn Error>> {
    Ok(v.item().ok_or("loss is not a scalar")? as f64)
}

fn c4_losses() -> Check {
    let mut r = rng(4);
    let mut worst_sum = 0.0f64;
    for i in 0..20 {
        let shape = [
            r.gen_range(1..3),
            3,
            r.gen_range(11..24),
            r.gen_range(11..24),
        ];
        let x = random_tensor(&mut r, &shape, 0.0, 1.0);
        let y = random_tensor(&mut r, &shape, 0.0, 1.0);
        let mut tape = Tape::inference();
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let l1_same = scalar(l1_loss(&mut tape, &xv, &xv)?)?;
        let ssim_same = scalar(ssim_loss(&mut tape, &xv, &xv)?)?;
        ensure!(
            l1_same == 0.0 && ssim_same == 0.0,
            "tensor {i}: loss(x, x) = ({l1_same}, {ssim_same})"
        );

        let l1 = scalar(l1_loss(&mut tape, &xv, &yv)?)?;
        let ss = scalar(ssim_loss(&mut tape, &xv, &yv)?)?;
        let weights = LossWeights {
            lambda_c: 1.0,
            lambda_s: 1.0,
            lambda_p: 0.0,
        };
        let total = scalar(total_loss(&mut tape, &xv, &yv, &weights, None)?)?;
        worst_sum = worst_sum.max((total - (l1 + ss)).abs());
    }
    ensure!(
        worst_sum <= 1e-7,
        "total differs from the component sum by {worst_sum:.2e}"
    );
    Ok(format!("20 tensors, total vs sum {worst_sum:.1e}"))
}

fn c5_synthesis() -> Check {
    let start = Instant::now();
    let cfg = SynthConfig::default();
    let mut r = rng(5);
    for i in 0..10 {
        let (raw, mask) = fixtures::vignetted(&mut r, 64, 64, 0.2 + 0.05 * i as f64);
        let v = |img: &ImageU8| masked_mean_brightness(rgb_to_hsv(img).value(), &mask);
        let before = v(&raw)?;
        let deep = v(&synthesize_low_forced(&raw, &mask, &cfg, Adjustment::Deepen)?.low)?;
        let surf = v(&synthesize_low_forced(&raw, &mask, &cfg, Adjustment::Surface)?.low)?;
        ensure!(
            deep < before && surf > before,
            "image {i}: V {before:.2} -> deepen {deep:.2}, surface {surf:.2}"
        );
    }

    let mut worst = 0.0f64;
    for k in [2usize, 8, 16, 64] {
        let (w, h) = (64, 64);
        let guide: Vec<f32> = (0..w * h).map(|_| r.gen_range(0.0f32..1.0)).collect();
        let src: Vec<f32> = (0..w * h).map(|_| r.gen_range(0.0f32..255.0)).collect();
        let got = guided_filter(&guide, &src, w, h, k, 1e-2)?;
        let want = oracles::guided_filter(&guide, &src, w, h, k, 1e-2);
        worst = got
            .iter()
            .zip(&want)
            .fold(worst, |m, (g, o)| m.max((*g as f64 - o).abs()));
    }
    ensure!(
        worst <= 1e-4,
        "guided filter differs from the oracle by {worst:.2e}"
    );

    let flat = ImageU8::filled(9, 7, [12, 130, 250]);
    ensure!(
        sharpen_gt(&flat) == flat,
        "uniform image changed by sharpening"
    );
    let impulse = ImageU8::from_fn(
        7,
        7,
        |x, y| if (x, y) == (3, 3) { [110; 3] } else { [100; 3] },
    );
    // centre 5*110 - 4*100, edge neighbours 5*100 - 110 - 3*100, the rest 5*100 - 4*100
    let want = ImageU8::from_fn(7, 7, |x, y| match (x.abs_diff(3), y.abs_diff(3)) {
        (0, 0) => [150; 3],
        (0, 1) | (1, 0) => [90; 3],
        _ => [100; 3],
    });
    ensure!(
        sharpen_gt(&impulse) == want,
        "impulse response differs from the hand-computed one"
    );
    within(start.elapsed(), Duration::from_secs(30), "synthesis checks")?;
    Ok(format!("10 images, guided filter error {worst:.1e}"))
}

fn c6_metrics() -> Check {
    let mut r = rng(6);
    let a = oracles::random_image(&mut r, 40, 30);
    let plus = ImageU8::new(40, 30, a.data().iter().map(|&v| v.min(254) + 1).collect())?;
    let lifted = ImageU8::new(40, 30, a.data().iter().map(|&v| v.min(254)).collect())?;
    let p = psnr(&lifted, &plus)?;
    ensure!((p - 48.1308).abs() <= 1e-4, "PSNR of a +1 offset = {p}");

    let mut worst = [0.0f64; 4];
    for _ in 0..10 {
        let (w, h) = (r.gen_range(16..48), r.gen_range(16..48));
        let (x, y) = related_pair(&mut r, w, h);
        let errs = [
            (ssim_metric(&x, &y)? - oracles::ssim(&x, &y)).abs(),
            (uqi(&x, &y)? - oracles::uqi(&x, &y)).abs(),
            (delta_e(&x, &y)? - oracles::delta_e(&x, &y)).abs(),
            (uciqe(&x) - oracles::uciqe(&x)).abs(),
        ];
        for (m, e) in worst.iter_mut().zip(errs) {
            *m = m.max(e);
        }
    }
    let [s, u, d, q] = worst;
    ensure!(
        s <= 1e-4 && u <= 1e-4,
        "SSIM error {s:.2e}, UQI error {u:.2e}"
    );
    ensure!(
        d <= 1e-6 && q <= 1e-6,
        "DeltaE error {d:.2e}, UCIQE error {q:.2e}"
    );

    let (x, _) = related_pair(&mut r, 24, 24);
    let ideal = (
        psnr(&x, &x)?,
        ssim_metric(&x, &x)?,
        uqi(&x, &x)?,
        delta_e(&x, &x)?,
    );
    ensure!(
        ideal == (f64::INFINITY, 1.0, 1.0, 0.0),
        "identical inputs give {ideal:?}"
    );
    Ok(format!(
        "PSNR {p:.4} dB, oracle errors SSIM {s:.1e} UQI {u:.1e} DeltaE {d:.1e} UCIQE {q:.1e}"
    ))
}

fn unir(args: &[&str]) -> Result<String, Box<dyn Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_unir"))
        .args(args)
        .output()?;
    ensure!(
        out.status.success(),
        "unir {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn path(p: &Path) -> &str {
    p.to_str().expect("temporary paths are UTF-8")
}

/// Synthesises the bundled rasters into `root/pairs` and trains into `root/run`.
fn synth_and_train(root: &Path, net: &[&str], train: &[&str]) -> Result<(), Box<dyn Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let (pairs, run) = (root.join("pairs"), root.join("run"));
    unir(&[
        "synth",
        "--raw-dir",
        path(&data.join("raw")),
        "--mask-dir",
        path(&data.join("mask")),
        "--out-dir",
        path(&pairs),
        "--seed",
        "0",
        "--threads",
        "1",
    ])?;
    let manifest = pairs.join("manifest.jsonl");
    let mut args = vec![
        "train",
        "--manifest",
        path(&manifest),
        "--out",
        path(&run),
        "--seed",
        "0",
        "--threads",
        "1",
    ];
    args.extend(net);
    args.extend(train);
    unir(&args)?;
    Ok(())
}

const TOY_NET: [&str; 8] = [
    "--base-width",
    "16",
    "--n-heads",
    "2",
    "--attn-window",
    "8",
    "--global-attn-tokens",
    "0",
];

fn toy_net() -> NetConfig {
    NetConfig {
        base_width: 16,
        n_heads: 2,
        attn_window: 8,
        global_attn_tokens: 0,
        ..NetConfig::default()
    }
}

fn c7_toy_learning() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let train = [
        "--epochs",
        "300",
        "--batch-size",
        "8",
        "--patch-size",
        "64",
        "--lr",
        "1e-4",
        "--checkpoint-every",
        "0",
    ];
    synth_and_train(dir.path(), &TOY_NET, &train)?;

    // eight pairs in batches of eight: one Adam step per epoch
    let log = fs::read_to_string(dir.path().join("run/loss_log.csv"))?;
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap_or("nan").parse())
        .collect::<Result<_, _>>()?;
    ensure!(losses.len() == 300, "{} logged steps", losses.len());
    let (first, last) = (losses[0], losses[299]);

    let weights = load_weights(&dir.path().join("run/weights.bin"), &toy_net())?;
    let pairs = commands::load_pairs(&dir.path().join("pairs/manifest.jsonl"))?;
    ensure!(pairs.len() == 8, "{} synthesised pairs", pairs.len());
    let (mut before, mut after) = (0.0, 0.0);
    for p in &pairs {
        before += psnr(&p.low, &p.gt)? / 8.0;
        after += psnr(&enhance(&weights, &p.low, false)?, &p.gt)? / 8.0;
    }
    let elapsed = start.elapsed();
    ensure!(
        last <= 0.5 * first,
        "final loss {last:.4} vs step-1 loss {first:.4}"
    );
    ensure!(after >= before + 1.0, "PSNR {before:.2} -> {after:.2} dB");
    within(elapsed, Duration::from_secs(600), "toy training")?;
    Ok(format!(
        "loss {first:.4} -> {last:.4} ({:.2}x), PSNR {before:.2} -> {after:.2} dB",
        last / first
    ))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), Box<dyn Error>> {
    for name in names {
        ensure!(
            fs::read(a.join(name))? == fs::read(b.join(name))?,
            "{name} differs between runs"
        );
    }
    Ok(())
}

fn c8_determinism() -> Check {
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let net = ["--base-width", "8", "--n-heads", "2", "--attn-window", "8"];
    let train = [
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--patch-size",
        "32",
        "--checkpoint-every",
        "1",
    ];
    for d in &dirs {
        synth_and_train(d.path(), &net, &train)?;
        let run = d.path().join("run");
        let (weights, low, out) = (
            run.join("weights.bin"),
            d.path().join("pairs/scene0_low.png"),
            run.join("enhanced.png"),
        );
        let mut args = vec![
            "enhance",
            "--weights",
            path(&weights),
            "--in",
            path(&low),
            "--out",
            path(&out),
        ];
        args.extend(net);
        unir(&args)?;
    }
    let (a, b) = (dirs[0].path(), dirs[1].path());
    let pair_files: Vec<String> = (0..8)
        .flat_map(|k| [format!("scene{k}_low.png"), format!("scene{k}_gt.png")])
        .collect();
    let mut names: Vec<&str> = pair_files.iter().map(String::as_str).collect();
    names.push("manifest.jsonl");
    same_files(&a.join("pairs"), &b.join("pairs"), &names)?;
    same_files(
        &a.join("run"),
        &b.join("run"),
        &[
            "epoch_0001.ckpt",
            "last.ckpt",
            "weights.bin",
            "loss_log.csv",
            "enhanced.png",
        ],
    )?;

    let mut r = rng(8);
    let data: Vec<TrainPair> = (0..4)
        .map(|i| {
            let (gt, low) = related_pair(&mut r, 20, 18);
            TrainPair::new(format!("p{i}"), low, gt)
        })
        .collect::<Result<_, _>>()?;
    let tiny = NetConfig {
        base_width: 4,
        n_heads: 2,
        attn_window: 8,
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        patch_size: 16,
        seed: 11,
        ..TrainConfig::default()
    };
    let mut full = Trainer::new(tiny.clone(), cfg.clone())?;
    full.train(&data, |_, _| Ok(()))?;
    let mut half = Trainer::new(tiny, cfg)?;
    half.run_epoch(&data)?;
    half.run_epoch(&data)?;
    let mut resumed = Trainer::from_checkpoint(decode_checkpoint(&encode_checkpoint(
        &half.to_checkpoint(),
    )?)?)?;
    resumed.train(&data, |_, _| Ok(()))?;
    ensure!(
        encode_checkpoint(&resumed.to_checkpoint())? == encode_checkpoint(&full.to_checkpoint())?,
        "resumed training diverges from the uninterrupted run"
    );

    let img = oracles::random_image(&mut r, 33, 21);
    ensure!(decode_png(&encode_png(&img)?)? == img, "PNG round trip");
    ensure!(decode_ppm(&encode_ppm(&img))? == img, "PPM round trip");
    let mask_dir = tempfile::tempdir()?;
    let mask = BinaryMask::from_fn(13, 9, |x, y| (x * y) % 3 == 0);
    save_mask(&mask, &mask_dir.path().join("m.png"))?;
    ensure!(
        load_mask(&mask_dir.path().join("m.png"))? == mask,
        "mask round trip"
    );
    let params = full.weights.params();
    let decoded = decode_tensors(&encode_tensors(params))?;
    let bits = |p: &unir_core::Parameter| {
        (
            p.name.clone(),
            p.tensor.shape().to_vec(),
            p.tensor
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    ensure!(
        decoded.iter().map(bits).eq(params.iter().map(bits)),
        "weight tensors round trip"
    );
    let ckpt = encode_checkpoint(&full.to_checkpoint())?;
    ensure!(
        encode_checkpoint(&decode_checkpoint(&ckpt)?)? == ckpt,
        "checkpoint round trip"
    );
    let mut rec = ManifestRecord::new("a,b", "a_low.png", "a_gt.png");
    rec.extra
        .insert("note".into(), serde_json::json!({"k": [1, 2.5]}));
    ensure!(
        parse_manifest(&encode_manifest(&[rec.clone()]))? == vec![rec],
        "manifest round trip"
    );
    Ok("synth, train, checkpoints and enhance identical across runs; resume bit-exact; 6 round trips".into())
}

fn main() {
    let criteria: [(&str, &str, fn() -> Check); 8] = [
        ("C1", "gradient fidelity", c1_gradients),
        ("C2", "architecture conformance", c2_architecture),
        ("C3", "contrast correction", c3_ccm),
        ("C4", "loss contract", c4_losses),
        ("C5", "synthesis pipeline", c5_synthesis),
        ("C6", "metric oracles", c6_metrics),
        ("C7", "toy learning", c7_toy_learning),
        ("C8", "determinism and persistence", c8_determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()).into())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name} ({secs:.1}s): {detail}"),
            Err(e) => {
                failed += 1;
                println!("{id} FAIL {name} ({secs:.1}s): {e}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
