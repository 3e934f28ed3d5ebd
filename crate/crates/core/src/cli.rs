//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::AlignerConfig;
use crate::attention::{sparsity, Activation};
use crate::autodiff::{certification_suite, train_toy, Budget, TrainConfig, MAX_LR};
use crate::bench::{bench, BenchConfig};
use crate::error::{Result, XabaError};
use crate::io::{
    load_image, load_weights, pad_for, save_image, save_weights, WeightEntry, WeightFile,
};
use crate::pyramid::{pyramid_align, PyramidConfig, PyramidWeights};
use crate::synth::block_shift_pairs;
use crate::tensor::crop;

#[derive(Parser, Debug)]
#[command(
    name = "xaba",
    version,
    about = "Blockwise cross-attention image alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align a target image to a reference image.
    Align(AlignArgs),
    /// Train on synthetic block-shift pairs and write a weight file.
    Train(TrainArgs),
    /// Time the preset configurations.
    Bench(BenchArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Describe a weight file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "tgt")]
    target: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Must match the scales stored in the weight file.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    block: usize,
    #[arg(long, default_value_t = Activation::Softmax)]
    activation: Activation,
    /// Write per-scale attention tensors and a summary CSV into this directory.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    sparsity_tau: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    pairs: usize,
    #[arg(long, default_value_t = 80)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    block: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
    scales: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    fe: usize,
    #[arg(long, default_value_t = 16)]
    fm: usize,
    #[arg(long, default_value_t = Activation::Softmax)]
    activation: Activation,
    /// Largest per-block shift in the synthetic pairs.
    #[arg(long, default_value_t = 8)]
    max_shift: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = MAX_LR)]
    lr: f64,
    /// Write the per-step loss curve as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Write the synthetic pairs as PPM images into this directory.
    #[arg(long)]
    export_pairs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "320x320", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Tolerance for nonlinear ops and the full aligner.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Tolerance for linear kernels.
    #[arg(long, default_value_t = 1e-5)]
    linear_tol: f64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    weights: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad size '{s}': {e}"))
    };
    Ok((parse(h)?, parse(w)?))
}

/// Caps the global rayon pool from `XABA_THREADS`. Only the first call in a
/// process takes effect.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("XABA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        XabaError::config(format!(
            "XABA_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs the CLI and returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// `error: kind=<kind> msg=<single line>`.
pub fn error_line(e: &XabaError) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={} msg={msg}", e.kind())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Align(a) => align(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => run_bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn align(a: AlignArgs) -> Result<()> {
    let reference = load_image::<f32>(&a.reference)?;
    let target = load_image::<f32>(&a.target)?;
    if reference.shape() != target.shape() {
        return Err(XabaError::precondition(format!(
            "reference {} and target {} differ in size",
            reference.shape(),
            target.shape()
        )));
    }
    let (meta, weights) = load_weights::<f32>(&a.weights)?;
    if let Some(scales) = &a.scales {
        if *scales != meta.scales {
            return Err(XabaError::config(format!(
                "--scales {scales:?} does not match weights trained for {:?}",
                meta.scales
            )));
        }
    }
    let mut cfg = meta.pyramid_config(a.block, a.activation)?;
    cfg.aligner.sparsity_tau = a.sparsity_tau;
    cfg.aligner.validate()?;

    let (r, record) = pad_for(&cfg, &reference)?;
    let (t, _) = pad_for(&cfg, &target)?;
    let out = pyramid_align(&r, &t, &weights, &cfg)?;
    save_image(&crop(&out.aligned, &record)?, &a.out)?;

    if let Some(dir) = &a.dump_attention {
        fs::create_dir_all(dir)?;
        let mut summary = String::from("scale,blocks,rows,cols,fallback_rows,sparsity\n");
        for (&k, att) in cfg.scales.iter().zip(&out.attention) {
            let file = WeightFile {
                entries: vec![WeightEntry {
                    name: "attention".into(),
                    dims: vec![att.num_blocks(), att.rows(), att.cols()],
                    data: att.values.data().to_vec(),
                }],
            };
            file.write(dir.join(format!("scale{k}.xaba")))?;
            let _ = writeln!(
                summary,
                "{k},{},{},{},{},{:.6}",
                att.num_blocks(),
                att.rows(),
                att.cols(),
                att.fallback_rows,
                sparsity(att, a.sparsity_tau)
            );
        }
        fs::write(dir.join("summary.csv"), summary)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = PyramidConfig::new(
        a.scales.clone(),
        AlignerConfig {
            block_size: a.block,
            fe: a.fe,
            fm: a.fm,
            activation: a.activation,
            ..Default::default()
        },
    )?;
    let pairs = block_shift_pairs::<f32>(a.pairs, a.size, a.block, a.max_shift, a.seed)?;
    if let Some(dir) = &a.export_pairs {
        export_pairs(dir, &pairs)?;
    }
    let init = PyramidWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let tc = TrainConfig {
        batch_size: a.batch,
        max_lr: a.lr,
        ..TrainConfig::new(cfg.clone(), Budget::Steps(a.steps), a.seed)
    };
    let outcome = train_toy(&pairs, &tc, init)?;
    save_weights(&outcome.weights, &cfg.scales, &a.out)?;
    if let Some(path) = &a.loss_csv {
        let mut csv = String::from("step,loss\n");
        for (i, l) in outcome.step_losses.iter().enumerate() {
            let _ = writeln!(csv, "{},{l:.8}", i + 1);
        }
        fs::write(path, csv)?;
    }
    if let (Some(first), Some(last)) = (outcome.step_losses.first(), outcome.step_losses.last()) {
        println!(
            "steps={} first_loss={first:.6} last_loss={last:.6}",
            outcome.step_losses.len()
        );
    }
    Ok(())
}

fn export_pairs(dir: &Path, pairs: &[crate::synth::Pair<f32>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        save_image(&p.reference, dir.join(format!("pair{i:03}_ref.ppm")))?;
        save_image(&p.target, dir.join(format!("pair{i:03}_tgt.ppm")))?;
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let (h, w) = a.size;
    let report = bench(&BenchConfig::presets(), h, w, a.reps, a.seed)?;
    eprint!("{}", report.to_table());
    match &a.csv {
        Some(path) => fs::write(path, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = certification_suite(a.tol, a.linear_tol, a.samples, a.seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(XabaError::State(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn inspect(a: InspectArgs) -> Result<()> {
    let file = WeightFile::read(&a.weights)?;
    let (meta, weights) = crate::io::weights_from_file::<f32>(&file)?;
    println!(
        "scales={} fe={} fm={} shared_projection={} parameters={}",
        meta.scales
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
        meta.fe,
        meta.fm,
        meta.share_projection,
        weights.parameter_count()
    );
    for e in &file.entries {
        let rms = (e.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
            / e.data.len().max(1) as f64)
            .sqrt();
        println!("{:<28} {:?} rms={rms:.6}", e.name, e.dims);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("320x240"), Ok((320, 240)));
        assert!(parse_size("320").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["xaba", "align", "--bogus"]), 2);
        assert_eq!(run(["xaba"]), 2);
        assert_eq!(run(["xaba", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_1() {
        assert_eq!(
            run(["xaba", "inspect", "--weights", "/nonexistent/w.xaba"]),
            1
        );
        let line = error_line(&XabaError::format(3, "bad\nthing"));
        assert_eq!(line, "error: kind=format msg=format: bad thing (at byte 3)");
    }
}
