//! Acceptance suite. Every check prints one `PASS`/`FAIL` line; the process
//! exits nonzero if any check fails. Pass check names as arguments to run a
//! subset.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xaba::aligner::AlignerConfig;
use xaba::attention::{
    apply_attention, htn_rows, softmax_rows, sparsify, sparsity, AttentionMatrix,
};
use xaba::autodiff::{
    certification_suite, evaluate_loss, evaluate_psnr, train_toy, Budget, TrainConfig,
    CHARBONNIER_EPS,
};
use xaba::bench::{bench, BenchConfig, Panel};
use xaba::blockops::{b2t, t2b};
use xaba::io::{load_image, load_weights, save_image, save_weights};
use xaba::pyramid::{fuse, FusionWeights, PyramidConfig, PyramidWeights};
use xaba::synth::{block_shift_pairs, global_shift_pairs};
use xaba::tensor::{Shape, Tensor};

type Check = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn block_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sizes = [1usize, 2, 5, 10, 20];
    let mut failures = 0;
    for i in 0..100 {
        let b = sizes[i % sizes.len()];
        let shape = Shape::new(
            rng.gen_range(1..=3),
            rng.gen_range(1..=4),
            b * rng.gen_range(1..=6),
            b * rng.gen_range(1..=6),
        );
        let x = random_tensor(shape, &mut rng);
        let (blocks, geometry) = t2b(&x, b).expect("divisible shape");
        let back = b2t(&blocks, &geometry).expect("geometry round trip");
        if back.shape() != shape || bits(&back) != bits(&x) {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < Duration::from_secs(10),
        format!(
            "100 tensors, {failures} mismatches, {:.2}s (limit 10s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn row_stochastic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut bad_range, mut fallback_seen, mut bad_fallback) = (0.0f64, 0, 0, 0);
    for i in 0..1000 {
        let (rows, cols) = (rng.gen_range(1..=40), rng.gen_range(1..=120));
        let mut scores = Tensor::from_fn(Shape::new(1, 1, rows, cols), |_, _, _, _| {
            rng.gen_range(-4.0f32..4.0)
        });
        // Every fourth matrix gets all-negative rows to exercise the HTN fallback.
        if i % 4 == 0 {
            let r = rng.gen_range(0..rows);
            scores.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v = -v.abs() - 0.1);
        }
        for a in [softmax_rows(&scores), htn_rows(&scores)] {
            for (r, row) in a.values.data().chunks(cols).enumerate() {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                worst = worst.max((sum - 1.0).abs());
                bad_range += row.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
                let raw = &scores.data()[r * cols..(r + 1) * cols];
                if raw.iter().all(|&v| v <= 0.0) && a.fallback_rows > 0 {
                    fallback_seen += 1;
                    let pick = raw
                        .iter()
                        .enumerate()
                        .fold(0, |b, (j, &v)| if v > raw[b] { j } else { b });
                    let one_hot = row
                        .iter()
                        .enumerate()
                        .all(|(j, &v)| v == if j == pick { 1.0 } else { 0.0 });
                    bad_fallback += usize::from(!one_hot);
                }
            }
        }
    }
    outcome(
        worst <= 1e-5 && bad_range == 0 && bad_fallback == 0 && fallback_seen > 0,
        format!(
            "1000 matrices, max |row sum - 1| = {worst:.2e} (tol 1e-5), {bad_range} entries outside [0,1], \
             {fallback_seen} fallback rows, {bad_fallback} not one-hot"
        ),
    )
}

fn permutation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..50 {
        let (n, c) = (rng.gen_range(1..=400), rng.gen_range(1..=8));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let p = Tensor::from_fn(Shape::new(1, 1, n, n), |_, _, i, j| {
            if perm[i] == j {
                1.0f32
            } else {
                0.0
            }
        });
        let v = Tensor::from_fn(Shape::new(1, 1, n, c), |_, _, _, _| {
            rng.gen_range(-10.0f32..10.0)
        });
        let expected = Tensor::from_fn(v.shape(), |_, _, i, k| v.at(0, 0, perm[i], k));
        let got = apply_attention(&AttentionMatrix::from_values(p).expect("matrix stack"), &v)
            .expect("shapes agree");
        if bits(&got) != bits(&expected) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("50 permutations, {failures} not bitwise equal to reindexing"),
    )
}

fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let reports = certification_suite(1e-4, 1e-5, 100, 0).expect("suite runs");
    let elapsed = start.elapsed();
    for r in &reports {
        println!("    {r}");
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks in f64, failed {failed:?}, {:.1}s (limit 120s)",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn pyramid_cfg(scales: Vec<usize>) -> PyramidConfig {
    PyramidConfig::new(
        scales,
        AlignerConfig {
            block_size: 20,
            fe: 32,
            fm: 16,
            ..Default::default()
        },
    )
    .expect("valid config")
}

fn toy_learning() -> Outcome {
    let start = Instant::now();
    let pairs = block_shift_pairs::<f32>(64, 80, 20, 8, 1).expect("dataset");
    let cfg = pyramid_cfg(vec![1, 2, 4]);
    let init = PyramidWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let psnr0 = evaluate_psnr(&pairs, &init, &cfg).expect("eval");
    let loss0 = evaluate_loss(&pairs, &init, &cfg, CHARBONNIER_EPS).expect("eval");
    let trained = train_toy(
        &pairs,
        &TrainConfig::new(cfg.clone(), Budget::Steps(500), 0),
        init,
    )
    .expect("training");
    let psnr1 = evaluate_psnr(&pairs, &trained.weights, &cfg).expect("eval");
    let loss1 = evaluate_loss(&pairs, &trained.weights, &cfg, CHARBONNIER_EPS).expect("eval");
    let elapsed = start.elapsed();
    outcome(
        psnr1 - psnr0 >= 3.0 && loss1 < loss0 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "PSNR {psnr0:.3} -> {psnr1:.3} dB (gain {:.3}, need 3), loss {loss0:.5} -> {loss1:.5}, {:.0}s (limit 900s)",
            psnr1 - psnr0,
            elapsed.as_secs_f64()
        ),
    )
}

fn pyramid_depth() -> Outcome {
    let train = global_shift_pairs::<f32>(32, 80, 30, 11);
    let test = global_shift_pairs::<f32>(16, 80, 30, 12);
    let mut psnr = Vec::new();
    for scales in [vec![1, 2, 4], vec![1]] {
        let cfg = pyramid_cfg(scales);
        let init = PyramidWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let trained = train_toy(
            &train,
            &TrainConfig::new(cfg.clone(), Budget::Steps(150), 0),
            init,
        )
        .expect("training");
        psnr.push(evaluate_psnr(&test, &trained.weights, &cfg).expect("eval"));
    }
    outcome(
        psnr[0] >= psnr[1] - 0.5,
        format!(
            "held-out PSNR scales 1-2-4 {:.3} dB vs scales 1 {:.3} dB (tol 0.5)",
            psnr[0], psnr[1]
        ),
    )
}

fn htn_speed() -> Outcome {
    let cfgs: Vec<BenchConfig> = BenchConfig::presets()
        .into_iter()
        .filter(|c| c.block_size == 10)
        .collect();
    let report = bench(&cfgs, 320, 320, 20, 0).expect("bench");
    let median = |name: &str| {
        report
            .find(name, Panel::Global)
            .map_or(f64::NAN, |r| r.median_ms)
    };
    let (soft, htn) = (median("XABA10Soft"), median("XABA10HTN"));
    outcome(
        htn <= soft,
        format!("320x320 b=10 scales 1-2-4, median HTN {htn:.2} ms vs Soft {soft:.2} ms"),
    )
}

fn fusion_unity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut single_exact = true;
    for _ in 0..20 {
        let n = rng.gen_range(1..=4);
        let shape = Shape::new(
            rng.gen_range(1..=2),
            3,
            rng.gen_range(4..=16),
            rng.gen_range(4..=16),
        );
        let cands: Vec<Tensor<f32>> = (0..n).map(|_| random_tensor(shape, &mut rng)).collect();
        let mut fw = FusionWeights::init(n, 8, &mut rng);
        // Larger weights give sharper, less uniform masks.
        fw.mask_layers
            .iter_mut()
            .for_each(|k| k.weight = k.weight.map(|v| v * 4.0));
        let refs: Vec<&Tensor<f32>> = cands.iter().collect();
        let f = fuse(&refs, &fw).expect("fusion");
        let m = f.mask.shape();
        for b in 0..m.batch {
            for p in 0..m.plane() {
                let sum: f64 = (0..n)
                    .map(|c| f.mask.data()[b * m.item() + c * m.plane() + p] as f64)
                    .sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        if n == 1 {
            single_exact &= bits(&f.output) == bits(&cands[0]);
        }
    }
    outcome(
        worst <= 1e-5 && single_exact,
        format!(
            "max |mask sum - 1| = {worst:.2e} (tol 1e-5), single candidate exact: {single_exact}"
        ),
    )
}

fn sparsify_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let taus: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
    let (mut identity, mut worst, mut monotone) = (true, 0.0f64, true);
    for _ in 0..100 {
        let (rows, cols) = (rng.gen_range(1..=20), rng.gen_range(2..=60));
        let sharp = rng.gen_range(0.5f32..6.0);
        let scores = Tensor::from_fn(Shape::new(1, 1, rows, cols), |_, _, _, _| {
            rng.gen_range(-sharp..sharp)
        });
        let a = softmax_rows(&scores);
        identity &= sparsify(&a, 0.0).expect("tau 0") == a;
        let mut last = 0.0;
        for &tau in &taus {
            let s = sparsify(&a, tau).expect("valid tau");
            for row in s.values.data().chunks(cols) {
                worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
            let frac = sparsity(&s, 0.0);
            monotone &= frac >= last;
            last = frac;
        }
    }
    outcome(
        identity && worst <= 1e-5 && monotone,
        format!("100 matrices, tau=0 identity: {identity}, max |row sum - 1| = {worst:.2e} (tol 1e-5), monotone: {monotone}"),
    )
}

fn xaba(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_xaba"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn cli_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let train = |out: &str, pairs: Option<&str>| {
        let mut args = vec![
            "train", "--out", out, "--steps", "20", "--pairs", "8", "--seed", "5",
        ];
        if let Some(d) = pairs {
            args.extend(["--export-pairs", d]);
        }
        xaba(&args)
    };
    let mut problems = Vec::new();
    for (code, err) in [
        train(&p("a.xaba"), Some(&p("pairs"))),
        train(&p("b.xaba"), None),
    ] {
        if code != 0 {
            problems.push(format!("train exit {code}: {}", err.trim()));
        }
    }
    let read = |path: &str| std::fs::read(path).unwrap_or_default();
    if read(&p("a.xaba")).is_empty() || read(&p("a.xaba")) != read(&p("b.xaba")) {
        problems.push("weight files differ between identical runs".into());
    }
    let (r, t) = (p("pairs/pair000_ref.ppm"), p("pairs/pair000_tgt.ppm"));
    for out in ["x.ppm", "y.ppm"] {
        let (code, err) = xaba(&[
            "align",
            "--ref",
            &r,
            "--tgt",
            &t,
            "--weights",
            &p("a.xaba"),
            "--out",
            &p(out),
        ]);
        if code != 0 {
            problems.push(format!("align exit {code}: {}", err.trim()));
        }
    }
    if read(&p("x.ppm")).is_empty() || read(&p("x.ppm")) != read(&p("y.ppm")) {
        problems.push("aligned outputs differ between identical runs".into());
    }
    if let Ok(img) = load_image::<f32>(p("x.ppm")) {
        save_image(&img, p("x2.ppm")).expect("save image");
        if read(&p("x2.ppm")) != read(&p("x.ppm")) {
            problems.push("PPM load/save changed bytes".into());
        }
    } else {
        problems.push("aligned output is not a readable PPM".into());
    }
    match load_weights::<f32>(p("a.xaba")) {
        Ok((meta, w)) => {
            save_weights(&w, &meta.scales, p("a2.xaba")).expect("save weights");
            if read(&p("a2.xaba")) != read(&p("a.xaba")) {
                problems.push("weight load/save changed bytes".into());
            }
        }
        Err(e) => problems.push(format!("weights unreadable: {e}")),
    }
    let pass = problems.is_empty();
    outcome(
        pass,
        if pass {
            "train, align and round trips exit 0 with stable bytes".to_string()
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let checks: [Check; 10] = [
        ("block_round_trip", block_round_trip),
        ("row_stochastic", row_stochastic),
        ("permutation_oracle", permutation_oracle),
        ("gradient_certification", gradient_certification),
        ("toy_learning", toy_learning),
        ("pyramid_depth", pyramid_depth),
        ("htn_speed", htn_speed),
        ("fusion_unity", fusion_unity),
        ("sparsify", sparsify_checks),
        ("cli_end_to_end", cli_end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
