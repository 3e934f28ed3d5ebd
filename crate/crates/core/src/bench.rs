//! Latency harness for whole-pyramid ("global") and single-scale ("local") alignment.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{interframe_align, AlignerConfig};
use crate::attention::Activation;
use crate::error::{Result, XabaError};
use crate::pyramid::{pyramid_align, PyramidConfig, PyramidWeights};
use crate::synth::texture;
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 20;
pub const WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub block_size: usize,
    pub activation: Activation,
    pub scales: Vec<usize>,
    pub fe: usize,
    pub fm: usize,
}

impl BenchConfig {
    /// `XABA{b}{Soft|HTN}`.
    pub fn model_name(&self) -> String {
        format!("XABA{}{}", self.block_size, self.activation.tag())
    }

    pub fn presets() -> Vec<BenchConfig> {
        let mut out = Vec::new();
        for block_size in [20, 10] {
            for activation in [Activation::Softmax, Activation::Htn] {
                out.push(BenchConfig {
                    block_size,
                    activation,
                    scales: vec![1, 2, 4],
                    fe: 32,
                    fm: 16,
                });
            }
        }
        out
    }

    fn pyramid(&self) -> Result<PyramidConfig> {
        PyramidConfig::new(
            self.scales.clone(),
            AlignerConfig {
                block_size: self.block_size,
                fe: self.fe,
                fm: self.fm,
                activation: self.activation,
                ..Default::default()
            },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Panel {
    Global,
    Local,
}

impl Panel {
    pub fn label(&self) -> &'static str {
        match self {
            Panel::Global => "global",
            Panel::Local => "local",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub model_name: String,
    pub panel: Panel,
    pub block_size: usize,
    pub activation: Activation,
    pub scales: Vec<usize>,
    pub image_size: (usize, usize),
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub fps: f64,
    pub htn_zero_row_count: usize,
    pub reps: usize,
    /// Reason the row was not measured.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

/// Linear-interpolated percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct Case {
    row: BenchRow,
    run: Box<dyn Fn() -> Result<usize>>,
    samples: Vec<f64>,
}

/// Times every config on both panels. Repetitions are interleaved across
/// configs, so slow drift in machine state affects all rows alike; the first
/// `WARMUP` runs of each case are discarded.
pub fn bench(
    configs: &[BenchConfig],
    height: usize,
    width: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(XabaError::precondition(format!(
            "bench needs at least {MIN_REPS} reps, got {reps}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference: Tensor<f32> = texture(height, width, &mut rng);
    let target: Tensor<f32> = texture(height, width, &mut rng);

    let mut cases: Vec<Case> = Vec::new();
    let mut skipped: Vec<BenchRow> = Vec::new();
    for cfg in configs {
        let template = |panel| BenchRow {
            model_name: cfg.model_name(),
            panel,
            block_size: cfg.block_size,
            activation: cfg.activation,
            scales: if panel == Panel::Global {
                cfg.scales.clone()
            } else {
                vec![1]
            },
            image_size: (height, width),
            median_ms: f64::NAN,
            p10_ms: f64::NAN,
            p90_ms: f64::NAN,
            fps: f64::NAN,
            htn_zero_row_count: 0,
            reps: 0,
            skipped: None,
        };
        let pyramid = match cfg.pyramid().and_then(|p| {
            p.check_input(reference.shape())?;
            Ok(p)
        }) {
            Ok(p) => p,
            Err(e) => {
                for panel in [Panel::Global, Panel::Local] {
                    skipped.push(BenchRow {
                        skipped: Some(e.to_string()),
                        ..template(panel)
                    });
                }
                continue;
            }
        };
        let weights = PyramidWeights::<f32>::init(&pyramid, &mut ChaCha8Rng::seed_from_u64(seed));
        let local_weights = weights.scales[0].clone();
        let local_cfg = pyramid.aligner;
        let (r, t) = (reference.clone(), target.clone());
        cases.push(Case {
            row: template(Panel::Global),
            run: Box::new(move || Ok(pyramid_align(&r, &t, &weights, &pyramid)?.fallback_rows())),
            samples: Vec::with_capacity(reps),
        });
        let (r, t) = (reference.clone(), target.clone());
        cases.push(Case {
            row: template(Panel::Local),
            run: Box::new(move || {
                Ok(interframe_align(&r, &t, &local_weights, &local_cfg)?
                    .attention
                    .fallback_rows)
            }),
            samples: Vec::with_capacity(reps),
        });
    }

    for case in &mut cases {
        for _ in 0..WARMUP {
            case.row.htn_zero_row_count = (case.run)()?;
        }
    }
    for _ in 0..reps {
        for case in &mut cases {
            let start = Instant::now();
            let zero_rows = (case.run)()?;
            case.samples.push(start.elapsed().as_secs_f64() * 1e3);
            case.row.htn_zero_row_count = zero_rows;
        }
    }

    let mut rows = Vec::new();
    for mut case in cases {
        case.samples.sort_by(f64::total_cmp);
        let median = percentile(&case.samples, 0.5);
        rows.push(BenchRow {
            median_ms: median,
            p10_ms: percentile(&case.samples, 0.1),
            p90_ms: percentile(&case.samples, 0.9),
            fps: 1000.0 / median,
            reps: case.samples.len(),
            ..case.row
        });
    }
    rows.extend(skipped);
    Ok(BenchReport { rows })
}

impl BenchReport {
    pub fn find(&self, model_name: &str, panel: Panel) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.model_name == model_name && r.panel == panel)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model_name,panel,block_size,activation,scales,image_size,median_ms,p10_ms,p90_ms,fps,htn_zero_row_count,reps,status\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}x{},{:.3},{:.3},{:.3},{:.2},{},{},{}",
                r.model_name,
                r.panel.label(),
                r.block_size,
                r.activation,
                scales_label(&r.scales),
                r.image_size.0,
                r.image_size.1,
                r.median_ms,
                r.p10_ms,
                r.p90_ms,
                r.fps,
                r.htn_zero_row_count,
                r.reps,
                r.skipped.as_deref().map_or("ok".to_string(), |s| format!(
                    "\"skipped: {}\"",
                    s.replace('"', "'")
                ))
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<7} {:>5} {:>6} {:>10} {:>10} {:>10} {:>8} {:>9}\n",
            "model",
            "panel",
            "block",
            "scales",
            "median_ms",
            "p10_ms",
            "p90_ms",
            "fps",
            "zero_rows"
        );
        for r in &self.rows {
            if let Some(reason) = &r.skipped {
                let _ = writeln!(
                    out,
                    "{:<12} {:<7} skipped: {reason}",
                    r.model_name,
                    r.panel.label()
                );
                continue;
            }
            let _ = writeln!(
                out,
                "{:<12} {:<7} {:>5} {:>6} {:>10.2} {:>10.2} {:>10.2} {:>8.2} {:>9}",
                r.model_name,
                r.panel.label(),
                r.block_size,
                scales_label(&r.scales),
                r.median_ms,
                r.p10_ms,
                r.p90_ms,
                r.fps,
                r.htn_zero_row_count
            );
        }
        out
    }
}

fn scales_label(scales: &[usize]) -> String {
    scales
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(activation: Activation, block_size: usize) -> BenchConfig {
        BenchConfig {
            block_size,
            activation,
            scales: vec![1, 2],
            fe: 4,
            fm: 2,
        }
    }

    #[test]
    fn names_and_presets() {
        let names: Vec<String> = BenchConfig::presets()
            .iter()
            .map(BenchConfig::model_name)
            .collect();
        assert_eq!(
            names,
            ["XABA20Soft", "XABA20HTN", "XABA10Soft", "XABA10HTN"]
        );
    }

    #[test]
    fn percentiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 0.5), 3.0);
        assert_eq!(percentile(&s, 0.1), 1.4);
        assert_eq!(percentile(&s, 1.0), 5.0);
    }

    #[test]
    fn report_shape() {
        let cfgs = [
            tiny(Activation::Softmax, 4),
            tiny(Activation::Htn, 4),
            tiny(Activation::Htn, 5),
        ];
        let report = bench(&cfgs, 16, 16, MIN_REPS, 0).unwrap();
        assert_eq!(report.rows.len(), 6);
        for r in &report.rows[..4] {
            assert!(r.skipped.is_none());
            assert_eq!(r.reps, MIN_REPS);
            assert!(r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms);
            assert!((r.fps - 1000.0 / r.median_ms).abs() < 1e-9);
        }
        assert!(report.rows[4]
            .skipped
            .as_deref()
            .unwrap()
            .contains("not a multiple"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("XABA4Soft,global,4,soft,1-2,16x16,"));
        assert!(report.to_table().contains("skipped"));
        assert!(bench(&cfgs, 16, 16, 5, 0).is_err());
    }
}
