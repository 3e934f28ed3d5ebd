//! Finite-difference certification of the analytic gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{AlignerVars, PyramidVars};
use super::{Graph, Var};
use crate::aligner::{AlignerConfig, AlignerWeights};
use crate::attention::Activation;
use crate::error::Result;
use crate::pyramid::{PyramidConfig, PyramidWeights};
use crate::tensor::{ConvKernel, Direction, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Accepted coordinates required for a pass.
    pub samples: usize,
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Combine the differences at `step` and `step/2` to cancel the
    /// second-order truncation term.
    pub extrapolate: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            samples: 100,
            tolerance: 1e-4,
            step: 1e-6,
            extrapolate: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub rejected: usize,
    /// `(parameter, index, analytic, central difference)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} max_rel_err={:.3e} tol={:.0e} checked={} rejected={}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.rejected,
            match self.worst {
                Some((i, j, a, cd)) if !self.passed =>
                    format!(" worst=param{i}[{j}] analytic={a:.6e} numeric={cd:.6e}"),
                _ => String::new(),
            }
        )
    }
}

fn evaluate<F>(params: &[Tensor<f64>], build: &F) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences at randomly drawn coordinates of `params`.
/// Coordinates whose ±step perturbation changes the kink signature are
/// rejected and replaced by fresh draws.
pub fn grad_check<F>(
    name: &str,
    params: &[Tensor<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(params, &build)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    let base_signature = g.kink_signature();

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut report = GradCheckReport {
        name: name.to_string(),
        tolerance: cfg.tolerance,
        max_rel_error: 0.0,
        checked: 0,
        rejected: 0,
        worst: None,
        passed: false,
    };
    let mut work = params.to_vec();
    for (i, j) in coords {
        if report.checked == cfg.samples {
            break;
        }
        let x0 = params[i].data()[j];
        let mut side = |delta: f64| -> Result<(f64, u64)> {
            work[i].data_mut()[j] = x0 + delta;
            let (g, _, out) = evaluate(&work, &build)?;
            Ok((g.value(out).data()[0], g.kink_signature()))
        };
        let mut central = |h: f64| -> Result<Option<f64>> {
            let (fp, sp) = side(h)?;
            let (fm, sm) = side(-h)?;
            Ok((sp == base_signature && sm == base_signature).then(|| (fp - fm) / (2.0 * h)))
        };
        let coarse = central(cfg.step)?;
        let cd = match (coarse, cfg.extrapolate) {
            (Some(d), false) => Some(d),
            (Some(d), true) => central(cfg.step / 2.0)?.map(|fine| (4.0 * fine - d) / 3.0),
            (None, _) => None,
        };
        work[i].data_mut()[j] = x0;
        let Some(cd) = cd else {
            report.rejected += 1;
            continue;
        };
        let a = analytic[i].data()[j];
        let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, j, a, cd));
        }
        report.checked += 1;
    }
    report.passed = report.checked >= cfg.samples && report.max_rel_error <= cfg.tolerance;
    Ok(report)
}

fn random(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Reduces `x` to a scalar through fixed random weights.
fn project(g: &mut Graph<f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = random(g.value(x).shape(), -1.0, 1.0, rng);
    g.weighted_sum(x, w)
}

fn kernel_params(k: &ConvKernel<f64>) -> [Tensor<f64>; 2] {
    [
        k.weight.clone(),
        Tensor::new(Shape::new(1, 1, 1, k.bias.len()), k.bias.clone()).expect("bias length"),
    ]
}

fn aligner_params(w: &AlignerWeights<f64>) -> Vec<Tensor<f64>> {
    w.kernels().into_iter().flat_map(kernel_params).collect()
}

fn kernel_vars(vars: &[Var]) -> Vec<super::KernelVars> {
    vars.chunks(2)
        .map(|c| super::KernelVars {
            weight: c[0],
            bias: c[1],
        })
        .collect()
}

/// Step used by [`certification_suite`], with extrapolation. Small gradient
/// entries drown in rounding noise (about `ε·|f|/h`) at a 1e-6 step; the
/// extrapolated difference keeps truncation error negligible at this size.
pub const SUITE_STEP: f64 = 1e-3;

/// Gradient checks over every differentiable op and over the full aligner
/// and pyramid. Linear ops use `linear_tol`, everything else `nonlinear_tol`.
pub fn certification_suite(
    nonlinear_tol: f64,
    linear_tol: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lin = GradCheckConfig {
        samples,
        tolerance: linear_tol,
        step: SUITE_STEP,
        extrapolate: true,
        seed,
    };
    let non = GradCheckConfig {
        tolerance: nonlinear_tol,
        ..lin.clone()
    };
    let mut reports = Vec::new();

    macro_rules! check {
        ($name:expr, $params:expr, $cfg:expr, |$g:ident, $v:ident, $r:ident| $body:expr) => {{
            let proj_seed: u64 = rng.gen();
            let report = grad_check(
                $name,
                &$params,
                |$g: &mut Graph<f64>, $v: &[Var]| {
                    let mut $r = ChaCha8Rng::seed_from_u64(proj_seed);
                    $body
                },
                $cfg,
            )?;
            reports.push(report);
        }};
    }

    let img = Shape::new(2, 3, 8, 8);

    // Linear and multilinear kernels.
    let conv = ConvKernel::new(
        random(Shape::new(4, 3, 3, 3), -1.0, 1.0, &mut rng),
        vec![0.1, -0.2, 0.3, 0.0],
    )
    .expect("valid kernel");
    let [cw, cb] = kernel_params(&conv);
    check!(
        "conv2d",
        [random(img, -1.0, 1.0, &mut rng), cw, cb],
        &lin,
        |g, v, r| {
            let y = g.conv2d(
                v[0],
                super::KernelVars {
                    weight: v[1],
                    bias: v[2],
                },
            )?;
            project(g, y, &mut r)
        }
    );
    check!(
        "matmul",
        [
            random(Shape::new(3, 1, 6, 5), -1.0, 1.0, &mut rng),
            random(Shape::new(3, 1, 5, 4), -1.0, 1.0, &mut rng)
        ],
        &lin,
        |g, v, r| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, &mut r)
        }
    );
    check!(
        "scaled_scores",
        [
            random(Shape::new(2, 1, 9, 4), -1.0, 1.0, &mut rng),
            random(Shape::new(2, 1, 9, 4), -1.0, 1.0, &mut rng)
        ],
        &lin,
        |g, v, r| {
            let y = g.scaled_scores(v[0], v[1], 4)?;
            project(g, y, &mut r)
        }
    );
    check!(
        "t2b_b2t_flatten",
        [random(img, -1.0, 1.0, &mut rng)],
        &lin,
        |g, v, r| {
            let (blocks, geometry) = g.t2b(v[0], 4)?;
            let m = g.flatten_blocks(blocks)?;
            let scaled = project(g, m, &mut r)?;
            let back = g.unflatten_blocks(m, 4)?;
            let img = g.b2t(back, &geometry)?;
            let s = project(g, img, &mut r)?;
            g.add(scaled, s)
        }
    );
    check!(
        "resize_down",
        [random(img, -1.0, 1.0, &mut rng)],
        &lin,
        |g, v, r| {
            let y = g.resize(v[0], 2, Direction::Down)?;
            project(g, y, &mut r)
        }
    );
    check!(
        "resize_up",
        [random(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng)],
        &lin,
        |g, v, r| {
            let y = g.resize(v[0], 4, Direction::Up)?;
            project(g, y, &mut r)
        }
    );
    check!(
        "concat_mix",
        [
            random(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut rng),
            random(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut rng),
            random(Shape::new(1, 2, 6, 6), 0.0, 1.0, &mut rng),
        ],
        &lin,
        |g, v, r| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let a = project(g, c, &mut r)?;
            let m = g.mix(v[2], &[v[0], v[1]])?;
            let b = project(g, m, &mut r)?;
            g.add(a, b)
        }
    );

    // Piecewise and nonlinear ops.
    check!(
        "relu",
        [random(img, -1.0, 1.0, &mut rng)],
        &non,
        |g, v, r| {
            let y = g.relu(v[0])?;
            project(g, y, &mut r)
        }
    );
    check!(
        "softmax_rows",
        [random(Shape::new(3, 1, 8, 8), -2.0, 2.0, &mut rng)],
        &non,
        |g, v, r| {
            let y = g.softmax_rows(v[0])?;
            project(g, y, &mut r)
        }
    );
    check!(
        "htn_rows",
        [random(Shape::new(3, 1, 8, 8), -0.5, 1.5, &mut rng)],
        &non,
        |g, v, r| {
            let y = g.htn_rows(v[0])?;
            project(g, y, &mut r)
        }
    );
    check!(
        "channel_softmax",
        [random(Shape::new(2, 3, 6, 6), -2.0, 2.0, &mut rng)],
        &non,
        |g, v, r| {
            let y = g.channel_softmax(v[0])?;
            project(g, y, &mut r)
        }
    );
    check!(
        "charbonnier",
        [
            random(img, 0.0, 1.0, &mut rng),
            random(img, 0.0, 1.0, &mut rng)
        ],
        &non,
        |g, v, _r| g.charbonnier(v[0], v[1], 0.1)
    );

    // Full single-scale aligner, gradients with respect to weights and both images.
    for activation in [Activation::Softmax, Activation::Htn] {
        let cfg = AlignerConfig {
            block_size: 4,
            fe: 6,
            fm: 4,
            activation,
            ..Default::default()
        };
        let w = AlignerWeights::<f64>::init(&cfg, &mut rng);
        let mut params = vec![
            random(img, 0.0, 1.0, &mut rng),
            random(img, 0.0, 1.0, &mut rng),
        ];
        params.extend(aligner_params(&w));
        let name = format!("interframe_align_{}", activation);
        check!(&name, params, &non, |g, v, r| {
            let k = kernel_vars(&v[2..]);
            let vars = AlignerVars {
                feature_layers: k[..3].to_vec(),
                proj_q: k[3],
                proj_k: None,
            };
            let y = vars.forward(g, v[0], v[1], &cfg)?;
            project(g, y, &mut r)
        });
    }

    // Full pyramid with fusion.
    let cfg = PyramidConfig::new(
        vec![1, 2],
        AlignerConfig {
            block_size: 4,
            fe: 4,
            fm: 3,
            ..Default::default()
        },
    )?;
    let w = PyramidWeights::<f64>::init(&cfg, &mut rng);
    let mut params = vec![
        random(img, 0.0, 1.0, &mut rng),
        random(img, 0.0, 1.0, &mut rng),
    ];
    params.extend(w.kernels().into_iter().flat_map(kernel_params));
    check!("pyramid_align", params, &non, |g, v, r| {
        let k = kernel_vars(&v[2..]);
        let vars = PyramidVars {
            scales: k[..8]
                .chunks(4)
                .map(|c| AlignerVars {
                    feature_layers: c[..3].to_vec(),
                    proj_q: c[3],
                    proj_k: None,
                })
                .collect(),
            fusion: k[8..].to_vec(),
        };
        let y = vars.forward(g, v[0], v[1], &cfg)?;
        project(g, y, &mut r)
    });

    Ok(reports)
}
