//! Mini-batch training on small synthetic pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::PyramidVars;
use super::optim::{adam_step, LrSchedule, OptimState, MAX_LR};
use super::{charbonnier, Graph};
use crate::error::{Result, XabaError};
use crate::pyramid::{pyramid_align, PyramidConfig, PyramidWeights};
use crate::scalar::Scalar;
use crate::synth::{mean_psnr, Pair};
use crate::tensor::Tensor;

pub const CHARBONNIER_EPS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub pyramid: PyramidConfig,
    pub batch_size: usize,
    pub max_lr: f64,
    pub budget: Budget,
    pub eps: f64,
    /// Random flips and, for square images, quarter turns.
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(pyramid: PyramidConfig, budget: Budget, seed: u64) -> Self {
        TrainConfig {
            pyramid,
            batch_size: 4,
            max_lr: MAX_LR,
            budget,
            eps: CHARBONNIER_EPS,
            augment: true,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub weights: PyramidWeights<T>,
    /// Mini-batch loss before each update.
    pub step_losses: Vec<f64>,
    /// Mean of `step_losses` over each pass through the data.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Augment {
    flip_x: bool,
    flip_y: bool,
    transpose: bool,
}

impl Augment {
    fn draw(rng: &mut impl Rng, square: bool) -> Self {
        Augment {
            flip_x: rng.gen(),
            flip_y: rng.gen(),
            transpose: square && rng.gen(),
        }
    }

    /// Flips then optional transpose; together these give all eight symmetries
    /// of a square (quarter turns included).
    fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let (h, w) = (s.height, s.width);
        let src = |y: usize, xx: usize| {
            let y = if self.flip_y { h - 1 - y } else { y };
            let xx = if self.flip_x { w - 1 - xx } else { xx };
            (y, xx)
        };
        Tensor::from_fn(s, |n, c, y, xx| {
            let (y, xx) = if self.transpose {
                src(xx, y)
            } else {
                src(y, xx)
            };
            x.at(n, c, y, xx)
        })
    }
}

fn total_steps(budget: Budget, len: usize, batch: usize) -> usize {
    match budget {
        Budget::Steps(n) => n,
        Budget::Epochs(e) => e * len.div_ceil(batch),
    }
}

/// Adam on the mean Charbonnier loss of the pyramid output against `truth`.
/// Mini-batches are drawn from a fresh shuffle of the data on every epoch.
pub fn train_toy<T: Scalar>(
    pairs: &[Pair<T>],
    cfg: &TrainConfig,
    init: PyramidWeights<T>,
) -> Result<TrainOutcome<T>> {
    if pairs.is_empty() {
        return Err(XabaError::config("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(XabaError::config("batch size must be at least 1"));
    }
    cfg.pyramid.validate()?;
    init.validate(&cfg.pyramid)?;
    let shape = pairs[0].reference.shape();
    for p in pairs {
        if p.reference.shape() != shape
            || p.target.shape() != shape
            || p.truth.shape() != shape
            || shape.batch != 1
        {
            return Err(XabaError::config(
                "training pairs must be single images of one common shape",
            ));
        }
    }
    cfg.pyramid.check_input(shape)?;

    let steps = total_steps(cfg.budget, pairs.len(), cfg.batch_size);
    let schedule = LrSchedule::new(cfg.max_lr, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = init;
    let mut state = OptimState::new(&weights.parameter_slices_mut());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = pairs.len();
    let mut step_losses = Vec::with_capacity(steps);
    let mut epoch_losses = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;
    let square = shape.height == shape.width;

    for step in 0..steps {
        if cursor >= pairs.len() {
            if epoch_count > 0 {
                epoch_losses.push(epoch_sum / epoch_count as f64);
            }
            order.shuffle(&mut rng);
            cursor = 0;
            epoch_sum = 0.0;
            epoch_count = 0;
        }
        let end = (cursor + cfg.batch_size).min(pairs.len());
        let (mut refs, mut tgts, mut truths) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &order[cursor..end] {
            let p = &pairs[i];
            if cfg.augment {
                let a = Augment::draw(&mut rng, square);
                refs.push(a.apply(&p.reference));
                tgts.push(a.apply(&p.target));
                truths.push(a.apply(&p.truth));
            } else {
                refs.push(p.reference.clone());
                tgts.push(p.target.clone());
                truths.push(p.truth.clone());
            }
        }
        cursor = end;
        let stack = |v: &[Tensor<T>]| Tensor::stack(&v.iter().collect::<Vec<_>>());

        let mut g = Graph::new();
        let vars = PyramidVars::register(&mut g, &weights);
        let r = g.constant(stack(&refs)?);
        let t = g.constant(stack(&tgts)?);
        let truth = g.constant(stack(&truths)?);
        let out = vars.forward(&mut g, r, t, &cfg.pyramid)?;
        let loss = g.charbonnier(out, truth, cfg.eps)?;
        let value = g.value(loss).data()[0].to_f64_lossy();
        let grads = vars.gradients(&g, &g.backward(loss)?);
        drop(g);

        adam_step(
            &mut weights.parameter_slices_mut(),
            &grads,
            &mut state,
            schedule.lr(step),
        )?;
        step_losses.push(value);
        epoch_sum += value;
        epoch_count += 1;
    }
    if epoch_count > 0 {
        epoch_losses.push(epoch_sum / epoch_count as f64);
    }
    Ok(TrainOutcome {
        weights,
        step_losses,
        epoch_losses,
    })
}

/// Mean per-pair PSNR of the eager pyramid output against `truth`.
pub fn evaluate_psnr<T: Scalar>(
    pairs: &[Pair<T>],
    weights: &PyramidWeights<T>,
    cfg: &PyramidConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(XabaError::config("evaluation set is empty"));
    }
    let mut total = 0.0;
    for p in pairs {
        let out = pyramid_align(&p.reference, &p.target, weights, cfg)?;
        total += mean_psnr(&out.aligned, &p.truth)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean Charbonnier loss of the eager pyramid output over `pairs`.
pub fn evaluate_loss<T: Scalar>(
    pairs: &[Pair<T>],
    weights: &PyramidWeights<T>,
    cfg: &PyramidConfig,
    eps: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(XabaError::config("evaluation set is empty"));
    }
    let mut total = 0.0;
    for p in pairs {
        let out = pyramid_align(&p.reference, &p.target, weights, cfg)?;
        total += charbonnier(&out.aligned, &p.truth, eps)?.to_f64_lossy();
    }
    Ok(total / pairs.len() as f64)
}
