//! Pyramidal global alignment and pixel-attention fusion.
//!
//! One interframe aligner runs per downscale factor; each result is upsampled
//! back to full resolution. A small CNN looks at all candidates and emits one
//! mask channel per candidate, normalized across channels by a per-pixel
//! softmax, and the output is the mask-weighted sum of the candidates.

use rand::Rng;
use rayon::prelude::*;

use crate::aligner::{
    interframe_align, uniform_kernel, AlignerConfig, AlignerWeights, IMAGE_CHANNELS,
};
use crate::attention::{softmax_in_place, AttentionMatrix};
use crate::error::{Result, XabaError};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, conv2d, relu, resize, ConvKernel, Direction, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    /// Integer downscale factors, strictly increasing and starting at 1.
    pub scales: Vec<usize>,
    pub aligner: AlignerConfig,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            scales: vec![1, 2, 4],
            aligner: AlignerConfig::default(),
        }
    }
}

impl PyramidConfig {
    pub fn new(scales: Vec<usize>, aligner: AlignerConfig) -> Result<Self> {
        let cfg = PyramidConfig { scales, aligner };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.first() != Some(&1) {
            return Err(XabaError::config(format!(
                "scales must start at 1, got {:?}",
                self.scales
            )));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(XabaError::config(format!(
                "scales must be strictly increasing, got {:?}",
                self.scales
            )));
        }
        self.aligner.validate()
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    /// Image sides must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.aligner.block_size * self.max_scale()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = self.required_multiple();
        if !shape.height.is_multiple_of(m) || !shape.width.is_multiple_of(m) {
            return Err(XabaError::precondition(format!(
                "{}x{} is not a multiple of block size x largest scale = {m}",
                shape.height, shape.width
            )));
        }
        Ok(())
    }

    /// Displacement, in full-resolution pixels, that still fits inside one
    /// block at the coarsest scale.
    pub fn coarse_reach(&self) -> usize {
        self.max_scale() * (self.aligner.block_size - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T> {
    /// `conv3×3(3n→f_e)`, ReLU, `conv3×3(f_e→n)`.
    pub mask_layers: Vec<ConvKernel<T>>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn init(candidates: usize, fe: usize, rng: &mut impl Rng) -> Self {
        FusionWeights {
            mask_layers: vec![
                uniform_kernel(fe, IMAGE_CHANNELS * candidates, 3, rng),
                uniform_kernel(candidates, fe, 3, rng),
            ],
        }
    }

    pub fn candidates(&self) -> usize {
        self.mask_layers.last().map_or(0, ConvKernel::out_channels)
    }

    pub fn validate(&self, candidates: usize) -> Result<()> {
        let [first, last] = self.mask_layers.as_slice() else {
            return Err(XabaError::config(format!(
                "fusion needs 2 mask layers, found {}",
                self.mask_layers.len()
            )));
        };
        if first.in_channels() != IMAGE_CHANNELS * candidates || last.out_channels() != candidates {
            return Err(XabaError::config(format!(
                "fusion layers {} -> {} do not fit {candidates} candidates",
                first.weight.shape(),
                last.weight.shape()
            )));
        }
        if last.in_channels() != first.out_channels() {
            return Err(XabaError::config("fusion layers do not chain"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> FusionWeights<U> {
        FusionWeights {
            mask_layers: self.mask_layers.iter().map(ConvKernel::cast).collect(),
        }
    }
}

/// Independent aligner weights for every scale plus the fusion network.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidWeights<T> {
    pub scales: Vec<AlignerWeights<T>>,
    pub fusion: FusionWeights<T>,
}

impl<T: Scalar> PyramidWeights<T> {
    pub fn init(cfg: &PyramidConfig, rng: &mut impl Rng) -> Self {
        let scales = cfg
            .scales
            .iter()
            .map(|_| AlignerWeights::init(&cfg.aligner, rng))
            .collect();
        let fusion = FusionWeights::init(cfg.scales.len(), cfg.aligner.fe, rng);
        PyramidWeights { scales, fusion }
    }

    pub fn validate(&self, cfg: &PyramidConfig) -> Result<()> {
        if self.scales.len() != cfg.scales.len() {
            return Err(XabaError::config(format!(
                "weights hold {} scales, config has {}",
                self.scales.len(),
                cfg.scales.len()
            )));
        }
        for w in &self.scales {
            w.validate(&cfg.aligner)?;
        }
        self.fusion.validate(cfg.scales.len())
    }

    /// Every kernel in canonical order: each scale's aligner, then the fusion layers.
    pub fn kernels(&self) -> Vec<&ConvKernel<T>> {
        let mut out: Vec<_> = self
            .scales
            .iter()
            .flat_map(AlignerWeights::kernels)
            .collect();
        out.extend(self.fusion.mask_layers.iter());
        out
    }

    pub fn kernels_mut(&mut self) -> Vec<&mut ConvKernel<T>> {
        let mut out: Vec<_> = self
            .scales
            .iter_mut()
            .flat_map(AlignerWeights::kernels_mut)
            .collect();
        out.extend(self.fusion.mask_layers.iter_mut());
        out
    }

    /// Hierarchical names (`scale2/feat0`, `fusion/mask1`) matching [`PyramidWeights::kernels`].
    pub fn kernel_names(&self, factors: &[usize]) -> Vec<String> {
        let mut out = Vec::new();
        for (w, k) in self.scales.iter().zip(factors) {
            out.extend(
                w.kernel_names()
                    .into_iter()
                    .map(|n| format!("scale{k}/{n}")),
            );
        }
        out.extend((0..self.fusion.mask_layers.len()).map(|i| format!("fusion/mask{i}")));
        out
    }

    /// Mutable parameter slices in canonical order (weight, then bias, per kernel).
    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.kernels_mut()
            .into_iter()
            .flat_map(|k| [k.weight.data_mut(), k.bias.as_mut_slice()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels()
            .iter()
            .map(|k| k.weight.len() + k.bias.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> PyramidWeights<U> {
        PyramidWeights {
            scales: self.scales.iter().map(AlignerWeights::cast).collect(),
            fusion: self.fusion.cast(),
        }
    }
}

/// Softmax across channels at every pixel.
pub fn channel_softmax<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let s = raw.shape();
    let mut out = raw.clone();
    let mut column = vec![T::zero(); s.channels];
    let data = out.data_mut();
    for n in 0..s.batch {
        for p in 0..s.plane() {
            let base = n * s.item() + p;
            for (c, v) in column.iter_mut().enumerate() {
                *v = data[base + c * s.plane()];
            }
            softmax_in_place(&mut column);
            for (c, &v) in column.iter().enumerate() {
                data[base + c * s.plane()] = v;
            }
        }
    }
    out
}

/// `D(M, C) = Σᵢ M[i]·C[i]`, each mask channel broadcast across the candidate's colour channels.
pub fn mix_candidates<T: Scalar>(mask: &Tensor<T>, candidates: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = candidates
        .first()
        .ok_or_else(|| XabaError::config("fusion needs at least one candidate"))?
        .shape();
    let ms = mask.shape();
    if ms.channels != candidates.len() || !ms.same_spatial(&first) {
        return Err(XabaError::config(format!(
            "mask {ms} does not fit {} candidates of {first}",
            candidates.len()
        )));
    }
    if candidates.iter().any(|c| c.shape() != first) {
        return Err(XabaError::config("fusion candidates differ in shape"));
    }
    let mut out = Tensor::zeros(first);
    let plane = first.plane();
    let od = out.data_mut();
    for n in 0..first.batch {
        for (i, cand) in candidates.iter().enumerate() {
            let m = &mask.data()[(n * ms.channels + i) * plane..][..plane];
            for c in 0..first.channels {
                let off = (n * first.channels + c) * plane;
                let src = &cand.data()[off..off + plane];
                for ((o, &mv), &cv) in od[off..off + plane].iter_mut().zip(m).zip(src) {
                    *o += mv * cv;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Fusion<T> {
    pub output: Tensor<T>,
    /// Per-pixel candidate weights, `(batch, n, h, w)`.
    pub mask: Tensor<T>,
}

/// Raw mask scores before the channel softmax.
pub fn mask_scores<T: Scalar>(
    candidates: &[&Tensor<T>],
    fw: &FusionWeights<T>,
) -> Result<Tensor<T>> {
    fw.validate(candidates.len())?;
    let stacked = concat_channels(candidates)?;
    let hidden = relu(&conv2d(&stacked, &fw.mask_layers[0])?);
    conv2d(&hidden, &fw.mask_layers[1])
}

pub fn fuse<T: Scalar>(candidates: &[&Tensor<T>], fw: &FusionWeights<T>) -> Result<Fusion<T>> {
    let first = candidates
        .first()
        .ok_or_else(|| XabaError::config("fusion needs at least one candidate"))?
        .shape();
    if candidates.iter().any(|c| c.shape() != first) {
        return Err(XabaError::config("fusion candidates differ in shape"));
    }
    let mask = channel_softmax(&mask_scores(candidates, fw)?);
    let output = mix_candidates(&mask, candidates)?;
    Ok(Fusion { output, mask })
}

#[derive(Clone, Debug)]
pub struct PyramidAlignment<T> {
    pub aligned: Tensor<T>,
    /// Full-resolution output of every scale, in config order.
    pub candidates: Vec<Tensor<T>>,
    pub mask: Tensor<T>,
    pub attention: Vec<AttentionMatrix<T>>,
}

impl<T: Scalar> PyramidAlignment<T> {
    pub fn fallback_rows(&self) -> usize {
        self.attention.iter().map(|a| a.fallback_rows).sum()
    }
}

/// Aligns at one scale and brings the result back to full resolution.
pub fn align_at_scale<T: Scalar>(
    reference: &Tensor<T>,
    target: &Tensor<T>,
    weights: &AlignerWeights<T>,
    cfg: &AlignerConfig,
    factor: usize,
) -> Result<(Tensor<T>, AttentionMatrix<T>)> {
    let r = resize(reference, factor, Direction::Down)?;
    let t = resize(target, factor, Direction::Down)?;
    let out = interframe_align(&r, &t, weights, cfg)?;
    Ok((resize(&out.aligned, factor, Direction::Up)?, out.attention))
}

pub fn pyramid_align<T: Scalar>(
    reference: &Tensor<T>,
    target: &Tensor<T>,
    weights: &PyramidWeights<T>,
    cfg: &PyramidConfig,
) -> Result<PyramidAlignment<T>> {
    cfg.validate()?;
    weights.validate(cfg)?;
    if reference.shape() != target.shape() {
        return Err(XabaError::precondition(format!(
            "reference {} and target {} differ in shape",
            reference.shape(),
            target.shape()
        )));
    }
    cfg.check_input(reference.shape())?;
    let per_scale: Vec<(Tensor<T>, AttentionMatrix<T>)> = cfg
        .scales
        .par_iter()
        .zip(&weights.scales)
        .map(|(&factor, w)| align_at_scale(reference, target, w, &cfg.aligner, factor))
        .collect::<Result<_>>()?;
    let (candidates, attention): (Vec<_>, Vec<_>) = per_scale.into_iter().unzip();
    let refs: Vec<&Tensor<T>> = candidates.iter().collect();
    let fusion = fuse(&refs, &weights.fusion)?;
    Ok(PyramidAlignment {
        aligned: fusion.output,
        candidates,
        mask: fusion.mask,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_, _, _, _| r.gen_range(0.0..1.0))
    }

    fn cfg(scales: Vec<usize>, b: usize) -> PyramidConfig {
        PyramidConfig::new(
            scales,
            AlignerConfig {
                block_size: b,
                fe: 8,
                fm: 4,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let a = AlignerConfig::default();
        assert!(PyramidConfig::new(vec![2, 4], a).is_err());
        assert!(PyramidConfig::new(vec![1, 4, 2], a).is_err());
        assert!(PyramidConfig::new(vec![1, 1], a).is_err());
        let c = PyramidConfig::new(vec![1, 2, 4], a).unwrap();
        assert_eq!(c.required_multiple(), 80);
        assert!(c.check_input(Shape::new(1, 3, 80, 160)).is_ok());
        assert!(matches!(
            c.check_input(Shape::new(1, 3, 60, 80)),
            Err(XabaError::Precondition(_))
        ));
    }

    #[test]
    fn single_scale_equals_interframe_align() {
        let c = cfg(vec![1], 4);
        let w = PyramidWeights::<f32>::init(&c, &mut rng(1));
        let (r, t) = (
            random(Shape::new(1, 3, 8, 8), 2),
            random(Shape::new(1, 3, 8, 8), 3),
        );
        let p = pyramid_align(&r, &t, &w, &c).unwrap();
        let single = interframe_align(&r, &t, &w.scales[0], &c.aligner).unwrap();
        assert_eq!(p.aligned, single.aligned);
        assert!(p.mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn constant_inputs_give_constant_output() {
        let c = cfg(vec![1, 2, 4], 4);
        let w = PyramidWeights::<f32>::init(&c, &mut rng(4));
        let img = Tensor::full(Shape::new(1, 3, 16, 16), 0.3f32);
        let p = pyramid_align(&img, &img, &w, &c).unwrap();
        assert!(p.aligned.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn three_scales_on_80px_blocks_of_20() {
        let c = PyramidConfig::new(
            vec![1, 2, 4],
            AlignerConfig {
                fe: 8,
                fm: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let w = PyramidWeights::<f32>::init(&c, &mut rng(5));
        let (r, t) = (
            random(Shape::new(1, 3, 80, 80), 6),
            random(Shape::new(1, 3, 80, 80), 7),
        );
        let p = pyramid_align(&r, &t, &w, &c).unwrap();
        assert_eq!(p.candidates.len(), 3);
        assert!(p
            .candidates
            .iter()
            .all(|x| x.shape() == Shape::new(1, 3, 80, 80)));
        assert_eq!(p.attention[2].num_blocks(), 1);
        assert_eq!(p.attention[0].num_blocks(), 16);
    }

    #[test]
    fn fuse_single_candidate_is_exact() {
        let cand = random(Shape::new(2, 3, 6, 6), 8);
        let fw = FusionWeights::init(1, 5, &mut rng(9));
        assert_eq!(fuse(&[&cand], &fw).unwrap().output, cand);
    }

    #[test]
    fn identical_candidates_pass_through() {
        let cand = random(Shape::new(1, 3, 6, 6), 10);
        let fw = FusionWeights::init(3, 5, &mut rng(11));
        let out = fuse(&[&cand, &cand, &cand], &fw).unwrap().output;
        assert!(out.max_abs_diff(&cand) < 1e-6);
    }

    #[test]
    fn hand_set_mask() {
        let zeros = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
        let ones = Tensor::full(Shape::new(1, 3, 1, 1), 1.0f32);
        let mask = Tensor::new(Shape::new(1, 2, 1, 1), vec![0.25f32, 0.75]).unwrap();
        assert_eq!(
            mix_candidates(&mask, &[&zeros, &ones]).unwrap().data(),
            &[0.75; 3]
        );
    }

    #[test]
    fn mask_is_partition_of_unity() {
        let cands: Vec<_> = (0..3)
            .map(|i| random(Shape::new(2, 3, 5, 7), 20 + i))
            .collect();
        let refs: Vec<_> = cands.iter().collect();
        let fw = FusionWeights::init(3, 6, &mut rng(12));
        let f = fuse(&refs, &fw).unwrap();
        let s = f.mask.shape();
        for n in 0..s.batch {
            for y in 0..s.height {
                for x in 0..s.width {
                    let total: f32 = (0..3).map(|c| f.mask.at(n, c, y, x)).sum();
                    assert!((total - 1.0).abs() < 1e-5);
                    for c in 0..3 {
                        let m = f.mask.at(n, c, y, x);
                        assert!(m > 0.0 && m < 1.0);
                    }
                    for c in 0..3 {
                        let vals: Vec<f32> = cands.iter().map(|t| t.at(n, c, y, x)).collect();
                        let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                        let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let v = f.output.at(n, c, y, x);
                        assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn suppressed_candidate_has_no_influence() {
        let a = random(Shape::new(1, 3, 4, 4), 30);
        let b = random(Shape::new(1, 3, 4, 4), 31);
        let c = random(Shape::new(1, 3, 4, 4), 32);
        let raw = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, ch, y, x| {
            if ch == 1 {
                -1e4
            } else {
                (y + x) as f32
            }
        });
        let mask = channel_softmax(&raw);
        assert!(mask.data()[16..].iter().all(|&m| m == 0.0));
        let with_b = mix_candidates(&mask, &[&a, &b]).unwrap();
        let with_c = mix_candidates(&mask, &[&a, &c]).unwrap();
        assert_eq!(with_b, with_c);
        assert_eq!(with_b, a);
    }

    #[test]
    fn coarse_scale_reach() {
        let c = PyramidConfig::default();
        let (b, k) = (c.aligner.block_size, c.max_scale());
        assert_eq!(c.coarse_reach(), 76);
        // A feature at the first pixel of a coarse block, displaced by d
        // full-resolution pixels, lands on coarse column d/k.
        let block_of = |full_x: usize| (full_x / k) / b;
        for d in 0..=c.coarse_reach() {
            assert_eq!(block_of(d), block_of(0));
        }
        assert_ne!(block_of(c.coarse_reach() + k), block_of(0));
    }

    #[test]
    fn mismatched_fusion_weights() {
        let cand = random(Shape::new(1, 3, 4, 4), 40);
        let fw = FusionWeights::<f32>::init(2, 4, &mut rng(41));
        assert!(fuse(&[&cand], &fw).is_err());
    }
}
