//! Single-scale interframe aligner.
//!
//! Both frames go through a shared residual feature extractor, are projected
//! by 1×1 convolutions to `f_m` channels, and are cut into blocks. Within each
//! block the reference features act as queries and the target features as
//! keys; the resulting attention matrix recombines the target's pixels in the
//! reference's geometry.

use rand::Rng;

use crate::attention::{
    activate_owned, apply_attention, scaled_scores, sparsify, Activation, AttentionConfig,
    AttentionMatrix,
};
use crate::blockops::{b2t, flatten_blocks, t2b, unflatten_blocks, BlockGeometry};
use crate::error::{Result, XabaError};
use crate::scalar::{lit, Scalar};
use crate::tensor::{conv2d, relu, ConvKernel, Shape, Tensor};

/// Stem convolution plus two residual units.
pub const FEATURE_LAYERS: usize = 3;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignerConfig {
    pub block_size: usize,
    /// Feature-extractor width.
    pub fe: usize,
    /// Width after the 1×1 projection; also the attention `d_k`.
    pub fm: usize,
    pub activation: Activation,
    pub share_projection: bool,
    /// Inference-time attention sparsification threshold; 0 disables it.
    pub sparsity_tau: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            block_size: 20,
            fe: 32,
            fm: 16,
            activation: Activation::Softmax,
            share_projection: true,
            sparsity_tau: 0.0,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return Err(XabaError::config(format!(
                "block size must be at least 2, got {}",
                self.block_size
            )));
        }
        if self.fm == 0 || self.fm > self.fe {
            return Err(XabaError::config(format!(
                "need 1 <= f_m <= f_e, got f_e={} f_m={}",
                self.fe, self.fm
            )));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            activation: self.activation,
            d_k: self.fm,
            sparsity_threshold: self.sparsity_tau,
        }
    }
}

/// Uniform initialization in `±√(1/fan_in)` for weights and bias alike.
pub fn uniform_kernel<T: Scalar>(
    out: usize,
    inp: usize,
    size: usize,
    rng: &mut impl Rng,
) -> ConvKernel<T> {
    let bound = (1.0 / (inp * size * size) as f64).sqrt();
    let weight = Tensor::from_fn(Shape::new(out, inp, size, size), |_, _, _, _| {
        lit(rng.gen_range(-bound..bound))
    });
    let bias = (0..out)
        .map(|_| lit(rng.gen_range(-bound..bound)))
        .collect();
    ConvKernel { weight, bias }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerWeights<T> {
    /// `conv3×3(3→f_e)` stem followed by the residual `conv3×3(f_e→f_e)` layers.
    pub feature_layers: Vec<ConvKernel<T>>,
    pub proj_q: ConvKernel<T>,
    /// `None` when the key projection shares `proj_q`.
    pub proj_k: Option<ConvKernel<T>>,
}

impl<T: Scalar> AlignerWeights<T> {
    pub fn init(cfg: &AlignerConfig, rng: &mut impl Rng) -> Self {
        let mut feature_layers = vec![uniform_kernel(cfg.fe, IMAGE_CHANNELS, 3, rng)];
        for _ in 1..FEATURE_LAYERS {
            feature_layers.push(uniform_kernel(cfg.fe, cfg.fe, 3, rng));
        }
        let proj_q = uniform_kernel(cfg.fm, cfg.fe, 1, rng);
        let proj_k = (!cfg.share_projection).then(|| uniform_kernel(cfg.fm, cfg.fe, 1, rng));
        AlignerWeights {
            feature_layers,
            proj_q,
            proj_k,
        }
    }

    pub fn proj_k(&self) -> &ConvKernel<T> {
        self.proj_k.as_ref().unwrap_or(&self.proj_q)
    }

    pub fn fe(&self) -> usize {
        self.proj_q.in_channels()
    }

    pub fn fm(&self) -> usize {
        self.proj_q.out_channels()
    }

    /// Checks layer shapes against `cfg`.
    pub fn validate(&self, cfg: &AlignerConfig) -> Result<()> {
        let err = |what: String| Err(XabaError::config(format!("aligner weights: {what}")));
        if self.feature_layers.len() != FEATURE_LAYERS {
            return err(format!(
                "expected {FEATURE_LAYERS} feature layers, found {}",
                self.feature_layers.len()
            ));
        }
        for (i, layer) in self.feature_layers.iter().enumerate() {
            let inp = if i == 0 { IMAGE_CHANNELS } else { cfg.fe };
            if layer.out_channels() != cfg.fe
                || layer.in_channels() != inp
                || layer.size() != (3, 3)
            {
                return err(format!(
                    "feature layer {i} has shape {}",
                    layer.weight.shape()
                ));
            }
        }
        for (name, p) in [
            ("proj_q", Some(&self.proj_q)),
            ("proj_k", self.proj_k.as_ref()),
        ] {
            if let Some(p) = p {
                if p.out_channels() != cfg.fm || p.in_channels() != cfg.fe || p.size() != (1, 1) {
                    return err(format!("{name} has shape {}", p.weight.shape()));
                }
            }
        }
        if self.proj_k.is_some() == cfg.share_projection {
            return err(format!(
                "share_projection={} disagrees with stored key projection",
                cfg.share_projection
            ));
        }
        Ok(())
    }

    /// Kernels in canonical order: feature layers, `proj_q`, then `proj_k` if unshared.
    pub fn kernels(&self) -> Vec<&ConvKernel<T>> {
        let mut out: Vec<_> = self.feature_layers.iter().collect();
        out.push(&self.proj_q);
        out.extend(self.proj_k.as_ref());
        out
    }

    pub fn kernels_mut(&mut self) -> Vec<&mut ConvKernel<T>> {
        let mut out: Vec<_> = self.feature_layers.iter_mut().collect();
        out.push(&mut self.proj_q);
        out.extend(self.proj_k.as_mut());
        out
    }

    /// Names matching [`AlignerWeights::kernels`].
    pub fn kernel_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.feature_layers.len())
            .map(|i| format!("feat{i}"))
            .collect();
        out.push("proj_q".into());
        if self.proj_k.is_some() {
            out.push("proj_k".into());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> AlignerWeights<U> {
        AlignerWeights {
            feature_layers: self.feature_layers.iter().map(ConvKernel::cast).collect(),
            proj_q: self.proj_q.cast(),
            proj_k: self.proj_k.as_ref().map(ConvKernel::cast),
        }
    }
}

pub fn extract_features<T: Scalar>(img: &Tensor<T>, w: &AlignerWeights<T>) -> Result<Tensor<T>> {
    if img.shape().channels != IMAGE_CHANNELS {
        return Err(XabaError::config(format!(
            "feature extractor expects {IMAGE_CHANNELS}-channel images, got {}",
            img.shape().channels
        )));
    }
    let (stem, residual) = w
        .feature_layers
        .split_first()
        .ok_or_else(|| XabaError::config("aligner weights have no feature layers"))?;
    let mut h = relu(&conv2d(img, stem)?);
    for layer in residual {
        h = h.add(&relu(&conv2d(&h, layer)?))?;
    }
    Ok(h)
}

/// Per-pixel linear map `f_e → f_m`.
pub fn project<T: Scalar>(features: &Tensor<T>, proj: &ConvKernel<T>) -> Result<Tensor<T>> {
    if proj.size() != (1, 1) {
        return Err(XabaError::config(format!(
            "projection must be 1x1, got {:?}",
            proj.size()
        )));
    }
    conv2d(features, proj)
}

fn check_pair<T: Scalar>(reference: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if reference.shape() != target.shape() {
        return Err(XabaError::precondition(format!(
            "reference {} and target {} differ in shape",
            reference.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Pre-activation block scores `Q·Kᵀ/√f_m` with `Q` from the reference and `K` from the target.
pub fn block_scores<T: Scalar>(
    reference: &Tensor<T>,
    target: &Tensor<T>,
    w: &AlignerWeights<T>,
    cfg: &AlignerConfig,
) -> Result<(Tensor<T>, BlockGeometry)> {
    check_pair(reference, target)?;
    BlockGeometry::new(reference.shape(), cfg.block_size)?;
    let q = project(&extract_features(reference, w)?, &w.proj_q)?;
    let k = project(&extract_features(target, w)?, w.proj_k())?;
    let (qb, geometry) = t2b(&q, cfg.block_size)?;
    let (kb, _) = t2b(&k, cfg.block_size)?;
    let scores = scaled_scores(&flatten_blocks(&qb)?, &flatten_blocks(&kb)?, cfg.fm)?;
    Ok((scores, geometry))
}

#[derive(Clone, Debug)]
pub struct Alignment<T> {
    /// Target content laid out in the reference geometry.
    pub aligned: Tensor<T>,
    pub attention: AttentionMatrix<T>,
}

pub fn interframe_align<T: Scalar>(
    reference: &Tensor<T>,
    target: &Tensor<T>,
    w: &AlignerWeights<T>,
    cfg: &AlignerConfig,
) -> Result<Alignment<T>> {
    cfg.validate()?;
    let (scores, _) = block_scores(reference, target, w, cfg)?;
    let mut attention = activate_owned(cfg.activation, scores);
    if cfg.sparsity_tau > 0.0 {
        attention = sparsify(&attention, cfg.sparsity_tau)?;
    }
    let (vb, geometry) = t2b(target, cfg.block_size)?;
    let mixed = apply_attention(&attention, &flatten_blocks(&vb)?)?;
    let aligned = b2t(&unflatten_blocks(&mixed, cfg.block_size)?, &geometry)?;
    Ok(Alignment { aligned, attention })
}
