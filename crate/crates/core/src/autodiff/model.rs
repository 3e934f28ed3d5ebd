//! Aligner and pyramid forward passes recorded on a [`Graph`].

use super::{Gradients, Graph, Var};
use crate::aligner::{AlignerConfig, AlignerWeights};
use crate::attention::Activation;
use crate::error::{Result, XabaError};
use crate::pyramid::{PyramidConfig, PyramidWeights};
use crate::scalar::Scalar;
use crate::tensor::{ConvKernel, Direction};

#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub weight: Var,
    pub bias: Var,
}

impl KernelVars {
    fn collect<T: Scalar>(&self, g: &Graph<T>, grads: &Gradients<T>, out: &mut Vec<Vec<T>>) {
        for v in [self.weight, self.bias] {
            out.push(grads.get_or_zeros(v, g.value(v).shape()).into_data());
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignerVars {
    pub feature_layers: Vec<KernelVars>,
    pub proj_q: KernelVars,
    pub proj_k: Option<KernelVars>,
}

impl AlignerVars {
    pub fn register<T: Scalar>(g: &mut Graph<T>, w: &AlignerWeights<T>) -> Self {
        AlignerVars {
            feature_layers: w.feature_layers.iter().map(|k| g.kernel(k)).collect(),
            proj_q: g.kernel(&w.proj_q),
            proj_k: w.proj_k.as_ref().map(|k| g.kernel(k)),
        }
    }

    /// Same order as [`AlignerWeights::kernels`].
    pub fn kernels(&self) -> Vec<KernelVars> {
        let mut out = self.feature_layers.clone();
        out.push(self.proj_q);
        out.extend(self.proj_k);
        out
    }

    fn features<T: Scalar>(&self, g: &mut Graph<T>, img: Var) -> Result<Var> {
        let (stem, residual) = self
            .feature_layers
            .split_first()
            .ok_or_else(|| XabaError::config("aligner weights have no feature layers"))?;
        let c = g.conv2d(img, *stem)?;
        let mut h = g.relu(c)?;
        for &layer in residual {
            let c = g.conv2d(h, layer)?;
            let r = g.relu(c)?;
            h = g.add(h, r)?;
        }
        Ok(h)
    }

    /// Dense-attention aligner; returns the aligned image.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        reference: Var,
        target: Var,
        cfg: &AlignerConfig,
    ) -> Result<Var> {
        cfg.validate()?;
        if cfg.sparsity_tau > 0.0 {
            return Err(XabaError::config("sparsified attention is inference-only"));
        }
        if g.value(reference).shape() != g.value(target).shape() {
            return Err(XabaError::precondition(
                "reference and target differ in shape",
            ));
        }
        let b = cfg.block_size;
        let fr = self.features(g, reference)?;
        let q = g.conv2d(fr, self.proj_q)?;
        let ft = self.features(g, target)?;
        let k = g.conv2d(ft, self.proj_k.unwrap_or(self.proj_q))?;
        let (qb, _) = g.t2b(q, b)?;
        let (kb, _) = g.t2b(k, b)?;
        let qm = g.flatten_blocks(qb)?;
        let km = g.flatten_blocks(kb)?;
        let scores = g.scaled_scores(qm, km, cfg.fm)?;
        let attention = match cfg.activation {
            Activation::Softmax => g.softmax_rows(scores)?,
            Activation::Htn => g.htn_rows(scores)?,
        };
        let (vb, geometry) = g.t2b(target, b)?;
        let vm = g.flatten_blocks(vb)?;
        let mixed = g.matmul(attention, vm)?;
        let blocks = g.unflatten_blocks(mixed, b)?;
        g.b2t(blocks, &geometry)
    }
}

#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub scales: Vec<AlignerVars>,
    pub fusion: Vec<KernelVars>,
}

impl PyramidVars {
    pub fn register<T: Scalar>(g: &mut Graph<T>, w: &PyramidWeights<T>) -> Self {
        PyramidVars {
            scales: w
                .scales
                .iter()
                .map(|s| AlignerVars::register(g, s))
                .collect(),
            fusion: w.fusion.mask_layers.iter().map(|k| g.kernel(k)).collect(),
        }
    }

    /// Same order as [`PyramidWeights::kernels`].
    pub fn kernels(&self) -> Vec<KernelVars> {
        let mut out: Vec<_> = self.scales.iter().flat_map(AlignerVars::kernels).collect();
        out.extend(self.fusion.iter().copied());
        out
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        reference: Var,
        target: Var,
        cfg: &PyramidConfig,
    ) -> Result<Var> {
        cfg.validate()?;
        cfg.check_input(g.value(reference).shape())?;
        if self.scales.len() != cfg.scales.len() || self.fusion.len() != 2 {
            return Err(XabaError::config(
                "registered weights do not match the pyramid config",
            ));
        }
        let mut candidates = Vec::with_capacity(cfg.scales.len());
        for (&factor, vars) in cfg.scales.iter().zip(&self.scales) {
            let r = g.resize(reference, factor, Direction::Down)?;
            let t = g.resize(target, factor, Direction::Down)?;
            let aligned = vars.forward(g, r, t, &cfg.aligner)?;
            candidates.push(g.resize(aligned, factor, Direction::Up)?);
        }
        let stacked = g.concat_channels(&candidates)?;
        let c = g.conv2d(stacked, self.fusion[0])?;
        let hidden = g.relu(c)?;
        let raw = g.conv2d(hidden, self.fusion[1])?;
        let mask = g.channel_softmax(raw)?;
        g.mix(mask, &candidates)
    }

    /// Parameter gradients in the order of [`PyramidWeights::parameter_slices_mut`].
    pub fn gradients<T: Scalar>(&self, g: &Graph<T>, grads: &Gradients<T>) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        for k in self.kernels() {
            k.collect(g, grads, &mut out);
        }
        out
    }

    /// Reads the current leaf values back into a weight structure shaped like `like`.
    pub fn snapshot<T: Scalar>(
        &self,
        g: &Graph<T>,
        like: &PyramidWeights<T>,
    ) -> Result<PyramidWeights<T>> {
        let mut out = like.clone();
        for (dst, vars) in out.kernels_mut().into_iter().zip(self.kernels()) {
            *dst = ConvKernel::new(
                g.value(vars.weight).clone(),
                g.value(vars.bias).data().to_vec(),
            )?;
        }
        Ok(out)
    }
}
