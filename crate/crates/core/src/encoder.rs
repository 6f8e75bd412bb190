//! Patch encoder: slice the input window into overlapping patches, embed
//! each patch linearly, filter within each patch (depthwise) and mix
//! across patches (pointwise).

use crate::config::PatchConfig;
use crate::error::{Error, Result};
use crate::params::{ParamScope, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows `x[i·S .. i·S + W]` for every full window; the tail is dropped.
pub fn patchify(x: &[f64], cfg: &PatchConfig) -> Result<Vec<Vec<f64>>> {
    let n = cfg.num_patches(x.len())?;
    Ok((0..n)
        .map(|i| x[i * cfg.stride..i * cfg.stride + cfg.window].to_vec())
        .collect())
}

/// Patches for many series at once: `rows × L` in, `[rows·N × W]` out,
/// with the N patches of series `r` occupying rows `r·N .. (r+1)·N`.
pub fn patchify_rows(inputs: &[f64], rows: usize, lookback: usize, cfg: &PatchConfig) -> Result<Tensor> {
    if inputs.len() != rows * lookback {
        return Err(Error::dim(format!(
            "{} values for {rows} series of length {lookback}",
            inputs.len()
        )));
    }
    let n = cfg.num_patches(lookback)?;
    let mut data = Vec::with_capacity(rows * n * cfg.window);
    for r in 0..rows {
        let x = &inputs[r * lookback..(r + 1) * lookback];
        for p in patchify(x, cfg)? {
            data.extend(p);
        }
    }
    Tensor::new(vec![rows * n, cfg.window], data)
}

/// Affine embedding of each patch row: `[R·N × W] → [R·N × D]`.
pub fn embed(tape: &mut Tape, patches: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.affine(patches, weight, bias)
}

/// Shared `1×Q` kernel slid along D within every patch, zero padded,
/// before the activation.
pub fn depthwise_linear(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    tape.conv1d_same(x, kernel)
}

pub fn depthwise(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    let y = depthwise_linear(tape, x, kernel)?;
    Ok(tape.relu(y))
}

/// Mix the N patch rows of each series into A channels before the
/// activation: `[R·N × D] → [R·A × D]`.
pub fn pointwise_linear(tape: &mut Tape, x: Var, kernels: Var) -> Result<Var> {
    tape.group_matmul(kernels, x)
}

pub fn pointwise(tape: &mut Tape, x: Var, kernels: Var) -> Result<Var> {
    let y = pointwise_linear(tape, x, kernels)?;
    Ok(tape.relu(y))
}

/// Intermediate values of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderStages {
    pub embedded: Var,
    pub depthwise: Var,
    pub pointwise: Var,
    /// `[R × A·D]`
    pub output: Var,
}

/// One encoder; parameters are shared by every node of a layer.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub prefix: String,
    pub cfg: PatchConfig,
    pub lookback: usize,
}

impl PatchEncoder {
    pub fn new(prefix: &str, cfg: PatchConfig, lookback: usize) -> Result<Self> {
        cfg.validate(lookback)?;
        Ok(PatchEncoder {
            prefix: prefix.to_string(),
            cfg,
            lookback,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.num_patches(self.lookback).expect("validated")
    }

    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn register(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        let (w, d, q, a) = (self.cfg.window, self.cfg.embed_dim, self.cfg.kernel, self.cfg.channels);
        let n = self.num_patches();
        store.init_uniform(&self.path("embed.weight"), &[w, d], w, seed)?;
        store.init_uniform(&self.path("embed.bias"), &[1, d], w, seed)?;
        store.init_uniform(&self.path("depthwise.kernel"), &[1, q], q, seed)?;
        store.init_uniform(&self.path("pointwise.kernel"), &[a, n], n, seed)?;
        Ok(())
    }

    pub fn forward_stages(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, patches: Var) -> Result<EncoderStages> {
        let w = scope.get(tape, &self.path("embed.weight"))?;
        let b = scope.get(tape, &self.path("embed.bias"))?;
        let k = scope.get(tape, &self.path("depthwise.kernel"))?;
        let p = scope.get(tape, &self.path("pointwise.kernel"))?;
        let embedded = embed(tape, patches, w, b)?;
        let dw = depthwise(tape, embedded, k)?;
        let pw = pointwise(tape, dw, p)?;
        let rows = tape.shape(pw)[0] / self.cfg.channels;
        let output = tape.reshape(pw, &[rows, self.cfg.feature_dim()])?;
        Ok(EncoderStages {
            embedded,
            depthwise: dw,
            pointwise: pw,
            output,
        })
    }

    /// `[R·N × W]` patches to `[R × A·D]` node features.
    pub fn forward(&self, tape: &mut Tape, scope: &mut ParamScope<'_>, patches: Var) -> Result<Var> {
        Ok(self.forward_stages(tape, scope, patches)?.output)
    }
}
