use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{relu, relu_backward, BatchNorm, BatchNormCache, Dense, GroupNorm, GroupNormCache, Mode};
use crate::error::{Error, Result};

/// Smallest number of channels per normalization group the width rule aims for.
pub const MIN_GROUP_SIZE: usize = 8;
pub const DEFAULT_MAX_GROUPS: usize = 32;
pub const EMBED_DIM: usize = 2;
/// Narrower hidden layers skip GN: one group of two channels maps every
/// instance to +-1, and BN then rescales what is left of the eps term.
pub const MIN_GN_CHANNELS: usize = 4;

/// Encoder widths `(d, d/2, d/4, d/8, d/16, 2)`.
pub fn encoder_widths(d: usize) -> Result<Vec<usize>> {
    if d < 32 {
        return Err(Error::WidthTooSmall(d));
    }
    Ok(vec![d, d / 2, d / 4, d / 8, d / 16, EMBED_DIM])
}

/// Group count for a layer of `channels`: as many groups of at least
/// `MIN_GROUP_SIZE` channels as fit, capped at `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (channels / MIN_GROUP_SIZE).clamp(1, max_groups.max(1))
}

/// Hidden layer: `ReLU(BN(GN(W x + b)))`, GN absent below `MIN_GN_CHANNELS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dense: Dense,
    pub gn: Option<GroupNorm>,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    gn: Option<GroupNormCache>,
    bn: BatchNormCache,
    pre_activation: Array2<f64>,
}

/// Hidden blocks followed by a plain affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    blocks: Vec<BlockCache>,
    out_input: Array2<f64>,
}

impl Stack {
    fn init(widths: &[usize], max_groups: usize, rng: &mut ChaCha8Rng) -> Self {
        let last = widths.len() - 1;
        let blocks = widths[..last]
            .windows(2)
            .map(|w| Block {
                dense: Dense::init(w[0], w[1], rng),
                gn: (w[1] >= MIN_GN_CHANNELS).then(|| GroupNorm::new(w[1], group_count(w[1], max_groups))),
                bn: BatchNorm::new(w[1]),
            })
            .collect();
        let out = Dense::init(widths[last - 1], widths[last], rng);
        Self { blocks, out }
    }

    fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    dense: b.dense.zeros_like(),
                    gn: b.gn.as_ref().map(GroupNorm::zeros_like),
                    bn: b.bn.zeros_like(),
                })
                .collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks
            .first()
            .map(|b| b.dense.w.nrows())
            .unwrap_or_else(|| self.out.w.nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.out.w.ncols()
    }

    /// Forward pass keeping what backward needs; train mode updates BN running stats.
    pub fn forward(&mut self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, StackCache)> {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let a = block.dense.forward(h.view());
            let (g, gn) = match &block.gn {
                Some(norm) => {
                    let (g, cache) = norm.forward(a.view());
                    (g, Some(cache))
                }
                None => (a, None),
            };
            let (pre, bn) = block.bn.forward(g.view(), mode)?;
            let next = relu(&pre);
            caches.push(BlockCache {
                input: h,
                gn,
                bn,
                pre_activation: pre,
            });
            h = next;
        }
        let y = self.out.forward(h.view());
        Ok((
            y,
            StackCache {
                blocks: caches,
                out_input: h,
            },
        ))
    }

    /// Eval-mode forward; does not mutate running statistics.
    pub fn infer(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for block in &self.blocks {
            let a = block.dense.forward(h.view());
            let g = match &block.gn {
                Some(norm) => norm.forward(a.view()).0,
                None => a,
            };
            h = relu(&block.bn.infer(g.view()));
        }
        self.out.forward(h.view())
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    pub fn backward(&self, cache: &StackCache, dy: ArrayView2<'_, f64>, grad: &mut Stack) -> Array2<f64> {
        let mut d = self.out.backward(cache.out_input.view(), dy, &mut grad.out);
        for ((block, c), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            let d_pre = relu_backward(&c.pre_activation, d.view());
            let d_gn = block.bn.backward(&c.bn, d_pre.view(), &mut g.bn);
            let d_dense = match (&block.gn, &c.gn, g.gn.as_mut()) {
                (Some(norm), Some(cache), Some(grad)) => norm.backward(cache, d_gn.view(), grad),
                _ => d_gn,
            };
            d = block.dense.backward(c.input.view(), d_dense.view(), &mut g.dense);
        }
        d
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.push(b.dense.w.as_slice().unwrap());
            out.push(b.dense.b.as_slice().unwrap());
            if let Some(gn) = &b.gn {
                out.push(gn.gamma.as_slice().unwrap());
                out.push(gn.beta.as_slice().unwrap());
            }
            out.push(b.bn.gamma.as_slice().unwrap());
            out.push(b.bn.beta.as_slice().unwrap());
        }
        out.push(self.out.w.as_slice().unwrap());
        out.push(self.out.b.as_slice().unwrap());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.dense.w.as_slice_mut().unwrap());
            out.push(b.dense.b.as_slice_mut().unwrap());
            if let Some(gn) = &mut b.gn {
                out.push(gn.gamma.as_slice_mut().unwrap());
                out.push(gn.beta.as_slice_mut().unwrap());
            }
            out.push(b.bn.gamma.as_slice_mut().unwrap());
            out.push(b.bn.beta.as_slice_mut().unwrap());
        }
        out.push(self.out.w.as_slice_mut().unwrap());
        out.push(self.out.b.as_slice_mut().unwrap());
        out
    }

    fn running_stats_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.bn.running_mean.as_slice_mut().unwrap());
            out.push(b.bn.running_var.as_slice_mut().unwrap());
        }
        out
    }
}

/// Fully connected autoencoder projecting `d`-dimensional activations to 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Stack,
    pub decoder: Stack,
    pub max_groups: usize,
}

impl Autoencoder {
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Zero-valued copy with the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            max_groups: self.max_groups,
        }
    }

    /// Trainable tensors in a fixed order (running statistics excluded).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    pub fn encoder_tensor_count(&self) -> usize {
        self.encoder.tensors().len()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }

    /// BN running means and variances, interleaved per block.
    pub fn running_stats_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.running_stats_mut();
        t.extend(self.decoder.running_stats_mut());
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Eval-mode embedding of each row.
    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_input(x, self.input_dim())?;
        Ok(self.encoder.infer(x))
    }

    /// Eval-mode reconstruction of each embedded row.
    pub fn decode(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_input(y, EMBED_DIM)?;
        Ok(self.decoder.infer(y))
    }
}

fn check_input(x: ArrayView2<'_, f64>, d: usize) -> Result<()> {
    if x.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: x.ncols(),
        });
    }
    if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col });
    }
    Ok(())
}

/// Fresh model for `d`-dimensional input; deterministic given `seed`.
pub fn init_model(d: usize, max_groups: usize, seed: u64) -> Result<Autoencoder> {
    let widths = encoder_widths(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Stack::init(&widths, max_groups, &mut rng);
    let rev: Vec<usize> = widths.iter().rev().copied().collect();
    let decoder = Stack::init(&rev, max_groups, &mut rng);
    Ok(Autoencoder {
        encoder,
        decoder,
        max_groups,
    })
}
