use std::sync::Arc;

use super::config::{ModelConfig, StageGeometry};
use super::params::{ParamId, ParamVars};
use super::Init;
use crate::attention::{transformer_block, AttentionWeights, BlockWeights, WindowGrid};
use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tape, Var};

const NORM_EPS: f64 = 1e-5;

/// Patch projection: 2×2 stride-2 convolution plus bias, then layer norm.
#[derive(Clone, Copy, Debug)]
pub struct EmbedIds {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

/// On-tape view of [`EmbedIds`].
#[derive(Clone, Copy, Debug)]
pub struct EmbedWeights {
    pub conv_w: Var,
    pub conv_b: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

impl EmbedIds {
    pub(crate) fn build<T: Element>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        Self {
            conv_w: init.trunc("embed.proj.weight".into(), &[c, cfg.in_channels(), 2, 2]),
            conv_b: init.zeros("embed.proj.bias".into(), &[c]),
            norm_gamma: init.ones("embed.norm.gamma".into(), &[c]),
            norm_beta: init.zeros("embed.norm.beta".into(), &[c]),
        }
    }

    pub fn weights(&self, pv: &ParamVars) -> EmbedWeights {
        EmbedWeights {
            conv_w: pv[self.conv_w],
            conv_b: pv[self.conv_b],
            norm_gamma: pv[self.norm_gamma],
            norm_beta: pv[self.norm_beta],
        }
    }
}

/// Pre-norm projection before the layer norm, `(H/2)×(W/2)×C`.
pub fn patch_project<T: Element>(tape: &mut Tape<T>, x: Var, w: &EmbedWeights) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return dim_err(format!("patch embedding needs C×H×W with even H and W, got {shape:?}"));
    }
    let y = tape.conv2d(x, w.conv_w, 2, 0)?;
    let y = tape.add_broadcast(y, w.conv_b, 0)?;
    tape.permute(y, &[1, 2, 0])
}

/// `C_in×H×W` → `(H/2)×(W/2)×C` tokens.
pub fn patch_embed<T: Element>(tape: &mut Tape<T>, x: Var, w: &EmbedWeights) -> Result<Var> {
    let y = patch_project(tape, x, w)?;
    tape.layer_norm(y, w.norm_gamma, w.norm_beta, NORM_EPS)
}

/// Gathers each 2×2 neighborhood of `H×W×C` into `(H/2)×(W/2)×4C`, in
/// the order (0,0), (0,1), (1,0), (1,1).
pub fn patch_concat<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (h, w, c) = match *tape.shape(x) {
        [h, w, c] if h % 2 == 0 && w % 2 == 0 => (h, w, c),
        ref s => return dim_err(format!("patch merging needs H×W×C with even H and W, got {s:?}")),
    };
    let mut index = Vec::with_capacity(h * w * c);
    for r in 0..h / 2 {
        for col in 0..w / 2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let base = ((2 * r + dy) * w + 2 * col + dx) * c;
                index.extend(base..base + c);
            }
        }
    }
    tape.gather(x, Arc::new(index), &[h / 2, w / 2, 4 * c])
}

/// Halves the extents and doubles the channels: 2×2 concatenation, then a
/// `4C → 2C` projection.
pub fn patch_merge<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var) -> Result<Var> {
    let cat = patch_concat(tape, x)?;
    tape.matmul(cat, weight)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wout: ParamId,
    pub bias_table: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub heads: usize,
}

/// MLP expansion ratio inside each block.
pub const MLP_RATIO: usize = 4;

impl BlockIds {
    pub(crate) fn build<T: Element>(init: &mut Init<'_, T>, prefix: &str, c: usize, heads: usize, window: usize) -> Self {
        let span = 2 * window - 1;
        let hidden = MLP_RATIO * c;
        Self {
            norm1_gamma: init.ones(format!("{prefix}.norm1.gamma"), &[c]),
            norm1_beta: init.zeros(format!("{prefix}.norm1.beta"), &[c]),
            wq: init.trunc(format!("{prefix}.attn.wq"), &[c, c]),
            wk: init.trunc(format!("{prefix}.attn.wk"), &[c, c]),
            wv: init.trunc(format!("{prefix}.attn.wv"), &[c, c]),
            wout: init.trunc(format!("{prefix}.attn.wout"), &[c, c]),
            bias_table: init.trunc(format!("{prefix}.attn.bias_table"), &[span * span, heads]),
            norm2_gamma: init.ones(format!("{prefix}.norm2.gamma"), &[c]),
            norm2_beta: init.zeros(format!("{prefix}.norm2.beta"), &[c]),
            fc1_w: init.trunc(format!("{prefix}.mlp.fc1.weight"), &[c, hidden]),
            fc1_b: init.zeros(format!("{prefix}.mlp.fc1.bias"), &[hidden]),
            fc2_w: init.trunc(format!("{prefix}.mlp.fc2.weight"), &[hidden, c]),
            fc2_b: init.zeros(format!("{prefix}.mlp.fc2.bias"), &[c]),
            heads,
        }
    }

    pub fn weights(&self, pv: &ParamVars) -> BlockWeights {
        BlockWeights {
            norm1_gamma: pv[self.norm1_gamma],
            norm1_beta: pv[self.norm1_beta],
            attn: AttentionWeights {
                wq: pv[self.wq],
                wk: pv[self.wk],
                wv: pv[self.wv],
                wout: pv[self.wout],
                bias_table: pv[self.bias_table],
                heads: self.heads,
            },
            norm2_gamma: pv[self.norm2_gamma],
            norm2_beta: pv[self.norm2_beta],
            fc1_w: pv[self.fc1_w],
            fc1_b: pv[self.fc1_b],
            fc2_w: pv[self.fc2_w],
            fc2_b: pv[self.fc2_b],
        }
    }
}

/// One encoder stage: optional patch merge, then blocks alternating
/// unshifted and shifted windows.
#[derive(Clone, Debug)]
pub struct StageIds {
    pub merge: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
    pub geometry: StageGeometry,
}

impl StageIds {
    pub(crate) fn build<T: Element>(init: &mut Init<'_, T>, index: usize, geometry: &StageGeometry, depth: usize) -> Self {
        let c = geometry.channels;
        let merge = (index > 0).then(|| init.trunc(format!("stages.{index}.merge.weight"), &[2 * c, c]));
        let blocks = (0..depth)
            .map(|j| BlockIds::build(init, &format!("stages.{index}.blocks.{j}"), c, geometry.heads, geometry.window))
            .collect();
        Self { merge, blocks, geometry: *geometry }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Result<Var> {
        let mut x = match self.merge {
            Some(w) => patch_merge(tape, x, pv[w])?,
            None => x,
        };
        let g = &self.geometry;
        for (j, block) in self.blocks.iter().enumerate() {
            let shift = if j % 2 == 1 { g.shift } else { 0 };
            let grid = WindowGrid::new(g.height, g.width, g.window, shift)?;
            x = transformer_block(tape, x, &block.weights(pv), &grid)?;
        }
        Ok(x)
    }
}
