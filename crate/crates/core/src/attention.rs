//! Windowed multi-head self-attention and the shifted-window transformer block.
//!
//! Feature maps are channels-last `H×W×C`. Windows are tiled in row-major
//! order and tokens inside a window are row-major as well.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Additive logit penalty for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

const NORM_EPS: f64 = 1e-5;

/// Geometry of a (possibly shifted) window tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || height % window != 0 || width % window != 0 {
            return dim_err(format!("window {window} does not tile a {height}×{width} map"));
        }
        if shift >= window {
            return dim_err(format!("shift {shift} must be smaller than window {window}"));
        }
        Ok(Self { height, width, window, shift })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn with_shift(self, shift: usize) -> Result<Self> {
        Self::new(self.height, self.width, self.window, shift)
    }
}

fn hwc(tape: &Tape<impl Element>, x: Var, op: &str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => dim_err(format!("{op} expects an H×W×C map, got {s:?}")),
    }
}

/// Source offset in the `H×W×C` map for every element of the partitioned
/// `nWin×window²×C` tensor.
fn partition_index(h: usize, w: usize, c: usize, window: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * c);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for ty in 0..window {
                for tx in 0..window {
                    let base = ((wy * window + ty) * w + wx * window + tx) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    index
}

/// Splits `H×W×C` into `nWin×window²×C`.
pub fn window_partition<T: Element>(tape: &mut Tape<T>, x: Var, window: usize) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "window_partition")?;
    WindowGrid::new(h, w, window, 0)?;
    let index = partition_index(h, w, c, window);
    let n_win = (h / window) * (w / window);
    tape.gather(x, Arc::new(index), &[n_win, window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Element>(tape: &mut Tape<T>, windows: Var, height: usize, width: usize) -> Result<Var> {
    let (n_win, t, c) = match *tape.shape(windows) {
        [n, t, c] => (n, t, c),
        ref s => return dim_err(format!("window_reverse expects nWin×T×C, got {s:?}")),
    };
    let window = (t as f64).sqrt().round() as usize;
    WindowGrid::new(height, width, window, 0)?;
    if window * window != t || n_win != (height / window) * (width / window) {
        return dim_err(format!("{n_win} windows of {t} tokens do not tile a {height}×{width} map"));
    }
    let forward = partition_index(height, width, c, window);
    let mut index = vec![0; forward.len()];
    for (i, &src) in forward.iter().enumerate() {
        index[src] = i;
    }
    tape.gather(windows, Arc::new(index), &[height, width, c])
}

fn roll_index(h: usize, w: usize, c: usize, dy: usize, dx: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let base = (((r + dy) % h) * w + (col + dx) % w) * c;
            index.extend(base..base + c);
        }
    }
    index
}

/// Toroidal roll by `(−shift, −shift)`: `out[r][c] = x[(r+shift)%H][(c+shift)%W]`.
pub fn cyclic_shift<T: Element>(tape: &mut Tape<T>, x: Var, shift: usize) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "cyclic_shift")?;
    if shift >= h.min(w) {
        return dim_err(format!("shift {shift} must be below min({h}, {w})"));
    }
    tape.gather(x, Arc::new(roll_index(h, w, c, shift, shift)), &[h, w, c])
}

/// Inverse of [`cyclic_shift`].
pub fn cyclic_unshift<T: Element>(tape: &mut Tape<T>, x: Var, shift: usize) -> Result<Var> {
    let (h, w, c) = hwc(tape, x, "cyclic_unshift")?;
    if shift >= h.min(w) {
        return dim_err(format!("shift {shift} must be below min({h}, {w})"));
    }
    tape.gather(x, Arc::new(roll_index(h, w, c, h - shift, w - shift)), &[h, w, c])
}

/// Region label of each position of the shifted map: tokens that wrapped
/// around during the roll get a distinct label per axis.
fn shifted_region_labels(grid: &WindowGrid) -> Vec<usize> {
    let band = |pos: usize, len: usize| -> usize {
        let (w, s) = (grid.window, grid.shift);
        if pos < len - w {
            0
        } else if pos < len - s {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(grid.height * grid.width);
    for r in 0..grid.height {
        for c in 0..grid.width {
            labels.push(band(r, grid.height) * 3 + band(c, grid.width));
        }
    }
    labels
}

/// Additive attention mask `nWin×T×T` for a shifted window grid: 0 where two
/// tokens come from the same contiguous pre-shift region, [`MASK_VALUE`]
/// otherwise. All zeros when the shift is 0.
pub fn attention_mask<T: Element>(grid: &WindowGrid) -> Tensor<T> {
    let (n_win, t) = (grid.num_windows(), grid.tokens_per_window());
    if grid.shift == 0 {
        return Tensor::zeros(&[n_win, t, t]);
    }
    let labels = shifted_region_labels(grid);
    let per_window = partition_index(grid.height, grid.width, 1, grid.window);
    let masked = T::from_f64_lossy(MASK_VALUE);
    let mut data = Vec::with_capacity(n_win * t * t);
    for win in per_window.chunks(t) {
        for &a in win {
            for &b in win {
                data.push(if labels[a] == labels[b] { T::zero() } else { masked });
            }
        }
    }
    Tensor::new(&[n_win, t, t], data).expect("mask extents")
}

/// For each token pair `(i, j)` of a window, the row of the relative
/// position bias table holding their offset.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut index = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
            index.push(dy as usize * span + dx as usize);
        }
    }
    index
}

/// On-tape handles for one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wout: Var,
    /// `(2·window−1)² × heads`.
    pub bias_table: Var,
    pub heads: usize,
}

/// Output of [`multi_head_attention_with_weights`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `nWin×T×C`.
    pub output: Var,
    /// Softmax weights, `nWin×heads×T×T`.
    pub weights: Var,
}

/// Per head `softmax(Q·Kᵀ/√d + B + mask)·V`, heads concatenated and
/// projected by `W_out`.
pub fn multi_head_attention<T: Element>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &AttentionWeights,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    Ok(multi_head_attention_with_weights(tape, tokens, params, mask)?.output)
}

pub fn multi_head_attention_with_weights<T: Element>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &AttentionWeights,
    mask: Option<&Tensor<T>>,
) -> Result<AttentionOutput> {
    let (n_win, t, c) = match *tape.shape(tokens) {
        [n, t, c] => (n, t, c),
        ref s => return dim_err(format!("attention expects nWin×T×C tokens, got {s:?}")),
    };
    let heads = params.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels cannot be split into {heads} heads")));
    }
    let window = (t as f64).sqrt().round() as usize;
    if window * window != t {
        return dim_err(format!("{t} tokens per window is not a square window"));
    }
    let span = 2 * window - 1;
    if tape.shape(params.bias_table) != [span * span, heads] {
        return Err(Error::Config(format!(
            "bias table {:?} does not match window {window} with {heads} heads",
            tape.shape(params.bias_table)
        )));
    }
    let d = c / heads;

    let split_heads = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[n_win, t, heads, d])?;
        tape.permute(v, &[0, 2, 1, 3])
    };
    let q = tape.matmul(tokens, params.wq)?;
    let q = split_heads(tape, q)?;
    let k = tape.matmul(tokens, params.wk)?;
    let k = split_heads(tape, k)?;
    let v = tape.matmul(tokens, params.wv)?;
    let v = split_heads(tape, v)?;

    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));

    // bias[h, i, j] = table[rel(i, j), h], shared by every window
    let rel = relative_position_index(window);
    let mut bias_index = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        bias_index.extend(rel.iter().map(|&r| r * heads + h));
    }
    let bias = tape.gather(params.bias_table, Arc::new(bias_index), &[heads, t, t])?;
    let mut logits = tape.add_broadcast_axes(scores, bias, 1..4)?;

    if let Some(mask) = mask {
        if mask.shape() != [n_win, t, t] {
            return dim_err(format!("mask {:?} does not match {n_win} windows of {t} tokens", mask.shape()));
        }
        let md = mask.data();
        let expanded = Tensor::from_fn(&[n_win, heads, t, t], |i| {
            let win = i / (heads * t * t);
            md[win * t * t + i % (t * t)]
        });
        let m = tape.constant(expanded);
        logits = tape.add(logits, m)?;
    }
    let weights = tape.softmax(logits);
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n_win, t, c])?;
    let output = tape.matmul(ctx, params.wout)?;
    Ok(AttentionOutput { output, weights })
}

/// On-tape handles for one transformer block: attention plus a two-layer
/// GELU MLP, each behind a pre-norm residual.
#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub attn: AttentionWeights,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// `x @ w + b` over the last axis.
pub fn linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => {
            let last = tape.shape(y).len() - 1;
            tape.add_broadcast(y, b, last)
        }
        None => Ok(y),
    }
}

/// One pre-norm block on `H×W×C`: (shifted) window attention with a
/// residual, then the MLP with a residual. `grid.shift` selects W-MSA (0)
/// or SW-MSA.
pub fn transformer_block<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    weights: &BlockWeights,
    grid: &WindowGrid,
) -> Result<Var> {
    let (h, w, _) = hwc(tape, x, "transformer_block")?;
    if (h, w) != (grid.height, grid.width) {
        return dim_err(format!("block input {h}×{w} does not match grid {}×{}", grid.height, grid.width));
    }
    let normed = tape.layer_norm(x, weights.norm1_gamma, weights.norm1_beta, NORM_EPS)?;
    let shifted = if grid.shift > 0 { cyclic_shift(tape, normed, grid.shift)? } else { normed };
    let windows = window_partition(tape, shifted, grid.window)?;
    let mask = (grid.shift > 0).then(|| attention_mask::<T>(grid));
    let attended = multi_head_attention(tape, windows, &weights.attn, mask.as_ref())?;
    let merged = window_reverse(tape, attended, h, w)?;
    let merged = if grid.shift > 0 { cyclic_unshift(tape, merged, grid.shift)? } else { merged };
    let x = tape.add(x, merged)?;

    let normed = tape.layer_norm(x, weights.norm2_gamma, weights.norm2_beta, NORM_EPS)?;
    let hidden = linear(tape, normed, weights.fc1_w, Some(weights.fc1_b))?;
    let hidden = tape.gelu(hidden);
    let out = linear(tape, hidden, weights.fc2_w, Some(weights.fc2_b))?;
    tape.add(x, out)
}

/// The W-MSA / SW-MSA pair: an unshifted block followed by a block shifted
/// by `grid.shift`.
pub fn swin_block<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    weights: &[BlockWeights; 2],
    grid: &WindowGrid,
) -> Result<Var> {
    let x = transformer_block(tape, x, &weights[0], &grid.with_shift(0)?)?;
    transformer_block(tape, x, &weights[1], grid)
}
