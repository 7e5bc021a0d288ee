//! Attention checked against loop implementations written from scratch.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tode_core::attention::{
    attention_mask, cyclic_shift, cyclic_unshift, multi_head_attention, multi_head_attention_with_weights,
    transformer_block, window_partition, window_reverse, AttentionWeights, BlockWeights, WindowGrid, MASK_VALUE,
};
use tode_core::tensor::{Tape, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.gen_range(-1.0..1.0))
}

struct RawAttention {
    wq: Tensor<f64>,
    wk: Tensor<f64>,
    wv: Tensor<f64>,
    wout: Tensor<f64>,
    table: Tensor<f64>,
    heads: usize,
}

impl RawAttention {
    fn random(c: usize, heads: usize, window: usize, rng: &mut ChaCha8Rng) -> Self {
        let span = 2 * window - 1;
        Self {
            wq: rand_tensor(&[c, c], rng, 0.5),
            wk: rand_tensor(&[c, c], rng, 0.5),
            wv: rand_tensor(&[c, c], rng, 0.5),
            wout: rand_tensor(&[c, c], rng, 0.5),
            table: rand_tensor(&[span * span, heads], rng, 0.5),
            heads,
        }
    }

    fn on_tape(&self, tape: &mut Tape<f64>) -> AttentionWeights {
        AttentionWeights {
            wq: tape.param(self.wq.clone()),
            wk: tape.param(self.wk.clone()),
            wv: tape.param(self.wv.clone()),
            wout: tape.param(self.wout.clone()),
            bias_table: tape.param(self.table.clone()),
            heads: self.heads,
        }
    }
}

fn project(x: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| (0..n).map(|j| (0..k).map(|i| row[i] * w.at(&[i, j])).sum()).collect())
        .collect()
}

/// Attention over one window of `tokens` (row-major positions in a
/// `window×window` patch), `mask[i][j]` added to the logits.
fn loop_attention(tokens: &[Vec<f64>], p: &RawAttention, window: usize, mask: &dyn Fn(usize, usize) -> f64) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let t = tokens.len();
    let c = tokens[0].len();
    let d = c / p.heads;
    let (q, k, v) = (project(tokens, &p.wq), project(tokens, &p.wk), project(tokens, &p.wv));
    let span = 2 * window - 1;
    let mut ctx = vec![vec![0.0; c]; t];
    let mut all_weights = Vec::new();
    for h in 0..p.heads {
        let mut weights = vec![vec![0.0; t]; t];
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let dot: f64 = (0..d).map(|e| q[i][h * d + e] * k[j][h * d + e]).sum();
                let dy = (i / window) as i64 - (j / window) as i64 + window as i64 - 1;
                let dx = (i % window) as i64 - (j % window) as i64 + window as i64 - 1;
                let bias = p.table.at(&[(dy * span as i64 + dx) as usize, h]);
                logits[j] = dot / (d as f64).sqrt() + bias + mask(i, j);
            }
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            for j in 0..t {
                weights[i][j] = (logits[j] - top).exp() / z;
                for e in 0..d {
                    ctx[i][h * d + e] += weights[i][j] * v[j][h * d + e];
                }
            }
        }
        all_weights.push(weights);
    }
    (project(&ctx, &p.wout), all_weights)
}

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

#[test]
fn random_four_token_window_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for heads in [1, 2] {
        let p = RawAttention::random(4, heads, 2, &mut rng);
        let x = rand_tensor(&[1, 4, 4], &mut rng, 1.0);
        let mut tape = Tape::new();
        let w = p.on_tape(&mut tape);
        let xv = tape.constant(x.clone());
        let out = multi_head_attention(&mut tape, xv, &w, None).unwrap();
        let (want, _) = loop_attention(&rows_of(&x), &p, 2, &|_, _| 0.0);
        for (got, want) in rows_of(tape.value(out)).iter().zip(&want) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = RawAttention::random(4, 2, 1, &mut rng);
    let x = rand_tensor(&[3, 1, 4], &mut rng, 1.0);
    let mut tape = Tape::new();
    let w = p.on_tape(&mut tape);
    let xv = tape.constant(x.clone());
    let out = multi_head_attention_with_weights(&mut tape, xv, &w, None).unwrap();
    assert!(tape.value(out.weights).data().iter().all(|&a| a == 1.0));
    let v = project(&rows_of(&x), &p.wv);
    let want = project(&v, &p.wout);
    for (got, want) in rows_of(tape.value(out.output)).iter().zip(&want) {
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_split_evenly() {
    let mut tape = Tape::new();
    let eye = Tensor::<f64>::identity(2);
    let w = AttentionWeights {
        wq: tape.param(eye.clone()),
        wk: tape.param(Tensor::zeros(&[2, 2])),
        wv: tape.param(eye.clone()),
        wout: tape.param(eye),
        bias_table: tape.param(Tensor::zeros(&[9, 1])),
        heads: 1,
    };
    let x = tape.constant(Tensor::from_f64(&[1, 4, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0, 0.2, 0.1]).unwrap());
    let out = multi_head_attention_with_weights(&mut tape, x, &w, None).unwrap();
    assert!(tape.value(out.weights).data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
}

/// A shifted-map position's source position must stay contiguous with every
/// other token it may attend to: no axis may have wrapped between them.
fn same_source_region(grid: &WindowGrid, a: (usize, usize), b: (usize, usize)) -> bool {
    let src = |(r, c): (usize, usize)| ((r + grid.shift) % grid.height, (c + grid.shift) % grid.width);
    let (sa, sb) = (src(a), src(b));
    let shifted_dr = a.0 as i64 - b.0 as i64;
    let shifted_dc = a.1 as i64 - b.1 as i64;
    sa.0 as i64 - sb.0 as i64 == shifted_dr && sa.1 as i64 - sb.1 as i64 == shifted_dc
}

fn window_positions(grid: &WindowGrid, win: usize) -> Vec<(usize, usize)> {
    let per_row = grid.width / grid.window;
    let (wy, wx) = (win / per_row, win % per_row);
    (0..grid.tokens_per_window())
        .map(|t| (wy * grid.window + t / grid.window, wx * grid.window + t % grid.window))
        .collect()
}

#[test]
fn mask_matches_wrap_oracle_on_all_pairs() {
    for (h, w, window, shift) in [(4, 4, 2, 1), (6, 8, 2, 1), (8, 8, 4, 2), (12, 6, 3, 1), (9, 9, 3, 2)] {
        let grid = WindowGrid::new(h, w, window, shift).unwrap();
        let mask = attention_mask::<f64>(&grid);
        let t = grid.tokens_per_window();
        for win in 0..grid.num_windows() {
            let pos = window_positions(&grid, win);
            for i in 0..t {
                for j in 0..t {
                    let want = if same_source_region(&grid, pos[i], pos[j]) { 0.0 } else { MASK_VALUE };
                    assert_eq!(mask.at(&[win, i, j]), want, "{h}×{w} w{window} s{shift} window {win} ({i},{j})");
                    assert_eq!(mask.at(&[win, i, j]), mask.at(&[win, j, i]));
                }
            }
        }
    }
}

#[test]
fn bottom_right_window_has_four_diagonal_blocks() {
    let grid = WindowGrid::new(4, 4, 2, 1).unwrap();
    let mask = attention_mask::<f64>(&grid);
    let last = grid.num_windows() - 1;
    for i in 0..4 {
        for j in 0..4 {
            let pass = mask.at(&[last, i, j]) == 0.0;
            assert_eq!(pass, i == j, "token pair ({i},{j})");
        }
    }
    // Windows away from the wrap seam are fully open.
    assert!((0..16).all(|k| mask.at(&[0, k / 4, k % 4]) == 0.0));
    assert!(attention_mask::<f64>(&grid.with_shift(0).unwrap()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn partition_index_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[4, 4, 1], |i| i as f64));
    let p = window_partition(&mut tape, x, 2).unwrap();
    assert_eq!(tape.shape(p), &[4, 4, 1]);
    assert_eq!(tape.value(p).at(&[1, 1, 0]), 3.0);
}

#[test]
fn roll_example() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let s = cyclic_shift(&mut tape, x, 1).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 3.0, 2.0, 1.0]);
    let same = cyclic_shift(&mut tape, x, 0).unwrap();
    assert_eq!(tape.value(same).data(), tape.value(x).data());
}

#[test]
fn shifted_attention_is_row_stochastic_and_region_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = WindowGrid::new(8, 8, 4, 2).unwrap();
    let p = RawAttention::random(8, 2, 4, &mut rng);
    let mut tape = Tape::new();
    let w = p.on_tape(&mut tape);
    let x = tape.constant(rand_tensor(&[8, 8, 8], &mut rng, 2.0));
    let shifted = cyclic_shift(&mut tape, x, grid.shift).unwrap();
    let windows = window_partition(&mut tape, shifted, grid.window).unwrap();
    let mask = attention_mask(&grid);
    let out = multi_head_attention_with_weights(&mut tape, windows, &w, Some(&mask)).unwrap();
    let weights = tape.value(out.weights);
    let t = grid.tokens_per_window();
    for win in 0..grid.num_windows() {
        let pos = window_positions(&grid, win);
        for h in 0..2 {
            for i in 0..t {
                let row: Vec<f64> = (0..t).map(|j| weights.at(&[win, h, i, j])).collect();
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&a| a >= 0.0));
                let leak: f64 = (0..t).filter(|&j| !same_source_region(&grid, pos[i], pos[j])).map(|j| row[j]).sum();
                assert!(leak < 1e-6, "window {win} head {h} token {i} leaks {leak}");
            }
        }
    }
}

fn loop_layer_norm(x: &[Vec<f64>], gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn whole_map_block_equals_global_transformer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (side, c, heads) = (4, 8, 2);
    let p = RawAttention::random(c, heads, side, &mut rng);
    let g1 = rand_tensor(&[c], &mut rng, 1.0);
    let b1 = rand_tensor(&[c], &mut rng, 0.1);
    let g2 = rand_tensor(&[c], &mut rng, 1.0);
    let b2 = rand_tensor(&[c], &mut rng, 0.1);
    let fc1 = rand_tensor(&[c, 4 * c], &mut rng, 0.3);
    let fc1b = rand_tensor(&[4 * c], &mut rng, 0.1);
    let fc2 = rand_tensor(&[4 * c, c], &mut rng, 0.3);
    let fc2b = rand_tensor(&[c], &mut rng, 0.1);
    let x = rand_tensor(&[side, side, c], &mut rng, 1.0);

    let mut tape = Tape::new();
    let attn = p.on_tape(&mut tape);
    let weights = BlockWeights {
        norm1_gamma: tape.param(g1.clone()),
        norm1_beta: tape.param(b1.clone()),
        attn,
        norm2_gamma: tape.param(g2.clone()),
        norm2_beta: tape.param(b2.clone()),
        fc1_w: tape.param(fc1.clone()),
        fc1_b: tape.param(fc1b.clone()),
        fc2_w: tape.param(fc2.clone()),
        fc2_b: tape.param(fc2b.clone()),
    };
    let xv = tape.constant(x.clone());
    let grid = WindowGrid::new(side, side, side, 0).unwrap();
    let out = transformer_block(&mut tape, xv, &weights, &grid).unwrap();

    let tokens = rows_of(&x);
    let (attended, _) = loop_attention(&loop_layer_norm(&tokens, &g1, &b1), &p, side, &|_, _| 0.0);
    let mid: Vec<Vec<f64>> = tokens.iter().zip(&attended).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let mut hidden = project(&loop_layer_norm(&mid, &g2, &b2), &fc1);
    for row in &mut hidden {
        for (j, v) in row.iter_mut().enumerate() {
            *v = gelu(*v + fc1b.data()[j]);
        }
    }
    let mlp = project(&hidden, &fc2);
    for (k, got) in rows_of(tape.value(out)).iter().enumerate() {
        for j in 0..c {
            let want = mid[k][j] + mlp[k][j] + fc2b.data()[j];
            assert!((got[j] - want).abs() < 1e-5, "token {k} channel {j}: {} vs {want}", got[j]);
        }
    }
}

#[test]
fn zero_weights_give_identity_block() {
    let c = 4;
    let mut tape = Tape::new();
    let z = |tape: &mut Tape<f64>, s: &[usize]| tape.param(Tensor::zeros(s));
    let attn = AttentionWeights {
        wq: z(&mut tape, &[c, c]),
        wk: z(&mut tape, &[c, c]),
        wv: z(&mut tape, &[c, c]),
        wout: z(&mut tape, &[c, c]),
        bias_table: z(&mut tape, &[9, 2]),
        heads: 2,
    };
    let weights = BlockWeights {
        norm1_gamma: tape.param(Tensor::ones(&[c])),
        norm1_beta: z(&mut tape, &[c]),
        attn,
        norm2_gamma: tape.param(Tensor::ones(&[c])),
        norm2_beta: z(&mut tape, &[c]),
        fc1_w: z(&mut tape, &[c, 4 * c]),
        fc1_b: z(&mut tape, &[4 * c]),
        fc2_w: z(&mut tape, &[4 * c, c]),
        fc2_b: z(&mut tape, &[c]),
    };
    let x0 = Tensor::from_fn(&[4, 4, c], |i| (i as f64 * 0.37).sin());
    let x = tape.constant(x0.clone());
    let grid = WindowGrid::new(4, 4, 2, 1).unwrap();
    let y = tode_core::attention::swin_block(&mut tape, x, &[weights, weights], &grid).unwrap();
    assert_eq!(tape.value(y).data(), x0.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_reverse_round_trip(wh in 1usize..4, ww in 1usize..4, window in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (wh * window, ww * window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&[h, w, c], &mut rng, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let p = window_partition(&mut tape, x, window).unwrap();
        let back = window_reverse(&mut tape, p, h, w).unwrap();
        prop_assert_eq!(tape.value(back).data(), x0.data());
    }

    #[test]
    fn shift_unshift_round_trip(h in 1usize..9, w in 1usize..9, c in 1usize..3, s in 0usize..8, seed in any::<u64>()) {
        let shift = s % h.min(w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&[h, w, c], &mut rng, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let rolled = cyclic_shift(&mut tape, x, shift).unwrap();
        for r in 0..h {
            for col in 0..w {
                prop_assert_eq!(
                    tape.value(rolled).at(&[r, col, 0]),
                    x0.at(&[(r + shift) % h, (col + shift) % w, 0])
                );
            }
        }
        let back = cyclic_unshift(&mut tape, rolled, shift).unwrap();
        prop_assert_eq!(tape.value(back).data(), x0.data());
    }

    #[test]
    fn masked_rows_stay_stochastic(seed in any::<u64>(), shift in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = WindowGrid::new(6, 6, 3, shift).unwrap();
        let p = RawAttention::random(4, 2, 3, &mut rng);
        let mut tape = Tape::new();
        let w = p.on_tape(&mut tape);
        let x = tape.constant(rand_tensor(&[grid.num_windows(), 9, 4], &mut rng, 3.0));
        let mask = attention_mask(&grid);
        let out = multi_head_attention_with_weights(&mut tape, x, &w, Some(&mask)).unwrap();
        for row in tape.value(out.weights).data().chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
