//! Central finite-difference checks (f64, h = 1e-4, relative error < 1e-3)
//! for every differentiable tape operation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tode_core::tensor::gradcheck::{check_gradients, GradCheckOptions, STEP, TOLERANCE};
use tode_core::tensor::{set_backward_fault, Tape, Tensor, UpsampleMode, Var};
use tode_core::Result;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = rand_tensor(shape, seed);
    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.3);
    t
}

/// Reduces an output to a scalar with fixed random weights.
fn weigh(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = t.constant(rand_tensor(t.shape(y), 999));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn assert_grads<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions { step: STEP, ..Default::default() };
    let report = check_gradients(&inputs, f, &opts).unwrap();
    assert!(
        report.passes(TOLERANCE),
        "{name}: relative errors {:?} exceed {TOLERANCE}",
        report.per_input
    );
}

#[test]
fn elementwise_binary_ops() {
    let (a, b) = (rand_tensor(&[3, 4], 1), positive(&[3, 4], 2));
    assert_grads("add", vec![a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        weigh(t, y)
    });
    assert_grads("sub", vec![a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        weigh(t, y)
    });
    assert_grads("mul", vec![a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        weigh(t, y)
    });
    assert_grads("div", vec![a, b], |t, v| {
        let y = t.div(v[0], v[1])?;
        weigh(t, y)
    });
}

#[test]
fn elementwise_unary_ops() {
    let x = rand_tensor(&[4, 5], 3);
    assert_grads("scale", vec![x.clone()], |t, v| {
        let y = t.scale(v[0], -2.5);
        weigh(t, y)
    });
    assert_grads("add_scalar", vec![x.clone()], |t, v| {
        let y = t.add_scalar(v[0], 0.7);
        weigh(t, y)
    });
    assert_grads("relu", vec![x.clone()], |t, v| {
        let y = t.relu(v[0]);
        weigh(t, y)
    });
    assert_grads("gelu", vec![x.clone()], |t, v| {
        let y = t.gelu(v[0]);
        weigh(t, y)
    });
    assert_grads("sigmoid", vec![x], |t, v| {
        let y = t.sigmoid(v[0]);
        weigh(t, y)
    });
    assert_grads("sqrt", vec![positive(&[4, 5], 4)], |t, v| {
        let y = t.sqrt(v[0]);
        weigh(t, y)
    });
}

#[test]
fn matmul_variants() {
    assert_grads("matmul 2d", vec![rand_tensor(&[3, 4], 5), rand_tensor(&[4, 2], 6)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weigh(t, y)
    });
    assert_grads("matmul shared rhs", vec![rand_tensor(&[2, 3, 4], 7), rand_tensor(&[4, 5], 8)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weigh(t, y)
    });
    assert_grads("matmul batched", vec![rand_tensor(&[2, 2, 3, 4], 9), rand_tensor(&[2, 2, 4, 3], 10)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weigh(t, y)
    });
    assert_grads("matmul_nt", vec![rand_tensor(&[2, 3, 4], 11), rand_tensor(&[2, 5, 4], 12)], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weigh(t, y)
    });
}

#[test]
fn conv2d_strides_and_padding() {
    for (stride, pad, k, n) in [(1, 0, 3, 5), (1, 1, 3, 5), (2, 0, 2, 6), (2, 1, 3, 7), (1, 0, 1, 4)] {
        assert_grads(
            &format!("conv2d s{stride} p{pad} k{k}"),
            vec![rand_tensor(&[2, n, n], 13), rand_tensor(&[3, 2, k, k], 14)],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                weigh(t, y)
            },
        );
    }
}

#[test]
fn normalization_and_softmax() {
    assert_grads(
        "layer_norm",
        vec![rand_tensor(&[2, 3, 5], 15), rand_tensor(&[5], 16), rand_tensor(&[5], 17)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weigh(t, y)
        },
    );
    assert_grads("softmax", vec![rand_tensor(&[2, 3, 6], 18)], |t, v| {
        let y = t.softmax(v[0]);
        weigh(t, y)
    });
}

#[test]
fn broadcasting() {
    assert_grads("add_broadcast", vec![rand_tensor(&[2, 3, 4], 19), rand_tensor(&[4], 20)], |t, v| {
        let y = t.add_broadcast(v[0], v[1], 2)?;
        weigh(t, y)
    });
    assert_grads("add_broadcast_axes", vec![rand_tensor(&[2, 3, 4, 2], 21), rand_tensor(&[3, 4], 22)], |t, v| {
        let y = t.add_broadcast_axes(v[0], v[1], 1..3)?;
        weigh(t, y)
    });
    assert_grads("mul_broadcast", vec![rand_tensor(&[3, 4, 2], 23), rand_tensor(&[4], 24)], |t, v| {
        let y = t.mul_broadcast(v[0], v[1], 1)?;
        weigh(t, y)
    });
}

#[test]
fn pooling_and_upsampling() {
    assert_grads("global_avg_pool", vec![rand_tensor(&[3, 4, 5], 25)], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        weigh(t, y)
    });
    for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
        assert_grads(&format!("upsample {mode:?}"), vec![rand_tensor(&[2, 3, 4], 26)], move |t, v| {
            let y = t.upsample2x(v[0], mode)?;
            weigh(t, y)
        });
    }
}

#[test]
fn structural_ops() {
    let x = rand_tensor(&[2, 3, 4], 27);
    assert_grads("permute", vec![x.clone()], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        weigh(t, y)
    });
    assert_grads("reshape", vec![x.clone()], |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        weigh(t, y)
    });
    assert_grads("gather with repeats", vec![x.clone()], |t, v| {
        let idx: Vec<usize> = (0..30).map(|i| (i * 5) % 24).collect();
        let y = t.gather(v[0], Arc::new(idx), &[5, 6])?;
        weigh(t, y)
    });
    assert_grads("concat", vec![x.clone(), rand_tensor(&[2, 1, 4], 28)], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        weigh(t, y)
    });
    assert_grads("sum / mean / sum_last", vec![x], |t, v| {
        let s = t.sum(v[0]);
        let m = t.mean(v[0]);
        let l = t.sum_last(v[0]);
        let l = weigh(t, l)?;
        let a = t.add(s, m)?;
        t.add(a, l)
    });
}

#[test]
fn shared_subexpressions_accumulate() {
    assert_grads("x reused", vec![rand_tensor(&[3, 3], 29)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let y = t.matmul(sq, v[0])?;
        let y = t.add(y, v[0])?;
        weigh(t, y)
    });
}

#[test]
fn injected_fault_is_detected() {
    let inputs = vec![rand_tensor(&[3, 4], 30), rand_tensor(&[4, 2], 31)];
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.matmul(v[0], v[1])?;
        weigh(t, y)
    };
    set_backward_fault(true);
    let report = check_gradients(&inputs, f, &GradCheckOptions::default());
    set_backward_fault(false);
    assert!(!report.unwrap().passes(TOLERANCE));
    assert!(check_gradients(&inputs, f, &GradCheckOptions::default()).unwrap().passes(TOLERANCE));
}
