use diffcore::{
    grad_check, BatchNormState, CustomOp, DiffArray, NormMode, Result, Tape, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn random(shape: Vec<usize>, seed: u64) -> DiffArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights
/// so every output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(&random(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn matmul_gradients() {
    let inputs = [random(vec![3, 4], 1), random(vec![4, 2], 2)];
    let r = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 3)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn matmul_nt_and_bias_gradients() {
    let inputs = [random(vec![3, 5], 4), random(vec![2, 5], 5), random(vec![2], 6)];
    let r = grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            weighted_sum(t, y, 7)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn conv1d_two_channel_gradients() {
    let inputs = [random(vec![2, 7], 8), random(vec![3, 2, 3], 9), random(vec![3], 10)];
    for (stride, pad) in [(1, 1), (2, 0), (1, 2)] {
        let r = grad_check(
            |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], stride, pad)?;
                weighted_sum(t, y, 11)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "stride {stride} pad {pad}: {r:?}");
    }
}

#[test]
fn batched_conv1d_gradients() {
    let inputs = [random(vec![3, 1, 6], 12), random(vec![4, 1, 3], 13), random(vec![4], 14)];
    let r = grad_check(
        |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 1, 1)?;
            weighted_sum(t, y, 15)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn batchnorm_train_gradients() {
    let inputs = [random(vec![4, 3], 16), random(vec![3], 17), random(vec![3], 18)];
    let state = BatchNormState::new(3);
    let r = grad_check(
        |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], &state, NormMode::Train)?;
            weighted_sum(t, y, 19)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn batchnorm_channel_gradients_on_sequences() {
    let inputs = [random(vec![3, 2, 5], 20), random(vec![2], 21), random(vec![2], 22)];
    let state = BatchNormState::new(2);
    let r = grad_check(
        |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], &state, NormMode::Train)?;
            weighted_sum(t, y, 23)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn batchnorm_eval_gradients() {
    let inputs = [random(vec![2, 3], 24), random(vec![3], 25), random(vec![3], 26)];
    let mut state = BatchNormState::new(3);
    state.running_mean = vec![0.1, -0.2, 0.3];
    state.running_var = vec![0.5, 1.5, 2.0];
    let r = grad_check(
        |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], &state, NormMode::Eval)?;
            weighted_sum(t, y, 27)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn pointwise_gradients() {
    let inputs = [random(vec![2, 3], 28), random(vec![2, 3], 29)];
    let r = grad_check(
        |t, v| {
            let s = t.sigmoid(v[0])?;
            let h = t.tanh(v[1])?;
            let m = t.mul(s, h)?;
            let a = t.add(m, v[0])?;
            let d = t.sub(a, v[1])?;
            let r = t.relu(d)?;
            let f = t.affine(r, -2.0, 0.5)?;
            weighted_sum(t, f, 30)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn mul_gradient_is_other_operand() {
    let a = random(vec![5], 31);
    let b = random(vec![5], 32);
    let tape = Tape::new();
    let va = tape.param(&a);
    let vb = tape.constant(&b);
    let p = tape.mul(va, vb).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(va).unwrap(), b.data());

    let r = grad_check(
        |t, v| {
            let p = t.mul(v[0], v[1])?;
            t.sum(p)
        },
        &[a, b],
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn l2_normalize_gradients() {
    let inputs = [random(vec![2, 5], 33)];
    let r = grad_check(
        |t, v| {
            let y = t.l2_normalize(v[0])?;
            weighted_sum(t, y, 34)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn shape_op_gradients() {
    let inputs = [random(vec![3, 4], 35), random(vec![3, 2], 36), random(vec![3], 37)];
    let r = grad_check(
        |t, v| {
            let c = t.concat_cols(v[0], v[1])?;
            let s = t.slice_cols(c, 1, 5)?;
            let sm = t.softmax_rows(s)?;
            let tr = t.transpose(sm)?;
            let back = t.transpose(tr)?;
            let scaled = t.scale_rows(back, v[2])?;
            let r = t.reshape(scaled, vec![2, 3, 2])?;
            let m = t.mean_channels(r)?;
            let w = weighted_sum(t, m, 38)?;
            let mean = t.mean(c)?;
            t.add(w, mean)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn sigmoid_chain_at_default_eps() {
    let inputs = [random(vec![4], 39)];
    let r = grad_check(
        |t, v| {
            let a = t.sigmoid(v[0])?;
            let b = t.sigmoid(a)?;
            let c = t.sigmoid(b)?;
            t.sum(c)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

/// Square with a backward rule that forgets the factor of two.
struct BrokenSquare;

impl CustomOp for BrokenSquare {
    fn name(&self) -> &'static str {
        "broken_square"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(inputs[0].iter().zip(g).map(|(x, gi)| x * gi).collect())]
    }
}

#[test]
fn harness_detects_wrong_backward_rule() {
    let inputs = [random(vec![4], 40)];
    let r = grad_check(
        |t, v| {
            let x = t.value(v[0]);
            let y = t.custom(&[v[0]], vec![4], x.iter().map(|a| a * a).collect(), Box::new(BrokenSquare))?;
            t.sum(y)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let t = Tape::new();
        let x = t.constant(&random(vec![8, 33], 41));
        let w = t.constant(&random(vec![17, 33], 42));
        let b = t.constant(&random(vec![17], 43));
        let y = t.linear(x, w, b).unwrap();
        let y = t.l2_normalize(y).unwrap();
        t.value(y).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn normalized_rows_have_unit_norm(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 1..5)) {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::from_rows(&rows).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        let v = tape.value(y);
        for (r, row) in rows.iter().enumerate() {
            let n_in = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n_in >= 1e-6 {
                let n_out = v[r * 6..(r + 1) * 6].iter().map(|a| a * a).sum::<f64>().sqrt();
                prop_assert!((n_out - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_ops_stay_finite(data in prop::collection::vec(-50f64..50.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::new(vec![3, 4], data).unwrap());
        let s = tape.sigmoid(x).unwrap();
        let sm = tape.softmax_rows(x).unwrap();
        let n = tape.l2_normalize(x).unwrap();
        let state = BatchNormState::new(4);
        let gamma = tape.constant(&DiffArray::filled(vec![4], 1.0).unwrap());
        let beta = tape.constant(&DiffArray::zeros(vec![4]).unwrap());
        let (bn, _) = tape.batchnorm(x, gamma, beta, &state, NormMode::Train).unwrap();
        for v in [s, sm, n, bn] {
            prop_assert!(tape.value(v).iter().all(|a| a.is_finite()));
        }
    }
}
