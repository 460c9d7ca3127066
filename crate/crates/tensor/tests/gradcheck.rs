//! Finite-difference verification of every differentiable op.
//!
//! Analytic gradients from the tape are compared against central differences
//! (`h = 1e-5`, `f64`) element by element. The comparison metric is
//! `|a - b| / max(|a| + |b|, 1e-3)`, which behaves like a relative error for
//! large values and an absolute one near zero; it must stay below `1e-4`.

use cadenza_tensor::{Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Deterministic value stream for fixture data (splitmix64 -> [-1, 1]).
struct Stream(u64);

impl Stream {
    fn new(seed: u64) -> Self {
        Stream(seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
    }
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| self.next()).collect()).unwrap()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// Check analytic grads of `build`'s scalar output against central
/// differences for every element of every input.
///
/// `build` must construct the graph from the given leaf vars alone so the
/// harness can re-run it on perturbed copies.
fn gradcheck(label: &str, inputs: &[Tensor<f64>], build: impl Fn(&Tape<f64>, &[Var]) -> Var) {
    // Weight the output by a fixed pseudo-random constant before reducing so
    // permutation/sign errors cannot cancel in the sum.
    let run = |tensors: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&tape, &vars);
        let mut w = Stream::new(0xdead_beef);
        let weights = tape
            .constant_data(
                tape.shape_of(out).unwrap(),
                (0..tape.value_vec(out).unwrap().len()).map(|_| w.next()).collect(),
            )
            .unwrap();
        let weighted = tape.mul(out, weights).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.value_vec(loss).unwrap()[0]
    };

    // Analytic pass.
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.deep_clone().with_grad()).collect();
    let tape = Tape::new();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&tape, &vars);
    let mut w = Stream::new(0xdead_beef);
    let weights = tape
        .constant_data(
            tape.shape_of(out).unwrap(),
            (0..tape.value_vec(out).unwrap().len()).map(|_| w.next()).collect(),
        )
        .unwrap();
    let weighted = tape.mul(out, weights).unwrap();
    let loss = tape.sum(weighted).unwrap();
    tape.backward(loss).unwrap();

    // Numeric pass per input element.
    for (ti, tracked_t) in tracked.iter().enumerate() {
        let analytic = tracked_t.grad().unwrap().clone();
        for e in 0..tracked_t.numel() {
            let probe: Vec<Tensor<f64>> = inputs.iter().map(|t| t.deep_clone()).collect();
            probe[ti].data_mut()[e] += H;
            let up = run(&probe);
            probe[ti].data_mut()[e] -= 2.0 * H;
            let down = run(&probe);
            let numeric = (up - down) / (2.0 * H);
            let err = rel_err(analytic[e], numeric);
            assert!(
                err < TOL,
                "{label}: input {ti} element {e}: analytic {} vs numeric {numeric} (err {err:.3e})",
                analytic[e]
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise / scalar ops
// ---------------------------------------------------------------------------

#[test]
fn grad_add_same_shape() {
    let mut s = Stream::new(1);
    let inputs = [s.tensor(&[3, 4]), s.tensor(&[3, 4])];
    gradcheck("add", &inputs, |t, v| t.add(v[0], v[1]).unwrap());
}

#[test]
fn grad_add_broadcast_bias() {
    let mut s = Stream::new(2);
    let inputs = [s.tensor(&[3, 4]), s.tensor(&[4])];
    gradcheck("add-broadcast", &inputs, |t, v| t.add(v[0], v[1]).unwrap());
}

#[test]
fn grad_add_broadcast_matrix_over_batch() {
    let mut s = Stream::new(3);
    let inputs = [s.tensor(&[2, 3, 4]), s.tensor(&[3, 4])];
    gradcheck("add-broadcast-2d", &inputs, |t, v| t.add(v[0], v[1]).unwrap());
}

#[test]
fn grad_sub() {
    let mut s = Stream::new(4);
    let inputs = [s.tensor(&[5]), s.tensor(&[5])];
    gradcheck("sub", &inputs, |t, v| t.sub(v[0], v[1]).unwrap());
}

#[test]
fn grad_mul() {
    let mut s = Stream::new(5);
    let inputs = [s.tensor(&[3, 4]), s.tensor(&[3, 4])];
    gradcheck("mul", &inputs, |t, v| t.mul(v[0], v[1]).unwrap());
}

#[test]
fn grad_affine() {
    let mut s = Stream::new(6);
    let inputs = [s.tensor(&[7])];
    gradcheck("affine", &inputs, |t, v| t.affine(v[0], -2.5, 0.75).unwrap());
}

#[test]
fn grad_sigmoid() {
    let mut s = Stream::new(7);
    let inputs = [s.tensor(&[9])];
    gradcheck("sigmoid", &inputs, |t, v| t.sigmoid(v[0]).unwrap());
}

#[test]
fn grad_tanh() {
    let mut s = Stream::new(8);
    let inputs = [s.tensor(&[9])];
    gradcheck("tanh", &inputs, |t, v| t.tanh(v[0]).unwrap());
}

#[test]
fn grad_silu() {
    let mut s = Stream::new(9);
    let inputs = [s.tensor(&[9])];
    gradcheck("silu", &inputs, |t, v| t.silu(v[0]).unwrap());
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

#[test]
fn grad_reshape() {
    let mut s = Stream::new(10);
    let inputs = [s.tensor(&[2, 6])];
    gradcheck("reshape", &inputs, |t, v| t.reshape(v[0], vec![3, 4]).unwrap());
}

#[test]
fn grad_transpose_2d() {
    let mut s = Stream::new(11);
    let inputs = [s.tensor(&[3, 5])];
    gradcheck("transpose2", &inputs, |t, v| t.transpose(v[0], 0, 1).unwrap());
}

#[test]
fn grad_transpose_3d_middle() {
    let mut s = Stream::new(12);
    let inputs = [s.tensor(&[2, 3, 4])];
    gradcheck("transpose3", &inputs, |t, v| t.transpose(v[0], 0, 2).unwrap());
}

#[test]
fn grad_narrow() {
    let mut s = Stream::new(13);
    let inputs = [s.tensor(&[4, 6])];
    gradcheck("narrow", &inputs, |t, v| t.narrow(v[0], 1, 2, 3).unwrap());
}

#[test]
fn grad_concat_axis0_and_1() {
    let mut s = Stream::new(14);
    let inputs = [s.tensor(&[2, 3]), s.tensor(&[4, 3])];
    gradcheck("concat0", &inputs, |t, v| t.concat(0, &[v[0], v[1]]).unwrap());
    let inputs = [s.tensor(&[2, 3]), s.tensor(&[2, 5])];
    gradcheck("concat1", &inputs, |t, v| t.concat(1, &[v[0], v[1]]).unwrap());
}

#[test]
fn grad_gather_with_duplicate_ids() {
    let mut s = Stream::new(15);
    let inputs = [s.tensor(&[5, 3])];
    gradcheck("gather", &inputs, |t, v| t.gather(v[0], &[4, 0, 2, 0]).unwrap());
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

#[test]
fn grad_matmul_2d() {
    let mut s = Stream::new(16);
    let inputs = [s.tensor(&[3, 4]), s.tensor(&[4, 5])];
    gradcheck("matmul", &inputs, |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn grad_matmul_batched_times_shared() {
    let mut s = Stream::new(17);
    let inputs = [s.tensor(&[2, 3, 4]), s.tensor(&[4, 5])];
    gradcheck("matmul-batch-shared", &inputs, |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn grad_matmul_batched_times_batched() {
    let mut s = Stream::new(18);
    let inputs = [s.tensor(&[2, 3, 4]), s.tensor(&[2, 4, 5])];
    gradcheck("matmul-batch-batch", &inputs, |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn grad_linear() {
    let mut s = Stream::new(19);
    let inputs = [s.tensor(&[3, 4]), s.tensor(&[4, 5]), s.tensor(&[5])];
    gradcheck("linear", &inputs, |t, v| t.linear(v[0], v[1], v[2]).unwrap());
}

// ---------------------------------------------------------------------------
// Normalization / attention pieces
// ---------------------------------------------------------------------------

#[test]
fn grad_softmax() {
    let mut s = Stream::new(20);
    let inputs = [s.tensor(&[3, 6])];
    gradcheck("softmax", &inputs, |t, v| t.softmax(v[0]).unwrap());
}

#[test]
fn grad_softmax_with_masked_lanes() {
    let mut s = Stream::new(21);
    let inputs = [s.tensor(&[2, 5])];
    gradcheck("softmax-masked", &inputs, |t, v| {
        // Additive -inf mask on two lanes per row, as attention does.
        let mask = t
            .constant_data(
                vec![2, 5],
                vec![
                    0.0, 0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY,
                    f64::NEG_INFINITY, 0.0, 0.0, 0.0, f64::NEG_INFINITY,
                ],
            )
            .unwrap();
        let masked = t.add(v[0], mask).unwrap();
        t.softmax(masked).unwrap()
    });
}

#[test]
fn grad_rms_norm() {
    let mut s = Stream::new(22);
    let inputs = [s.tensor(&[4, 6]), s.tensor(&[6])];
    gradcheck("rms_norm", &inputs, |t, v| t.rms_norm(v[0], v[1], 1e-6).unwrap());
}

#[test]
fn grad_rotate_pairs() {
    let mut s = Stream::new(23);
    let inputs = [s.tensor(&[3, 8])];
    gradcheck("rotate_pairs", &inputs, |t, v| {
        let mut angles = Stream::new(77);
        let theta: Vec<f64> = (0..12).map(|_| angles.next() * 3.0).collect();
        let cos = t
            .constant_data(vec![3, 4], theta.iter().map(|a| a.cos()).collect())
            .unwrap();
        let sin = t
            .constant_data(vec![3, 4], theta.iter().map(|a| a.sin()).collect())
            .unwrap();
        t.rotate_pairs(v[0], cos, sin).unwrap()
    });
}

// ---------------------------------------------------------------------------
// Losses / reductions
// ---------------------------------------------------------------------------

#[test]
fn grad_cross_entropy() {
    let mut s = Stream::new(24);
    let inputs = [s.tensor(&[4, 7])];
    gradcheck("cross_entropy", &inputs, |t, v| {
        t.cross_entropy(v[0], &[3, 0, 6, 2]).unwrap()
    });
}

#[test]
fn grad_cross_entropy_with_masked_vocab() {
    let mut s = Stream::new(25);
    let inputs = [s.tensor(&[3, 6])];
    gradcheck("cross_entropy-masked", &inputs, |t, v| {
        // Forbid lanes 0 and 5, as the attribute-slice mask does.
        let mut mask = vec![0.0; 18];
        for r in 0..3 {
            mask[r * 6] = f64::NEG_INFINITY;
            mask[r * 6 + 5] = f64::NEG_INFINITY;
        }
        let mask = t.constant_data(vec![3, 6], mask).unwrap();
        let logits = t.add(v[0], mask).unwrap();
        t.cross_entropy(logits, &[2, 1, 4]).unwrap()
    });
}

#[test]
fn grad_sum_and_mean() {
    let mut s = Stream::new(26);
    let inputs = [s.tensor(&[3, 4])];
    gradcheck("sum", &inputs, |t, v| t.sum(v[0]).unwrap());
    gradcheck("mean", &inputs, |t, v| t.mean(v[0]).unwrap());
}

#[test]
fn grad_masked_mean() {
    let mut s = Stream::new(27);
    let inputs = [s.tensor(&[6])];
    gradcheck("masked_mean", &inputs, |t, v| {
        let mask = t
            .constant_data(vec![6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
            .unwrap();
        t.masked_mean(v[0], mask, 4).unwrap()
    });
}

// ---------------------------------------------------------------------------
// Composite chains
// ---------------------------------------------------------------------------

#[test]
fn grad_two_layer_network_chain() {
    let mut s = Stream::new(28);
    let inputs = [
        s.tensor(&[4, 6]),  // x
        s.tensor(&[6, 8]),  // w1
        s.tensor(&[8]),     // b1
        s.tensor(&[8]),     // norm weight
        s.tensor(&[8, 5]),  // w2
    ];
    gradcheck("chain", &inputs, |t, v| {
        let h = t.linear(v[0], v[1], v[2]).unwrap();
        let h = t.silu(h).unwrap();
        let h = t.rms_norm(h, v[3], 1e-6).unwrap();
        let logits = t.matmul(h, v[4]).unwrap();
        t.cross_entropy(logits, &[1, 4, 0, 2]).unwrap()
    });
}

#[test]
fn grad_attention_like_chain() {
    let mut s = Stream::new(29);
    let inputs = [s.tensor(&[4, 6]), s.tensor(&[6, 6]), s.tensor(&[6, 6]), s.tensor(&[6, 6])];
    gradcheck("attention-chain", &inputs, |t, v| {
        let q = t.matmul(v[0], v[1]).unwrap();
        let k = t.matmul(v[0], v[2]).unwrap();
        let val = t.matmul(v[0], v[3]).unwrap();
        let kt = t.transpose(k, 0, 1).unwrap();
        let scores = t.matmul(q, kt).unwrap();
        let scaled = t.affine(scores, 1.0 / (6.0f64).sqrt(), 0.0).unwrap();
        // Causal mask.
        let mut m = vec![0.0; 16];
        for r in 0..4 {
            for c in r + 1..4 {
                m[r * 4 + c] = f64::NEG_INFINITY;
            }
        }
        let mask = t.constant_data(vec![4, 4], m).unwrap();
        let masked = t.add(scaled, mask).unwrap();
        let probs = t.softmax(masked).unwrap();
        t.matmul(probs, val).unwrap()
    });
}

// ---------------------------------------------------------------------------
// Engine semantics
// ---------------------------------------------------------------------------

#[test]
fn backward_twice_accumulates_leaf_grads() {
    let x = Tensor::from_vec(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap().with_grad();
    let tape = Tape::new();
    let v = tape.leaf(&x);
    let loss = tape.sum(v).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().clone(), vec![1.0, 1.0, 1.0]);
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().clone(), vec![2.0, 2.0, 2.0]);
    x.zero_grad();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().clone(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn same_graph_is_bitwise_deterministic() {
    let build = || -> (f64, Vec<f64>) {
        let mut s = Stream::new(55);
        let x = s.tensor(&[5, 7]).with_grad();
        let w = s.tensor(&[7, 4]).with_grad();
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.silu(h).unwrap();
        let ce = tape.cross_entropy(h, &[1, 3, 0, 2, 1]).unwrap();
        let loss = tape.mean(ce).unwrap();
        tape.backward(loss).unwrap();
        let grad = w.grad().unwrap().clone();
        (tape.value_vec(loss).unwrap()[0], grad)
    };
    let (l1, g1) = build();
    let (l2, g2) = build();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1.len(), g2.len());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn grads_reach_every_tracked_leaf() {
    let mut s = Stream::new(60);
    let x = s.tensor(&[2, 3]).with_grad();
    let w = s.tensor(&[3, 2]).with_grad();
    let b = s.tensor(&[2]).with_grad();
    let tape = Tape::new();
    let out = tape
        .linear(tape.leaf(&x), tape.leaf(&w), tape.leaf(&b))
        .unwrap();
    let loss = tape.sum(out).unwrap();
    tape.backward(loss).unwrap();
    for (name, t) in [("x", &x), ("w", &w), ("b", &b)] {
        let nonzero = t.grad().unwrap().iter().any(|&g| g != 0.0);
        assert!(nonzero, "{name} received no gradient");
    }
}

#[test]
fn untracked_leaf_is_left_alone() {
    let x = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap(); // no grad buffer
    let tape = Tape::new();
    let v = tape.leaf(&x);
    let loss = tape.sum(v).unwrap();
    tape.backward(loss).unwrap();
    assert!(x.grad().is_none());
}

// ---------------------------------------------------------------------------
// Error contracts
// ---------------------------------------------------------------------------

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape: Tape<f64> = Tape::new();
    let a = tape.constant(&Tensor::zeros(vec![3, 4]));
    let b = tape.constant(&Tensor::zeros(vec![5, 6]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[5, 6]"), "{err}");
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[5, 6]"), "{err}");
}

#[test]
fn cross_tape_vars_are_rejected() {
    let t1: Tape<f64> = Tape::new();
    let t2: Tape<f64> = Tape::new();
    let a = t1.constant(&Tensor::zeros(vec![2]));
    let b = t2.constant(&Tensor::zeros(vec![2]));
    assert!(matches!(
        t1.add(a, b),
        Err(cadenza_tensor::TensorError::WrongTape { .. })
    ));
    assert!(t2.backward(a).is_err());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![3]));
    assert!(matches!(
        tape.backward(x),
        Err(cadenza_tensor::TensorError::NotScalarLoss(_))
    ));
}

#[test]
fn bad_indices_are_rejected() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![3, 2]));
    assert!(matches!(
        tape.gather(x, &[3]),
        Err(cadenza_tensor::TensorError::Index { .. })
    ));
    assert!(matches!(
        tape.cross_entropy(x, &[0, 5, 0]),
        Err(cadenza_tensor::TensorError::Index { .. })
    ));
}

#[test]
fn fully_masked_softmax_row_is_an_error() {
    let tape: Tape<f64> = Tape::new();
    let x = tape
        .constant(&Tensor::full(vec![1, 4], f64::NEG_INFINITY));
    assert!(tape.softmax(x).is_err());
}

#[test]
fn uniform_logits_cross_entropy_is_log_n() {
    // ln(vocab) when all logits are equal; also holds with -inf lanes
    // excluded from the count.
    let tape: Tape<f64> = Tape::new();
    let logits = tape.constant(&Tensor::zeros(vec![1, 10]));
    let ce = tape.cross_entropy(logits, &[4]).unwrap();
    let got = tape.value_vec(ce).unwrap()[0];
    assert!((got - (10.0f64).ln()).abs() < 1e-12);

    let mut vals = vec![0.0; 8];
    vals[1] = f64::NEG_INFINITY;
    vals[6] = f64::NEG_INFINITY;
    let masked = tape.constant(&Tensor::from_vec(vec![1, 8], vals).unwrap());
    let ce = tape.cross_entropy(masked, &[0]).unwrap();
    let got = tape.value_vec(ce).unwrap()[0];
    assert!((got - (6.0f64).ln()).abs() < 1e-12);
}
