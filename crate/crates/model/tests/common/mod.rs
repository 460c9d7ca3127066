//! Helpers shared between integration test targets: a dependency-free
//! random stream, small layer builders, and a host-side grouped-query
//! rotary-attention oracle computed with explicit complex arithmetic.

#![allow(dead_code)]

use cadenza_model::params::ParamBuilder;
use cadenza_model::{
    pair_frequencies, AttentionKind, AttentionLayer, AttnTrace, ForwardOptions, ModelConfig,
    PackingMask,
};
use cadenza_tensor::{Tape, Tensor};

/// Deterministic pseudo-random stream (splitmix64 mapped to [-1, 1)).
pub struct Stream(u64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))
    }

    pub fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    pub fn usize(&mut self, lo: usize, hi: usize) -> usize {
        lo + ((self.next() + 1.0) / 2.0 * (hi - lo) as f64) as usize
    }
}

pub fn desk_attn_config(kind: AttentionKind) -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.attention = kind;
    c
}

pub fn build_layer(config: &ModelConfig, seed: u64) -> AttentionLayer<f64> {
    let mut params = ParamBuilder::new(seed);
    let layer = AttentionLayer::new(config, &mut params, "layer0.attn");
    let _ = params.finish();
    layer
}

pub fn random_x(s: &mut Stream, n: usize, hidden: usize) -> Tensor<f64> {
    Tensor::from_vec(vec![n, hidden], (0..n * hidden).map(|_| s.next()).collect()).unwrap()
}

/// Random position vectors shaped like real event rows: slot 4 mirrors the
/// onset in slot 0, everything non-negative.
pub fn random_positions(s: &mut Stream, n: usize) -> Vec<[f64; 6]> {
    (0..n)
        .map(|_| {
            let mut p = [0.0; 6];
            let onset = (s.next() + 1.0) * 500.0;
            p[0] = onset;
            p[4] = onset;
            p[1] = (s.next() + 1.0) * 100.0;
            p[2] = (s.next() + 1.0) * 5.0;
            p[3] = (s.next() + 1.0) * 6.0;
            p[5] = (s.next() + 1.0) * 60.0;
            p
        })
        .collect()
}

/// Run the layer and return the output values plus the captured trace.
pub fn run_layer(
    layer: &AttentionLayer<f64>,
    x: &Tensor<f64>,
    positions: &[[f64; 6]],
    segments: Vec<Option<u32>>,
) -> (Vec<f64>, AttnTrace<f64>) {
    let tape = Tape::new();
    let mask = tape.constant(&PackingMask::new(segments).to_additive::<f64>());
    let mut trace = AttnTrace::default();
    let mut opts = ForwardOptions { train: false, rng: None, trace: Some(&mut trace) };
    let out = layer
        .forward(&tape, tape.leaf(x), positions, mask, &mut opts)
        .unwrap();
    (tape.value_vec(out).unwrap(), trace)
}

/// Compare two traced score/probability matrices; `-inf` entries (masked
/// slots) must match exactly, finite entries within `tol`.
pub fn assert_matrices_close(a: &[Vec<Tensor<f64>>], b: &[Vec<Tensor<f64>>], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len());
    for (la, lb) in a.iter().zip(b) {
        assert_eq!(la.len(), lb.len());
        for (h, (ta, tb)) in la.iter().zip(lb).enumerate() {
            for (i, (x, y)) in ta.data().iter().zip(tb.data().iter()).enumerate() {
                if x.is_infinite() || y.is_infinite() {
                    assert_eq!(x, y, "{what}: head {h} entry {i} infinite mismatch");
                } else {
                    assert!(
                        (x - y).abs() <= tol,
                        "{what}: head {h} entry {i}: {x} vs {y}"
                    );
                }
            }
        }
    }
}

pub struct HostWeights {
    pub wq: (Vec<f64>, usize),
    pub wk: (Vec<f64>, usize),
    pub wv: (Vec<f64>, usize),
    pub wo: (Vec<f64>, usize),
}

pub fn host_weights(layer: &AttentionLayer<f64>) -> HostWeights {
    let grab = |t: &Tensor<f64>| (t.data().clone(), t.shape()[1]);
    HostWeights {
        wq: grab(&layer.wq),
        wk: grab(&layer.wk),
        wv: grab(&layer.wv),
        wo: grab(&layer.wo),
    }
}

fn host_project(x: &[f64], n: usize, hidden: usize, w: &(Vec<f64>, usize)) -> Vec<f64> {
    let cols = w.1;
    let mut out = vec![0.0; n * cols];
    for t in 0..n {
        for r in 0..hidden {
            let xv = x[t * hidden + r];
            for c in 0..cols {
                out[t * cols + c] += xv * w.0[r * cols + c];
            }
        }
    }
    out
}

/// Grouped-query attention with standard one-dimensional rotary embedding,
/// computed entirely on the host with explicit complex rotation. This is
/// the oracle the layer must degenerate to when every group is fed the same
/// scalar position and base.
pub fn rope_gqa_reference(
    x: &Tensor<f64>,
    weights: &HostWeights,
    positions: &[f64],
    base: f64,
    heads_q: usize,
    heads_kv: usize,
    mask: &PackingMask,
) -> Vec<f64> {
    let n = x.shape()[0];
    let hidden = x.shape()[1];
    let dh = weights.wq.1 / heads_q;
    let q = host_project(x.data().as_slice(), n, hidden, &weights.wq);
    let k = host_project(x.data().as_slice(), n, hidden, &weights.wk);
    let v = host_project(x.data().as_slice(), n, hidden, &weights.wv);
    let freqs = pair_frequencies(base, dh);
    let rotate = |row: &[f64], pos: f64| -> Vec<f64> {
        let mut out = vec![0.0; dh];
        for (j, &f) in freqs.iter().enumerate() {
            let (re, im) = (row[2 * j], row[2 * j + 1]);
            let theta = pos * f;
            out[2 * j] = re * theta.cos() - im * theta.sin();
            out[2 * j + 1] = re * theta.sin() + im * theta.cos();
        }
        out
    };
    let kv_cols = weights.wk.1;
    let q_cols = weights.wq.1;
    let mut merged = vec![0.0; n * q_cols];
    for h in 0..heads_q {
        let kvh = h / (heads_q / heads_kv);
        for t in 0..n {
            let qr = rotate(&q[t * q_cols + h * dh..t * q_cols + (h + 1) * dh], positions[t]);
            // Masked scores, then a stable softmax over the allowed keys.
            let mut scores = vec![f64::NEG_INFINITY; n];
            for s in 0..n {
                if !mask.allows(t, s) {
                    continue;
                }
                let kr = rotate(
                    &k[s * kv_cols + kvh * dh..s * kv_cols + (kvh + 1) * dh],
                    positions[s],
                );
                scores[s] =
                    qr.iter().zip(&kr).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&sc| (sc - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for s in 0..n {
                let p = exps[s] / z;
                for c in 0..dh {
                    merged[t * q_cols + h * dh + c] += p * v[s * kv_cols + kvh * dh + c];
                }
            }
        }
    }
    // Output projection.
    let mut out = vec![0.0; n * hidden];
    for t in 0..n {
        for r in 0..q_cols {
            let mv = merged[t * q_cols + r];
            for c in 0..hidden {
                out[t * hidden + c] += mv * weights.wo.0[r * hidden + c];
            }
        }
    }
    out
}
