//! Noisy top-k gating.
//!
//! `H(x)_i = (x·W_g)_i + ε_i · softplus((x·W_noise)_i)` with `ε ~ N(0, 1)`,
//! then every entry outside the row's top-k is treated as `-∞` before the
//! softmax, so exactly `k` experts get nonzero weight.

use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct NoisyTopKGate {
    pub w_gate: ParamId,
    pub w_noise: ParamId,
    pub n_experts: usize,
    pub k: usize,
}

impl NoisyTopKGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        n_experts: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_k(k, n_experts)?;
        let std = (1.0 / in_dim as f64).sqrt();
        let w_gate = store.add(
            "gate.w_gate",
            Matrix::random_normal(in_dim, n_experts, std, rng),
        );
        let w_noise = store.add("gate.w_noise", Matrix::zeros(in_dim, n_experts));
        Ok(Self {
            w_gate,
            w_noise,
            n_experts,
            k,
        })
    }
}

pub(crate) fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "top-k must satisfy 1 <= k <= N, got k={k}, N={n}"
        )));
    }
    Ok(())
}

/// Source of the standard-normal draw `ε` in `H(x)`.
pub enum Noise<'a> {
    /// `H(x) = x·W_g` exactly (evaluation).
    Off,
    /// Fresh draws from the generator (training).
    Sample(&'a mut dyn RngCore),
    /// A fixed `b x N` draw, e.g. to replay a training pass in a gradient check.
    Fixed(&'a Matrix),
}

impl<'a> Noise<'a> {
    pub fn for_mode(training: bool, rng: &'a mut dyn RngCore) -> Self {
        if training {
            Noise::Sample(rng)
        } else {
            Noise::Off
        }
    }
}

#[derive(Debug, Clone)]
pub struct GateOutput {
    /// `b x N` sparse mixture weights `G(x)`.
    pub weights: Tensor,
    /// `b x N` dense routing probabilities `softmax(H(x))` before top-k
    /// masking. Identical to `weights` when `k = N`.
    pub probs: Tensor,
    /// Retained expert indices per row, best first.
    pub topk: Vec<Vec<usize>>,
    /// `b x N` noisy logits `H(x)`.
    pub raw_logits: Tensor,
    /// The `ε` draw used, when noise was on.
    pub noise: Option<Matrix>,
}

/// Indices of the `k` largest entries, ties toward the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn gate_forward(
    tape: &mut Tape,
    p: &Bound,
    gate: &NoisyTopKGate,
    x: Tensor,
    k: usize,
    noise: Noise<'_>,
) -> Result<GateOutput> {
    check_k(k, gate.n_experts)?;
    let clean = tape.matmul(x, p[gate.w_gate])?;
    let (rows, n) = tape.shape(clean);
    let eps = match noise {
        Noise::Off => None,
        Noise::Sample(rng) => {
            let data = (0..rows * n)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect();
            Some(Matrix::from_vec(rows, n, data))
        }
        Noise::Fixed(m) => {
            if m.shape() != (rows, n) {
                return Err(Error::shape("gate noise", (rows, n), m.shape()));
            }
            Some(m.clone())
        }
    };
    let raw_logits = match &eps {
        None => clean,
        Some(e) => {
            let pre = tape.matmul(x, p[gate.w_noise])?;
            let scale = tape.softplus(pre);
            let e = tape.constant(e.clone());
            let noisy = tape.mul(e, scale)?;
            tape.add(clean, noisy)?
        }
    };

    let h = tape.value(raw_logits);
    let mut mask = vec![false; rows * n];
    let topk: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            let keep = top_k_indices(h.row(r), k);
            for &j in &keep {
                mask[r * n + j] = true;
            }
            keep
        })
        .collect();

    let weights = tape.masked_softmax(raw_logits, &mask)?;
    let probs = if k == n {
        weights
    } else {
        tape.softmax(raw_logits)?
    };
    Ok(GateOutput {
        weights,
        probs,
        topk,
        raw_logits,
        noise: eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_gate(n: usize) -> (ParamStore, NoisyTopKGate) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gate = NoisyTopKGate::new(&mut store, n, n, 1, &mut rng).unwrap();
        let mut eye = Matrix::zeros(n, n);
        for i in 0..n {
            eye.set(i, i, 1.0);
        }
        *store.get_mut(gate.w_gate) = eye;
        (store, gate)
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0, 0.0, 0.0], 2), vec![0, 1]);
    }

    #[test]
    fn noiseless_top2_example() {
        let (store, gate) = identity_gate(4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Matrix::from_rows(&[[0.1, 0.5, 0.3, 0.2]]));
        let out = gate_forward(&mut tape, &p, &gate, x, 2, Noise::Off).unwrap();
        assert_eq!(out.topk, vec![vec![1, 2]]);
        let w = tape.value(out.weights);
        let expected = 0.2f64.exp() / (1.0 + 0.2f64.exp());
        assert_eq!(w.get(0, 0), 0.0);
        assert_eq!(w.get(0, 3), 0.0);
        assert!((w.get(0, 1) - expected).abs() < 1e-15);
        assert!((w.get(0, 1) - 0.5498).abs() < 1e-4);
        assert!((w.get(0, 2) - 0.4502).abs() < 1e-4);
        // noise off: H(x) = x·W_g exactly
        assert_eq!(tape.value(out.raw_logits).as_slice(), &[0.1, 0.5, 0.3, 0.2]);
    }

    #[test]
    fn k_equal_n_is_dense_and_k1_is_one_hot() {
        let (store, gate) = identity_gate(3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Matrix::from_rows(&[[0.3, -1.0, 0.9]]));
        let dense = gate_forward(&mut tape, &p, &gate, x, 3, Noise::Off).unwrap();
        assert!(tape
            .value(dense.weights)
            .as_slice()
            .iter()
            .all(|&v| v > 0.0));
        assert_eq!(dense.weights, dense.probs);
        let one = gate_forward(&mut tape, &p, &gate, x, 1, Noise::Off).unwrap();
        assert_eq!(tape.value(one.weights).as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let (store, gate) = identity_gate(3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Matrix::zeros(1, 3));
        for k in [0, 4] {
            assert!(matches!(
                gate_forward(&mut tape, &p, &gate, x, k, Noise::Off),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn sampled_noise_is_recorded_and_replayable() {
        let (store, gate) = identity_gate(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(xv.clone());
        let sampled = gate_forward(&mut tape, &p, &gate, x, 2, Noise::Sample(&mut rng)).unwrap();
        let eps = sampled.noise.clone().unwrap();
        let replay = gate_forward(&mut tape, &p, &gate, x, 2, Noise::Fixed(&eps)).unwrap();
        assert_eq!(
            tape.value(sampled.raw_logits),
            tape.value(replay.raw_logits)
        );
        assert_eq!(sampled.topk, replay.topk);
        // W_noise = 0 so the noise scale is ln 2
        let clean = xv.clone();
        let expected = clean.zip_map(&eps, |c, e| c + e * std::f64::consts::LN_2);
        assert!(tape.value(sampled.raw_logits).max_abs_diff(&expected) < 1e-15);
    }
}
