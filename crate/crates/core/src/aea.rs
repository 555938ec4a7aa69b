//! Adaptive expert aggregation.
//!
//! A joint distribution `J ≈ p(domain, expert)` is tracked as an exponential
//! moving average of per-batch routing mass:
//!
//! ```text
//! C_k = (1/b) Σ_rows onehot(domain_row) ⊗ gate_row          (M x N, sums to 1)
//! J_k = β·J_{k-1} + (1-β)·C_k
//! ```
//!
//! The loss is `L_MI = -I(D;E)` evaluated on `β·detach(J_{k-1}) + (1-β)·C_k`,
//! so its gradient reaches the gate through the current batch only.

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::CesModel;
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};

/// Entries below this contribute nothing to `I(D;E)` (`0·log 0 := 0`).
pub const JOINT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointProbabilityMatrix {
    joint: Matrix,
    beta: f64,
}

impl JointProbabilityMatrix {
    /// Uniform `1/(M·N)` start.
    pub fn new(n_domains: usize, n_experts: usize, beta: f64) -> Result<Self> {
        if n_domains == 0 || n_experts == 0 {
            return Err(Error::Config("joint matrix needs M, N >= 1".into()));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!(
                "EMA decay beta {beta} outside [0, 1)"
            )));
        }
        let u = 1.0 / (n_domains * n_experts) as f64;
        Ok(Self {
            joint: Matrix::filled(n_domains, n_experts, u),
            beta,
        })
    }

    pub fn from_parts(joint: Matrix, beta: f64) -> Result<Self> {
        let mut s = Self::new(joint.rows().max(1), joint.cols().max(1), beta)?;
        check_distribution(&joint, 1e-9)?;
        s.joint = joint;
        Ok(s)
    }

    pub fn joint(&self) -> &Matrix {
        &self.joint
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `J ← β·J + (1-β)·C`, then renormalised to sum exactly 1.
    pub fn ema_update(&mut self, contribution: &Matrix) -> Result<()> {
        if contribution.shape() != self.joint.shape() {
            return Err(Error::shape(
                "ema_update",
                self.joint.shape(),
                contribution.shape(),
            ));
        }
        check_distribution(contribution, 1e-6)?;
        let beta = self.beta;
        let mut next = self
            .joint
            .zip_map(contribution, |j, c| beta * j + (1.0 - beta) * c);
        let total = next.sum();
        next.as_mut_slice().iter_mut().for_each(|v| *v /= total);
        self.joint = next;
        Ok(())
    }

    /// `β·detach(J) + (1-β)·C` on the tape; gradient flows only into `C`.
    pub fn effective(&self, tape: &mut Tape, contribution: Tensor) -> Result<Tensor> {
        let history = tape.constant(self.joint.scale(self.beta));
        let current = tape.scale(contribution, 1.0 - self.beta);
        tape.add(history, current)
    }

    pub fn stats(&self) -> Result<MiStats> {
        mutual_information(&self.joint)
    }
}

fn check_distribution(m: &Matrix, tol: f64) -> Result<()> {
    if let Some(i) = m.as_slice().iter().position(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Numeric(format!(
            "joint entry ({}, {}) = {} is not a nonnegative finite probability",
            i / m.cols(),
            i % m.cols(),
            m.as_slice()[i]
        )));
    }
    let total = m.sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::Numeric(format!("joint sums to {total}, expected 1")));
    }
    Ok(())
}

/// `C[m][j] = (1/b)·Σ_{rows with domain m} weights[row][j]` as a tape
/// operation, so gradients flow back into the gate weights.
pub fn batch_joint_contribution(
    tape: &mut Tape,
    domains: &[usize],
    gate_weights: Tensor,
    n_domains: usize,
) -> Result<Tensor> {
    let onehot_t = domain_onehot_transposed(domains, n_domains, tape.shape(gate_weights).0)?;
    let w = tape.value(gate_weights);
    for r in 0..w.rows() {
        let s: f64 = w.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "gate row {r} sums to {s}, expected 1"
            )));
        }
    }
    let b = domains.len() as f64;
    let onehot_t = tape.constant(onehot_t);
    let summed = tape.matmul(onehot_t, gate_weights)?;
    Ok(tape.scale(summed, 1.0 / b))
}

fn domain_onehot_transposed(domains: &[usize], n_domains: usize, rows: usize) -> Result<Matrix> {
    if domains.len() != rows {
        return Err(Error::shape(
            "batch_joint_contribution",
            (domains.len(), 1),
            (rows, 0),
        ));
    }
    if domains.is_empty() {
        return Err(Error::Data("joint contribution of an empty batch".into()));
    }
    let mut onehot_t = Matrix::zeros(n_domains, domains.len());
    for (r, &d) in domains.iter().enumerate() {
        if d >= n_domains {
            return Err(Error::Data(format!(
                "row {r}: domain {d} outside 0..{n_domains}"
            )));
        }
        onehot_t.set(d, r, 1.0);
    }
    Ok(onehot_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiStats {
    /// `I(D;E)` in nats.
    pub mutual_information: f64,
    /// `P(D)`, length M.
    pub marginal_domains: Vec<f64>,
    /// `P(E)`, length N.
    pub marginal_experts: Vec<f64>,
    /// `P(E|D)`, M x N; rows of zero-mass domains are all zero.
    pub conditional: Matrix,
}

/// `I(D;E) = Σ_ij J_ij·(ln J_ij − ln P(D_i) − ln P(E_j))`, skipping entries
/// below [`JOINT_FLOOR`].
pub fn mutual_information(joint: &Matrix) -> Result<MiStats> {
    check_distribution(joint, 1e-6)?;
    let pd = joint.row_sums();
    let pe = joint.col_sums();
    let mut mi = 0.0;
    for (i, &pdi) in pd.iter().enumerate() {
        for (j, &pej) in pe.iter().enumerate() {
            let v = joint.get(i, j);
            if v >= JOINT_FLOOR {
                mi += v * (v.ln() - (pdi.ln() + pej.ln()));
            }
        }
    }
    let mut conditional = Matrix::zeros(joint.rows(), joint.cols());
    for (i, &pdi) in pd.iter().enumerate() {
        if pdi > 0.0 {
            for j in 0..joint.cols() {
                conditional.set(i, j, joint.get(i, j) / pdi);
            }
        }
    }
    Ok(MiStats {
        mutual_information: mi,
        marginal_domains: pd,
        marginal_experts: pe,
        conditional,
    })
}

/// `L_MI = -I(D;E)` of a joint built on the tape. Marginals are recomputed
/// from `joint` inside the graph.
pub fn mi_loss(tape: &mut Tape, joint: Tensor) -> Result<Tensor> {
    let jv = tape.value(joint);
    check_distribution(jv, 1e-6)?;
    let (m, n) = jv.shape();
    let mask = jv.map(|v| if v >= JOINT_FLOOR { 1.0 } else { 0.0 });

    let pd = tape.row_sums(joint);
    let pe = tape.col_sums(joint);
    let log_pd = tape.log(pd);
    let log_pe = tape.log(pe);
    let ones_row = tape.constant(Matrix::ones(1, n));
    let ones_col = tape.constant(Matrix::ones(m, 1));
    let log_pd = tape.matmul(log_pd, ones_row)?;
    let log_pe = tape.matmul(ones_col, log_pe)?;
    let log_outer = tape.add(log_pd, log_pe)?;
    let log_joint = tape.log(joint);
    let neg_outer = tape.neg(log_outer);
    let ratio = tape.add(log_joint, neg_outer)?;
    let mask = tape.constant(mask);
    let ratio = tape.mul(ratio, mask)?;
    let terms = tape.mul(joint, ratio)?;
    let mi = tape.sum(terms);
    Ok(tape.neg(mi))
}

/// Conditional routing frequencies `P(E|D)` of a model over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    /// One row per domain; `None` for domains without samples.
    pub conditional: Vec<Option<Vec<f64>>>,
    pub samples_per_domain: Vec<usize>,
    /// `I(D;E)` of the empirical joint `P(D)·P(E|D)` over present domains.
    pub mutual_information: f64,
}

impl RoutingReport {
    /// Merges partial accumulators from disjoint shards.
    pub(crate) fn from_sums(sums: Matrix, counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("routing report over an empty dataset".into()));
        }
        let conditional: Vec<Option<Vec<f64>>> = (0..sums.rows())
            .map(|m| {
                (counts[m] > 0).then(|| {
                    let row_total: f64 = sums.row(m).iter().sum();
                    sums.row(m).iter().map(|v| v / row_total).collect()
                })
            })
            .collect();
        let mut joint = sums;
        let grand: f64 = joint.sum();
        joint.as_mut_slice().iter_mut().for_each(|v| *v /= grand);
        let mi = mutual_information(&joint)?.mutual_information;
        Ok(Self {
            conditional,
            samples_per_domain: counts,
            mutual_information: mi,
        })
    }
}

/// Accumulates evaluation-mode (noise-free) sparse gate weights per domain
/// and normalises each domain row.
pub fn routing_report(
    model: &CesModel,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<RoutingReport> {
    if dataset.is_empty() {
        return Err(Error::Data("routing report over an empty dataset".into()));
    }
    let n = model.config.n_experts;
    let mut sums = Matrix::zeros(dataset.n_domains(), n);
    let mut counts = vec![0usize; dataset.n_domains()];
    for batch in dataset.batches(batch_size) {
        let inf = model.infer(&batch)?;
        for (r, &d) in batch.domains.iter().enumerate() {
            counts[d] += 1;
            for (s, w) in sums.row_mut(d).iter_mut().zip(inf.weights.row(r)) {
                *s += w;
            }
        }
    }
    RoutingReport::from_sums(sums, counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::data::Sample;
    use crate::layers::{Gating, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    /// Straight double sum `Σ_ij J_ij ln(J_ij / (P(D_i) P(E_j)))`.
    fn oracle_mi(j: &Matrix) -> f64 {
        let (m, n) = j.shape();
        let mut total = 0.0;
        for a in 0..m {
            for b in 0..n {
                let p = j.get(a, b);
                if p < JOINT_FLOOR {
                    continue;
                }
                let pd: f64 = (0..n).map(|c| j.get(a, c)).sum();
                let pe: f64 = (0..m).map(|r| j.get(r, b)).sum();
                total += p * (p / (pd * pe)).ln();
            }
        }
        total
    }

    fn random_joint(m: usize, n: usize, rng: &mut impl Rng) -> Matrix {
        let raw = Matrix::random_uniform(m, n, 0.0, 1.0, rng);
        let s = raw.sum();
        raw.scale(1.0 / s)
    }

    fn softmax_rows(logits: &Matrix) -> Matrix {
        crate::autodiff::masked_softmax_values(logits, &vec![true; logits.len()]).unwrap()
    }

    #[test]
    fn hard_assignment_contribution() {
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let c = batch_joint_contribution(&mut tape, &[0, 1], w, 2).unwrap();
        assert_eq!(tape.value(c), &Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]));
    }

    #[test]
    fn absent_domain_row_is_zero_and_total_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = softmax_rows(&Matrix::random_normal(6, 3, 1.0, &mut rng));
        let mut tape = Tape::new();
        let wt = tape.constant(w);
        let c = batch_joint_contribution(&mut tape, &[0; 6], wt, 2).unwrap();
        let c = tape.value(c);
        assert!(c.row(1).iter().all(|&v| v == 0.0));
        assert!((c.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contribution_rejects_bad_domain_and_unnormalised_rows() {
        let mut tape = Tape::new();
        let w = tape.constant(Matrix::from_rows(&[[1.0, 0.0]]));
        assert!(matches!(
            batch_joint_contribution(&mut tape, &[2], w, 2),
            Err(Error::Data(_))
        ));
        let w = tape.constant(Matrix::from_rows(&[[0.7, 0.7]]));
        assert!(batch_joint_contribution(&mut tape, &[0], w, 2).is_err());
    }

    #[test]
    fn concatenated_batches_average_by_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w1 = softmax_rows(&Matrix::random_normal(3, 4, 1.0, &mut rng));
        let w2 = softmax_rows(&Matrix::random_normal(5, 4, 1.0, &mut rng));
        let d1 = [0, 2, 1];
        let d2 = [1, 1, 0, 2, 2];
        let mut both = w1.as_slice().to_vec();
        both.extend_from_slice(w2.as_slice());
        let both = Matrix::from_vec(8, 4, both);
        let dboth: Vec<usize> = d1.iter().chain(&d2).copied().collect();

        let mut tape = Tape::new();
        let (t1, t2, tb) = (tape.constant(w1), tape.constant(w2), tape.constant(both));
        let c1 = batch_joint_contribution(&mut tape, &d1, t1, 3).unwrap();
        let c2 = batch_joint_contribution(&mut tape, &d2, t2, 3).unwrap();
        let cb = batch_joint_contribution(&mut tape, &dboth, tb, 3).unwrap();
        let weighted = tape
            .value(c1)
            .scale(3.0 / 8.0)
            .zip_map(&tape.value(c2).scale(5.0 / 8.0), |a, b| a + b);
        assert!(tape.value(cb).max_abs_diff(&weighted) < 1e-15);
    }

    #[test]
    fn one_step_ema() {
        let mut j = JointProbabilityMatrix::new(2, 2, 0.9).unwrap();
        j.ema_update(&Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]))
            .unwrap();
        let expected = Matrix::from_rows(&[[0.275, 0.225], [0.225, 0.275]]);
        assert!(j.joint().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn ema_fixed_point() {
        let mut j = JointProbabilityMatrix::new(3, 2, 0.7).unwrap();
        let before = j.joint().clone();
        j.ema_update(&before).unwrap();
        assert!(j.joint().max_abs_diff(&before) < 1e-16);
    }

    #[test]
    fn ema_geometric_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_joint(3, 4, &mut rng);
        let beta = 0.8;
        let mut j = JointProbabilityMatrix::new(3, 4, beta).unwrap();
        let d0 = j.joint().max_abs_diff(&c);
        for k in 1..=50 {
            j.ema_update(&c).unwrap();
            assert!(j.joint().max_abs_diff(&c) <= beta.powi(k) * d0 + 1e-15);
        }
    }

    #[test]
    fn ema_rejects_shape_mismatch_and_bad_beta() {
        let mut j = JointProbabilityMatrix::new(2, 2, 0.5).unwrap();
        assert!(j.ema_update(&Matrix::filled(2, 3, 1.0 / 6.0)).is_err());
        assert!(JointProbabilityMatrix::new(2, 2, 1.0).is_err());
        assert!(JointProbabilityMatrix::new(2, 2, -0.1).is_err());
    }

    #[test]
    fn mi_examples() {
        let independent = Matrix::from_vec(2, 3, {
            let (pd, pe) = ([0.3, 0.7], [0.2, 0.5, 0.3]);
            pd.iter()
                .flat_map(|a| pe.iter().map(move |b| a * b))
                .collect()
        });
        assert!(
            mutual_information(&independent)
                .unwrap()
                .mutual_information
                .abs()
                < 1e-15
        );

        let diag = Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]);
        let stats = mutual_information(&diag).unwrap();
        assert!((stats.mutual_information - LN_2).abs() < 1e-15);
        assert_eq!(
            stats.conditional,
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]])
        );
        assert_eq!(stats.marginal_domains, vec![0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let j = random_joint(4, 3, &mut rng);
        assert!((mutual_information(&j).unwrap().mutual_information - oracle_mi(&j)).abs() < 1e-12);
    }

    #[test]
    fn mi_rejects_negative_entries() {
        let j = Matrix::from_rows(&[[0.6, -0.1], [0.25, 0.25]]);
        assert!(matches!(mutual_information(&j), Err(Error::Numeric(_))));
    }

    #[test]
    fn mi_loss_examples_and_agreement() {
        let mut tape = Tape::new();
        let diag = tape.constant(Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.5]]));
        let l = mi_loss(&mut tape, diag).unwrap();
        assert!((tape.value(l).get(0, 0) + LN_2).abs() < 1e-15);

        let unif = tape.constant(Matrix::filled(3, 3, 1.0 / 9.0));
        let l = mi_loss(&mut tape, unif).unwrap();
        assert!(tape.value(l).get(0, 0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let j = random_joint(rng.random_range(1..6), rng.random_range(1..6), &mut rng);
            let t = tape.constant(j.clone());
            let l = mi_loss(&mut tape, t).unwrap();
            let mi = mutual_information(&j).unwrap().mutual_information;
            assert!((tape.value(l).get(0, 0) + mi).abs() < 1e-12);
        }
    }

    #[test]
    fn mi_loss_gradient_reaches_gate_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Matrix::random_uniform(8, 3, -2.0, 2.0, &mut rng);
        let domains: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
        let mut jpm = JointProbabilityMatrix::new(2, 3, 0.9).unwrap();
        jpm.ema_update(&random_joint(2, 3, &mut rng)).unwrap();
        let report = fd_check(&[logits], 1e-5, |t, p| {
            let w = t.softmax(p[0])?;
            let c = batch_joint_contribution(t, &domains, w, 2)?;
            let j = jpm.effective(t, c)?;
            mi_loss(t, j)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(report.analytic[0]
            .as_slice()
            .iter()
            .any(|&g| g.abs() > 1e-6));
    }

    fn tiny_model(n: usize, k: usize, rng: &mut ChaCha8Rng) -> CesModel {
        CesModel::new(
            ModelConfig {
                n_domains: 2,
                vocab_sizes: vec![3],
                embed_dim: 2,
                hidden: vec![3],
                n_experts: n,
                top_k: k,
                gating: Gating::Sparse,
                shared_expert: false,
            },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn routing_report_rows_and_absent_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = tiny_model(3, 2, &mut rng);
        let samples: Vec<Sample> = (0..30)
            .map(|i| Sample {
                domain_id: 0,
                group_id: 0,
                feature_ids: vec![i % 3],
                label: (i % 2) as u8,
            })
            .collect();
        let ds = Dataset::new(2, vec![3], samples).unwrap();
        let report = routing_report(&model, &ds, 7).unwrap();
        assert!(report.conditional[1].is_none());
        let row = report.conditional[0].as_ref().unwrap();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(report.samples_per_domain, vec![30, 0]);
        // a single present domain carries no information about experts
        assert!(report.mutual_information.abs() < 1e-12);
    }

    #[test]
    fn routing_report_hard_assignment_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = tiny_model(3, 1, &mut rng);
        // route purely on the f_0 embedding: id 0 → expert 2, ids 1, 2 → expert 1
        let emb_dim = model.config.embed_dim;
        let in_dim = model.config.gate_input_dim();
        let mut wg = Matrix::zeros(in_dim, 3);
        wg.set(emb_dim, 2, 1.0);
        wg.set(emb_dim, 1, -1.0);
        *model.params.get_mut(model.gate.w_gate) = wg;
        let table = model.embedding.tables[0];
        *model.params.get_mut(table) = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]]);

        // 100 domain-0 samples, 40 with f_0 = 0
        let samples: Vec<Sample> = (0..100)
            .map(|i| Sample {
                domain_id: 0,
                group_id: 0,
                feature_ids: vec![if i < 40 { 0 } else { 1 + i % 2 }],
                label: 0,
            })
            .collect();
        let ds = Dataset::new(2, vec![3], samples).unwrap();
        let report = routing_report(&model, &ds, 16).unwrap();
        let row = report.conditional[0].as_ref().unwrap();
        assert!((row[2] - 0.4).abs() < 1e-12, "{row:?}");
        assert!((row[1] - 0.6).abs() < 1e-12, "{row:?}");
        assert_eq!(row[0], 0.0);
    }

    #[test]
    fn routing_report_empty_dataset_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = tiny_model(2, 1, &mut rng);
        let ds = Dataset::new(2, vec![3], vec![]).unwrap();
        assert!(routing_report(&model, &ds, 4).is_err());
    }

    proptest! {
        #[test]
        fn mi_is_bounded_and_label_symmetric(
            m in 1usize..6, n in 1usize..6, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = random_joint(m, n, &mut rng);
            let mi = mutual_information(&j).unwrap().mutual_information;
            prop_assert!(mi >= -1e-9);
            prop_assert!(mi <= (m.min(n) as f64).ln() + 1e-9);

            // reverse expert columns
            let mut perm = Matrix::zeros(m, n);
            for r in 0..m {
                for c in 0..n {
                    perm.set(r, c, j.get(r, n - 1 - c));
                }
            }
            let mi_perm = mutual_information(&perm).unwrap().mutual_information;
            prop_assert!((mi - mi_perm).abs() < 1e-12);
        }

        #[test]
        fn ema_preserves_distribution(beta in 0.0f64..0.999, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut j = JointProbabilityMatrix::new(3, 4, beta).unwrap();
            for _ in 0..10 {
                j.ema_update(&random_joint(3, 4, &mut rng)).unwrap();
                prop_assert!((j.joint().sum() - 1.0).abs() < 1e-9);
                prop_assert!(j.joint().as_slice().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
