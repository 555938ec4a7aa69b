use super::checkpoint::Container;
use super::{bce_loss, total_loss, AdamState, TrainConfig};
use crate::aea::{batch_joint_contribution, mi_loss, JointProbabilityMatrix, RoutingReport};
use crate::autodiff::{Tape, Tensor};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::layers::{Bound, CesModel, ForwardOutput};
use crate::matrix::Matrix;
use crate::metrics::{auc, grouped_auc, GroupedAuc, GroupedScores};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Which id groups samples for grouped AUC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    /// `group_id` read as a user id (GAUC).
    User,
    /// `group_id` read as a request id (Req-GAUC).
    Query,
    /// One group per domain.
    Domain,
}

/// Graph nodes of the training objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Tensor,
    pub bce: Tensor,
    /// `L_MI` on the effective joint, present only when AEA is active.
    pub mi: Option<Tensor>,
    /// Batch joint contribution `C` from the dense routing probabilities.
    pub contribution: Tensor,
}

/// Builds `L = L_BCE + α·L_MI` on top of a forward pass.
///
/// `C` is built from the dense routing probabilities `softmax(H(x))` rather
/// than the top-k masked weights: with `k = 1` the masked weights are
/// constant one-hot vectors and would carry no gradient back into the gate.
pub fn loss_terms(
    tape: &mut Tape,
    out: &ForwardOutput,
    batch: &Batch,
    joint: &JointProbabilityMatrix,
    config: &TrainConfig,
) -> Result<LossTerms> {
    let bce = bce_loss(tape, out.yhat, &batch.labels)?;
    let n_domains = joint.joint().rows();
    let contribution = batch_joint_contribution(tape, &batch.domains, out.gate.probs, n_domains)?;
    let mi = if config.aea_active() {
        let eff = joint.effective(tape, contribution)?;
        Some(mi_loss(tape, eff)?)
    } else {
        None
    };
    let total = total_loss(tape, bce, mi, config.alpha)?;
    Ok(LossTerms {
        total,
        bce,
        mi,
        contribution,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub bce: f64,
    pub mi_loss: Option<f64>,
    pub total: f64,
    /// `I(D;E)` of the joint matrix after this step's EMA update.
    pub mutual_information: f64,
    /// Fraction of batch rows that retained each expert.
    pub expert_load: Vec<f64>,
    pub expert_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub steps: usize,
    pub mean_bce: f64,
    pub mean_total: f64,
    pub mutual_information: f64,
    /// Mean fraction of rows routed to each expert over the epoch.
    pub expert_load: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_samples: usize,
    pub auc: f64,
    pub group_key: GroupKey,
    pub gauc: f64,
    pub gauc_groups_used: usize,
    pub gauc_groups_excluded: usize,
    /// Per-domain AUC; `None` where a domain has a single class or no rows.
    pub domain_auc: Vec<Option<f64>>,
    pub bce: f64,
    /// `I(D;E)` of the trained EMA joint matrix.
    pub mutual_information: f64,
    pub routing: RoutingReport,
}

/// Owns the model, optimiser, joint matrix and random stream of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: CesModel,
    joint: JointProbabilityMatrix,
    adam: AdamState,
    names: Vec<String>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Trainer {
    /// Initialises the model from `config.seed`; the same stream then drives
    /// shuffling and gate noise.
    pub fn new(config: TrainConfig, n_domains: usize, vocab_sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = CesModel::new(config.model_config(n_domains, vocab_sizes), &mut rng)?;
        let joint = JointProbabilityMatrix::new(n_domains, model.config.n_experts, config.beta)?;
        let adam = AdamState::new(model.params.values(), config.lr);
        let names = model.params.names().to_vec();
        Ok(Self {
            config,
            model,
            joint,
            adam,
            names,
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn for_dataset(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        Self::new(config, dataset.n_domains(), dataset.vocab_sizes())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CesModel {
        &self.model
    }

    pub fn joint(&self) -> &JointProbabilityMatrix {
        &self.joint
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step
    }

    pub fn epochs_started(&self) -> u64 {
        self.epoch
    }

    /// One optimisation step on `batch`: forward with sampled gate noise,
    /// backward through `L`, Adam, then the EMA update of `J` with the
    /// detached batch contribution.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);
        let out = self
            .model
            .forward(&mut tape, &p, batch, true, &mut self.rng)?;
        let terms = loss_terms(&mut tape, &out, batch, &self.joint, &self.config)?;
        let total = tape.value(terms.total).get(0, 0);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {total} at step {}",
                self.adam.step + 1
            )));
        }
        tape.backward(terms.total)?;
        let grads = p.grads(&tape);
        self.adam
            .step(self.model.params.values_mut(), &grads, &self.names)?;
        self.joint.ema_update(tape.value(terms.contribution))?;

        let n = self.model.config.n_experts;
        let mut load = vec![0.0; n];
        for row in &out.gate.topk {
            for &j in row {
                load[j] += 1.0;
            }
        }
        let b = batch.len() as f64;
        Ok(StepMetrics {
            step: self.adam.step,
            bce: tape.value(terms.bce).get(0, 0),
            mi_loss: terms.mi.map(|t| tape.value(t).get(0, 0)),
            total,
            mutual_information: self.joint.stats()?.mutual_information,
            expert_load: load.into_iter().map(|c| c / b).collect(),
            expert_evaluations: out.expert_evaluations,
        })
    }

    fn ensure_epoch(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        if !self.order.is_empty() && self.order.len() != n {
            return Err(Error::Data(format!(
                "trainer is mid-way through a {}-sample dataset, got {n} samples",
                self.order.len()
            )));
        }
        if self.order.is_empty() || self.cursor == self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(())
    }

    fn next_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        self.ensure_epoch(dataset.len())?;
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let batch = dataset.batch(&self.order[self.cursor..end]);
        self.cursor = end;
        Ok(batch)
    }

    /// `count` steps over a reshuffled-per-epoch ordering; the final partial
    /// batch of an epoch is kept.
    pub fn train_steps(&mut self, dataset: &Dataset, count: usize) -> Result<Vec<StepMetrics>> {
        (0..count)
            .map(|_| {
                let batch = self.next_batch(dataset)?;
                self.train_step(&batch)
            })
            .collect()
    }

    /// Runs to the end of the current epoch, starting a new one if the last
    /// has finished.
    pub fn train_epoch(&mut self, dataset: &Dataset) -> Result<EpochMetrics> {
        self.ensure_epoch(dataset.len())?;
        let (mut steps, mut bce, mut total) = (0usize, 0.0, 0.0);
        let mut load = vec![0.0; self.model.config.n_experts];
        while self.cursor < self.order.len() {
            let batch = self.next_batch(dataset)?;
            let m = self.train_step(&batch)?;
            steps += 1;
            bce += m.bce;
            total += m.total;
            load.iter_mut()
                .zip(&m.expert_load)
                .for_each(|(a, l)| *a += l);
        }
        Ok(EpochMetrics {
            epoch: self.epoch,
            steps,
            mean_bce: bce / steps as f64,
            mean_total: total / steps as f64,
            mutual_information: self.joint.stats()?.mutual_information,
            expert_load: load.into_iter().map(|l| l / steps as f64).collect(),
        })
    }

    /// Trains `config.epochs` epochs.
    pub fn fit(&mut self, dataset: &Dataset) -> Result<Vec<EpochMetrics>> {
        (0..self.config.epochs)
            .map(|_| self.train_epoch(dataset))
            .collect()
    }

    /// Noise-free evaluation. Deterministic and side-effect free.
    pub fn evaluate(&self, dataset: &Dataset, group_key: GroupKey) -> Result<EvalMetrics> {
        if dataset.is_empty() {
            return Err(Error::Data("cannot evaluate an empty dataset".into()));
        }
        let m = dataset.n_domains();
        let n = self.model.config.n_experts;
        let mut scores = Vec::with_capacity(dataset.len());
        let mut labels = Vec::with_capacity(dataset.len());
        let mut grouped = GroupedScores::new();
        let mut per_domain: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); m];
        let mut sums = Matrix::zeros(m, n);
        let mut counts = vec![0usize; m];
        let mut bce = 0.0;
        for batch in dataset.batches(self.config.batch_size) {
            let inf = self.model.infer(&batch)?;
            for r in 0..batch.len() {
                let (y, d) = (inf.yhat[r], batch.domains[r]);
                let label = batch.labels[r] == 1.0;
                let p = y.clamp(1e-12, 1.0 - 1e-12);
                bce -= if label { p.ln() } else { (1.0 - p).ln() };
                scores.push(y);
                labels.push(label);
                let group = match group_key {
                    GroupKey::User | GroupKey::Query => batch.groups[r],
                    GroupKey::Domain => d as u64,
                };
                grouped.push(group, y, label);
                per_domain[d].0.push(y);
                per_domain[d].1.push(label);
                counts[d] += 1;
                for (s, w) in sums.row_mut(d).iter_mut().zip(inf.weights.row(r)) {
                    *s += w;
                }
            }
        }
        let GroupedAuc {
            value,
            groups_used,
            groups_excluded,
        } = grouped_auc(&grouped, None)?;
        let domain_auc = per_domain.iter().map(|(s, l)| auc(s, l).ok()).collect();
        Ok(EvalMetrics {
            n_samples: dataset.len(),
            auc: auc(&scores, &labels)?,
            group_key,
            gauc: value,
            gauc_groups_used: groups_used,
            gauc_groups_excluded: groups_excluded,
            domain_auc,
            bce: bce / dataset.len() as f64,
            mutual_information: self.joint.stats()?.mutual_information,
            routing: RoutingReport::from_sums(sums, counts)?,
        })
    }

    /// Serialises everything needed to continue the run bit-for-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut c = Container::new(self.config.digest());
        c.push_bytes("config", self.config.to_json());
        let dims = (
            self.model.config.n_domains,
            self.model.config.vocab_sizes.clone(),
        );
        c.push_bytes(
            "data_dims",
            serde_json::to_vec(&dims).expect("dims serialise"),
        );
        for (name, value) in self.names.iter().zip(self.model.params.values()) {
            c.push_matrix(format!("param/{name}"), value.clone());
        }
        for (i, name) in self.names.iter().enumerate() {
            c.push_matrix(format!("adam.m/{name}"), self.adam.m[i].clone());
            c.push_matrix(format!("adam.v/{name}"), self.adam.v[i].clone());
        }
        c.push_bytes("adam.step", self.adam.step.to_le_bytes().to_vec());
        c.push_matrix("joint", self.joint.joint().clone());
        c.push_bytes(
            "rng",
            serde_json::to_vec(&self.rng).expect("rng serialises"),
        );
        let order: Vec<u8> = self
            .order
            .iter()
            .flat_map(|&i| (i as u64).to_le_bytes())
            .collect();
        c.push_bytes("order", order);
        c.push_bytes("cursor", (self.cursor as u64).to_le_bytes().to_vec());
        c.push_bytes("epoch", self.epoch.to_le_bytes().to_vec());
        c.encode()
    }

    /// Rebuilds a trainer from [`Trainer::to_bytes`] output. Fails with a
    /// format error on any corruption, version, digest or shape mismatch.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let container = Container::decode(bytes)?;
        let digest = container.digest;
        let mut s = container.into_map()?;
        let config_json = s.bytes("config")?;
        let config: TrainConfig = serde_json::from_slice(&config_json)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if config.digest() != digest {
            return Err(Error::Format("checkpoint config digest mismatch".into()));
        }
        let (n_domains, vocab_sizes): (usize, Vec<usize>) =
            serde_json::from_slice(&s.bytes("data_dims")?)
                .map_err(|e| Error::Format(format!("checkpoint data dims: {e}")))?;
        let mut t = Self::new(config, n_domains, &vocab_sizes)?;

        let expect = |name: &str, got: Matrix, want: (usize, usize)| {
            if got.shape() == want {
                Ok(got)
            } else {
                Err(Error::Format(format!(
                    "section {name}: shape {:?}, model expects {want:?}",
                    got.shape()
                )))
            }
        };
        for i in 0..t.names.len() {
            let name = t.names[i].clone();
            let shape = t.model.params.values()[i].shape();
            let key = format!("param/{name}");
            t.model.params.values_mut()[i] = expect(&key, s.matrix(&key)?, shape)?;
            let key = format!("adam.m/{name}");
            t.adam.m[i] = expect(&key, s.matrix(&key)?, shape)?;
            let key = format!("adam.v/{name}");
            t.adam.v[i] = expect(&key, s.matrix(&key)?, shape)?;
        }
        t.adam.step = s.u64("adam.step")?;
        let joint = expect("joint", s.matrix("joint")?, t.joint.joint().shape())?;
        t.joint = JointProbabilityMatrix::from_parts(joint, t.config.beta)
            .map_err(|e| Error::Format(format!("section joint: {e}")))?;
        t.rng = serde_json::from_slice(&s.bytes("rng")?)
            .map_err(|e| Error::Format(format!("section rng: {e}")))?;
        let order = s.bytes("order")?;
        if order.len() % 8 != 0 {
            return Err(Error::Format("section order is not a u64 list".into()));
        }
        t.order = order
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        t.cursor = s.u64("cursor")? as usize;
        if t.cursor > t.order.len() {
            return Err(Error::Format("cursor beyond the epoch ordering".into()));
        }
        t.epoch = s.u64("epoch")?;
        if let Some(extra) = s.remaining().first() {
            return Err(Error::Format(format!("unexpected section {extra}")));
        }
        Ok(t)
    }

    /// SHA-256 over every parameter value, in registration order.
    pub fn param_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.model.params.values() {
            for x in v.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Binds `params` as given tensors, so callers can differentiate through a
/// training pass with parameters they control.
pub fn bound_from(tensors: &[Tensor]) -> Bound {
    Bound::from_tensors(tensors.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_check;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::layers::Noise;
    use crate::train::AblationVariant;
    use rand::Rng;

    fn data(per_domain: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n_domains: 2,
            vocab_sizes: vec![6, 5, 4],
            samples_per_domain: per_domain,
            groups_per_domain: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn small(variant: AblationVariant) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            lr: 1e-2,
            alpha: 0.5,
            beta: 0.9,
            n_experts: 4,
            top_k: 3,
            hidden: vec![8, 8],
            embed_dim: 3,
            seed: 11,
            variant,
            ..Default::default()
        }
    }

    #[test]
    fn full_objective_matches_finite_differences() {
        let ds = data(4);
        let batch = ds.batch(&(0..8).collect::<Vec<_>>());
        let mut trainer = Trainer::for_dataset(small(AblationVariant::Cesaa), &ds).unwrap();
        // move J away from uniform so the history term matters
        trainer.train_steps(&ds, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = Matrix::from_vec(8, 4, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect());
        let model = trainer.model();
        let report = fd_check(model.params.values(), 1e-5, |tape, p| {
            let bound = bound_from(p);
            let out = model.forward_noise(tape, &bound, &batch, Noise::Fixed(&eps))?;
            Ok(loss_terms(tape, &out, &batch, trainer.joint(), trainer.config())?.total)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{:?}", report.worst);
    }

    #[test]
    fn single_sample_step_lowers_bce() {
        let ds = data(4);
        let batch = ds.batch(&[0]);
        let config = TrainConfig {
            alpha: 0.0,
            lr: 1e-3,
            ..small(AblationVariant::CesaaNoBoth)
        };
        let mut t = Trainer::for_dataset(config, &ds).unwrap();
        let bce_before = |t: &Trainer| {
            let inf = t.model().infer(&batch).unwrap();
            let y = inf.yhat[0];
            if batch.labels[0] == 1.0 {
                -y.ln()
            } else {
                -(1.0 - y).ln()
            }
        };
        let before = bce_before(&t);
        t.train_step(&batch).unwrap();
        assert!(bce_before(&t) < before);
    }

    #[test]
    fn full_batch_loss_decreases() {
        let ds = data(16);
        let all: Vec<usize> = (0..ds.len()).collect();
        let batch = ds.batch(&all);
        let config = TrainConfig {
            alpha: 0.0,
            lr: 1e-3,
            ..small(AblationVariant::Mmoe)
        };
        let mut t = Trainer::for_dataset(config, &ds).unwrap();
        let losses: Vec<f64> = (0..20).map(|_| t.train_step(&batch).unwrap().bce).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn alpha_zero_matches_variant_without_aea() {
        let ds = data(20);
        let a = TrainConfig {
            alpha: 0.0,
            ..small(AblationVariant::Cesaa)
        };
        let b = TrainConfig {
            alpha: 0.0,
            ..small(AblationVariant::CesaaNoAea)
        };
        let mut ta = Trainer::for_dataset(a, &ds).unwrap();
        let mut tb = Trainer::for_dataset(b, &ds).unwrap();
        let ma = ta.train_steps(&ds, 5).unwrap();
        let mb = tb.train_steps(&ds, 5).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ta.model().params.values(), tb.model().params.values());
        // J keeps being tracked for reporting
        assert_ne!(ta.joint().joint(), &Matrix::filled(2, 4, 1.0 / 8.0));
    }

    #[test]
    fn epochs_cover_every_sample_with_partial_tail() {
        let ds = data(20); // 40 samples, batch 16 -> 16, 16, 8
        let mut t = Trainer::for_dataset(small(AblationVariant::Cesaa), &ds).unwrap();
        let e = t.train_epoch(&ds).unwrap();
        assert_eq!((e.epoch, e.steps), (1, 3));
        let mut seen = t.order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        let e2 = t.train_epoch(&ds).unwrap();
        assert_eq!((e2.epoch, e2.steps), (2, 3));
        assert_eq!(t.steps_taken(), 6);
    }

    #[test]
    fn evaluation_is_deterministic_and_reports_routing() {
        let ds = data(30);
        let mut t = Trainer::for_dataset(small(AblationVariant::Cesaa), &ds).unwrap();
        t.train_epoch(&ds).unwrap();
        let a = t.evaluate(&ds, GroupKey::User).unwrap();
        let b = t.evaluate(&ds, GroupKey::User).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples, 60);
        assert!(a.routing.conditional.iter().all(|r| {
            let r = r.as_ref().unwrap();
            (r.iter().sum::<f64>() - 1.0).abs() < 1e-9
        }));
        let by_domain = t.evaluate(&ds, GroupKey::Domain).unwrap();
        assert!(by_domain.gauc_groups_used <= 2);
    }

    #[test]
    fn same_seed_same_run() {
        let ds = data(20);
        let run = || {
            let mut t = Trainer::for_dataset(small(AblationVariant::Cesaa), &ds).unwrap();
            let steps = t.train_steps(&ds, 7).unwrap();
            (steps, t.evaluate(&ds, GroupKey::User).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let ds = data(20);
        let config = small(AblationVariant::Cesaa);
        let mut straight = Trainer::for_dataset(config.clone(), &ds).unwrap();
        let tail_straight = straight.train_steps(&ds, 10).unwrap().split_off(5);

        let mut first = Trainer::for_dataset(config, &ds).unwrap();
        first.train_steps(&ds, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        first.save(&path).unwrap();
        drop(first);
        let mut resumed = Trainer::load(&path).unwrap();
        let tail_resumed = resumed.train_steps(&ds, 5).unwrap();

        assert_eq!(tail_straight, tail_resumed);
        assert_eq!(
            straight.model().params.values(),
            resumed.model().params.values()
        );
        assert_eq!(straight.joint(), resumed.joint());
        assert_eq!(straight.param_digest(), resumed.param_digest());
        assert_eq!(
            straight.evaluate(&ds, GroupKey::User).unwrap(),
            resumed.evaluate(&ds, GroupKey::User).unwrap()
        );
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let ds = data(4);
        let t = Trainer::for_dataset(small(AblationVariant::Cesaa), &ds).unwrap();
        let bytes = t.to_bytes();
        for cut in [0, 10, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Trainer::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        // flip a digest byte
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(matches!(Trainer::from_bytes(&bad), Err(Error::Format(_))));
        // graft parameters of a different architecture
        let other = Trainer::for_dataset(
            TrainConfig {
                hidden: vec![8, 4],
                ..small(AblationVariant::Cesaa)
            },
            &ds,
        )
        .unwrap();
        let mut c = Container::decode(&bytes).unwrap();
        let foreign = Container::decode(&other.to_bytes()).unwrap();
        for (name, section) in c.sections.iter_mut() {
            if name.starts_with("param/") {
                let (_, s) = foreign.sections.iter().find(|(n, _)| n == name).unwrap();
                *section = s.clone();
            }
        }
        let err = Trainer::from_bytes(&c.encode()).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn mismatched_dataset_size_is_a_data_error() {
        let ds = data(20);
        let mut t = Trainer::for_dataset(small(AblationVariant::Cesaa), &ds).unwrap();
        t.train_steps(&ds, 1).unwrap();
        assert!(matches!(t.train_steps(&data(10), 1), Err(Error::Data(_))));
    }
}
