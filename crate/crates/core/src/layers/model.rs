//! The CES forward pass and the dense MMOE baseline.
//!
//! ```text
//! u      = embed([f_0, .., f_{F-1}])               (domain-agnostic features)
//! x      = embed(domain) ∥ u                         (routing input)
//! G(x)   = noisy top-k gate
//! s(x)   = Σ_{i ∈ topk(x)} G(x)_i · E_i(u)          (only retained experts run)
//! f(x)   = softmax(x · W_fusion)                      (2-way fusion gate)
//! fused  = f_0·s(x) ∥ f_1·E_sh(u)                     (or just s(x) without E_sh)
//! ŷ      = sigmoid(head(fused))
//! ```
//!
//! The domain indicator only reaches the prediction through routing and
//! fusion, so a single expert without a gate is a domain-blind shared model.

use super::dense::{EmbeddingField, EmbeddingTable, ExpertMlp, Linear};
use super::gate::{check_k, gate_forward, GateOutput, Noise, NoisyTopKGate};
use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

const EMBEDDING_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Noisy top-k gate with `k = top_k`.
    Sparse,
    /// Noise-free softmax over all experts (MMOE).
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_domains: usize,
    pub vocab_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub n_experts: usize,
    pub top_k: usize,
    pub gating: Gating,
    pub shared_expert: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        check_k(self.top_k, self.n_experts)?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.n_domains == 0 {
            return Err(Error::Config("n_domains must be positive".into()));
        }
        Ok(())
    }

    /// Width of the gate input: the domain indicator plus every feature
    /// field, `embed_dim` each.
    pub fn gate_input_dim(&self) -> usize {
        (self.vocab_sizes.len() + 1) * self.embed_dim
    }

    /// Width of the expert input: the feature fields only.
    pub fn expert_input_dim(&self) -> usize {
        self.vocab_sizes.len() * self.embed_dim
    }
}

#[derive(Debug, Clone)]
pub struct CesModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub domain_embedding: EmbeddingTable,
    pub embedding: EmbeddingTable,
    pub experts: Vec<ExpertMlp>,
    pub gate: NoisyTopKGate,
    pub shared: Option<ExpertMlp>,
    pub fusion: Option<ParamId>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `b x 1` click probabilities.
    pub yhat: Tensor,
    /// `b x 1` pre-sigmoid logits.
    pub logit: Tensor,
    pub gate: GateOutput,
    /// Expert-MLP evaluations, counted per sample (sparse plus shared).
    pub expert_evaluations: usize,
}

/// Evaluation-mode outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub yhat: Vec<f64>,
    pub weights: Matrix,
    pub probs: Matrix,
}

impl CesModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let domain = vec![EmbeddingField {
            name: "domain".into(),
            vocab: config.n_domains,
        }];
        let domain_embedding = EmbeddingTable::new(
            &mut params,
            domain,
            config.embed_dim,
            EMBEDDING_INIT_STD,
            rng,
        )?;
        let fields = config
            .vocab_sizes
            .iter()
            .enumerate()
            .map(|(i, &v)| EmbeddingField {
                name: format!("f_{i}"),
                vocab: v,
            })
            .collect();
        let embedding = EmbeddingTable::new(
            &mut params,
            fields,
            config.embed_dim,
            EMBEDDING_INIT_STD,
            rng,
        )?;
        let (gate_in, expert_in) = (config.gate_input_dim(), config.expert_input_dim());
        let experts = (0..config.n_experts)
            .map(|i| {
                ExpertMlp::new(
                    &mut params,
                    &format!("expert{i}"),
                    expert_in,
                    &config.hidden,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = NoisyTopKGate::new(&mut params, gate_in, config.n_experts, config.top_k, rng)?;
        let d_out = experts[0].out_dim();
        let (shared, fusion) = if config.shared_expert {
            let sh = ExpertMlp::new(&mut params, "shared", expert_in, &config.hidden, rng)?;
            let f = params.add("fusion.weight", Matrix::zeros(gate_in, 2));
            (Some(sh), Some(f))
        } else {
            (None, None)
        };
        let head_in = if shared.is_some() { 2 * d_out } else { d_out };
        let head = Linear::new(
            &mut params,
            "head",
            head_in,
            1,
            (1.0 / head_in as f64).sqrt(),
            rng,
        );
        Ok(Self {
            config,
            params,
            domain_embedding,
            embedding,
            experts,
            gate,
            shared,
            fusion,
            head,
        })
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].out_dim()
    }

    /// Returns `(x, u)`: the routing input with the domain indicator and the
    /// domain-agnostic expert input.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let ids: Vec<&[usize]> = batch.features.iter().map(Vec::as_slice).collect();
        let u = self.embedding.forward(tape, p, &ids)?;
        let d = self.domain_embedding.forward(tape, p, &[&batch.domains])?;
        let x = tape.concat_cols(d, u)?;
        Ok((x, u))
    }

    /// Sparse CES forward with the configured `k`.
    pub fn ces_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        noise: Noise<'_>,
    ) -> Result<ForwardOutput> {
        self.forward_with(tape, p, batch, self.gate.k, noise, self.shared.is_some())
    }

    /// Dense-gated MMOE: `k = N`, no noise, no shared path.
    pub fn mmoe_forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<ForwardOutput> {
        if self.shared.is_some() {
            return Err(Error::Config(
                "MMOE forward needs a model built without the shared expert".into(),
            ));
        }
        self.forward_with(tape, p, batch, self.config.n_experts, Noise::Off, false)
    }

    /// Dispatches on the configured gating. Noise is drawn from `rng` only
    /// for sparse gating in training mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        self.forward_noise(tape, p, batch, Noise::for_mode(training, rng))
    }

    /// Same as [`CesModel::forward`] with an explicit noise source. Dense
    /// gating ignores the noise and keeps the shared path if the model has one.
    pub fn forward_noise(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        noise: Noise<'_>,
    ) -> Result<ForwardOutput> {
        let with_shared = self.shared.is_some();
        match self.config.gating {
            Gating::Sparse => self.ces_forward(tape, p, batch, noise),
            Gating::Dense => self.forward_with(
                tape,
                p,
                batch,
                self.config.n_experts,
                Noise::Off,
                with_shared,
            ),
        }
    }

    /// Evaluation-mode forward on a constant binding.
    pub fn infer(&self, batch: &Batch) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let out = self.forward_noise(&mut tape, &p, batch, Noise::Off)?;
        Ok(Inference {
            yhat: tape.value(out.yhat).as_slice().to_vec(),
            weights: tape.value(out.gate.weights).clone(),
            probs: tape.value(out.gate.probs).clone(),
        })
    }

    fn forward_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        k: usize,
        noise: Noise<'_>,
        with_shared: bool,
    ) -> Result<ForwardOutput> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        // With every expert retained there is no selection for noise to
        // perturb, so k = N is deterministic and coincides with dense gating.
        let noise = if k == self.config.n_experts {
            Noise::Off
        } else {
            noise
        };
        let (x, u) = self.embed(tape, p, batch)?;
        let gate = gate_forward(tape, p, &self.gate, x, k, noise)?;

        let mut expert_evaluations = 0;
        let mut mixture: Option<Tensor> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&r| gate.topk[r].contains(&i)).collect();
            if rows.is_empty() {
                continue;
            }
            let xi = tape.gather_rows(u, &rows)?;
            let ei = expert.forward(tape, p, xi)?;
            let wi = tape.column(gate.weights, i)?;
            let wi = tape.gather_rows(wi, &rows)?;
            let scaled = tape.scale_rows(ei, wi)?;
            let placed = tape.scatter_rows(scaled, &rows, b)?;
            mixture = Some(match mixture {
                None => placed,
                Some(acc) => tape.add(acc, placed)?,
            });
            expert_evaluations += rows.len();
        }
        let mixture = mixture.expect("every row retains at least one expert");

        let fused = match (&self.shared, self.fusion, with_shared) {
            (Some(shared), Some(w_fusion), true) => {
                let sh = shared.forward(tape, p, u)?;
                expert_evaluations += b;
                let fl = tape.matmul(x, p[w_fusion])?;
                let f = tape.softmax(fl)?;
                let f0 = tape.column(f, 0)?;
                let f1 = tape.column(f, 1)?;
                let left = tape.scale_rows(mixture, f0)?;
                let right = tape.scale_rows(sh, f1)?;
                tape.concat_cols(left, right)?
            }
            _ => mixture,
        };
        let logit = self.head.forward(tape, p, fused)?;
        let yhat = tape.sigmoid(logit);
        Ok(ForwardOutput {
            yhat,
            logit,
            gate,
            expert_evaluations,
        })
    }
}
