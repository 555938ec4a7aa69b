use crate::error::{Error, Result};
use crate::layers::{Gating, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

/// The model family used in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Sparse gate, shared expert, MI loss.
    #[serde(alias = "CESAA")]
    Cesaa,
    /// CESAAa: MI loss dropped.
    #[serde(alias = "CESAAa")]
    CesaaNoAea,
    /// CESAAs: shared expert dropped.
    #[serde(alias = "CESAAs")]
    CesaaNoShared,
    /// CESAAas: both dropped.
    #[serde(alias = "CESAAas")]
    CesaaNoBoth,
    /// Dense softmax gate over all experts.
    #[serde(alias = "MMOE")]
    Mmoe,
    /// MOEwa: MMOE with the MI loss.
    #[serde(alias = "MOEwa")]
    MmoeAea,
    /// Single expert MLP.
    #[serde(alias = "DNN")]
    Dnn,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Dnn,
        AblationVariant::Mmoe,
        AblationVariant::Cesaa,
        AblationVariant::MmoeAea,
        AblationVariant::CesaaNoAea,
        AblationVariant::CesaaNoShared,
        AblationVariant::CesaaNoBoth,
    ];

    /// Short name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Cesaa => "CESAA",
            AblationVariant::CesaaNoAea => "CESAAa",
            AblationVariant::CesaaNoShared => "CESAAs",
            AblationVariant::CesaaNoBoth => "CESAAas",
            AblationVariant::Mmoe => "MMOE",
            AblationVariant::MmoeAea => "MOEwa",
            AblationVariant::Dnn => "DNN",
        }
    }

    pub fn uses_aea(self) -> bool {
        matches!(
            self,
            AblationVariant::Cesaa | AblationVariant::CesaaNoShared | AblationVariant::MmoeAea
        )
    }

    pub fn shared_expert(self) -> bool {
        matches!(self, AblationVariant::Cesaa | AblationVariant::CesaaNoAea)
    }

    pub fn gating(self) -> Gating {
        match self {
            AblationVariant::Mmoe | AblationVariant::MmoeAea | AblationVariant::Dnn => {
                Gating::Dense
            }
            _ => Gating::Sparse,
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the MI loss in `L = L_BCE + α·L_MI`.
    pub alpha: f64,
    /// EMA decay of the joint domain/expert matrix.
    pub beta: f64,
    pub n_experts: usize,
    pub top_k: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
    pub variant: AblationVariant,
    /// Overrides the variant's gating, e.g. to run a CESAA-family model with
    /// a dense gate as a reference.
    pub gating: Option<Gating>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 1024,
            lr: 1e-3,
            alpha: 0.01,
            beta: 0.99,
            n_experts: 4,
            top_k: 3,
            hidden: vec![256, 128, 64],
            embed_dim: 8,
            seed: 0,
            variant: AblationVariant::Cesaa,
            gating: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!(
                "need 1 <= top_k <= n_experts, got top_k={} n_experts={}",
                self.top_k, self.n_experts
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!(
                "hidden sizes must be non-empty and positive: {:?}",
                self.hidden
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        Ok(())
    }

    /// True when the MI loss takes part in the gradient.
    pub fn aea_active(&self) -> bool {
        self.variant.uses_aea() && self.alpha > 0.0
    }

    /// Architecture for this variant on data with the given dimensions.
    pub fn model_config(&self, n_domains: usize, vocab_sizes: &[usize]) -> ModelConfig {
        let gating = self.gating.unwrap_or(self.variant.gating());
        let n_experts = if self.variant == AblationVariant::Dnn {
            1
        } else {
            self.n_experts
        };
        let top_k = match gating {
            Gating::Dense => n_experts,
            Gating::Sparse => self.top_k,
        };
        ModelConfig {
            n_domains,
            vocab_sizes: vocab_sizes.to_vec(),
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            n_experts,
            top_k,
            gating,
            shared_expert: self.variant.shared_expert(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_json()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 1024);
        assert_eq!(c.lr, 1e-3);
        assert_eq!((c.n_experts, c.top_k), (4, 3));
        assert_eq!(c.hidden, vec![256, 128, 64]);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = [
            TrainConfig {
                alpha: -1.0,
                ..Default::default()
            },
            TrainConfig {
                top_k: 5,
                ..Default::default()
            },
            TrainConfig {
                top_k: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                beta: 1.0,
                ..Default::default()
            },
            TrainConfig {
                hidden: vec![],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn variants_map_to_architectures() {
        let dims = (3, vec![4, 5]);
        let cfg = |v| {
            TrainConfig {
                variant: v,
                ..Default::default()
            }
            .model_config(dims.0, &dims.1)
        };
        let c = cfg(AblationVariant::Cesaa);
        assert!(c.shared_expert && c.gating == Gating::Sparse && c.top_k == 3);
        let c = cfg(AblationVariant::CesaaNoBoth);
        assert!(!c.shared_expert && c.gating == Gating::Sparse);
        let c = cfg(AblationVariant::MmoeAea);
        assert!(!c.shared_expert && c.gating == Gating::Dense && c.top_k == 4);
        let c = cfg(AblationVariant::Dnn);
        assert_eq!((c.n_experts, c.top_k), (1, 1));
        let dense = TrainConfig {
            gating: Some(Gating::Dense),
            ..Default::default()
        }
        .model_config(3, &[4]);
        assert!(dense.shared_expert && dense.gating == Gating::Dense && dense.top_k == 4);
        assert!(AblationVariant::MmoeAea.uses_aea() && !AblationVariant::Mmoe.uses_aea());
        assert!(
            !AblationVariant::CesaaNoAea.uses_aea() && AblationVariant::CesaaNoShared.uses_aea()
        );
    }

    #[test]
    fn variant_names_parse_both_ways() {
        for v in AblationVariant::ALL {
            assert_eq!(v.label().parse::<AblationVariant>().unwrap(), v);
            let snake = serde_json::to_value(v).unwrap();
            assert_eq!(
                snake.as_str().unwrap().parse::<AblationVariant>().unwrap(),
                v
            );
        }
        assert!("PLE".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            seed: 1,
            ..Default::default()
        };
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
