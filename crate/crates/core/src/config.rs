//! JSON run configuration with sections `model`, `train`, `sim` and `ssl`.
//! Unknown keys are rejected. Omitted `train` fields take the defaults of
//! the regime being run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::read_bytes;
use crate::error::{PoseError, Result};
use crate::model::ModelConfig;
use crate::sim::SimConfig;
use crate::ssl::SslConfig;
use crate::train::{Regime, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub ssl: SslConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverrides {
    regime: Option<Regime>,
    base_lr: Option<f64>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    batch_size: Option<usize>,
    warmup_epochs: Option<usize>,
    total_epochs: Option<usize>,
    seed: Option<u64>,
    lambda_cls: Option<f64>,
    lambda_pose: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainOverrides,
    #[serde(default)]
    sim: SimConfig,
    #[serde(default)]
    ssl: SslConfig,
}

impl RunConfig {
    pub fn defaults(regime: Regime) -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::for_regime(regime),
            sim: SimConfig::default(),
            ssl: SslConfig::default(),
        }
    }

    /// Parses a config for `regime`. A `train.regime` in the document must
    /// agree with it.
    pub fn parse(json: &str, regime: Regime) -> Result<Self> {
        let raw: RawRunConfig =
            serde_json::from_str(json).map_err(|e| PoseError::Config(e.to_string()))?;
        let o = raw.train;
        if let Some(r) = o.regime {
            if r != regime {
                return Err(PoseError::Config(format!(
                    "config is for regime '{}' but '{}' was requested",
                    r.as_str(),
                    regime.as_str()
                )));
            }
        }
        let d = TrainConfig::for_regime(regime);
        let train = TrainConfig {
            regime,
            base_lr: o.base_lr.unwrap_or(d.base_lr),
            weight_decay: o.weight_decay.unwrap_or(d.weight_decay),
            beta1: o.beta1.unwrap_or(d.beta1),
            beta2: o.beta2.unwrap_or(d.beta2),
            eps: o.eps.unwrap_or(d.eps),
            batch_size: o.batch_size.unwrap_or(d.batch_size),
            warmup_epochs: o.warmup_epochs.unwrap_or(d.warmup_epochs),
            total_epochs: o.total_epochs.unwrap_or(d.total_epochs),
            seed: o.seed.unwrap_or(d.seed),
            lambda_cls: o.lambda_cls.unwrap_or(d.lambda_cls),
            lambda_pose: o.lambda_pose.unwrap_or(d.lambda_pose),
        };
        let cfg = Self {
            model: raw.model,
            train,
            sim: raw.sim,
            ssl: raw.ssl,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, regime: Regime) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| PoseError::Config(format!("{}: not UTF-8", path.display())))?;
        Self::parse(&text, regime).map_err(|e| match e {
            PoseError::Config(m) => PoseError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        self.ssl.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_regime_defaults() {
        for r in [Regime::Supervised, Regime::Pretrain, Regime::Finetune] {
            assert_eq!(RunConfig::parse("{}", r).unwrap(), RunConfig::defaults(r));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"modle": {}}"#,
            r#"{"model": {"embed_dims": 64}}"#,
            r#"{"train": {"lr": 0.1}}"#,
            r#"{"sim": {"snr": 3}}"#,
            r#"{"ssl": {"ratio": 0.5}}"#,
        ] {
            assert!(
                matches!(
                    RunConfig::parse(doc, Regime::Supervised),
                    Err(PoseError::Config(_))
                ),
                "{doc}"
            );
        }
    }

    #[test]
    fn serialization_is_a_fixed_point() {
        let doc = r#"{"model": {"subgroup_channels": 4}, "train": {"batch_size": 16, "total_epochs": 3}, "ssl": {"target_mode": "raw"}}"#;
        let a = RunConfig::parse(doc, Regime::Pretrain).unwrap();
        let b = RunConfig::parse(&a.to_json(), Regime::Pretrain).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn regime_mismatch_is_rejected() {
        let doc = r#"{"train": {"regime": "pretrain"}}"#;
        assert!(RunConfig::parse(doc, Regime::Supervised).is_err());
        assert!(RunConfig::parse(doc, Regime::Pretrain).is_ok());
    }
}
