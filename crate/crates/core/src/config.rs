//! Experiment configuration: a flat key-value document (TOML) with
//! per-dataset defaults for every hyperparameter.

use crate::policy::InitialKind;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FairAll_I_II")]
    FairAllBoth,
    #[serde(rename = "FairAll_II")]
    FairAllOnline,
    #[serde(rename = "FairLab_I_II")]
    FairLab,
    #[serde(rename = "FairLog")]
    FairLog,
    #[serde(rename = "UnfairLog")]
    UnfairLog,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::FairAllBoth => "FairAll_I_II",
            Method::FairAllOnline => "FairAll_II",
            Method::FairLab => "FairLab_I_II",
            Method::FairLog => "FairLog",
            Method::UnfairLog => "UnfairLog",
        }
    }

    pub fn uses_vae(&self) -> bool {
        matches!(self, Method::FairAllBoth | Method::FairAllOnline | Method::FairLab)
    }

    pub fn uses_phase1(&self) -> bool {
        matches!(self, Method::FairAllBoth | Method::FairLab)
    }
}

/// Raw on-disk form: everything optional, resolved against dataset defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub method: String,
    pub dataset: Option<String>,
    pub csv_path: Option<PathBuf>,
    pub schema_path: Option<PathBuf>,
    pub initial_policy: Option<String>,
    pub cost: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_samples: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub policy_epochs: Option<usize>,
    pub phase1_epochs: Option<usize>,
    pub phase1_batch: Option<usize>,
    pub phase1_lr: Option<f64>,
    pub phase1_beta: Option<f64>,
    pub lr: Option<f64>,
    pub vae_arch: Option<Vec<usize>>,
    pub clf_arch: Option<Vec<usize>>,
    pub latent_dim: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub data_seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub n_z: Option<usize>,
    pub mc_k: Option<usize>,
    pub split_train: Option<f64>,
    pub split_val: Option<f64>,
    pub split_test: Option<f64>,
    pub phase1_fraction: Option<f64>,
    pub policy_variant: Option<String>,
    /// Per-group acceptance rates of the initial policy; required for
    /// datasets outside the built-in table.
    pub initial_rate_pos: Option<f64>,
    pub initial_rate_neg: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved configuration of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub method: Method,
    pub dataset: String,
    pub csv_path: Option<PathBuf>,
    pub schema_path: Option<PathBuf>,
    pub initial_policy: InitialKind,
    pub cost: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_samples: usize,
    pub warmup_steps: usize,
    /// Epochs of the per-step policy retraining.
    pub policy_epochs: usize,
    pub phase1_epochs: usize,
    pub phase1_batch: usize,
    pub phase1_lr: f64,
    pub phase1_beta: f64,
    pub lr: f64,
    pub vae_arch: Vec<usize>,
    pub clf_arch: Vec<usize>,
    pub latent_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub eval_every: usize,
    pub n_z: usize,
    pub mc_k: usize,
    pub splits: (f64, f64, f64),
    pub phase1_fraction: f64,
    pub policy_variant: crate::policy::LatentVariant,
    pub initial_rates: Option<(f64, f64)>,
    pub out_dir: PathBuf,
}

struct DatasetDefaults {
    cost: f64,
    phase1_epochs: usize,
    phase1_batch: usize,
    phase1_lr: f64,
    phase1_beta: f64,
    vae_arch: &'static [usize],
    latent: usize,
    splits: (f64, f64, f64),
    phase1_fraction: f64,
}

struct MethodDefaults {
    lr: f64,
    clf_arch: &'static [usize],
    alpha: f64,
    beta: f64,
    lambda: f64,
    vae_arch: Option<&'static [usize]>,
    latent: Option<usize>,
}

fn dataset_defaults(dataset: &str) -> Result<DatasetDefaults> {
    Ok(match dataset {
        "synthetic" => DatasetDefaults {
            cost: 0.5,
            phase1_epochs: 600,
            phase1_batch: 64,
            phase1_lr: 5e-3,
            phase1_beta: 0.8,
            vae_arch: &[64, 64],
            latent: 2,
            splits: (0.4, 0.2, 0.4),
            phase1_fraction: 1.0,
        },
        "compas" => DatasetDefaults {
            cost: 0.5,
            phase1_epochs: 2000,
            phase1_batch: 256,
            phase1_lr: 5e-3,
            phase1_beta: 0.8,
            vae_arch: &[32, 32],
            latent: 3,
            splits: (0.6, 0.2, 0.2),
            phase1_fraction: 0.7,
        },
        "credit" => DatasetDefaults {
            cost: 0.5,
            phase1_epochs: 2000,
            phase1_batch: 128,
            phase1_lr: 1e-3,
            phase1_beta: 0.8,
            vae_arch: &[64, 64],
            latent: 12,
            splits: (0.7, 0.15, 0.15),
            phase1_fraction: 0.7,
        },
        "meps" => DatasetDefaults {
            cost: 0.1,
            phase1_epochs: 500,
            phase1_batch: 256,
            phase1_lr: 1e-3,
            phase1_beta: 0.7,
            vae_arch: &[64, 64],
            latent: 20,
            splits: (0.75, 0.125, 0.125),
            phase1_fraction: 0.7,
        },
        "csv" => DatasetDefaults {
            cost: 0.5,
            phase1_epochs: 1000,
            phase1_batch: 128,
            phase1_lr: 1e-3,
            phase1_beta: 0.8,
            vae_arch: &[64, 64],
            latent: 8,
            splits: (0.7, 0.15, 0.15),
            phase1_fraction: 0.7,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown dataset '{other}' (expected synthetic, compas, credit, meps, or csv)"
            )))
        }
    })
}

fn method_defaults(method: Method, dataset: &str) -> MethodDefaults {
    // best-performing hyperparameters per dataset; unknown datasets fall back
    // to the synthetic row
    let key = if matches!(dataset, "synthetic" | "compas" | "credit" | "meps") {
        dataset
    } else {
        "synthetic"
    };
    match (method, key) {
        (Method::FairAllBoth, "synthetic") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[32, 32, 32],
            alpha: 5.0,
            beta: 0.7,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairAllBoth, "compas") => MethodDefaults {
            lr: 1e-3,
            clf_arch: &[32, 32, 32],
            alpha: 1.0,
            beta: 0.7,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairAllBoth, "credit") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[32, 32, 32],
            alpha: 5.0,
            beta: 0.85,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairAllBoth, _) => MethodDefaults {
            lr: 1e-3,
            clf_arch: &[100, 100],
            alpha: 1.0,
            beta: 0.7,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairAllOnline, "synthetic") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[64, 64],
            alpha: 5.0,
            beta: 0.85,
            lambda: 0.0,
            vae_arch: Some(&[64, 64]),
            latent: Some(2),
        },
        (Method::FairAllOnline, "compas") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[64, 64, 64],
            alpha: 10.0,
            beta: 1.0,
            lambda: 0.0,
            vae_arch: Some(&[64, 64, 64]),
            latent: Some(2),
        },
        (Method::FairAllOnline, "credit") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[32, 32],
            alpha: 1.0,
            beta: 0.7,
            lambda: 0.0,
            vae_arch: Some(&[64, 64]),
            latent: Some(12),
        },
        (Method::FairAllOnline, _) => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[100, 100],
            alpha: 1.0,
            beta: 0.7,
            lambda: 0.0,
            vae_arch: Some(&[100, 100]),
            latent: Some(25),
        },
        (Method::FairLab, "synthetic") => MethodDefaults {
            lr: 1e-3,
            clf_arch: &[32, 32, 32],
            alpha: 1.0,
            beta: 0.7,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairLab, "compas") => MethodDefaults {
            lr: 1e-3,
            clf_arch: &[32, 32, 32],
            alpha: 1.0,
            beta: 0.85,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairLab, _) => MethodDefaults {
            lr: 1e-3,
            clf_arch: &[32, 32, 32],
            alpha: 1.0,
            beta: 0.7,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::UnfairLog, "synthetic") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[64, 64, 64],
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::UnfairLog, "compas") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[32, 32, 32],
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::UnfairLog, "credit") => MethodDefaults {
            lr: 1e-3,
            clf_arch: &[64, 64],
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::UnfairLog, _) => MethodDefaults {
            lr: 5e-3,
            clf_arch: &[64, 64],
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairLog, "synthetic") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[64, 64, 64],
            alpha: 0.0,
            beta: 0.0,
            lambda: 3.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairLog, "compas") => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[32, 32, 32],
            alpha: 0.0,
            beta: 0.0,
            lambda: 4.0,
            vae_arch: None,
            latent: None,
        },
        (Method::FairLog, _) => MethodDefaults {
            lr: 1e-2,
            clf_arch: &[32, 32, 32],
            alpha: 0.0,
            beta: 0.0,
            lambda: 2.0,
            vae_arch: None,
            latent: None,
        },
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Resolve against the per-dataset and per-method default tables.
    pub fn resolve(self) -> Result<ExperimentConfig> {
        let method: Method = serde_json::from_value(serde_json::Value::String(
            self.method.clone(),
        ))
        .map_err(|_| {
            Error::Config(format!(
                "unknown method '{}' (expected FairAll_I_II, FairAll_II, FairLab_I_II, \
                 FairLog, or UnfairLog)",
                self.method
            ))
        })?;
        let dataset = self.dataset.unwrap_or_else(|| "synthetic".into());
        if dataset == "csv" && (self.csv_path.is_none() || self.schema_path.is_none()) {
            return Err(Error::Config(
                "dataset 'csv' needs csv_path and schema_path".into(),
            ));
        }
        let ds = dataset_defaults(&dataset)?;
        let md = method_defaults(method, &dataset);
        let initial_policy = match self
            .initial_policy
            .unwrap_or_else(|| "HARSH".into())
            .to_ascii_uppercase()
            .as_str()
        {
            "HARSH" => InitialKind::Harsh,
            "LENI" => InitialKind::Leni,
            other => {
                return Err(Error::Config(format!(
                    "unknown initial policy '{other}' (expected HARSH or LENI)"
                )))
            }
        };
        let policy_variant = match self
            .policy_variant
            .unwrap_or_else(|| {
                if method == Method::FairLab { "label".into() } else { "dec".into() }
            })
            .as_str()
        {
            "dec" => crate::policy::LatentVariant::Dec,
            "clf" => crate::policy::LatentVariant::Clf,
            "label" => crate::policy::LatentVariant::Label,
            other => {
                return Err(Error::Config(format!(
                    "unknown policy variant '{other}' (expected dec, clf, or label)"
                )))
            }
        };
        let splits = (
            self.split_train.unwrap_or(ds.splits.0),
            self.split_val.unwrap_or(ds.splits.1),
            self.split_test.unwrap_or(ds.splits.2),
        );
        let config = ExperimentConfig {
            method,
            dataset,
            csv_path: self.csv_path,
            schema_path: self.schema_path,
            initial_policy,
            cost: self.cost.unwrap_or(ds.cost),
            steps: self.steps.unwrap_or(200),
            batch_size: self.batch_size.unwrap_or(64),
            warmup_samples: self.warmup_samples.unwrap_or(128),
            warmup_steps: self.warmup_steps.unwrap_or(50),
            policy_epochs: self.policy_epochs.unwrap_or(50),
            phase1_epochs: self.phase1_epochs.unwrap_or(ds.phase1_epochs),
            phase1_batch: self.phase1_batch.unwrap_or(ds.phase1_batch),
            phase1_lr: self.phase1_lr.unwrap_or(ds.phase1_lr),
            phase1_beta: self.phase1_beta.unwrap_or(ds.phase1_beta),
            lr: self.lr.unwrap_or(md.lr),
            vae_arch: self
                .vae_arch
                .unwrap_or_else(|| md.vae_arch.unwrap_or(ds.vae_arch).to_vec()),
            clf_arch: self.clf_arch.unwrap_or_else(|| md.clf_arch.to_vec()),
            latent_dim: self.latent_dim.unwrap_or(md.latent.unwrap_or(ds.latent)),
            alpha: self.alpha.unwrap_or(md.alpha),
            beta: self.beta.unwrap_or(md.beta),
            lambda: self.lambda.unwrap_or(md.lambda),
            seeds: self.seeds.unwrap_or_else(|| (0..10).collect()),
            data_seed: self.data_seed.unwrap_or(7),
            eval_every: self.eval_every.unwrap_or(1).max(1),
            n_z: self.n_z.unwrap_or(crate::vae::DEFAULT_N_Z),
            mc_k: self.mc_k.unwrap_or(crate::vae::DEFAULT_MC_K),
            splits,
            phase1_fraction: self.phase1_fraction.unwrap_or(ds.phase1_fraction),
            policy_variant,
            initial_rates: match (self.initial_rate_pos, self.initial_rate_neg) {
                (Some(p), Some(n)) => Some((p, n)),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "initial_rate_pos and initial_rate_neg come as a pair".into(),
                    ))
                }
            },
            out_dir: self.out_dir.unwrap_or_else(|| PathBuf::from("runs/out")),
        };
        config.validate()?;
        Ok(config)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.cost && self.cost < 1.0) {
            return Err(Error::Config("cost must lie in (0, 1)".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.batch_size < 1 || self.phase1_batch < 1 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.method == Method::FairLab
            && self.policy_variant != crate::policy::LatentVariant::Label
        {
            return Err(Error::Config(
                "the labeled-only method trains its policy on labeled data (variant 'label')"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Convenience constructor used by tests and the acceptance suite.
    pub fn for_method(method: Method, dataset: &str) -> Result<Self> {
        RawConfig {
            method: method.name().to_string(),
            dataset: Some(dataset.to_string()),
            ..Default::default()
        }
        .resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_from_tables() {
        let cfg = ExperimentConfig::for_method(Method::FairAllBoth, "synthetic").unwrap();
        assert_eq!(cfg.vae_arch, vec![64, 64]);
        assert_eq!(cfg.clf_arch, vec![32, 32, 32]);
        assert_eq!(cfg.latent_dim, 2);
        assert_eq!(cfg.alpha, 5.0);
        assert_eq!(cfg.beta, 0.7);
        assert_eq!(cfg.phase1_beta, 0.8);
        assert_eq!(cfg.lr, 1e-2);
        assert_eq!(cfg.phase1_lr, 5e-3);
        assert_eq!(cfg.steps, 200);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.warmup_samples, 128);
        assert_eq!(cfg.warmup_steps, 50);
        assert_eq!(cfg.cost, 0.5);

        let cfg = ExperimentConfig::for_method(Method::FairLog, "synthetic").unwrap();
        assert_eq!(cfg.lambda, 3.0);
        assert_eq!(cfg.clf_arch, vec![64, 64, 64]);

        let cfg = ExperimentConfig::for_method(Method::FairAllBoth, "meps").unwrap();
        assert_eq!(cfg.cost, 0.1);
    }

    #[test]
    fn toml_overrides_and_validation() {
        let cfg = RawConfig::parse(
            r#"
method = "FairAll_I_II"
dataset = "synthetic"
initial_policy = "LENI"
cost = 0.3
steps = 50
seeds = [1, 2, 3]
alpha = 2.5
"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(cfg.initial_policy, InitialKind::Leni);
        assert_eq!(cfg.cost, 0.3);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.alpha, 2.5);

        assert!(RawConfig::parse("method = \"Nope\"").unwrap().resolve().is_err());
        let bad = RawConfig::parse("method = \"FairLog\"\ncost = 1.5").unwrap().resolve();
        assert!(bad.is_err());
        let unknown_key = RawConfig::parse("method = \"FairLog\"\nmystery = 1");
        assert!(unknown_key.is_err());
    }

    #[test]
    fn fairlab_rejects_unlabeled_policy_variants() {
        let bad = RawConfig::parse("method = \"FairLab_I_II\"\npolicy_variant = \"dec\"")
            .unwrap()
            .resolve();
        assert!(bad.is_err());
    }
}
