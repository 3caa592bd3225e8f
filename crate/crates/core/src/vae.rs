//! Conditional VAE for fair representation learning.
//!
//! Phase I is an unsupervised VAE over (x | s); phase II extends it to a
//! semi-supervised model over (x, u~ | s, d) with a separate classifier that
//! imputes the utility outcome of unlabeled records. Real and count features
//! get Normal heads with learned variance, binary features Bernoulli heads,
//! categorical features softmax heads; the utility head is Bernoulli and only
//! exists in phase II.

pub mod losses;

use crate::data::FeatureSchema;
use crate::nn::Mlp;
use crate::rng;
use crate::scm::sigmoid;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Floor on decoder log-variances.
pub const LOGVAR_MIN: f64 = -12.0;

/// Default Monte-Carlo budgets: reconstruction samples for the unlabeled
/// bound and mixture-KL samples.
pub const DEFAULT_N_Z: usize = 50;
pub const DEFAULT_MC_K: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Mean output slot plus the index of the global per-feature variance.
    Normal { mean: usize, var_slot: usize },
    Bernoulli { logit: usize },
    Categorical { start: usize, arity: usize },
}

/// Mapping from decoder output slots to per-feature likelihood heads. Real
/// and count features carry a free per-feature log-variance (shared across
/// records, not a function of z). The utility logit, when present, is always
/// the final output slot so transfer can append it to a phase-I decoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadLayout {
    pub heads: Vec<Head>,
    pub u_logit: Option<usize>,
    pub out_dim: usize,
    pub n_var_slots: usize,
}

impl HeadLayout {
    pub fn from_schema(schema: &FeatureSchema, with_u_head: bool) -> Self {
        let mut heads = Vec::with_capacity(schema.features.len());
        let mut next = 0usize;
        let mut var_slots = 0usize;
        for f in &schema.features {
            match f.kind.encoded_width() {
                1 if matches!(
                    f.kind,
                    crate::data::FeatureKind::Real | crate::data::FeatureKind::Count
                ) =>
                {
                    heads.push(Head::Normal { mean: next, var_slot: var_slots });
                    next += 1;
                    var_slots += 1;
                }
                1 => {
                    heads.push(Head::Bernoulli { logit: next });
                    next += 1;
                }
                arity => {
                    heads.push(Head::Categorical { start: next, arity });
                    next += arity;
                }
            }
        }
        let u_logit = with_u_head.then_some(next);
        let out_dim = next + usize::from(with_u_head);
        HeadLayout { heads, u_logit, out_dim, n_var_slots: var_slots }
    }

    /// Probability parameters of one categorical head (softmax of logits).
    pub fn categorical_probs(&self, out: &[f64], head: usize) -> Result<Vec<f64>> {
        match self.heads.get(head) {
            Some(&Head::Categorical { start, arity }) => {
                Ok(softmax(&out[start..start + arity]))
            }
            _ => Err(Error::Shape(format!("head {head} is not categorical"))),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Encoder, classifier and decoder bundles with the feature layout and the
/// loss weights they are trained under.
#[derive(Clone, Debug)]
pub struct FairVae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub classifier: Option<Mlp>,
    /// Free log-variances of the Normal feature heads (one per real/count
    /// feature), evaluated at a fixed unit input.
    pub x_logvar: Mlp,
    pub layout: HeadLayout,
    pub x_dim: usize,
    pub latent: usize,
    pub kl_weight: f64,
    pub class_weight: f64,
    pub cost: f64,
    /// Whether the encoder consumes the utility outcome and the decoder
    /// carries a utility head.
    pub semi: bool,
}

impl FairVae {
    /// Phase-I model: encoder (x, s) -> z, decoder (z, s) -> x heads.
    pub fn unsupervised(
        schema: &FeatureSchema,
        arch: &[usize],
        latent: usize,
        kl_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        let x_dim = schema.encoded_width();
        let layout = HeadLayout::from_schema(schema, false);
        Ok(FairVae {
            encoder: Mlp::init(arch, x_dim + 1, 2 * latent, rng::derive(seed, "enc", 0))?,
            decoder: Mlp::init(arch, latent + 1, layout.out_dim, rng::derive(seed, "dec", 0))?,
            classifier: None,
            x_logvar: Mlp::init_zeroed(&[], 1, layout.n_var_slots.max(1))?,
            layout,
            x_dim,
            latent,
            kl_weight,
            class_weight: 0.0,
            cost: 0.5,
            semi: false,
        })
    }

    /// Phase-II model built from scratch (no pre-training).
    #[allow(clippy::too_many_arguments)]
    pub fn semi_supervised(
        schema: &FeatureSchema,
        arch: &[usize],
        clf_arch: &[usize],
        latent: usize,
        kl_weight: f64,
        class_weight: f64,
        cost: f64,
        seed: u64,
    ) -> Result<Self> {
        let x_dim = schema.encoded_width();
        let layout = HeadLayout::from_schema(schema, true);
        Ok(FairVae {
            encoder: Mlp::init(arch, x_dim + 2, 2 * latent, rng::derive(seed, "enc", 0))?,
            decoder: Mlp::init(arch, latent + 1, layout.out_dim, rng::derive(seed, "dec", 0))?,
            classifier: Some(Mlp::init(
                clf_arch,
                x_dim + 1,
                1,
                rng::derive(seed, "clf", 0),
            )?),
            x_logvar: Mlp::init_zeroed(&[], 1, layout.n_var_slots.max(1))?,
            layout,
            x_dim,
            latent,
            kl_weight,
            class_weight,
            cost,
            semi: true,
        })
    }

    /// Phase-I -> phase-II transfer: copy encoder/decoder weights, add fresh
    /// connections from the utility input to the first hidden layer and a
    /// fresh utility output head, and initialize a fresh classifier.
    pub fn transfer(
        phase1: &FairVae,
        clf_arch: &[usize],
        kl_weight: f64,
        class_weight: f64,
        cost: f64,
        seed: u64,
    ) -> Result<Self> {
        if phase1.semi {
            return Err(Error::Config("transfer expects an unsupervised phase-I model".into()));
        }
        let mut encoder = phase1.encoder.clone();
        encoder.grow_input(rng::derive(seed, "transfer-enc", 0));
        let mut decoder = phase1.decoder.clone();
        decoder.grow_output(rng::derive(seed, "transfer-dec", 0));
        let mut x_logvar = phase1.x_logvar.clone();
        x_logvar.reset_optimizer();
        let layout = HeadLayout {
            heads: phase1.layout.heads.clone(),
            u_logit: Some(phase1.layout.out_dim),
            out_dim: phase1.layout.out_dim + 1,
            n_var_slots: phase1.layout.n_var_slots,
        };
        Ok(FairVae {
            encoder,
            decoder,
            classifier: Some(Mlp::init(
                clf_arch,
                phase1.x_dim + 1,
                1,
                rng::derive(seed, "transfer-clf", 0),
            )?),
            x_logvar,
            layout,
            x_dim: phase1.x_dim,
            latent: phase1.latent,
            kl_weight,
            class_weight,
            cost,
            semi: true,
        })
    }

    fn encoder_input(&self, x: &[f64], s: f64, u: Option<f64>) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(self.encoder.in_dim());
        input.extend_from_slice(x);
        input.push(s);
        match (self.semi, u) {
            (true, Some(u)) => input.push(u),
            (true, None) => {
                return Err(Error::Contract(
                    "semi-supervised encoder needs a utility input".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Contract(
                    "unsupervised encoder takes no utility input".into(),
                ))
            }
            (false, None) => {}
        }
        Ok(input)
    }

    /// Posterior parameters (mu, sigma-as-logvar) of q(z | x, s[, u]).
    pub fn encode(&self, x: &[f64], s: f64, u: Option<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encoder.apply(&self.encoder_input(x, s, u)?)?;
        Ok((out[..self.latent].to_vec(), out[self.latent..].to_vec()))
    }

    /// Classifier probability q(u=1 | x, s, d=1).
    pub fn classify(&self, x: &[f64], s: f64) -> Result<f64> {
        let clf = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no classifier".into()))?;
        let mut input = Vec::with_capacity(clf.in_dim());
        input.extend_from_slice(x);
        input.push(s);
        Ok(sigmoid(clf.apply(&input)?[0]))
    }

    /// Raw decoder outputs for (z, s); interpret via `layout`.
    pub fn decode(&self, z: &[f64], s: f64) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(self.decoder.in_dim());
        input.extend_from_slice(z);
        input.push(s);
        self.decoder.apply(&input)
    }

    /// Current per-feature log-variances of the Normal heads.
    pub fn x_logvars(&self) -> Result<Vec<f64>> {
        self.x_logvar.apply(&[1.0])
    }

    /// Probability of a positive utility outcome under the decoder head.
    pub fn decode_u_prob(&self, z: &[f64], s: f64) -> Result<f64> {
        let out = self.decode(z, s)?;
        let idx = self
            .layout
            .u_logit
            .ok_or_else(|| Error::Contract("model has no utility head".into()))?;
        Ok(sigmoid(out[idx]))
    }

    /// Draw z from the posterior with externally supplied unit normals.
    pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
        mu.iter()
            .zip(logvar)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (lv / 2.0).exp() * e)
            .collect()
    }
}

/// Serialized snapshot of a whole model: named nets with shapes and
/// row-major weights, plus the scalar hyperparameters.
#[derive(Serialize, Deserialize)]
pub struct VaeSnapshot {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub classifier: Option<Mlp>,
    pub x_logvar: Mlp,
    pub layout: HeadLayout,
    pub x_dim: usize,
    pub latent: usize,
    pub kl_weight: f64,
    pub class_weight: f64,
    pub cost: f64,
    pub semi: bool,
}

impl From<&FairVae> for VaeSnapshot {
    fn from(m: &FairVae) -> Self {
        VaeSnapshot {
            encoder: m.encoder.clone(),
            decoder: m.decoder.clone(),
            classifier: m.classifier.clone(),
            x_logvar: m.x_logvar.clone(),
            layout: m.layout.clone(),
            x_dim: m.x_dim,
            latent: m.latent,
            kl_weight: m.kl_weight,
            class_weight: m.class_weight,
            cost: m.cost,
            semi: m.semi,
        }
    }
}

impl From<VaeSnapshot> for FairVae {
    fn from(s: VaeSnapshot) -> Self {
        FairVae {
            encoder: s.encoder,
            decoder: s.decoder,
            classifier: s.classifier,
            x_logvar: s.x_logvar,
            layout: s.layout,
            x_dim: s.x_dim,
            latent: s.latent,
            kl_weight: s.kl_weight,
            class_weight: s.class_weight,
            cost: s.cost,
            semi: s.semi,
        }
    }
}
