//! Decision policies: biased initial policies, the latent-space policy with
//! its variants, logistic baselines, and the fitted reference policies.
//!
//! Every policy is stochastic with acceptance probabilities clamped to
//! `[1e-4, 1 - 1e-4]`, and the probability used to sample a decision is the
//! propensity recorded on the record.

use crate::data::{clamp_propensity, CandidateBatch, Record};
use crate::nn::Mlp;
use crate::rng;
use crate::scm::sigmoid;
use crate::vae::losses::softplus;
use crate::vae::FairVae;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which targets train the latent policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentVariant {
    /// Label every record with a draw from the decoder's utility head.
    Dec,
    /// Label every record with a draw from the classifier.
    Clf,
    /// Use observed outcomes of labeled records only, IPS-weighted.
    Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialKind {
    Harsh,
    Leni,
}

/// Acceptance rates per sensitive group (s = +1, s = -1) of the initial
/// labeling policies on each supported dataset.
pub fn initial_rates(kind: InitialKind, dataset: &str) -> Result<(f64, f64)> {
    let rates = match (dataset, kind) {
        ("synthetic", InitialKind::Leni) => (0.7642, 0.3297),
        ("synthetic", InitialKind::Harsh) => (0.1581, 0.0979),
        ("compas", InitialKind::Leni) => (0.7664, 0.3274),
        ("compas", InitialKind::Harsh) => (0.1519, 0.0705),
        ("credit", InitialKind::Leni) => (0.5846, 0.2909),
        ("credit", InitialKind::Harsh) => (0.2123, 0.1091),
        ("meps", InitialKind::Leni) => (0.7826, 0.2724),
        ("meps", InitialKind::Harsh) => (0.1925, 0.0617),
        _ => return Err(Error::Config(format!("no initial policy table for '{dataset}'"))),
    };
    Ok(rates)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Policy {
    /// Group-conditional Bernoulli policy with exactly known propensities.
    Initial { rate_pos: f64, rate_neg: f64 },
    /// Net over the latent code only; inference goes through the model.
    Latent { net: Mlp, variant: LatentVariant },
    /// Net over (x, s); `dpu_penalty` > 0 marks the fairness-constrained
    /// variant.
    Logit { net: Mlp, dpu_penalty: f64 },
    /// Reference policies reading the raw synthetic draws.
    OptUnfair { net: Mlp },
    OptFair { net: Mlp },
}

impl Policy {
    pub fn initial(kind: InitialKind, dataset: &str) -> Result<Self> {
        let (rate_pos, rate_neg) = initial_rates(kind, dataset)?;
        Ok(Policy::Initial { rate_pos, rate_neg })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Policy::Initial { .. } => "initial",
            Policy::Latent { .. } => "latent",
            Policy::Logit { dpu_penalty, .. } if *dpu_penalty > 0.0 => "fairlog",
            Policy::Logit { .. } => "unfairlog",
            Policy::OptUnfair { .. } => "opt-unfair",
            Policy::OptFair { .. } => "opt-fair",
        }
    }

    fn latent_prob(
        net: &Mlp,
        model: &FairVae,
        rec: &Record,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let s = rec.s_f64();
        let q = model.classify(rec.x(), s)?;
        let u = f64::from(rng.random::<f64>() < q);
        let (mu, lv) = model.encode(rec.x(), s, Some(u))?;
        let eps: Vec<f64> =
            (0..model.latent).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z = FairVae::reparameterize(&mu, &lv, &eps);
        Ok(sigmoid(net.apply(&z)?[0]))
    }

    /// Acceptance probability as used at decision time (one latent draw).
    pub fn decision_prob(
        &self,
        rec: &Record,
        model: Option<&FairVae>,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let p = match self {
            Policy::Initial { rate_pos, rate_neg } => {
                if rec.s() == 1 {
                    *rate_pos
                } else {
                    *rate_neg
                }
            }
            Policy::Latent { net, .. } => {
                let model = model.ok_or_else(|| {
                    Error::Contract("latent policy needs a model to infer z".into())
                })?;
                Self::latent_prob(net, model, rec, rng)?
            }
            Policy::Logit { net, .. } => {
                let mut input = Vec::with_capacity(net.in_dim());
                input.extend_from_slice(rec.x());
                input.push(rec.s_f64());
                sigmoid(net.apply(&input)?[0])
            }
            Policy::OptUnfair { net } => {
                let d = rec.scm().ok_or_else(|| {
                    Error::Contract("reference policy needs synthetic draws".into())
                })?;
                sigmoid(net.apply(&[d.lsat, d.gpa, d.s])?[0])
            }
            Policy::OptFair { net } => {
                let d = rec.scm().ok_or_else(|| {
                    Error::Contract("reference policy needs synthetic draws".into())
                })?;
                sigmoid(net.apply(&[d.k])?[0])
            }
        };
        Ok(clamp_propensity(p))
    }

    /// Evaluation-time probability: latent policies average `n_samples`
    /// posterior draws, everything else is deterministic.
    pub fn eval_prob(
        &self,
        rec: &Record,
        model: Option<&FairVae>,
        n_samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        match self {
            Policy::Latent { net, .. } => {
                let model = model.ok_or_else(|| {
                    Error::Contract("latent policy needs a model to infer z".into())
                })?;
                let s = rec.s_f64();
                let q = model.classify(rec.x(), s)?;
                let posteriors = [
                    model.encode(rec.x(), s, Some(0.0))?,
                    model.encode(rec.x(), s, Some(1.0))?,
                ];
                let mut acc = 0.0;
                for _ in 0..n_samples {
                    let u = usize::from(rng.random::<f64>() < q);
                    let (mu, lv) = &posteriors[u];
                    let eps: Vec<f64> = (0..model.latent)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let z = FairVae::reparameterize(mu, lv, &eps);
                    acc += clamp_propensity(sigmoid(net.apply(&z)?[0]));
                }
                Ok(acc / n_samples as f64)
            }
            _ => self.decision_prob(rec, model, rng),
        }
    }
}

/// Decide a batch: draw d ~ Bernoulli(pi), record pi as the propensity, and
/// reveal proxy labels only on acceptance.
pub fn decide_batch(
    policy: &Policy,
    batch: &CandidateBatch,
    model: Option<&FairVae>,
    seed: u64,
) -> Result<Vec<Record>> {
    let mut rng = rng::stream(seed, "decide", batch.t as u64);
    batch
        .records
        .iter()
        .map(|rec| {
            let p = policy.decision_prob(rec, model, &mut rng)?;
            let d = u8::from(rng.random::<f64>() < p);
            rec.clone().with_decision(d, p)
        })
        .collect()
}

/// One pass of target generation for the latent policy: sample z for every
/// record (observed outcome on labeled records, classifier draw otherwise)
/// and a target from the chosen source.
fn latent_targets(
    model: &FairVae,
    records: &[Record],
    variant: LatentVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, f64, f64)>> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let s = rec.s_f64();
        let u_in = match rec.u_binary() {
            Some(u) => f64::from(u),
            None => {
                let q = model.classify(rec.x(), s)?;
                f64::from(rng.random::<f64>() < q)
            }
        };
        let (mu, lv) = model.encode(rec.x(), s, Some(u_in))?;
        let eps: Vec<f64> =
            (0..model.latent).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z = FairVae::reparameterize(&mu, &lv, &eps);
        match variant {
            LatentVariant::Dec => {
                let p = model.decode_u_prob(&z, s)?;
                let target = f64::from(rng.random::<f64>() < p);
                out.push((z, target, 1.0));
            }
            LatentVariant::Clf => {
                let q = model.classify(rec.x(), s)?;
                let target = f64::from(rng.random::<f64>() < q);
                out.push((z, target, 1.0));
            }
            LatentVariant::Label => {
                if let (Some(u), Some(prop)) = (rec.u_binary(), rec.propensity()) {
                    out.push((z, f64::from(u), 1.0 / prop));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Contract(
            "latent policy training needs at least one usable record".into(),
        ));
    }
    Ok(out)
}

/// Update a latent policy net in place: `epochs` passes, each drawing fresh
/// targets and taking one optimizer step per mini-batch (three per pass).
pub fn update_latent_policy(
    net: &mut Mlp,
    model: &FairVae,
    records: &[Record],
    variant: LatentVariant,
    epochs: usize,
    lr: f64,
    cost: f64,
    seed: u64,
) -> Result<()> {
    for epoch in 0..epochs {
        let mut rng = rng::stream(seed, "policy-epoch", epoch as u64);
        let data = latent_targets(model, records, variant, &mut rng)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let chunk = data.len().div_ceil(3);
        for mb in order.chunks(chunk) {
            let mut grads = net.grad_buf();
            let inv = 1.0 / mb.len() as f64;
            for &i in mb {
                let (z, target, weight) = &data[i];
                let fwd = net.forward(z)?;
                let logit = fwd.output()[0];
                let dlogit = (cost * (1.0 - target) * sigmoid(logit)
                    - (1.0 - cost) * target * sigmoid(-logit))
                    * weight
                    * inv;
                net.backward(&fwd, &[dlogit], &mut grads);
            }
            net.adam_step(&grads, lr)?;
        }
    }
    Ok(())
}

/// A fresh, untrained latent policy mirroring the classifier architecture.
pub fn fresh_latent_policy(model: &FairVae, variant: LatentVariant, seed: u64) -> Result<Policy> {
    let clf = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Contract("latent policy mirrors the classifier net".into()))?;
    let net = Mlp::init(
        &clf.hidden_widths(),
        model.latent,
        1,
        rng::derive(seed, "policy-init", 0),
    )?;
    Ok(Policy::Latent { net, variant })
}

/// Refresh a latent policy in place. A labeled-targets policy skips steps
/// that revealed no labels (there is nothing to fit).
pub fn refresh_latent_policy(
    policy: &mut Policy,
    model: &FairVae,
    records: &[Record],
    epochs: usize,
    lr: f64,
    cost: f64,
    seed: u64,
) -> Result<()> {
    let Policy::Latent { net, variant } = policy else {
        return Err(Error::Contract("refresh applies to latent policies".into()));
    };
    if *variant == LatentVariant::Label && !records.iter().any(Record::is_labeled) {
        return Ok(());
    }
    update_latent_policy(net, model, records, *variant, epochs, lr, cost, seed)
}

/// Train a fresh latent policy: an MLP from z to an acceptance probability,
/// mirroring the classifier architecture, trained by cost-sensitive
/// cross-entropy against the chosen target source.
pub fn train_policy_from_latent(
    model: &FairVae,
    records: &[Record],
    variant: LatentVariant,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Policy> {
    let clf = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Contract("latent policy mirrors the classifier net".into()))?;
    let mut net = Mlp::init(
        &clf.hidden_widths(),
        model.latent,
        1,
        rng::derive(seed, "policy-init", 0),
    )?;
    update_latent_policy(&mut net, model, records, variant, epochs, lr, model.cost, seed)?;
    Ok(Policy::Latent { net, variant })
}

/// One optimizer step of a logistic baseline on a mini-batch: IPS-weighted
/// cost-sensitive cross-entropy over the labeled records, plus (for the
/// constrained variant) `lambda` times the absolute acceptance-probability
/// gap over the full mini-batch. No-op when nothing is labeled. Returns the
/// loss value before the step.
pub fn baseline_update(
    policy: &mut Policy,
    labeled: &[Record],
    full_batch: &[Record],
    cost: f64,
    lr: f64,
) -> Result<f64> {
    let Policy::Logit { net, dpu_penalty } = policy else {
        return Err(Error::Contract("baseline update applies to logistic policies".into()));
    };
    if labeled.is_empty() {
        return Ok(0.0);
    }
    let lambda = *dpu_penalty;
    let mut grads = net.grad_buf();
    let mut value = 0.0;
    let inv = 1.0 / labeled.len() as f64;
    for rec in labeled {
        let u = f64::from(rec.u_binary().expect("labeled batch"));
        let prop = rec
            .propensity()
            .ok_or_else(|| Error::Contract("labeled record carries no propensity".into()))?;
        let mut input = Vec::with_capacity(net.in_dim());
        input.extend_from_slice(rec.x());
        input.push(rec.s_f64());
        let fwd = net.forward(&input)?;
        let logit = fwd.output()[0];
        value += (cost * (1.0 - u) * softplus(logit) + (1.0 - cost) * u * softplus(-logit))
            / prop
            * inv;
        let dlogit =
            (cost * (1.0 - u) * sigmoid(logit) - (1.0 - cost) * u * sigmoid(-logit)) / prop * inv;
        net.backward(&fwd, &[dlogit], &mut grads);
    }
    if lambda > 0.0 {
        let mut pos: Vec<(crate::nn::Forward, f64)> = Vec::new();
        let mut neg: Vec<(crate::nn::Forward, f64)> = Vec::new();
        for rec in full_batch {
            let mut input = Vec::with_capacity(net.in_dim());
            input.extend_from_slice(rec.x());
            input.push(rec.s_f64());
            let fwd = net.forward(&input)?;
            let p = sigmoid(fwd.output()[0]);
            if rec.s() == 1 {
                pos.push((fwd, p));
            } else {
                neg.push((fwd, p));
            }
        }
        if pos.is_empty() || neg.is_empty() {
            log::warn!("one sensitive group absent from batch; parity penalty is 0");
        } else {
            let mean_pos: f64 = pos.iter().map(|(_, p)| p).sum::<f64>() / pos.len() as f64;
            let mean_neg: f64 = neg.iter().map(|(_, p)| p).sum::<f64>() / neg.len() as f64;
            let gap = mean_pos - mean_neg;
            value += lambda * gap.abs();
            let sign = if gap >= 0.0 { 1.0 } else { -1.0 };
            let coeff_pos = lambda * sign / pos.len() as f64;
            for (fwd, p) in &pos {
                net.backward(fwd, &[coeff_pos * p * (1.0 - p)], &mut grads);
            }
            let coeff_neg = -lambda * sign / neg.len() as f64;
            for (fwd, p) in &neg {
                net.backward(fwd, &[coeff_neg * p * (1.0 - p)], &mut grads);
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite baseline loss".into()));
    }
    net.adam_step(&grads, lr)?;
    Ok(value)
}
