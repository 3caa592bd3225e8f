//! Loss terms of the two-phase objective, with reverse-mode gradients derived
//! for these fixed graphs.
//!
//! Every stochastic term draws its unit normals from a generator seeded by
//! the caller, so a loss evaluated twice at the same parameters and seed is
//! bit-identical; finite-difference checks rely on this.

use super::{FairVae, Head, HeadLayout, LOGVAR_MIN};
use crate::data::Record;
use crate::nn::{Forward, GradBuf, Mlp};
use crate::rng;
use crate::scm::sigmoid;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;
/// Classifier probabilities are clamped away from {0, 1} inside losses.
const Q_EPS: f64 = 1e-7;

/// Gradients for every trainable bundle of a model.
pub struct VaeGrads {
    pub encoder: GradBuf,
    pub decoder: GradBuf,
    pub classifier: Option<GradBuf>,
    pub x_logvar: GradBuf,
}

impl VaeGrads {
    pub fn zeros(model: &FairVae) -> Self {
        VaeGrads {
            encoder: model.encoder.grad_buf(),
            decoder: model.decoder.grad_buf(),
            classifier: model.classifier.as_ref().map(Mlp::grad_buf),
            x_logvar: model.x_logvar.grad_buf(),
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.encoder.scale(f);
        self.decoder.scale(f);
        if let Some(c) = &mut self.classifier {
            c.scale(f);
        }
        self.x_logvar.scale(f);
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Closed-form KL(N(mu, diag e^lv) || N(0, I)) with gradients.
pub fn gauss_kl(mu: &[f64], logvar: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut kl = 0.0;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let v = lv.exp();
        kl += 0.5 * (m * m + v - 1.0 - lv);
        dmu.push(m);
        dlv.push(0.5 * (v - 1.0));
    }
    (kl, dmu, dlv)
}

/// log-likelihood of the encoded feature vector `x` under the decoder
/// outputs and the global per-feature log-variances `xlv`, accumulating
/// `scale * d ll / d out` into `dout` and `scale * d ll / d logvar` into
/// `d_xlv`.
fn x_loglik_grad(
    layout: &HeadLayout,
    out: &[f64],
    xlv: &[f64],
    x: &[f64],
    scale: f64,
    dout: &mut [f64],
    d_xlv: &mut [f64],
) -> f64 {
    let mut ll = 0.0;
    let mut xo = 0usize;
    for head in &layout.heads {
        match *head {
            Head::Normal { mean, var_slot } => {
                let raw = xlv[var_slot];
                let lv = raw.max(LOGVAR_MIN);
                let inv = (-lv).exp();
                let e = x[xo] - out[mean];
                ll += -0.5 * e * e * inv - 0.5 * lv - 0.5 * LN_2PI;
                dout[mean] += scale * e * inv;
                if raw > LOGVAR_MIN {
                    d_xlv[var_slot] += scale * (0.5 * e * e * inv - 0.5);
                }
                xo += 1;
            }
            Head::Bernoulli { logit } => {
                let l = out[logit];
                let y = x[xo];
                ll += y * l - softplus(l);
                dout[logit] += scale * (y - sigmoid(l));
                xo += 1;
            }
            Head::Categorical { start, arity } => {
                let logits = &out[start..start + arity];
                let obs = x[xo..xo + arity]
                    .iter()
                    .position(|&v| v > 0.5)
                    .expect("one-hot encoded categorical");
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
                let lse = max + sum.ln();
                ll += logits[obs] - lse;
                for j in 0..arity {
                    let p = (logits[j] - max).exp() / sum;
                    dout[start + j] += scale * (if j == obs { 1.0 } else { 0.0 } - p);
                }
                xo += arity;
            }
        }
    }
    ll
}

/// Bernoulli log-likelihood of the utility head.
fn u_loglik_grad(layout: &HeadLayout, out: &[f64], u: f64, scale: f64, dout: &mut [f64]) -> Result<f64> {
    let idx = layout
        .u_logit
        .ok_or_else(|| Error::Contract("decoder has no utility head".into()))?;
    let l = out[idx];
    dout[idx] += scale * (u - sigmoid(l));
    Ok(u * l - softplus(l))
}

struct EncPass {
    fwd: Forward,
    mu: Vec<f64>,
    lv: Vec<f64>,
}

fn encode_cached(model: &FairVae, x: &[f64], s: f64, u: Option<f64>) -> Result<EncPass> {
    let mut input = Vec::with_capacity(model.encoder.in_dim());
    input.extend_from_slice(x);
    input.push(s);
    if model.semi {
        input.push(u.ok_or_else(|| {
            Error::Contract("semi-supervised encoder needs a utility input".into())
        })?);
    } else if u.is_some() {
        return Err(Error::Contract("unsupervised encoder takes no utility input".into()));
    }
    let fwd = model.encoder.forward(&input)?;
    let out = fwd.output();
    let mu = out[..model.latent].to_vec();
    let lv = out[model.latent..].to_vec();
    Ok(EncPass { fwd, mu, lv })
}

fn encoder_backward(model: &FairVae, pass: &EncPass, dmu: &[f64], dlv: &[f64], buf: &mut GradBuf) {
    let mut dout = Vec::with_capacity(2 * model.latent);
    dout.extend_from_slice(dmu);
    dout.extend_from_slice(dlv);
    model.encoder.backward(&pass.fwd, &dout, buf);
}

fn decoder_input(z: &[f64], s: f64) -> Vec<f64> {
    let mut input = Vec::with_capacity(z.len() + 1);
    input.extend_from_slice(z);
    input.push(s);
    input
}

/// Evidence lower bound of one labeled record (reconstruction of x and the
/// utility outcome, minus the weighted posterior-prior KL), single
/// reparameterization sample. Returns the bound and accumulates
/// `scale * d bound / d params`.
fn labeled_elbo_into(
    model: &FairVae,
    record: &Record,
    seed: u64,
    scale: f64,
    grads: &mut VaeGrads,
) -> Result<f64> {
    let u = f64::from(record.u_binary().ok_or_else(|| {
        Error::Contract("labeled bound requires a record with a revealed label".into())
    })?);
    let s = record.s_f64();
    let enc = encode_cached(model, record.x(), s, Some(u))?;
    let mut rng = rng::from_seed(seed);
    let eps = standard_normals(&mut rng, model.latent);
    let z = FairVae::reparameterize(&enc.mu, &enc.lv, &eps);

    let xlv_fwd = model.x_logvar.forward(&[1.0])?;
    let xlv = xlv_fwd.output().to_vec();
    let mut d_xlv = vec![0.0; xlv.len()];
    let dec_fwd = model.decoder.forward(&decoder_input(&z, s))?;
    let out = dec_fwd.output().to_vec();
    let mut dout = vec![0.0; out.len()];
    let ll_x = x_loglik_grad(&model.layout, &out, &xlv, record.x(), scale, &mut dout, &mut d_xlv);
    let ll_u = u_loglik_grad(&model.layout, &out, u, scale, &mut dout)?;
    let dinput = model.decoder.backward(&dec_fwd, &dout, &mut grads.decoder);
    model.x_logvar.backward(&xlv_fwd, &d_xlv, &mut grads.x_logvar);

    let (kl, dmu_kl, dlv_kl) = gauss_kl(&enc.mu, &enc.lv);
    let beta = model.kl_weight;
    let mut dmu = Vec::with_capacity(model.latent);
    let mut dlv = Vec::with_capacity(model.latent);
    for i in 0..model.latent {
        // dz/dmu = 1, dz/dlv = (z - mu) / 2; dinput carries scale already
        dmu.push(dinput[i] + scale * (-beta) * dmu_kl[i]);
        dlv.push(dinput[i] * 0.5 * (z[i] - enc.mu[i]) + scale * (-beta) * dlv_kl[i]);
    }
    encoder_backward(model, &enc, &dmu, &dlv, &mut grads.encoder);

    let value = ll_x + ll_u - beta * kl;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite labeled bound".into()));
    }
    Ok(value)
}

/// Labeled-record bound and its gradients (to be maximized).
pub fn labeled_elbo(model: &FairVae, record: &Record, seed: u64) -> Result<(f64, VaeGrads)> {
    let mut grads = VaeGrads::zeros(model);
    let value = labeled_elbo_into(model, record, seed, 1.0, &mut grads)?;
    Ok((value, grads))
}

/// Phase-I batch loss: negative mean of per-record bounds
/// `E[log p(x|z,s)] - beta * KL`, one reparameterization sample each.
/// Minimized; returns gradients of the loss.
pub fn phase1_loss(model: &FairVae, batch: &[Record], seed: u64) -> Result<(f64, VaeGrads)> {
    if model.semi {
        return Err(Error::Contract("phase-I loss expects an unsupervised model".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("phase-I loss needs a nonempty batch".into()));
    }
    let mut grads = VaeGrads::zeros(model);
    let scale = -1.0 / batch.len() as f64;
    let mut total = 0.0;
    let xlv_fwd = model.x_logvar.forward(&[1.0])?;
    let xlv = xlv_fwd.output().to_vec();
    let mut d_xlv = vec![0.0; xlv.len()];
    for (i, record) in batch.iter().enumerate() {
        let s = record.s_f64();
        let enc = encode_cached(model, record.x(), s, None)?;
        let mut rng = rng::stream(seed, "phase1-eps", i as u64);
        let eps = standard_normals(&mut rng, model.latent);
        let z = FairVae::reparameterize(&enc.mu, &enc.lv, &eps);

        let dec_fwd = model.decoder.forward(&decoder_input(&z, s))?;
        let out = dec_fwd.output().to_vec();
        let mut dout = vec![0.0; out.len()];
        let ll =
            x_loglik_grad(&model.layout, &out, &xlv, record.x(), scale, &mut dout, &mut d_xlv);
        let dinput = model.decoder.backward(&dec_fwd, &dout, &mut grads.decoder);

        let (kl, dmu_kl, dlv_kl) = gauss_kl(&enc.mu, &enc.lv);
        let beta = model.kl_weight;
        let mut dmu = Vec::with_capacity(model.latent);
        let mut dlv = Vec::with_capacity(model.latent);
        for l in 0..model.latent {
            dmu.push(dinput[l] + scale * (-beta) * dmu_kl[l]);
            dlv.push(dinput[l] * 0.5 * (z[l] - enc.mu[l]) + scale * (-beta) * dlv_kl[l]);
        }
        encoder_backward(model, &enc, &dmu, &dlv, &mut grads.encoder);
        total += ll - beta * kl;
    }
    model.x_logvar.backward(&xlv_fwd, &d_xlv, &mut grads.x_logvar);
    let value = -total / batch.len() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite phase-I loss".into()));
    }
    Ok((value, grads))
}

/// Cost-sensitive cross-entropy of the classifier on one labeled record,
/// divided by the recorded propensity. Minimized.
fn ips_loss_into(
    model: &FairVae,
    record: &Record,
    scale: f64,
    grads: &mut VaeGrads,
) -> Result<f64> {
    let clf = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no classifier".into()))?;
    let u = f64::from(record.u_binary().ok_or_else(|| {
        Error::Contract("classification loss requires a labeled record".into())
    })?);
    let prop = record
        .propensity()
        .ok_or_else(|| Error::Contract("labeled record carries no propensity".into()))?;
    let c = model.cost;
    let mut input = Vec::with_capacity(clf.in_dim());
    input.extend_from_slice(record.x());
    input.push(record.s_f64());
    let fwd = clf.forward(&input)?;
    let logit = fwd.output()[0];
    let value = (c * (1.0 - u) * softplus(logit) + (1.0 - c) * u * softplus(-logit)) / prop;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite classification loss".into()));
    }
    let dlogit = (c * (1.0 - u) * sigmoid(logit) - (1.0 - c) * u * sigmoid(-logit)) / prop;
    let buf = grads
        .classifier
        .as_mut()
        .expect("classifier gradients allocated with the model");
    clf.backward(&fwd, &[scale * dlogit], buf);
    Ok(value)
}

pub fn ips_classification_loss(model: &FairVae, record: &Record) -> Result<(f64, VaeGrads)> {
    let mut grads = VaeGrads::zeros(model);
    let value = ips_loss_into(model, record, 1.0, &mut grads)?;
    Ok((value, grads))
}

struct MixtureKl {
    value: f64,
    variance_of_mean: f64,
    d_mu: [Vec<f64>; 2],
    d_lv: [Vec<f64>; 2],
    d_q1: f64,
}

fn diag_log_density(z: &[f64], mu: &[f64], lv: &[f64]) -> f64 {
    let mut ll = 0.0;
    for ((&zl, &ml), &lvl) in z.iter().zip(mu).zip(lv) {
        let e = zl - ml;
        ll += -0.5 * LN_2PI - 0.5 * lvl - 0.5 * e * e * (-lvl).exp();
    }
    ll
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Monte-Carlo estimate of KL(q1 N1 + q0 N0 || N(0, I)) with gradients.
/// `n` samples are drawn from each component; the mixture log-density is
/// evaluated through a log-sum-exp.
fn mc_kl_mixture_grad(
    mu: [&[f64]; 2],
    lv: [&[f64]; 2],
    q1: f64,
    n: usize,
    seed: u64,
) -> MixtureKl {
    let latent = mu[0].len();
    let q = [1.0 - q1, q1];
    let ln_q = [if q[0] > 0.0 { q[0].ln() } else { f64::NEG_INFINITY }, if q[1] > 0.0 {
        q[1].ln()
    } else {
        f64::NEG_INFINITY
    }];
    let mut d_mu = [vec![0.0; latent], vec![0.0; latent]];
    let mut d_lv = [vec![0.0; latent], vec![0.0; latent]];
    let mut d_q1 = 0.0;
    let mut a = [0.0f64; 2];
    let mut a_sq = [0.0f64; 2];
    let inv_n = 1.0 / n as f64;

    for comp in 0..2 {
        let mut rng = rng::stream(seed, "mc-kl", comp as u64);
        let weight = q[comp];
        for _ in 0..n {
            let eps = standard_normals(&mut rng, latent);
            let z = FairVae::reparameterize(mu[comp], lv[comp], &eps);
            let ln_n0 = diag_log_density(&z, mu[0], lv[0]);
            let ln_n1 = diag_log_density(&z, mu[1], lv[1]);
            let lm = lse2(ln_q[0] + ln_n0, ln_q[1] + ln_n1);
            let lp: f64 = z.iter().map(|&v| -0.5 * LN_2PI - 0.5 * v * v).sum();
            let term = lm - lp;
            a[comp] += term * inv_n;
            a_sq[comp] += term * term * inv_n;
            if weight == 0.0 {
                // this component contributes neither value nor sample-path
                // gradients, but its density still shapes d_q1 via the others
                continue;
            }
            let w = [
                if ln_q[0] == f64::NEG_INFINITY { 0.0 } else { (ln_q[0] + ln_n0 - lm).exp() },
                if ln_q[1] == f64::NEG_INFINITY { 0.0 } else { (ln_q[1] + ln_n1 - lm).exp() },
            ];
            let coeff = weight * inv_n;
            for l in 0..latent {
                // d lm / dz - d lp / dz, chained through z = mu + sigma eps
                let d0 = -(z[l] - mu[0][l]) * (-lv[0][l]).exp();
                let d1 = -(z[l] - mu[1][l]) * (-lv[1][l]).exp();
                let dlm_dz = w[0] * d0 + w[1] * d1;
                let dlp_dz = -z[l];
                let dpath = dlm_dz - dlp_dz;
                d_mu[comp][l] += coeff * dpath;
                d_lv[comp][l] += coeff * dpath * 0.5 * (z[l] - mu[comp][l]);
                // density parameters inside lm, for both components
                for j in 0..2 {
                    let e = z[l] - mu[j][l];
                    let inv = (-lv[j][l]).exp();
                    d_mu[j][l] += coeff * w[j] * e * inv;
                    d_lv[j][l] += coeff * w[j] * 0.5 * (e * e * inv - 1.0);
                }
            }
            // d lm / d q1 = (N1 - N0) / m
            d_q1 += coeff * ((ln_n1 - lm).exp() - (ln_n0 - lm).exp());
        }
    }
    d_q1 += a[1] - a[0];
    let value = q[0] * a[0] + q[1] * a[1];
    let variance_of_mean = (q[0] * q[0] * (a_sq[0] - a[0] * a[0])
        + q[1] * q[1] * (a_sq[1] - a[1] * a[1]))
        * inv_n;
    MixtureKl { value, variance_of_mean, d_mu, d_lv, d_q1 }
}

/// Monte-Carlo mixture KL against the standard normal prior, with the
/// standard error of the estimate.
#[allow(clippy::too_many_arguments)]
pub fn mc_kl_mixture_with_stderr(
    mu0: &[f64],
    sigma0: &[f64],
    mu1: &[f64],
    sigma1: &[f64],
    q0: f64,
    q1: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if sigma0.iter().chain(sigma1).any(|&s| s <= 0.0) {
        return Err(Error::Domain("mixture components need sigma > 0".into()));
    }
    if (q0 + q1 - 1.0).abs() > 1e-12 || !(0.0..=1.0).contains(&q1) {
        return Err(Error::Domain("mixture weights must be a two-point distribution".into()));
    }
    if mu0.len() != sigma0.len() || mu1.len() != sigma1.len() || mu0.len() != mu1.len() {
        return Err(Error::Shape("mixture component shapes disagree".into()));
    }
    if n_samples == 0 {
        return Err(Error::Config("mixture KL needs at least one sample".into()));
    }
    let lv0: Vec<f64> = sigma0.iter().map(|&s| 2.0 * s.ln()).collect();
    let lv1: Vec<f64> = sigma1.iter().map(|&s| 2.0 * s.ln()).collect();
    let out = mc_kl_mixture_grad([mu0, mu1], [&lv0, &lv1], q1, n_samples, seed);
    Ok((out.value, out.variance_of_mean.max(0.0).sqrt()))
}

/// Monte-Carlo mixture KL against the standard normal prior.
#[allow(clippy::too_many_arguments)]
pub fn mc_kl_mixture(
    mu0: &[f64],
    sigma0: &[f64],
    mu1: &[f64],
    sigma1: &[f64],
    q0: f64,
    q1: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    mc_kl_mixture_with_stderr(mu0, sigma0, mu1, sigma1, q0, q1, n_samples, seed)
        .map(|(v, _)| v)
}

/// Evidence lower bound of one unlabeled record: exact two-term expectation
/// over the imputed utility outcome, `n_z`-sample reconstruction estimate,
/// Monte-Carlo mixture KL. The utility likelihood term of a rejected record
/// is identically zero and does not appear.
fn unlabeled_elbo_into(
    model: &FairVae,
    record: &Record,
    n_z: usize,
    mc_k: usize,
    seed: u64,
    scale: f64,
    grads: &mut VaeGrads,
) -> Result<f64> {
    debug_assert!(scale != 0.0, "gradient scale must be nonzero");
    if record.is_labeled() {
        return Err(Error::Contract("unlabeled bound called on a labeled record".into()));
    }
    let clf = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no classifier".into()))?;
    let s = record.s_f64();
    let mut clf_input = Vec::with_capacity(clf.in_dim());
    clf_input.extend_from_slice(record.x());
    clf_input.push(s);
    let clf_fwd = clf.forward(&clf_input)?;
    let logit = clf_fwd.output()[0];
    let q1_raw = sigmoid(logit);
    let q1 = q1_raw.clamp(Q_EPS, 1.0 - Q_EPS);
    let q = [1.0 - q1, q1];

    let passes =
        [encode_cached(model, record.x(), s, Some(0.0))?, encode_cached(model, record.x(), s, Some(1.0))?];

    let xlv_fwd = model.x_logvar.forward(&[1.0])?;
    let xlv = xlv_fwd.output().to_vec();
    let mut d_xlv = vec![0.0; xlv.len()];
    let mut recon = [0.0f64; 2];
    let mut d_mu_rec = [vec![0.0; model.latent], vec![0.0; model.latent]];
    let mut d_lv_rec = [vec![0.0; model.latent], vec![0.0; model.latent]];
    let inv_nz = 1.0 / n_z as f64;
    for comp in 0..2 {
        let enc = &passes[comp];
        let mut rng = rng::stream(seed, "unl-recon", comp as u64);
        for _ in 0..n_z {
            let eps = standard_normals(&mut rng, model.latent);
            let z = FairVae::reparameterize(&enc.mu, &enc.lv, &eps);
            let dec_fwd = model.decoder.forward(&decoder_input(&z, s))?;
            let out = dec_fwd.output().to_vec();
            let mut dout = vec![0.0; out.len()];
            let ll = x_loglik_grad(
                &model.layout,
                &out,
                &xlv,
                record.x(),
                scale * q[comp] * inv_nz,
                &mut dout,
                &mut d_xlv,
            );
            let dinput = model.decoder.backward(&dec_fwd, &dout, &mut grads.decoder);
            recon[comp] += ll * inv_nz;
            for l in 0..model.latent {
                // dinput is already scaled; fold back to unscaled accumulators
                let dz = dinput[l] / scale;
                d_mu_rec[comp][l] += dz;
                d_lv_rec[comp][l] += dz * 0.5 * (z[l] - enc.mu[l]);
            }
        }
    }
    model.x_logvar.backward(&xlv_fwd, &d_xlv, &mut grads.x_logvar);

    let kl = mc_kl_mixture_grad(
        [&passes[0].mu, &passes[1].mu],
        [&passes[0].lv, &passes[1].lv],
        q1,
        mc_k,
        rng::derive(seed, "unl-kl", 0),
    );

    let beta = model.kl_weight;
    let value = q[0] * recon[0] + q[1] * recon[1] - beta * kl.value;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite unlabeled bound".into()));
    }

    for comp in 0..2 {
        let mut dmu = Vec::with_capacity(model.latent);
        let mut dlv = Vec::with_capacity(model.latent);
        for l in 0..model.latent {
            dmu.push(scale * (d_mu_rec[comp][l] - beta * kl.d_mu[comp][l]));
            dlv.push(scale * (d_lv_rec[comp][l] - beta * kl.d_lv[comp][l]));
        }
        encoder_backward(model, &passes[comp], &dmu, &dlv, &mut grads.encoder);
    }

    // classifier path: mixture weights of both the reconstruction expectation
    // and the KL depend on q1 = sigmoid(logit)
    let d_q1 = (recon[1] - recon[0]) - beta * kl.d_q1;
    let dlogit = if (Q_EPS..=1.0 - Q_EPS).contains(&q1_raw) {
        d_q1 * q1_raw * (1.0 - q1_raw)
    } else {
        0.0
    };
    let buf = grads
        .classifier
        .as_mut()
        .expect("classifier gradients allocated with the model");
    clf.backward(&clf_fwd, &[scale * dlogit], buf);
    Ok(value)
}

pub fn unlabeled_elbo(
    model: &FairVae,
    record: &Record,
    n_z: usize,
    mc_k: usize,
    seed: u64,
) -> Result<(f64, VaeGrads)> {
    let mut grads = VaeGrads::zeros(model);
    let value = unlabeled_elbo_into(model, record, n_z, mc_k, seed, 1.0, &mut grads)?;
    Ok((value, grads))
}

/// Per-mini-batch objective of the online phase:
/// `alpha * mean(classification) - mean(labeled bound) - mean(unlabeled
/// bound)`, minimized. Returns its gradients for one optimizer step.
pub fn phase2_objective(
    model: &FairVae,
    labeled: &[Record],
    unlabeled: &[Record],
    n_z: usize,
    mc_k: usize,
    seed: u64,
) -> Result<(f64, VaeGrads)> {
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(Error::Contract("objective needs at least one record".into()));
    }
    let mut grads = VaeGrads::zeros(model);
    let alpha = model.class_weight;
    let mut value = 0.0;
    if !labeled.is_empty() {
        let inv = 1.0 / labeled.len() as f64;
        for (i, rec) in labeled.iter().enumerate() {
            let r = ips_loss_into(model, rec, alpha * inv, &mut grads)?;
            let l =
                labeled_elbo_into(model, rec, rng::derive(seed, "labeled", i as u64), -inv, &mut grads)?;
            value += alpha * inv * r - inv * l;
        }
    }
    if !unlabeled.is_empty() {
        let inv = 1.0 / unlabeled.len() as f64;
        for (i, rec) in unlabeled.iter().enumerate() {
            let u = unlabeled_elbo_into(
                model,
                rec,
                n_z,
                mc_k,
                rng::derive(seed, "unlabeled", i as u64),
                -inv,
                &mut grads,
            )?;
            value -= inv * u;
        }
    }
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite objective".into()));
    }
    Ok((value, grads))
}

/// IPS-weighted labeled-only bound: the labeled ELBO divided by the record's
/// propensity, negated into a minimized loss over the given batch.
pub fn ips_labeled_loss(
    model: &FairVae,
    labeled: &[Record],
    seed: u64,
) -> Result<(f64, VaeGrads)> {
    if labeled.is_empty() {
        return Err(Error::Contract("loss needs at least one labeled record".into()));
    }
    let mut grads = VaeGrads::zeros(model);
    let inv = 1.0 / labeled.len() as f64;
    let mut value = 0.0;
    for (i, rec) in labeled.iter().enumerate() {
        let prop = rec
            .propensity()
            .ok_or_else(|| Error::Contract("labeled record carries no propensity".into()))?;
        let l = labeled_elbo_into(
            model,
            rec,
            rng::derive(seed, "ips-labeled", i as u64),
            -inv / prop,
            &mut grads,
        )?;
        value -= inv * l / prop;
    }
    Ok((value, grads))
}
