//! Law-school admission structural causal model.
//!
//! Ground truth `y` (potential) is independent of the sensitive attribute `s`;
//! talent `k` mediates it into the observed scores. Exogenous noises are
//! stored on every draw so counterfactuals over `s` are exact
//! (abduction-action-prediction: hold `y`, `k` and the noises fixed, flip `s`,
//! replay the structural equations).

use crate::nn::Mlp;
use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Noise scales of the structural equations (standard deviations).
const K_SD: f64 = 0.5;
const LSAT_SD: f64 = 0.1;
const GPA_SD: f64 = 0.01;
const FYA_SD: f64 = 0.05;

/// One sampled individual with its exogenous state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmDraw {
    /// Ground truth in sign form, +-1.
    pub y_sign: f64,
    /// Ground truth as a {0,1} label (utility bookkeeping).
    pub m: u8,
    /// Talent; depends on `y_sign` only.
    pub k: f64,
    /// Sensitive attribute, +-1.
    pub s: f64,
    pub eps_lsat: f64,
    pub eps_gpa: f64,
    pub eps_fya: f64,
    pub lsat: f64,
    pub gpa: f64,
    pub fya: f64,
    /// Proxy label: first-year average above zero.
    pub y_tilde: u8,
}

impl ScmDraw {
    /// Replay the structural equations from exogenous state.
    pub fn from_exogenous(
        y_sign: f64,
        k: f64,
        s: f64,
        eps_lsat: f64,
        eps_gpa: f64,
        eps_fya: f64,
    ) -> Self {
        let lsat = 4.0 * k + 3.5 * s + eps_lsat;
        let gpa = 0.75 * k + s + eps_gpa;
        let fya = 1.3 * k + s + eps_fya;
        ScmDraw {
            y_sign,
            m: if y_sign > 0.0 { 1 } else { 0 },
            k,
            s,
            eps_lsat,
            eps_gpa,
            eps_fya,
            lsat,
            gpa,
            fya,
            y_tilde: u8::from(fya > 0.0),
        }
    }
}

/// Draw `n` individuals. Deterministic for a given seed.
pub fn sample_population(n: usize, seed: u64) -> Result<Vec<ScmDraw>> {
    if n < 1 {
        return Err(Error::Config("population size must be >= 1".into()));
    }
    let mut rng = rng::from_seed(seed);
    Ok((0..n)
        .map(|_| {
            let y_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let k = y_sign + K_SD * rng.sample::<f64, _>(StandardNormal);
            let eps_lsat = LSAT_SD * rng.sample::<f64, _>(StandardNormal);
            let eps_gpa = GPA_SD * rng.sample::<f64, _>(StandardNormal);
            let eps_fya = FYA_SD * rng.sample::<f64, _>(StandardNormal);
            ScmDraw::from_exogenous(y_sign, k, s, eps_lsat, eps_gpa, eps_fya)
        })
        .collect())
}

/// Counterfactual of `draw` under the intervention `S := s_prime`: ground
/// truth, talent and exogenous noises held fixed, scores recomputed.
pub fn counterfactual_of(draw: &ScmDraw, s_prime: f64) -> Result<ScmDraw> {
    if s_prime != 1.0 && s_prime != -1.0 {
        return Err(Error::Domain(format!("s_prime must be +-1, got {s_prime}")));
    }
    Ok(ScmDraw::from_exogenous(
        draw.y_sign,
        draw.k,
        s_prime,
        draw.eps_lsat,
        draw.eps_gpa,
        draw.eps_fya,
    ))
}

/// Logistic approximations of the two reference policies: the unfair one
/// decides from (LSAT, GPA, S), the fair one from talent K alone.
pub struct OptimalPolicies {
    pub unfair: Mlp,
    pub fair: Mlp,
}

/// Full-batch Adam steps on log-loss until the configured iteration budget.
const FIT_STEPS: usize = 2000;
const FIT_LR: f64 = 0.05;

/// Fit both reference policies on fresh i.i.d. draws.
pub fn fit_optimal_policies(n_train: usize, seed: u64) -> Result<OptimalPolicies> {
    let pop = sample_population(n_train, rng::derive(seed, "opt-fit-data", 0))?;
    let unfair_x: Vec<Vec<f64>> = pop.iter().map(|d| vec![d.lsat, d.gpa, d.s]).collect();
    let fair_x: Vec<Vec<f64>> = pop.iter().map(|d| vec![d.k]).collect();
    let y: Vec<f64> = pop.iter().map(|d| f64::from(d.y_tilde)).collect();
    let unfair = crate::nn::fit_logistic(
        &unfair_x,
        &y,
        FIT_STEPS,
        FIT_LR,
        rng::derive(seed, "opt-fit-unfair", 0),
    )?;
    let fair = crate::nn::fit_logistic(
        &fair_x,
        &y,
        FIT_STEPS,
        FIT_LR,
        rng::derive(seed, "opt-fit-fair", 0),
    )?;
    Ok(OptimalPolicies { unfair, fair })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
fn log_stable(p: f64) -> f64 {
    p.max(1e-300).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_draw_matches_hand_substitution() {
        let d = ScmDraw::from_exogenous(1.0, 1.0, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(d.lsat, 7.5);
        assert_eq!(d.gpa, 1.75);
        assert_eq!(d.fya, 2.3);
        assert_eq!(d.y_tilde, 1);
        assert_eq!(d.m, 1);
    }

    #[test]
    fn proxy_rate_is_symmetric_and_group_rate_matches_mixture_cdf() {
        // Mixture-of-Gaussians oracle: fya | s=+1 is an equal mixture of
        // N(+1.3+1, v) and N(-1.3+1, v) with v = 1.69*0.25 + 0.05^2, so
        // P(y~=1 | s=+1) = (Phi(2.3/sd) + Phi(-0.3/sd))/2 = 0.66124.
        let pop = sample_population(1_000_000, 5).unwrap();
        let overall =
            pop.iter().map(|d| f64::from(d.y_tilde)).sum::<f64>() / pop.len() as f64;
        assert!((overall - 0.5).abs() < 2e-3, "overall {overall}");
        let (mut pos, mut n_pos) = (0.0, 0.0);
        for d in &pop {
            if d.s > 0.0 {
                pos += f64::from(d.y_tilde);
                n_pos += 1.0;
            }
        }
        let group = pos / n_pos;
        assert!((group - 0.66124).abs() < 2e-3, "group rate {group}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        assert_eq!(sample_population(64, 9).unwrap(), sample_population(64, 9).unwrap());
        assert_ne!(sample_population(64, 9).unwrap(), sample_population(64, 10).unwrap());
    }

    #[test]
    fn reconstruction_identities_hold_exactly() {
        for d in sample_population(2000, 3).unwrap() {
            assert_eq!(d.lsat, 4.0 * d.k + 3.5 * d.s + d.eps_lsat);
            assert_eq!(d.gpa, 0.75 * d.k + d.s + d.eps_gpa);
            assert_eq!(d.fya, 1.3 * d.k + d.s + d.eps_fya);
            assert_eq!(d.y_tilde, u8::from(d.fya > 0.0));
        }
    }

    #[test]
    fn null_intervention_is_identity() {
        for d in sample_population(100, 17).unwrap() {
            assert_eq!(counterfactual_of(&d, d.s).unwrap(), d);
        }
    }

    #[test]
    fn zero_noise_counterfactual_matches_hand_substitution() {
        let d = ScmDraw::from_exogenous(1.0, 1.0, 1.0, 0.0, 0.0, 0.0);
        let cf = counterfactual_of(&d, -1.0).unwrap();
        assert_eq!(cf.lsat, 0.5);
        assert_eq!(cf.gpa, -0.25);
        assert_eq!(cf.k, 1.0);
        assert_eq!(cf.m, 1);
    }

    #[test]
    fn lsat_gap_is_linear_in_s() {
        // 3.5 * (s - s') = +-7 exactly in real arithmetic; f64 leaves one
        // rounding step of slack
        for d in sample_population(500, 21).unwrap() {
            let cf = counterfactual_of(&d, -d.s).unwrap();
            let gap = d.lsat - cf.lsat;
            assert!((gap - 3.5 * (d.s - cf.s)).abs() <= 1e-11);
        }
    }

    #[test]
    fn counterfactual_is_an_involution() {
        for d in sample_population(500, 23).unwrap() {
            let back = counterfactual_of(&counterfactual_of(&d, -d.s).unwrap(), d.s).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn counterfactual_rejects_invalid_group() {
        let d = ScmDraw::from_exogenous(1.0, 1.0, 1.0, 0.0, 0.0, 0.0);
        assert!(matches!(counterfactual_of(&d, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn fair_fit_weight_on_talent_is_positive() {
        // brute-force oracle: coarse grid over (w, b) maximizing the
        // log-likelihood of sigmoid(w*k + b) on an independent sample
        let pop = sample_population(20_000, 41).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut w = -4.0;
        while w <= 4.0 {
            let mut b = -2.0;
            while b <= 2.0 {
                let ll: f64 = pop
                    .iter()
                    .map(|d| {
                        let q = sigmoid(w * d.k + b);
                        f64::from(d.y_tilde) * log_stable(q)
                            + f64::from(1 - d.y_tilde) * log_stable(1.0 - q)
                    })
                    .sum();
                if ll > best.0 {
                    best = (ll, w);
                }
                b += 0.5;
            }
            w += 0.5;
        }
        assert!(best.1 > 0.0, "grid-fit weight {}", best.1);
        let fits = fit_optimal_policies(5000, 1).unwrap();
        assert!(fits.fair.layers()[0].w[0] > 0.0);
    }
}
