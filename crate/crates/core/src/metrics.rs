//! Utility and fairness metrics: test-set utility (proxy and ground truth),
//! demographic parity, counterfactual unfairness, temporal statistics,
//! effective (accumulated) metrics, and the latent-independence probe.

use crate::data::Record;
use crate::nn;
use crate::policy::Policy;
use crate::rng;
use crate::scm::sigmoid;
use crate::vae::FairVae;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

/// Latent policies are evaluated as the mean acceptance probability over
/// this many posterior draws per record.
pub const EVAL_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Proxy,
    GroundTruth,
}

/// Per-step metric values for one (method, seed) run.
#[derive(Clone, Debug, Default)]
pub struct MetricSeries {
    pub method: String,
    pub seed: u64,
    pub t: Vec<usize>,
    pub ut_proxy: Vec<f64>,
    pub ut_gt: Vec<Option<f64>>,
    pub dpu: Vec<f64>,
    pub cfu: Vec<Option<f64>>,
    pub eff_ut: Vec<f64>,
    pub eff_dpu: Vec<f64>,
}

/// Evaluation-time acceptance probabilities for a whole record set.
pub fn eval_probs(
    policy: &Policy,
    records: &[Record],
    model: Option<&FairVae>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = rng::stream(seed, "eval", 0);
    records.iter().map(|r| policy.eval_prob(r, model, n_samples, &mut rng)).collect()
}

/// Utility from precomputed probabilities.
pub fn utility_from_probs(
    probs: &[f64],
    records: &[Record],
    label: LabelSource,
    cost: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (r, p) in records.iter().zip(probs) {
        let y = match label {
            LabelSource::Proxy => r.oracle_label().ok_or_else(|| {
                Error::Contract("proxy utility needs labeled test records".into())
            })?,
            LabelSource::GroundTruth => r.ground_truth().ok_or_else(|| {
                Error::Contract("ground-truth utility is only available on synthetic data".into())
            })?,
        };
        total += p * (f64::from(y) - cost);
    }
    Ok(total / records.len() as f64)
}

/// Parity gap from precomputed probabilities.
pub fn dpu_from_probs(probs: &[f64], records: &[Record]) -> Result<f64> {
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (r, p) in records.iter().zip(probs) {
        if r.s() == 1 {
            pos += p;
            n_pos += 1;
        } else {
            neg += p;
            n_neg += 1;
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract("parity gap needs both sensitive groups".into()));
    }
    Ok((pos / n_pos as f64 - neg / n_neg as f64).abs())
}

/// Counterfactual gap from precomputed factual/counterfactual probabilities.
pub fn cfu_from_probs(factual: &[f64], counterfactual: &[f64]) -> Result<f64> {
    if factual.len() != counterfactual.len() || factual.is_empty() {
        return Err(Error::Contract("counterfactual pairs must align".into()));
    }
    Ok(factual.iter().zip(counterfactual).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / factual.len() as f64)
}

/// Expected utility `E[pi * (label - c)]` over a test set, with the policy
/// evaluated exactly as at decision time.
pub fn utility_of_policy(
    policy: &Policy,
    records: &[Record],
    label: LabelSource,
    cost: f64,
    model: Option<&FairVae>,
    seed: u64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("utility needs a nonempty test set".into()));
    }
    let probs = eval_probs(policy, records, model, EVAL_SAMPLES, seed)?;
    utility_from_probs(&probs, records, label, cost)
}

/// Absolute gap in mean acceptance probability between the sensitive groups.
pub fn dpu_of_policy(
    policy: &Policy,
    records: &[Record],
    model: Option<&FairVae>,
    seed: u64,
) -> Result<f64> {
    let probs = eval_probs(policy, records, model, EVAL_SAMPLES, seed)?;
    dpu_from_probs(&probs, records)
}

/// Mean absolute change in acceptance probability under the counterfactual
/// flip of the sensitive attribute. Pairs are index-aligned.
pub fn cfu_of_policy(
    policy: &Policy,
    factual: &[Record],
    counterfactual: &[Record],
    model: Option<&FairVae>,
    seed: u64,
) -> Result<f64> {
    if factual.len() != counterfactual.len() || factual.is_empty() {
        return Err(Error::Contract("counterfactual pairs must align".into()));
    }
    let pf = eval_probs(policy, factual, model, EVAL_SAMPLES, rng::derive(seed, "cfu-f", 0))?;
    let pc = eval_probs(
        policy,
        counterfactual,
        model,
        EVAL_SAMPLES,
        rng::derive(seed, "cfu-cf", 0),
    )?;
    cfu_from_probs(&pf, &pc)
}

/// Temporal mean and temporal variance (population standard deviation, one
/// term per step) of a metric series over the inclusive window `[t1, t2]`.
pub fn temporal_stats(series: &[f64], t1: usize, t2: usize) -> Result<(f64, f64)> {
    if t1 >= t2 || t2 >= series.len() {
        return Err(Error::Range(format!(
            "window [{t1}, {t2}] invalid for a series of length {}",
            series.len()
        )));
    }
    let window = &series[t1..=t2];
    let n = window.len() as f64;
    let mu = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok((var.sqrt(), mu))
}

/// Effective (accumulated) proxy utility and parity gap of the decision
/// history through step `t` (1-based): utility is summed over accepted
/// records and scaled by candidates-per-step times steps; the parity gap is
/// the mean absolute per-step acceptance-rate difference.
pub fn effective_stats(history: &[Vec<Record>], t: usize, cost: f64) -> Result<(f64, f64)> {
    if t == 0 || t > history.len() {
        return Err(Error::Range(format!(
            "step {t} outside recorded history of {} steps",
            history.len()
        )));
    }
    let n_per_step = history[0].len();
    let mut utility = 0.0;
    let mut gap_sum = 0.0;
    for step in &history[..t] {
        let (mut acc_pos, mut n_pos, mut acc_neg, mut n_neg) = (0usize, 0usize, 0usize, 0usize);
        for r in step {
            let d = r.d().ok_or_else(|| {
                Error::Contract("effective metrics need decided records".into())
            })?;
            if d == 1 {
                let y = r.y_tilde().expect("accepted records carry revealed labels");
                utility += f64::from(y) - cost;
            }
            if r.s() == 1 {
                n_pos += 1;
                acc_pos += usize::from(d == 1);
            } else {
                n_neg += 1;
                acc_neg += usize::from(d == 1);
            }
        }
        if n_pos == 0 || n_neg == 0 {
            log::warn!("one sensitive group absent from a step; gap counted as 0");
        } else {
            gap_sum +=
                (acc_pos as f64 / n_pos as f64 - acc_neg as f64 / n_neg as f64).abs();
        }
    }
    Ok((utility / (n_per_step as f64 * t as f64), gap_sum / t as f64))
}

/// Train a logistic probe predicting the sensitive group from the latent
/// code on half of the records and report balanced accuracy on the other
/// half. Values near 0.5 indicate latent independence.
pub fn latent_sensitive_probe(model: &FairVae, records: &[Record], seed: u64) -> Result<f64> {
    if !records.iter().any(|r| r.s() == 1) || !records.iter().any(|r| r.s() == -1) {
        return Err(Error::Contract("probe needs both sensitive groups".into()));
    }
    let mut rng = rng::stream(seed, "probe", 0);
    let mut embedded: Vec<(Vec<f64>, f64)> = Vec::with_capacity(records.len());
    for r in records {
        let s = r.s_f64();
        let mu = if model.semi {
            let q = model.classify(r.x(), s)?;
            let u = f64::from(rng.random::<f64>() < q);
            model.encode(r.x(), s, Some(u))?.0
        } else {
            model.encode(r.x(), s, None)?.0
        };
        embedded.push((mu, f64::from(r.s() == 1)));
    }
    embedded.shuffle(&mut rng);
    let half = embedded.len() / 2;
    let (train, eval) = embedded.split_at(half);
    let inputs: Vec<Vec<f64>> = train.iter().map(|(z, _)| z.clone()).collect();
    let targets: Vec<f64> = train.iter().map(|(_, y)| *y).collect();
    let probe = nn::fit_logistic(&inputs, &targets, 300, 0.05, rng::derive(seed, "probe-fit", 0))?;
    balanced_accuracy_of(&probe, eval)
}

fn balanced_accuracy_of(probe: &nn::Mlp, eval: &[(Vec<f64>, f64)]) -> Result<f64> {
    let (mut tp, mut np, mut tn, mut nn_) = (0usize, 0usize, 0usize, 0usize);
    for (z, y) in eval {
        let pred = sigmoid(probe.apply(z)?[0]) > 0.5;
        if *y == 1.0 {
            np += 1;
            tp += usize::from(pred);
        } else {
            nn_ += 1;
            tn += usize::from(!pred);
        }
    }
    if np == 0 || nn_ == 0 {
        return Err(Error::Contract("probe evaluation split lost a group".into()));
    }
    Ok(0.5 * (tp as f64 / np as f64 + tn as f64 / nn_ as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::nn::Mlp;
    use proptest::prelude::*;

    fn constant_policy(p_logit: f64, in_dim: usize) -> Policy {
        let mut net = Mlp::init(&[], in_dim, 1, 0).unwrap();
        net.set_layer(0, vec![0.0; in_dim], vec![p_logit]);
        Policy::Logit { net, dpu_penalty: 0.0 }
    }

    #[test]
    fn constant_accept_policy_has_zero_gt_utility_at_half_cost() {
        // ground truth is a fair coin, so E[m - 0.5] = 0
        let ds = Dataset::synthetic(7).unwrap();
        let policy = constant_policy(200.0, 3);
        let ut = utility_of_policy(
            &policy,
            &ds.test,
            LabelSource::GroundTruth,
            0.5,
            None,
            1,
        )
        .unwrap();
        assert!(ut.abs() < 0.02, "utility {ut}");
        // a never-accept policy collects nothing
        let never = constant_policy(-200.0, 3);
        let ut =
            utility_of_policy(&never, &ds.test, LabelSource::Proxy, 0.5, None, 1).unwrap();
        assert!(ut.abs() < 1e-3, "utility {ut}");
    }

    #[test]
    fn ground_truth_requires_synthetic_records() {
        let recs = vec![Record::new(vec![0.0], 1, Some(1)), Record::new(vec![0.0], -1, Some(0))];
        let policy = constant_policy(0.0, 2);
        assert!(utility_of_policy(&policy, &recs, LabelSource::GroundTruth, 0.5, None, 1)
            .is_err());
    }

    #[test]
    fn dpu_of_constant_policy_is_zero_and_s_policy_maximal() {
        let ds = Dataset::synthetic(7).unwrap();
        let constant = constant_policy(0.7, 3);
        let dpu = dpu_of_policy(&constant, &ds.test, None, 3).unwrap();
        assert!(dpu.abs() < 1e-12);

        // pi = 1 iff s = +1 (through a steep logit on the s input)
        let mut net = Mlp::init(&[], 3, 1, 0).unwrap();
        net.set_layer(0, vec![0.0, 0.0, 500.0], vec![0.0]);
        let s_policy = Policy::Logit { net, dpu_penalty: 0.0 };
        let dpu = dpu_of_policy(&s_policy, &ds.test, None, 3).unwrap();
        assert!((dpu - (1.0 - 2.0 * crate::data::PROP_EPS)).abs() < 1e-9, "dpu {dpu}");

        let one_group: Vec<Record> =
            ds.test.iter().filter(|r| r.s() == 1).cloned().collect();
        assert!(dpu_of_policy(&constant, &one_group, None, 3).is_err());
    }

    #[test]
    fn cfu_hand_value_for_s_sigmoid_policy() {
        // pi = sigmoid(s): |sigmoid(1) - sigmoid(-1)| = 0.4621...
        let ds = Dataset::synthetic(7).unwrap();
        let mut net = Mlp::init(&[], 3, 1, 0).unwrap();
        net.set_layer(0, vec![0.0, 0.0, 1.0], vec![0.0]);
        let policy = Policy::Logit { net, dpu_penalty: 0.0 };
        let cf = ds.test_cf.as_ref().unwrap();
        let cfu = cfu_of_policy(&policy, &ds.test, cf, None, 5).unwrap();
        let expected = sigmoid(1.0) - sigmoid(-1.0);
        assert!((cfu - expected).abs() < 1e-12, "cfu {cfu} vs {expected}");
    }

    #[test]
    fn cfu_of_talent_only_policy_is_exactly_zero() {
        let ds = Dataset::synthetic(7).unwrap();
        let fits = crate::scm::fit_optimal_policies(2000, 5).unwrap();
        let policy = Policy::OptFair { net: fits.fair };
        let cf = ds.test_cf.as_ref().unwrap();
        let cfu = cfu_of_policy(&policy, &ds.test, cf, None, 5).unwrap();
        assert_eq!(cfu, 0.0);
    }

    #[test]
    fn cfu_rejects_mismatched_pair_lists() {
        let ds = Dataset::synthetic(7).unwrap();
        let policy = constant_policy(0.0, 3);
        let cf = ds.test_cf.as_ref().unwrap();
        assert!(cfu_of_policy(&policy, &ds.test, &cf[..10], None, 5).is_err());
    }

    #[test]
    fn temporal_stats_hand_values() {
        let (tv, mu) = temporal_stats(&[3.0, 3.0, 3.0, 3.0], 0, 3).unwrap();
        assert_eq!((tv, mu), (0.0, 3.0));
        let (tv, mu) = temporal_stats(&[0.0, 1.0], 0, 1).unwrap();
        assert_eq!((tv, mu), (0.5, 0.5));
        assert!(temporal_stats(&[0.0, 1.0], 1, 1).is_err());
        assert!(temporal_stats(&[0.0, 1.0], 0, 2).is_err());
    }

    #[test]
    fn effective_stats_hand_values() {
        // one step, two candidates, one acceptance with y=1 at c=0.5
        let step: Vec<Record> = vec![
            Record::new(vec![], 1, Some(1)).with_decision(1, 0.5).unwrap(),
            Record::new(vec![], -1, Some(0)).with_decision(0, 0.5).unwrap(),
        ];
        let (ut, dpu) = effective_stats(&[step], 1, 0.5).unwrap();
        assert!((ut - 0.25).abs() < 1e-15);
        assert!((dpu - 1.0).abs() < 1e-15);

        // no acceptances ever
        let step: Vec<Record> = vec![
            Record::new(vec![], 1, Some(1)).with_decision(0, 0.5).unwrap(),
            Record::new(vec![], -1, Some(0)).with_decision(0, 0.5).unwrap(),
        ];
        let (ut, dpu) = effective_stats(&[step.clone(), step], 2, 0.5).unwrap();
        assert_eq!((ut, dpu), (0.0, 0.0));
        assert!(effective_stats(&[], 1, 0.5).is_err());
    }

    #[test]
    fn effective_stats_order_invariant_within_step() {
        let step: Vec<Record> = (0..10)
            .map(|i| {
                Record::new(vec![], if i % 3 == 0 { 1 } else { -1 }, Some(u8::from(i % 2 == 0)))
                    .with_decision(u8::from(i % 4 == 0), 0.3)
                    .unwrap()
            })
            .collect();
        let mut reversed = step.clone();
        reversed.reverse();
        assert_eq!(
            effective_stats(&[step], 1, 0.5).unwrap(),
            effective_stats(&[reversed], 1, 0.5).unwrap()
        );
    }

    #[test]
    fn probe_detects_sensitive_leak_and_chance_on_noise() {
        let ds = Dataset::synthetic(7).unwrap();
        // a model whose latent mean literally contains s: encoder weights
        // zeroed except a strong s -> mu[0] connection
        let mut leaky =
            crate::vae::FairVae::unsupervised(&ds.schema, &[4], 2, 1.0, 3).unwrap();
        let zeros: Vec<(Vec<f64>, Vec<f64>)> = leaky
            .encoder
            .layers()
            .iter()
            .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
            .collect();
        for (k, (w, b)) in zeros.into_iter().enumerate() {
            leaky.encoder.set_layer(k, w, b);
        }
        let l0 = leaky.encoder.layers()[0].clone();
        let mut w0 = vec![0.0; l0.w.len()];
        // s is the last encoder input; feed it into every hidden unit
        for o in 0..l0.out_dim {
            w0[o * l0.in_dim + l0.in_dim - 1] = 1.0;
        }
        leaky.encoder.set_layer(0, w0, vec![0.5; l0.out_dim]);
        let l1 = leaky.encoder.layers()[1].clone();
        let mut w1 = vec![0.0; l1.w.len()];
        w1[0] = 1.0;
        leaky.encoder.set_layer(1, w1, vec![0.0; l1.out_dim]);
        let acc = latent_sensitive_probe(&leaky, &ds.test[..800], 9).unwrap();
        assert!(acc > 0.95, "leaky latent probe accuracy {acc}");

        // latents carrying only feature noise: the encoder passes x[0]
        // through, and group labels are reassigned independently of x
        let mut blind =
            crate::vae::FairVae::unsupervised(&ds.schema, &[4], 2, 1.0, 3).unwrap();
        let l0 = blind.encoder.layers()[0].clone();
        let mut w0 = vec![0.0; l0.w.len()];
        w0[0] = 1.0; // hidden0 = relu(x0)
        w0[l0.in_dim] = -1.0; // hidden1 = relu(-x0)
        blind.encoder.set_layer(0, w0, vec![0.0; l0.out_dim]);
        let l1 = blind.encoder.layers()[1].clone();
        let mut w1 = vec![0.0; l1.w.len()];
        w1[0] = 1.0;
        w1[1] = -1.0; // mu[0] = hidden0 - hidden1 = x0
        blind.encoder.set_layer(1, w1, vec![0.0; l1.out_dim]);
        let reassigned: Vec<Record> = ds.test[..800]
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Record::new(r.x().to_vec(), if i % 2 == 0 { 1 } else { -1 }, r.oracle_label())
            })
            .collect();
        let acc = latent_sensitive_probe(&blind, &reassigned, 9).unwrap();
        assert!((acc - 0.5).abs() < 0.08, "noise latent probe accuracy {acc}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn temporal_stats_match_brute_force(
            values in proptest::collection::vec(-5.0f64..5.0, 3..40),
            split in 0usize..1000,
        ) {
            let t1 = split % (values.len() - 1);
            let t2 = values.len() - 1;
            let (tv, mu) = temporal_stats(&values, t1, t2).unwrap();
            // brute force: two explicit passes
            let w = &values[t1..=t2];
            let bf_mu = w.iter().sum::<f64>() / w.len() as f64;
            let bf_tv =
                (w.iter().map(|v| (v - bf_mu).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
            prop_assert!((mu - bf_mu).abs() < 1e-12);
            prop_assert!((tv - bf_tv).abs() < 1e-12);
        }

        #[test]
        fn metric_ranges_hold_for_random_constant_policies(logit in -4.0f64..4.0) {
            let ds = Dataset::synthetic(3).unwrap();
            let policy = constant_policy(logit, 3);
            let test = &ds.test[..400];
            let cf = &ds.test_cf.as_ref().unwrap()[..400];
            let c = 0.5;
            let ut = utility_of_policy(&policy, test, LabelSource::Proxy, c, None, 1).unwrap();
            let dpu = dpu_of_policy(&policy, test, None, 1).unwrap();
            let cfu = cfu_of_policy(&policy, test, cf, None, 1).unwrap();
            prop_assert!(ut >= -c && ut <= 1.0 - c);
            prop_assert!((0.0..=1.0).contains(&dpu));
            prop_assert!((0.0..=1.0).contains(&cfu));
        }
    }

    #[test]
    fn test_metrics_invariant_under_shuffle() {
        let ds = Dataset::synthetic(3).unwrap();
        let policy = constant_policy(0.4, 3);
        let mut shuffled = ds.test.clone();
        shuffled.shuffle(&mut rng::from_seed(44));
        let a = utility_of_policy(&policy, &ds.test, LabelSource::Proxy, 0.5, None, 1).unwrap();
        let b = utility_of_policy(&policy, &shuffled, LabelSource::Proxy, 0.5, None, 1).unwrap();
        assert!((a - b).abs() < 1e-12);
        let a = dpu_of_policy(&policy, &ds.test, None, 1).unwrap();
        let b = dpu_of_policy(&policy, &shuffled, None, 1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
