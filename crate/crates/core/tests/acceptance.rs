//! Acceptance suite. Every criterion prints one `criterion N: PASS/FAIL`
//! line (run with `--nocapture` to watch) and asserts its thresholds.
//!
//! Criteria 1-5 share one set of synthetic experiment runs (three methods,
//! five seeds each) computed once per test process; criterion 6 needs a
//! pre-exported recidivism CSV at `data/compas.csv` and reports SKIPPED when
//! the file is absent; criterion 7 needs no training at all.

use fairdec::config::{ExperimentConfig, Method};
use fairdec::data::{Dataset, Record};
use fairdec::experiment::{self, SeedRun};
use fairdec::metrics::{self, LabelSource};
use fairdec::nn::Mlp;
use fairdec::policy::Policy;
use fairdec::rng;
use fairdec::scm;
use fairdec::vae::losses::{self, VaeGrads};
use fairdec::vae::FairVae;
use std::path::Path;
use std::sync::OnceLock;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Reporting window of the convergence criteria (time steps, inclusive).
const WINDOW: (usize, usize) = (190, 200);

struct SyntheticRuns {
    dataset: Dataset,
    fairall: Vec<SeedRun>,
    unfairlog: Vec<SeedRun>,
    fairlog: Vec<SeedRun>,
    /// Per-fit (proxy utility, parity gap) of the two reference policies on
    /// the shared test split, five independent fits.
    opt_unfair: Vec<(f64, f64)>,
    opt_fair: Vec<(f64, f64)>,
    opt_fair_gt: Vec<f64>,
}

static RUNS: OnceLock<SyntheticRuns> = OnceLock::new();

fn synthetic_runs() -> &'static SyntheticRuns {
    RUNS.get_or_init(|| {
        let run_method = |method: Method| -> Vec<SeedRun> {
            let mut cfg = ExperimentConfig::for_method(method, "synthetic").unwrap();
            cfg.seeds = SEEDS.to_vec();
            let dataset = experiment::load_dataset(&cfg).unwrap();
            let mut runs = Vec::new();
            std::thread::scope(|scope| {
                let handles: Vec<_> = cfg
                    .seeds
                    .iter()
                    .map(|&s| scope.spawn(|| experiment::run_seed(&cfg, &dataset, s)))
                    .collect();
                for h in handles {
                    runs.push(h.join().expect("seed thread").expect("seed run"));
                }
            });
            runs
        };
        let fairall = run_method(Method::FairAllBoth);
        let unfairlog = run_method(Method::UnfairLog);
        let fairlog = run_method(Method::FairLog);

        let cfg = ExperimentConfig::for_method(Method::FairAllBoth, "synthetic").unwrap();
        let dataset = experiment::load_dataset(&cfg).unwrap();
        let cost = cfg.cost;
        let mut opt_unfair = Vec::new();
        let mut opt_fair = Vec::new();
        let mut opt_fair_gt = Vec::new();
        for fit_seed in 0..5u64 {
            let fits = scm::fit_optimal_policies(5000, fit_seed).unwrap();
            let unfair = Policy::OptUnfair { net: fits.unfair };
            let fair = Policy::OptFair { net: fits.fair };
            let eval = |p: &Policy, label| {
                metrics::utility_of_policy(p, &dataset.test, label, cost, None, fit_seed)
                    .unwrap()
            };
            opt_unfair.push((
                eval(&unfair, LabelSource::Proxy),
                metrics::dpu_of_policy(&unfair, &dataset.test, None, fit_seed).unwrap(),
            ));
            opt_fair.push((
                eval(&fair, LabelSource::Proxy),
                metrics::dpu_of_policy(&fair, &dataset.test, None, fit_seed).unwrap(),
            ));
            opt_fair_gt.push(eval(&fair, LabelSource::GroundTruth));
        }
        SyntheticRuns { dataset, fairall, unfairlog, fairlog, opt_unfair, opt_fair, opt_fair_gt }
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of a per-step series over the reporting window, averaged over seeds.
fn window_mean(runs: &[SeedRun], field: impl Fn(&SeedRun, usize) -> f64) -> f64 {
    mean(runs.iter().map(|run| {
        let idx: Vec<usize> = run
            .series
            .t
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= WINDOW.0 && t <= WINDOW.1)
            .map(|(i, _)| i)
            .collect();
        mean(idx.iter().map(|&i| field(run, i)))
    }))
}

fn final_mean(runs: &[SeedRun], field: impl Fn(&SeedRun, usize) -> f64) -> f64 {
    mean(runs.iter().map(|run| field(run, run.series.t.len() - 1)))
}

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("criterion {name}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_synthetic_convergence_to_the_fair_optimum() {
    let runs = synthetic_runs();
    let fitted_opt_fair = mean(runs.opt_fair.iter().map(|(ut, _)| *ut));
    let ut = window_mean(&runs.fairall, |r, i| r.series.ut_proxy[i]);
    let dpu = window_mean(&runs.fairall, |r, i| r.series.dpu[i]);
    let cfu = window_mean(&runs.fairall, |r, i| r.series.cfu[i].expect("synthetic"));
    let pass = (ut - fitted_opt_fair).abs() <= 0.02 && dpu <= 0.03 && cfu <= 0.05;
    verdict(
        "1 (convergence to fair optimum)",
        pass,
        &format!(
            "proxy utility {ut:.4} vs fitted reference {fitted_opt_fair:.4} (tol 0.02), \
             parity gap {dpu:.4} <= 0.03, counterfactual gap {cfu:.4} <= 0.05"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_unfair_reference_level() {
    let runs = synthetic_runs();
    let ut = window_mean(&runs.unfairlog, |r, i| r.series.ut_proxy[i]);
    let dpu = window_mean(&runs.unfairlog, |r, i| r.series.dpu[i]);
    let pass = (ut - 0.24).abs() <= 0.03 && (dpu - 0.31).abs() <= 0.04;
    verdict(
        "2 (unfair reference)",
        pass,
        &format!("proxy utility {ut:.4} in 0.24+-0.03, parity gap {dpu:.4} in 0.31+-0.04"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_tradeoff_dissolves_under_ground_truth() {
    let runs = synthetic_runs();
    let gt_fair = final_mean(&runs.fairall, |r, i| r.series.ut_gt[i].expect("synthetic"));
    let gt_unfair = final_mean(&runs.unfairlog, |r, i| r.series.ut_gt[i].expect("synthetic"));
    let dpu_fair = final_mean(&runs.fairall, |r, i| r.series.dpu[i]);
    let dpu_unfair = final_mean(&runs.unfairlog, |r, i| r.series.dpu[i]);
    let pass = (gt_fair - gt_unfair).abs() <= 0.02 && dpu_unfair - dpu_fair >= 0.20;
    verdict(
        "3 (no ground-truth trade-off)",
        pass,
        &format!(
            "ground-truth utilities {gt_fair:.4} vs {gt_unfair:.4} (tol 0.02); \
             parity gaps {dpu_fair:.4} vs {dpu_unfair:.4} (gap >= 0.20)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_counterfactual_separation_from_the_parity_baseline() {
    let runs = synthetic_runs();
    let cfu_fairlog = final_mean(&runs.fairlog, |r, i| r.series.cfu[i].expect("synthetic"));
    let cfu_fairall = final_mean(&runs.fairall, |r, i| r.series.cfu[i].expect("synthetic"));
    let pass = cfu_fairlog - cfu_fairall >= 0.10;
    verdict(
        "4 (counterfactual separation)",
        pass,
        &format!("counterfactual gaps {cfu_fairlog:.4} vs {cfu_fairall:.4} (diff >= 0.10)"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_reference_policy_endpoints() {
    let runs = synthetic_runs();
    let unfair_ut = mean(runs.opt_unfair.iter().map(|(u, _)| *u));
    let unfair_dpu = mean(runs.opt_unfair.iter().map(|(_, d)| *d));
    let fair_ut = mean(runs.opt_fair.iter().map(|(u, _)| *u));
    let fair_dpu = mean(runs.opt_fair.iter().map(|(_, d)| *d));
    let pass = (unfair_ut - 0.24).abs() <= 0.02
        && (unfair_dpu - 0.31).abs() <= 0.02
        && (fair_ut - 0.17).abs() <= 0.02
        && fair_dpu <= 0.02;
    verdict(
        "5 (reference policy endpoints)",
        pass,
        &format!(
            "unfair {unfair_ut:.4}/{unfair_dpu:.4} vs 0.24+-0.02/0.31+-0.02; \
             fair {fair_ut:.4} vs 0.17+-0.02, parity gap {fair_dpu:.4} <= 0.02"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_real_data_stretch_target() {
    let csv = Path::new("../../data/compas.csv");
    let schema = Path::new("../../data/compas.schema.toml");
    if !csv.exists() {
        verdict(
            "6 (real-data stretch target)",
            true,
            "SKIPPED - no pre-exported CSV at data/compas.csv (preprocessing is \
             externally supplied; see README)",
        );
        return;
    }
    let run_method = |method: Method| -> Vec<SeedRun> {
        let mut cfg = ExperimentConfig::for_method(method, "compas").unwrap();
        cfg.csv_path = Some(csv.to_path_buf());
        cfg.schema_path = Some(schema.to_path_buf());
        cfg.seeds = (0..10).collect();
        let dataset = experiment::load_dataset(&cfg).unwrap();
        let mut runs = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&s| scope.spawn(|| experiment::run_seed(&cfg, &dataset, s)))
                .collect();
            for h in handles {
                runs.push(h.join().expect("seed thread").expect("seed run"));
            }
        });
        runs
    };
    let fairall = run_method(Method::FairAllBoth);
    let fairlog = run_method(Method::FairLog);
    let unfairlog = run_method(Method::UnfairLog);
    let eff_ut = final_mean(&fairall, |r, i| r.series.eff_ut[i]);
    let eff_dpu = final_mean(&fairall, |r, i| r.series.eff_dpu[i]);
    let eff_ut_fairlog = final_mean(&fairlog, |r, i| r.series.eff_ut[i]);
    let eff_dpu_unfair = final_mean(&unfairlog, |r, i| r.series.eff_dpu[i]);
    let pass = (eff_ut - 0.062).abs() <= 0.020
        && (eff_dpu - 0.104).abs() <= 0.025
        && eff_ut > eff_ut_fairlog
        && eff_dpu_unfair > eff_dpu;
    verdict(
        "6 (real-data stretch target)",
        pass,
        &format!(
            "accumulated utility {eff_ut:.4} vs 0.062+-0.020, accumulated gap {eff_dpu:.4} \
             vs 0.104+-0.025, orderings {eff_ut:.4} > {eff_ut_fairlog:.4} and \
             {eff_dpu_unfair:.4} > {eff_dpu:.4}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// criterion 7: property suite (no training)
// ---------------------------------------------------------------------------

enum Net {
    Enc,
    Dec,
    Clf,
    XVar,
}

fn nudged(model: &FairVae, net: &Net, i: usize, h: f64) -> FairVae {
    let mut m = model.clone();
    match net {
        Net::Enc => m.encoder.nudge(i, h),
        Net::Dec => m.decoder.nudge(i, h),
        Net::Clf => m.classifier.as_mut().unwrap().nudge(i, h),
        Net::XVar => m.x_logvar.nudge(i, h),
    }
    m
}

/// Gradient check at perturbation 1e-3 and relative tolerance 1e-4.
fn max_gradient_error<F>(model: &FairVae, loss: F) -> f64
where
    F: Fn(&FairVae) -> (f64, VaeGrads),
{
    let h = 1e-3;
    let (_, grads) = loss(model);
    let mut worst: f64 = 0.0;
    let nets: Vec<(Net, Vec<f64>, usize)> = {
        let mut v = vec![
            (Net::Enc, grads.encoder.flat(), model.encoder.param_count()),
            (Net::Dec, grads.decoder.flat(), model.decoder.param_count()),
            (Net::XVar, grads.x_logvar.flat(), model.x_logvar.param_count()),
        ];
        if let (Some(buf), Some(clf)) = (&grads.classifier, &model.classifier) {
            v.push((Net::Clf, buf.flat(), clf.param_count()));
        }
        v
    };
    for (net, analytic, count) in nets {
        for i in 0..count {
            let fp = loss(&nudged(model, &net, i, h)).0;
            let fm = loss(&nudged(model, &net, i, -h)).0;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(((a - fd) / denom).abs());
        }
    }
    worst
}

#[test]
fn criterion_7_property_suite() {
    let schema = fairdec::data::FeatureSchema::synthetic();
    let semi = FairVae::semi_supervised(&schema, &[8], &[6], 2, 0.7, 5.0, 0.5, 42).unwrap();
    let unsup = FairVae::unsupervised(&schema, &[8], 2, 0.8, 43).unwrap();
    let labeled = Record::new(vec![0.6, -0.9], 1, Some(1)).with_decision(1, 0.35).unwrap();
    let labeled0 = Record::new(vec![-0.2, 0.4], -1, Some(0)).with_decision(1, 0.6).unwrap();
    let unlabeled = Record::new(vec![-0.3, 0.8], -1, Some(1)).with_decision(0, 0.2).unwrap();
    let batch = vec![
        Record::new(vec![0.5, -0.7], 1, Some(1)),
        Record::new(vec![-1.2, 0.3], -1, Some(0)),
    ];

    // gradient checks on all five loss operations
    let mut worst: f64 = 0.0;
    worst = worst.max(max_gradient_error(&unsup, |m| {
        losses::phase1_loss(m, &batch, 4242).unwrap()
    }));
    worst = worst.max(max_gradient_error(&semi, |m| {
        losses::labeled_elbo(m, &labeled, 311).unwrap()
    }));
    worst = worst.max(max_gradient_error(&semi, |m| {
        losses::ips_classification_loss(m, &labeled0).unwrap()
    }));
    worst = worst.max(max_gradient_error(&semi, |m| {
        losses::unlabeled_elbo(m, &unlabeled, 6, 12, 777).unwrap()
    }));
    let labeled_set = vec![labeled.clone(), labeled0.clone()];
    let unlabeled_set = vec![unlabeled.clone()];
    worst = worst.max(max_gradient_error(&semi, |m| {
        losses::phase2_objective(m, &labeled_set, &unlabeled_set, 5, 10, 909).unwrap()
    }));
    let gradients_ok = worst <= 1e-4;

    // Monte-Carlo mixture KL degenerate case within 3 standard errors of the
    // closed-form 0.5
    let (kl, se) = losses::mc_kl_mixture_with_stderr(
        &[0.0],
        &[1.0],
        &[1.0],
        &[1.0],
        0.0,
        1.0,
        100_000,
        2024,
    )
    .unwrap();
    let mc_ok = (kl - 0.5).abs() <= 3.0 * se;

    // counterfactual identity and involution, exact
    let mut cf_ok = true;
    for d in scm::sample_population(500, 7).unwrap() {
        let null = scm::counterfactual_of(&d, d.s).unwrap();
        let back =
            scm::counterfactual_of(&scm::counterfactual_of(&d, -d.s).unwrap(), d.s).unwrap();
        cf_ok &= null == d && back == d;
    }

    // IPS unbiasedness on a 4-record enumerable population: the expected
    // IPS-weighted loss over all 16 decision outcomes equals the
    // full-population unweighted loss
    let props = [0.2, 0.4, 0.7, 0.9];
    let features = [[0.3, -0.5], [1.2, 0.1], [-0.8, 0.9], [0.0, -1.4]];
    let labels = [1u8, 0, 1, 0];
    let groups = [1i8, -1, 1, -1];
    let mut per_record = [0.0f64; 4];
    for i in 0..4 {
        let rec = Record::new(features[i].to_vec(), groups[i], Some(labels[i]))
            .with_decision(1, props[i])
            .unwrap();
        let (weighted, _) = losses::ips_classification_loss(&semi, &rec).unwrap();
        per_record[i] = weighted;
    }
    let mut expected = 0.0;
    for outcome in 0..16u32 {
        let mut prob = 1.0;
        let mut loss = 0.0;
        for i in 0..4 {
            if outcome & (1 << i) != 0 {
                prob *= props[i];
                loss += per_record[i] / 4.0;
            } else {
                prob *= 1.0 - props[i];
            }
        }
        expected += prob * loss;
    }
    let full_population: f64 = (0..4).map(|i| per_record[i] * props[i] / 4.0).sum();
    let ips_ok = (expected - full_population).abs() <= 1e-10;

    // temporal statistics equal a brute-force two-pass computation on 1000
    // random series
    let mut temporal_ok = true;
    let mut trng = rng::from_seed(505);
    use rand::Rng;
    for _ in 0..1000 {
        let len = trng.random_range(2..60);
        let series: Vec<f64> = (0..len).map(|_| trng.random_range(-3.0..3.0)).collect();
        let t1 = trng.random_range(0..len - 1);
        let t2 = trng.random_range(t1 + 1..len);
        let (tv, mu) = metrics::temporal_stats(&series, t1, t2).unwrap();
        let w = &series[t1..=t2];
        let bf_mu = w.iter().sum::<f64>() / w.len() as f64;
        let bf_tv =
            (w.iter().map(|v| (v - bf_mu) * (v - bf_mu)).sum::<f64>() / w.len() as f64).sqrt();
        temporal_ok &= (mu - bf_mu).abs() < 1e-12 && (tv - bf_tv).abs() < 1e-12;
    }

    // byte-identical reruns per seed
    let dir = std::env::temp_dir().join(format!("fairdec-acc7-{}", std::process::id()));
    let mut cfg = ExperimentConfig::for_method(Method::FairAllBoth, "synthetic").unwrap();
    cfg.steps = 3;
    cfg.batch_size = 16;
    cfg.warmup_samples = 16;
    cfg.warmup_steps = 2;
    cfg.phase1_epochs = 2;
    cfg.vae_arch = vec![8];
    cfg.clf_arch = vec![6];
    cfg.n_z = 4;
    cfg.mc_k = 8;
    cfg.seeds = vec![0];
    cfg.out_dir = dir.join("a");
    experiment::run_experiment(&cfg).unwrap();
    cfg.out_dir = dir.join("b");
    experiment::run_experiment(&cfg).unwrap();
    let rerun_ok = std::fs::read(dir.join("a/metrics.csv")).unwrap()
        == std::fs::read(dir.join("b/metrics.csv")).unwrap();
    std::fs::remove_dir_all(&dir).ok();

    let pass = gradients_ok && mc_ok && cf_ok && ips_ok && temporal_ok && rerun_ok;
    verdict(
        "7 (property suite)",
        pass,
        &format!(
            "gradient check worst rel. err {worst:.2e} <= 1e-4: {gradients_ok}; \
             mixture KL {kl:.4} within 3se of 0.5: {mc_ok}; counterfactual \
             identity/involution exact: {cf_ok}; IPS enumeration gap \
             {:.2e} <= 1e-10: {ips_ok}; temporal stats vs brute force: {temporal_ok}; \
             byte-identical reruns: {rerun_ok}",
            (expected - full_population).abs()
        ),
    );
    assert!(pass);
}

#[test]
fn acceptance_model_invariants_hold_on_shared_runs() {
    // cheap cross-checks over the shared runs: metric ranges and the
    // labeled-count bookkeeping on a fresh miniature run
    let runs = synthetic_runs();
    for run in runs.fairall.iter().chain(&runs.unfairlog).chain(&runs.fairlog) {
        for i in 0..run.series.t.len() {
            assert!((0.0..=1.0).contains(&run.series.dpu[i]));
            if let Some(cfu) = run.series.cfu[i] {
                assert!((0.0..=1.0).contains(&cfu));
            }
            assert!((-0.5..=0.5).contains(&run.series.ut_proxy[i]));
        }
    }
    assert_eq!(runs.dataset.test.len(), 5000);
}
