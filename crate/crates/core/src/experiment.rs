//! Orchestration of the two-phase pipeline across methods, datasets and
//! seeds: offline pre-training, transfer, warmup, the online decision loop,
//! per-step evaluation, and run summaries.

use crate::config::{ExperimentConfig, Method};
use crate::data::{CandidateBatch, Dataset, Record, Stream};
use crate::metrics::{self, LabelSource, MetricSeries};
use crate::nn::Mlp;
use crate::policy::{self, Policy};
use crate::rng;
use crate::vae::losses::{self, VaeGrads};
use crate::vae::{FairVae, VaeSnapshot};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Everything a finished seed run leaves behind.
pub struct SeedRun {
    pub seed: u64,
    pub series: MetricSeries,
    pub model: Option<FairVae>,
    pub policy: Policy,
}

/// Load the dataset named by the config. Real datasets are pre-exported
/// CSVs with schema sidecars; nothing is fetched from the network.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    if config.dataset == "synthetic" {
        return Dataset::synthetic(config.data_seed);
    }
    let (csv, schema) = match (&config.csv_path, &config.schema_path) {
        (Some(c), Some(s)) => (c.clone(), s.clone()),
        _ => {
            return Err(Error::Config(format!(
                "dataset '{}' needs csv_path and schema_path pointing at a pre-exported \
                 CSV and its schema sidecar",
                config.dataset
            )))
        }
    };
    Dataset::from_csv(
        &config.dataset,
        &csv,
        &schema,
        config.splits,
        config.phase1_fraction,
        config.data_seed,
    )
}

fn apply_grads(model: &mut FairVae, grads: &VaeGrads, lr: f64) -> Result<()> {
    model.encoder.adam_step(&grads.encoder, lr)?;
    model.decoder.adam_step(&grads.decoder, lr)?;
    model.x_logvar.adam_step(&grads.x_logvar, lr)?;
    if let (Some(clf), Some(g)) = (model.classifier.as_mut(), grads.classifier.as_ref()) {
        clf.adam_step(g, lr)?;
    }
    Ok(())
}

/// Offline unsupervised pre-training on the unlabeled pool.
pub fn train_phase1(config: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<FairVae> {
    let mut model = FairVae::unsupervised(
        &dataset.schema,
        &config.vae_arch,
        config.latent_dim,
        config.phase1_beta,
        rng::derive(seed, "phase1-init", 0),
    )?;
    let pool = &dataset.phase1_pool;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..config.phase1_epochs {
        order.shuffle(&mut rng::stream(seed, "phase1-shuffle", epoch as u64));
        for (b, chunk) in order.chunks(config.phase1_batch).enumerate() {
            let batch: Vec<Record> = chunk.iter().map(|&i| pool[i].clone()).collect();
            let loss_seed = rng::derive(seed, "phase1-loss", (epoch * 100_000 + b) as u64);
            let (_, grads) = losses::phase1_loss(&model, &batch, loss_seed)?;
            apply_grads(&mut model, &grads, config.phase1_lr)?;
        }
    }
    Ok(model)
}

/// Split a decided batch into labeled and unlabeled parts.
fn partition(records: &[Record]) -> (Vec<Record>, Vec<Record>) {
    let (labeled, unlabeled): (Vec<Record>, Vec<Record>) =
        records.iter().cloned().partition(Record::is_labeled);
    (labeled, unlabeled)
}

/// One training pass over a record set: three mini-batches per epoch, one
/// optimizer step each, dispatched by method.
#[allow(clippy::too_many_arguments)]
fn train_pass(
    method: Method,
    model: Option<&mut FairVae>,
    baseline: Option<&mut Policy>,
    records: &[Record],
    config: &ExperimentConfig,
    epochs: usize,
    seed: u64,
) -> Result<()> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    let chunk_size = records.len().div_ceil(3);
    match method {
        Method::FairAllBoth | Method::FairAllOnline => {
            let model = model.expect("semi-supervised methods carry a model");
            for epoch in 0..epochs {
                order.shuffle(&mut rng::stream(seed, "pass-order", epoch as u64));
                for (b, chunk) in order.chunks(chunk_size).enumerate() {
                    let rows: Vec<Record> = chunk.iter().map(|&i| records[i].clone()).collect();
                    let (labeled, unlabeled) = partition(&rows);
                    let loss_seed = rng::derive(seed, "pass-loss", (epoch * 8 + b) as u64);
                    let (_, grads) = losses::phase2_objective(
                        model,
                        &labeled,
                        &unlabeled,
                        config.n_z,
                        config.mc_k,
                        loss_seed,
                    )?;
                    apply_grads(model, &grads, config.lr)?;
                }
            }
        }
        Method::FairLab => {
            let model = model.expect("semi-supervised methods carry a model");
            for epoch in 0..epochs {
                order.shuffle(&mut rng::stream(seed, "pass-order", epoch as u64));
                for (b, chunk) in order.chunks(chunk_size).enumerate() {
                    let rows: Vec<Record> = chunk.iter().map(|&i| records[i].clone()).collect();
                    let (labeled, _) = partition(&rows);
                    if labeled.is_empty() {
                        continue;
                    }
                    let loss_seed = rng::derive(seed, "pass-loss", (epoch * 8 + b) as u64);
                    let (_, grads) = losses::ips_labeled_loss(model, &labeled, loss_seed)?;
                    apply_grads(model, &grads, config.lr)?;
                }
            }
        }
        Method::FairLog | Method::UnfairLog => {
            let policy = baseline.expect("logistic methods carry their policy");
            for epoch in 0..epochs {
                order.shuffle(&mut rng::stream(seed, "pass-order", epoch as u64));
                for chunk in order.chunks(chunk_size) {
                    let rows: Vec<Record> = chunk.iter().map(|&i| records[i].clone()).collect();
                    let (labeled, _) = partition(&rows);
                    policy::baseline_update(policy, &labeled, &rows, config.cost, config.lr)?;
                }
            }
        }
    }
    Ok(())
}

/// Run one seed of the configured experiment end to end.
pub fn run_seed(config: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<SeedRun> {
    let method = config.method;
    let mut model: Option<FairVae> = if method.uses_phase1() {
        let phase1 = train_phase1(config, dataset, seed)?;
        Some(FairVae::transfer(
            &phase1,
            &config.clf_arch,
            config.beta,
            config.alpha,
            config.cost,
            rng::derive(seed, "transfer", 0),
        )?)
    } else if method.uses_vae() {
        Some(FairVae::semi_supervised(
            &dataset.schema,
            &config.vae_arch,
            &config.clf_arch,
            config.latent_dim,
            config.beta,
            config.alpha,
            config.cost,
            rng::derive(seed, "phase2-init", 0),
        )?)
    } else {
        None
    };

    let mut stream = Stream::new(
        dataset.stream_pool.clone(),
        config.batch_size,
        rng::derive(seed, "stream", 0),
        &dataset.name,
    )?;

    // warmup: label a fixed sample with the initial policy, then train
    let initial = match config.initial_rates {
        Some((rate_pos, rate_neg)) => Policy::Initial { rate_pos, rate_neg },
        None => Policy::initial(config.initial_policy, &dataset.name)?,
    };
    let warmup_batch = CandidateBatch {
        t: 0,
        records: stream.take(config.warmup_samples),
        provenance: format!("{}-warmup", dataset.name),
    };
    let warmup =
        policy::decide_batch(&initial, &warmup_batch, None, rng::derive(seed, "warmup-decide", 0))?;

    let mut baseline: Option<Policy> = match method {
        Method::FairLog | Method::UnfairLog => {
            let net = Mlp::init(
                &config.clf_arch,
                dataset.schema.encoded_width() + 1,
                1,
                rng::derive(seed, "baseline-init", 0),
            )?;
            Some(Policy::Logit {
                net,
                dpu_penalty: if method == Method::FairLog { config.lambda } else { 0.0 },
            })
        }
        _ => None,
    };

    train_pass(
        method,
        model.as_mut(),
        baseline.as_mut(),
        &warmup,
        config,
        config.warmup_steps,
        rng::derive(seed, "warmup-pass", 0),
    )?;

    // the policy is retrained from scratch on every refresh (a new policy
    // per time step); a labeled-targets policy keeps its predecessor when a
    // step reveals no labels
    let retrain_policy = |model: &FairVae,
                          records: &[Record],
                          epochs: usize,
                          seed: u64|
     -> Result<Option<Policy>> {
        if config.policy_variant == policy::LatentVariant::Label
            && !records.iter().any(Record::is_labeled)
        {
            return Ok(None);
        }
        policy::train_policy_from_latent(
            model,
            records,
            config.policy_variant,
            epochs,
            config.lr,
            seed,
        )
        .map(Some)
    };

    let mut latent_policy: Option<Policy> = if method.uses_vae() {
        let m = model.as_ref().expect("model exists");
        match retrain_policy(m, &warmup, config.warmup_steps, rng::derive(seed, "policy-warmup", 0))? {
            Some(p) => Some(p),
            None => Some(policy::fresh_latent_policy(
                m,
                config.policy_variant,
                rng::derive(seed, "policy-warmup", 0),
            )?),
        }
    } else {
        None
    };

    let mut series = MetricSeries {
        method: method.name().to_string(),
        seed,
        ..Default::default()
    };
    let mut history: Vec<Vec<Record>> = Vec::with_capacity(config.steps);
    let mut labeled_seen = warmup.iter().filter(|r| r.y_tilde().is_some()).count();
    let mut accepted_seen = warmup.iter().filter(|r| r.d() == Some(1)).count();

    for t in 0..config.steps {
        let batch = stream.next_batch(t);
        let current: &Policy = latent_policy
            .as_ref()
            .or(baseline.as_ref())
            .expect("every method carries a policy");
        let decided =
            policy::decide_batch(current, &batch, model.as_ref(), rng::derive(seed, "decide", 0))?;
        labeled_seen += decided.iter().filter(|r| r.y_tilde().is_some()).count();
        accepted_seen += decided.iter().filter(|r| r.d() == Some(1)).count();
        debug_assert_eq!(labeled_seen, accepted_seen);

        train_pass(
            method,
            model.as_mut(),
            baseline.as_mut(),
            &decided,
            config,
            1,
            rng::derive(seed, "online-pass", t as u64),
        )?;

        if latent_policy.is_some() {
            if let Some(p) = retrain_policy(
                model.as_ref().expect("model exists"),
                &decided,
                config.policy_epochs,
                rng::derive(seed, "policy-refresh", t as u64),
            )? {
                latent_policy = Some(p);
            }
        }

        history.push(decided);

        if t % config.eval_every == 0 || t + 1 == config.steps {
            let current: &Policy =
                latent_policy.as_ref().or(baseline.as_ref()).expect("policy exists");
            let eval_seed = rng::derive(seed, "eval", t as u64);
            let probs = metrics::eval_probs(
                current,
                &dataset.test,
                model.as_ref(),
                metrics::EVAL_SAMPLES,
                eval_seed,
            )?;
            let ut_proxy =
                metrics::utility_from_probs(&probs, &dataset.test, LabelSource::Proxy, config.cost)?;
            let ut_gt = dataset
                .test
                .first()
                .and_then(|r| r.ground_truth())
                .map(|_| {
                    metrics::utility_from_probs(
                        &probs,
                        &dataset.test,
                        LabelSource::GroundTruth,
                        config.cost,
                    )
                })
                .transpose()?;
            let dpu = metrics::dpu_from_probs(&probs, &dataset.test)?;
            let cfu = dataset
                .test_cf
                .as_ref()
                .map(|cf| -> Result<f64> {
                    let probs_cf = metrics::eval_probs(
                        current,
                        cf,
                        model.as_ref(),
                        metrics::EVAL_SAMPLES,
                        rng::derive(eval_seed, "cf", 0),
                    )?;
                    metrics::cfu_from_probs(&probs, &probs_cf)
                })
                .transpose()?;
            let (eff_ut, eff_dpu) = metrics::effective_stats(&history, t + 1, config.cost)?;
            series.t.push(t);
            series.ut_proxy.push(ut_proxy);
            series.ut_gt.push(ut_gt);
            series.dpu.push(dpu);
            series.cfu.push(cfu);
            series.eff_ut.push(eff_ut);
            series.eff_dpu.push(eff_dpu);
        }
    }

    let final_policy = latent_policy.or(baseline).expect("every method carries a policy");
    Ok(SeedRun { seed, series, model, policy: final_policy })
}

/// Per-seed outcome of a full experiment.
pub struct ExperimentOutput {
    pub runs: Vec<SeedRun>,
    pub failures: Vec<(u64, String)>,
    pub out_dir: PathBuf,
}

/// Run all configured seeds (in parallel), write `metrics.csv` and final
/// snapshots under the output directory. A failing seed aborts with a
/// structured diagnostic without taking the other seeds down.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let dataset = load_dataset(config)?;
    std::fs::create_dir_all(&config.out_dir)?;

    let mut results: Vec<(u64, Result<SeedRun>)> = Vec::new();
    let dataset_ref = &dataset;
    std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| (seed, scope.spawn(move || run_seed(config, dataset_ref, seed))))
            .collect();
        for (seed, handle) in handles {
            let joined = handle
                .join()
                .map_err(|_| Error::Numeric(format!("seed {seed} panicked")))
                .and_then(|r| r);
            results.push((seed, joined));
        }
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(run) => runs.push(run),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }

    let series: Vec<&MetricSeries> = runs.iter().map(|r| &r.series).collect();
    write_metrics_csv(&config.out_dir.join("metrics.csv"), &series)?;

    let snap_dir = config.out_dir.join("snapshots");
    std::fs::create_dir_all(&snap_dir)?;
    for run in &runs {
        let snap = RunSnapshot {
            method: config.method.name().to_string(),
            seed: run.seed,
            t: config.steps,
            model: run.model.as_ref().map(VaeSnapshot::from),
            policy: run.policy.clone(),
        };
        let path = snap_dir.join(format!(
            "{}_seed{}_t{}.json",
            config.method.name(),
            run.seed,
            config.steps
        ));
        std::fs::write(&path, serde_json::to_vec(&snap).map_err(json_err)?)?;
    }
    Ok(ExperimentOutput { runs, failures, out_dir: config.out_dir.clone() })
}

/// Snapshot of one finished run, keyed by (method, seed, t).
#[derive(Serialize, Deserialize)]
pub struct RunSnapshot {
    pub method: String,
    pub seed: u64,
    pub t: usize,
    pub model: Option<VaeSnapshot>,
    pub policy: Policy,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Write the per-step metric rows of several runs, sorted by (seed, t).
pub fn write_metrics_csv(path: &Path, series: &[&MetricSeries]) -> Result<()> {
    let mut sorted: Vec<&&MetricSeries> = series.iter().collect();
    sorted.sort_by_key(|s| s.seed);
    let mut out = String::from("method,seed,t,ut_proxy,ut_gt,dpu,cfu,eff_ut,eff_dpu\n");
    for s in sorted {
        for i in 0..s.t.len() {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.6},{},{:.6},{:.6}\n",
                s.method,
                s.seed,
                s.t[i],
                s.ut_proxy[i],
                fmt_opt(s.ut_gt[i]),
                s.dpu[i],
                fmt_opt(s.cfu[i]),
                s.eff_ut[i],
                s.eff_dpu[i],
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// One metric series read back from disk.
#[derive(Clone, Debug, Default)]
pub struct LoadedSeries {
    pub t: Vec<usize>,
    pub ut_proxy: Vec<f64>,
    pub dpu: Vec<f64>,
    pub eff_ut: Vec<f64>,
    pub eff_dpu: Vec<f64>,
}

/// Read every metrics.csv under the given run directories, grouped by
/// (method, seed).
pub fn load_run_series(
    dirs: &[PathBuf],
) -> Result<(BTreeMap<(String, u64), LoadedSeries>, Vec<String>)> {
    let mut grouped: BTreeMap<(String, u64), LoadedSeries> = BTreeMap::new();
    let mut warnings = Vec::new();
    for dir in dirs {
        let path = dir.join("metrics.csv");
        if !path.exists() {
            warnings.push(format!("missing {}", path.display()));
            continue;
        }
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| Error::Parse { row: 0, msg: e.to_string() })?;
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?;
            let get = |j: usize| row.get(j).unwrap_or("");
            let parse = |j: usize| -> Result<f64> {
                get(j).parse().map_err(|_| Error::Parse {
                    row: i + 1,
                    msg: format!("bad number '{}' in {}", get(j), path.display()),
                })
            };
            let key = (
                get(0).to_string(),
                get(1).parse::<u64>().map_err(|_| Error::Parse {
                    row: i + 1,
                    msg: "bad seed".into(),
                })?,
            );
            let entry = grouped.entry(key).or_default();
            entry.t.push(get(2).parse().map_err(|_| Error::Parse {
                row: i + 1,
                msg: "bad t".into(),
            })?);
            entry.ut_proxy.push(parse(3)?);
            entry.dpu.push(parse(5)?);
            entry.eff_ut.push(parse(7)?);
            entry.eff_dpu.push(parse(8)?);
        }
    }
    Ok((grouped, warnings))
}

/// Across-seed mean/std of one metric, scaled by 100 and formatted the way
/// the result tables print them.
#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub mean_x100: f64,
    pub std_x100: f64,
    pub formatted: String,
}

pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Summarize runs: effective metrics at the final step plus temporal
/// variance and mean over the window, per method, mean (std) x100.
pub fn summarize_runs(dirs: &[PathBuf], t1: usize, t2: usize) -> Result<Summary> {
    let (grouped, warnings) = load_run_series(dirs)?;
    if grouped.is_empty() {
        return Err(Error::Contract("no completed runs found".into()));
    }
    let mut per_method: BTreeMap<String, Vec<&LoadedSeries>> = BTreeMap::new();
    for ((method, _), series) in &grouped {
        per_method.entry(method.clone()).or_default().push(series);
    }
    let mut rows = Vec::new();
    for (method, runs) in per_method {
        let mut eff_ut = Vec::new();
        let mut eff_dpu = Vec::new();
        let mut tv_ut = Vec::new();
        let mut mu_ut = Vec::new();
        let mut tv_dpu = Vec::new();
        let mut mu_dpu = Vec::new();
        for run in runs {
            if let (Some(u), Some(d)) = (run.eff_ut.last(), run.eff_dpu.last()) {
                eff_ut.push(*u);
                eff_dpu.push(*d);
            }
            let idx: Vec<usize> = run
                .t
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= t1 && t <= t2)
                .map(|(i, _)| i)
                .collect();
            if idx.len() >= 2 {
                let w_ut: Vec<f64> = idx.iter().map(|&i| run.ut_proxy[i]).collect();
                let w_dpu: Vec<f64> = idx.iter().map(|&i| run.dpu[i]).collect();
                let (tv, mu) = metrics::temporal_stats(&w_ut, 0, w_ut.len() - 1)?;
                tv_ut.push(tv);
                mu_ut.push(mu);
                let (tv, mu) = metrics::temporal_stats(&w_dpu, 0, w_dpu.len() - 1)?;
                tv_dpu.push(tv);
                mu_dpu.push(mu);
            }
        }
        for (metric, values) in [
            ("eff_ut", eff_ut),
            ("eff_dpu", eff_dpu),
            ("tv_ut", tv_ut),
            ("mu_ut", mu_ut),
            ("tv_dpu", tv_dpu),
            ("mu_dpu", mu_dpu),
        ] {
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            rows.push(SummaryRow {
                method: method.clone(),
                metric: metric.to_string(),
                mean_x100: 100.0 * mean,
                std_x100: 100.0 * std,
                formatted: format!("{:.1} ({:.1})", 100.0 * mean, 100.0 * std),
            });
        }
    }
    Ok(Summary { rows, warnings })
}

/// Write a summary as CSV.
pub fn write_summary_csv(path: &Path, summary: &Summary) -> Result<()> {
    let mut out = String::from("method,metric,mean_x100,std_x100,formatted\n");
    for r in &summary.rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},\"{}\"\n",
            r.method, r.metric, r.mean_x100, r.std_x100, r.formatted
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
