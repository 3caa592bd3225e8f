//! Online-loop instrumentation: track classifier and decoder-head
//! informativeness about the true proxy label across time for one seed.

use fairdec::config::{ExperimentConfig, Method};
use fairdec::data::{CandidateBatch, Dataset, Record, Stream};
use fairdec::experiment;
use fairdec::policy::{self, Policy};
use fairdec::rng;
use fairdec::vae::losses;
use fairdec::vae::FairVae;
use rand::Rng;

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
    cov / (va * vb).sqrt().max(1e-12)
}

fn probe(model: &FairVae, pol: &Policy, test: &[Record], tag: &str) {
    let mut rng = rng::from_seed(9);
    let (mut qs, mut decs, mut pis, mut ys) = (vec![], vec![], vec![], vec![]);
    for r in test.iter().take(800) {
        let s = r.s_f64();
        let q = model.classify(r.x(), s).unwrap();
        let u = f64::from(rng.random::<f64>() < q);
        let (mu, lv) = model.encode(r.x(), s, Some(u)).unwrap();
        let eps: Vec<f64> = (0..model.latent)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let z = FairVae::reparameterize(&mu, &lv, &eps);
        decs.push(model.decode_u_prob(&z, s).unwrap());
        qs.push(q);
        pis.push(pol.eval_prob(r, Some(model), 4, &mut rng).unwrap());
        ys.push(f64::from(r.oracle_label().unwrap()));
    }
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    println!(
        "{tag}: corr(q,y)={:.3} corr(dec,y)={:.3} corr(pi,y)={:.3} std_q={:.3} std_dec={:.3} std_pi={:.3} mean_dec={:.3}",
        corr(&qs, &ys),
        corr(&decs, &ys),
        corr(&pis, &ys),
        std(&qs),
        std(&decs),
        std(&pis),
        decs.iter().sum::<f64>() / decs.len() as f64,
    );
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let cfg = ExperimentConfig::for_method(Method::FairAllBoth, "synthetic").unwrap();
    let dataset = Dataset::synthetic(cfg.data_seed).unwrap();
    let phase1 = experiment::train_phase1(&cfg, &dataset, seed).unwrap();
    let mut model = FairVae::transfer(
        &phase1,
        &cfg.clf_arch,
        cfg.beta,
        cfg.alpha,
        cfg.cost,
        rng::derive(seed, "transfer", 0),
    )
    .unwrap();
    let mut stream = Stream::new(
        dataset.stream_pool.clone(),
        cfg.batch_size,
        rng::derive(seed, "stream", 0),
        &dataset.name,
    )
    .unwrap();
    let initial = Policy::initial(cfg.initial_policy, &dataset.name).unwrap();
    let warmup_batch = CandidateBatch {
        t: 0,
        records: stream.take(cfg.warmup_samples),
        provenance: "diag".into(),
    };
    let warmup =
        policy::decide_batch(&initial, &warmup_batch, None, rng::derive(seed, "warmup-decide", 0))
            .unwrap();
    train_pass(&cfg, &mut model, &warmup, cfg.warmup_steps, rng::derive(seed, "warmup-pass", 0));
    let mut pol = policy::fresh_latent_policy(
        &model,
        cfg.policy_variant,
        rng::derive(seed, "policy-warmup", 0),
    )
    .unwrap();
    policy::refresh_latent_policy(
        &mut pol,
        &model,
        &warmup,
        cfg.warmup_steps,
        cfg.lr,
        cfg.cost,
        rng::derive(seed, "policy-warmup", 0),
    )
    .unwrap();
    probe(&model, &pol, &dataset.test, "warmup");
    for t in 0..60 {
        let batch = stream.next_batch(t);
        let decided =
            policy::decide_batch(&pol, &batch, Some(&model), rng::derive(seed, "decide", 0))
                .unwrap();
        let labeled = decided.iter().filter(|r| r.y_tilde().is_some()).count();
        train_pass(&cfg, &mut model, &decided, 1, rng::derive(seed, "online-pass", t as u64));
        policy::refresh_latent_policy(
            &mut pol,
            &model,
            &decided,
            1,
            cfg.lr,
            cfg.cost,
            rng::derive(seed, "policy-refresh", t as u64),
        )
        .unwrap();
        if t % 10 == 0 || t < 4 {
            print!("t={t:3} labeled={labeled:2} ");
            probe(&model, &pol, &dataset.test, "");
        }
    }
}

fn train_pass(
    cfg: &ExperimentConfig,
    model: &mut FairVae,
    records: &[Record],
    epochs: usize,
    seed: u64,
) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let chunk_size = records.len().div_ceil(3);
    for epoch in 0..epochs {
        order.shuffle(&mut rng::stream(seed, "pass-order", epoch as u64));
        for (b, chunk) in order.chunks(chunk_size).enumerate() {
            let rows: Vec<_> = chunk.iter().map(|&i| records[i].clone()).collect();
            let labeled: Vec<_> =
                rows.iter().filter(|r| r.y_tilde().is_some()).cloned().collect();
            let unlabeled: Vec<_> =
                rows.iter().filter(|r| r.y_tilde().is_none()).cloned().collect();
            let loss_seed = rng::derive(seed, "pass-loss", (epoch * 8 + b) as u64);
            let (_, grads) =
                losses::phase2_objective(model, &labeled, &unlabeled, cfg.n_z, cfg.mc_k, loss_seed)
                    .unwrap();
            model.encoder.adam_step(&grads.encoder, cfg.lr).unwrap();
            model.decoder.adam_step(&grads.decoder, cfg.lr).unwrap();
            if let (Some(clf), Some(g)) = (model.classifier.as_mut(), grads.classifier.as_ref()) {
                clf.adam_step(g, cfg.lr).unwrap();
            }
        }
    }
}
