//! Per-seed diagnostics of phase-1 quality and warmup state.

use fairdec::config::{ExperimentConfig, Method};
use fairdec::data::{CandidateBatch, Dataset, Stream};
use fairdec::experiment;
use fairdec::policy::{self, Policy};
use fairdec::rng;
use fairdec::vae::FairVae;

fn main() {
    let cfg = ExperimentConfig::for_method(Method::FairAllBoth, "synthetic").unwrap();
    let dataset = Dataset::synthetic(cfg.data_seed).unwrap();
    for seed in 0..5u64 {
        let phase1 = experiment::train_phase1(&cfg, &dataset, seed).unwrap();
        // posterior stats over the validation split
        let mut sig = vec![0.0; cfg.latent_dim];
        let mut mu_abs = vec![0.0; cfg.latent_dim];
        for r in &dataset.validation {
            let (mu, lv) = phase1.encode(r.x(), r.s_f64(), None).unwrap();
            for l in 0..cfg.latent_dim {
                sig[l] += (lv[l] / 2.0).exp();
                mu_abs[l] += mu[l].abs();
            }
        }
        let n = dataset.validation.len() as f64;
        sig.iter_mut().for_each(|v| *v /= n);
        mu_abs.iter_mut().for_each(|v| *v /= n);

        let model = FairVae::transfer(
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
        let warmup = policy::decide_batch(
            &initial,
            &warmup_batch,
            None,
            rng::derive(seed, "warmup-decide", 0),
        )
        .unwrap();
        let labeled: Vec<_> = warmup.iter().filter(|r| r.y_tilde().is_some()).collect();
        let positives = labeled.iter().filter(|r| r.y_tilde() == Some(1)).count();

        // train warmup like the harness does
        let mut model = model;
        experiment_train(&cfg, &mut model, &warmup, seed);
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
        // state after warmup: mean decoder-u prob and policy prob on fresh batch
        let probe = stream.take(256);
        let mut rng = rng::from_seed(1);
        let mut mean_dec = 0.0;
        let mut mean_q = 0.0;
        let mut mean_pi = 0.0;
        for r in &probe {
            use rand::Rng;
            let q = model.classify(r.x(), r.s_f64()).unwrap();
            let u = f64::from(rng.random::<f64>() < q);
            let (mu, lv) = model.encode(r.x(), r.s_f64(), Some(u)).unwrap();
            let eps: Vec<f64> = (0..model.latent)
                .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                .collect();
            let z = FairVae::reparameterize(&mu, &lv, &eps);
            mean_dec += model.decode_u_prob(&z, r.s_f64()).unwrap();
            mean_q += q;
            mean_pi += pol.eval_prob(r, Some(&model), 4, &mut rng).unwrap();
        }
        println!(
            "seed {seed}: enc_sigma={sig:.3?} mu_abs={mu_abs:.3?} warmup_labeled={} \
             positives={} mean_dec_u={:.3} mean_clf_q={:.3} mean_pi={:.3}",
            labeled.len(),
            positives,
            mean_dec / 256.0,
            mean_q / 256.0,
            mean_pi / 256.0
        );
    }
}

fn experiment_train(
    cfg: &ExperimentConfig,
    model: &mut FairVae,
    warmup: &[fairdec::data::Record],
    seed: u64,
) {
    use fairdec::vae::losses;
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..warmup.len()).collect();
    let chunk_size = warmup.len().div_ceil(3);
    for epoch in 0..cfg.warmup_steps {
        order.shuffle(&mut rng::stream(
            rng::derive(seed, "warmup-pass", 0),
            "pass-order",
            epoch as u64,
        ));
        for (b, chunk) in order.chunks(chunk_size).enumerate() {
            let rows: Vec<_> = chunk.iter().map(|&i| warmup[i].clone()).collect();
            let labeled: Vec<_> =
                rows.iter().filter(|r| r.y_tilde().is_some()).cloned().collect();
            let unlabeled: Vec<_> =
                rows.iter().filter(|r| r.y_tilde().is_none()).cloned().collect();
            let loss_seed = rng::derive(
                rng::derive(seed, "warmup-pass", 0),
                "pass-loss",
                (epoch * 8 + b) as u64,
            );
            let (_, grads) = losses::phase2_objective(
                model,
                &labeled,
                &unlabeled,
                cfg.n_z,
                cfg.mc_k,
                loss_seed,
            )
            .unwrap();
            model.encoder.adam_step(&grads.encoder, cfg.lr).unwrap();
            model.decoder.adam_step(&grads.decoder, cfg.lr).unwrap();
            if let (Some(clf), Some(g)) = (model.classifier.as_mut(), grads.classifier.as_ref())
            {
                clf.adam_step(g, cfg.lr).unwrap();
            }
        }
    }
}
