//! Inspect latent-policy training dynamics: liveness of first-layer units
//! and target-tracking across warmup epochs.

use fairdec::config::{ExperimentConfig, Method};
use fairdec::data::{CandidateBatch, Dataset, Stream};
use fairdec::experiment;
use fairdec::policy::{self, Policy};
use fairdec::rng;
use fairdec::scm::sigmoid;
use fairdec::vae::FairVae;
use rand::Rng;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let cfg = ExperimentConfig::for_method(Method::FairAllBoth, "synthetic").unwrap();
    let dataset = Dataset::synthetic(cfg.data_seed).unwrap();
    let phase1 = experiment::train_phase1(&cfg, &dataset, seed).unwrap();
    let model = FairVae::transfer(
        &phase1,
        &cfg.clf_arch,
        cfg.beta,
        cfg.alpha,
        cfg.cost,
        rng::derive(seed, "transfer", 0),
    )
    .unwrap();
    // skip VAE warmup: feed the policy the trained phase-1 latent directly
    // to isolate the policy optimization itself; targets = decoder head
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

    let mut pol = policy::fresh_latent_policy(
        &model,
        cfg.policy_variant,
        rng::derive(seed, "policy-warmup", 0),
    )
    .unwrap();
    for epoch in 0..cfg.warmup_steps {
        policy::refresh_latent_policy(
            &mut pol,
            &model,
            &warmup,
            1,
            cfg.lr,
            cfg.cost,
            rng::derive(rng::derive(seed, "policy-warmup", 0), "sub", epoch as u64),
        )
        .unwrap();
        if epoch % 10 == 0 || epoch == cfg.warmup_steps - 1 {
            let Policy::Latent { net, .. } = &pol else { unreachable!() };
            // liveness of first layer over the warmup latents
            let mut rng2 = rng::from_seed(4);
            let l0 = &net.layers()[0];
            let mut alive = vec![false; l0.out_dim];
            let mut pis = vec![];
            for r in &warmup {
                let s = r.s_f64();
                let q = model.classify(r.x(), s).unwrap();
                let u = f64::from(rng2.random::<f64>() < q);
                let (mu, lv) = model.encode(r.x(), s, Some(u)).unwrap();
                let eps: Vec<f64> = (0..model.latent)
                    .map(|_| {
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng2)
                    })
                    .collect();
                let z = FairVae::reparameterize(&mu, &lv, &eps);
                for o in 0..l0.out_dim {
                    let pre: f64 = (0..l0.in_dim)
                        .map(|i| l0.w[o * l0.in_dim + i] * z[i])
                        .sum::<f64>()
                        + l0.b[o];
                    if pre > 0.0 {
                        alive[o] = true;
                    }
                }
                pis.push(sigmoid(net.apply(&z).unwrap()[0]));
            }
            let mean_pi = pis.iter().sum::<f64>() / pis.len() as f64;
            let spread =
                pis.iter().map(|p| (p - mean_pi).abs()).sum::<f64>() / pis.len() as f64;
            println!(
                "epoch {epoch:3}: live_units={}/{} mean_pi={mean_pi:.3} spread={spread:.4}",
                alive.iter().filter(|&&a| a).count(),
                l0.out_dim
            );
        }
    }
}
