use fairdec::config::{ExperimentConfig, Method};
use fairdec::data::Dataset;
use fairdec::experiment;
use fairdec::vae::losses;

fn main() {
    let cfg = ExperimentConfig::for_method(Method::FairAllBoth, "synthetic").unwrap();
    let dataset = Dataset::synthetic(cfg.data_seed).unwrap();
    for seed in 0..5u64 {
        let m = experiment::train_phase1(&cfg, &dataset, seed).unwrap();
        let mut sig = vec![0.0; cfg.latent_dim];
        for r in dataset.validation.iter() {
            let (_, lv) = m.encode(r.x(), r.s_f64(), None).unwrap();
            for l in 0..cfg.latent_dim { sig[l] += (lv[l]/2.0).exp(); }
        }
        let n = dataset.validation.len() as f64;
        let (loss, _) = losses::phase1_loss(&m, &dataset.validation, 1234).unwrap();
        println!("seed {seed}: val_loss={loss:.4} enc_sigma={:?}",
            sig.iter().map(|v| (v/n*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
}
