use aesth_core::data::{make_batch, synth_gen, BatchItem, Dataset, SynthConfig, TransformMode};
use aesth_core::model::{backward, forward, init_params, ModelConfig};
use aesth_core::train::{batch_emd_loss, sgd_step, OptimizerHyper, OptimizerState};
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let records = synth_gen(&SynthConfig { count: 16, ..SynthConfig::default() }, 1);
    let data = Dataset::load(&records).unwrap();
    let config = ModelConfig::default();
    let mut params = init_params(&config, 1).unwrap();
    let mut state = OptimizerState::new(&params, OptimizerHyper::default());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    let reps = 10;
    let (mut t_batch, mut t_fwd, mut t_loss, mut t_bwd, mut t_sgd) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..reps {
        let t0 = Instant::now();
        let images: Vec<_> = (0..16).map(|i| data.image(i)).collect();
        let items: Vec<BatchItem> = images
            .iter()
            .enumerate()
            .map(|(i, image)| BatchItem { image, votes: &data.votes[i], theme: data.themes[i] })
            .collect();
        let batch = make_batch(&items, TransformMode::Pad, 128, &mut rng).unwrap();
        let t1 = Instant::now();
        let cache = forward(&params, &batch, config.variant).unwrap();
        let t2 = Instant::now();
        let (_, grad) = batch_emd_loss(&cache.logits, &batch.targets).unwrap();
        let t3 = Instant::now();
        params.zero_grads();
        backward(&mut params, &cache, &grad).unwrap();
        let t4 = Instant::now();
        sgd_step(&mut params, &mut state, 0).unwrap();
        let t5 = Instant::now();
        t_batch += (t1 - t0).as_secs_f64();
        t_fwd += (t2 - t1).as_secs_f64();
        t_loss += (t3 - t2).as_secs_f64();
        t_bwd += (t4 - t3).as_secs_f64();
        t_sgd += (t5 - t4).as_secs_f64();
    }
    let r = reps as f64;
    println!(
        "batch {:.1}ms  fwd {:.1}ms  loss {:.2}ms  bwd {:.1}ms  sgd {:.1}ms  total {:.1}ms",
        t_batch / r * 1e3, t_fwd / r * 1e3, t_loss / r * 1e3, t_bwd / r * 1e3, t_sgd / r * 1e3,
        (t_batch + t_fwd + t_loss + t_bwd + t_sgd) / r * 1e3
    );
}
