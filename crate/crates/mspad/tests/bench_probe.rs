// Scratch throughput probe; deleted before finalizing.
use mspad::fcn::{FcnModel, ModelConfig, ScoreMap};
use mspad::loss::total_loss_map_grad;
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn training_step_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = FcnModel::<f32>::new(ModelConfig::with_channels(11), 0).unwrap();
    let batch = Array4::from_shape_fn((16, 11, 80, 160), |_| rng.gen::<f32>());
    // warmup
    let _ = model.train_forward(&batch).unwrap();
    let start = Instant::now();
    let iters = 8;
    for _ in 0..iters {
        let caches = model.train_forward(&batch).unwrap();
        let probs = model.cached_probs(&caches).clone();
        let (_, hm, wm) = probs.dim();
        let mut d = Array3::<f32>::zeros((16, hm, wm));
        for i in 0..16 {
            let map = ScoreMap::new(probs.index_axis(Axis(0), i).mapv(|v| v as f64));
            let g = total_loss_map_grad(&map, (i % 2) as u8, 10.0).unwrap();
            d.index_axis_mut(Axis(0), i)
                .assign(&g.mapv(|v| v as f32 / 16.0));
        }
        let _ = model.backward(&caches, &d);
    }
    let dt = start.elapsed().as_secs_f64() / iters as f64;
    println!(
        "train step (batch 16, C=11): {:.3}s/step -> {:.1}s/epoch(16 steps)",
        dt,
        dt * 16.0
    );
}
