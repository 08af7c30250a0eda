//! Trains a small quantizer on generated sprites and reports reconstruction
//! error against the opaque-alpha baseline. Pass a step count to train longer.

use markupdm::datagen::{generate_sprites, GenConfig};
use markupdm::eval::recon_metrics;
use markupdm::quantizer::{Quantizer, QuantizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let sprites = generate_sprites(&mut ChaCha8Rng::seed_from_u64(1), &GenConfig::default(), 16, 64);
    let mut q = Quantizer::new(QuantizerConfig {
        code_dim: 8,
        channels: vec![8, 16, 32],
        res_blocks: 0,
        batch_size: 4,
        lr: 2e-3,
        final_lr_fraction: 0.05,
        ..QuantizerConfig::default()
    })
    .unwrap();
    q.fit(&sprites, steps, 100, |_, r| {
        println!("step {:>5}  loss {:.4}  recon {:.4}", r.step, r.total, r.recon_l1);
        false
    })
    .unwrap();
    print!("{}", recon_metrics(&q, &sprites).table());
    let grid = q.encode(&sprites[0]);
    println!("first sprite as a {0}x{0} grid: {1:?}", grid.side, &grid.codes[..8]);
}
