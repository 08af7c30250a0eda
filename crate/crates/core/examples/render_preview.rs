//! Renders a generated template to PNG.

use markupdm::datagen::{generate_template, render_preview, AssetStore, GenConfig};
use markupdm::svg;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = GenConfig::default();
    let mut assets = AssetStore::new();
    let t = generate_template(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, &mut assets);
    println!("{}", svg::serialize(&t, &cfg.fonts).unwrap());
    let img = render_preview(&t, &assets, None).unwrap();
    let path = std::env::temp_dir().join(format!("markupdm-preview-{seed}.png"));
    img.write_png(&path).unwrap();
    println!("{}x{} preview -> {}", img.width(), img.height(), path.display());
}
