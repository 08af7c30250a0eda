//! Overfits a tiny model on a handful of documents with random image codes,
//! then completes one attribute greedily.

use markupdm::datagen::{generate_template, AssetStore, GenConfig};
use markupdm::lm::{Lm, LmConfig};
use markupdm::sampler::{generate, SamplerConfig, Task};
use markupdm::sequence::{build_document_stream, describe, make_completion_prompt, FimConfig, ImageCodes};
use markupdm::svg::Span;
use markupdm::template::ImageTokenBlock;
use markupdm_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let cfg = GenConfig {
        sprites: (1, 1),
        texts: (1, 1),
        p_background: 0.0,
        p_repetition: 0.0,
        p_symmetry: 0.0,
        p_styled: 0.0,
        ..GenConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut assets = AssetStore::new();
    let templates: Vec<_> = (0..4).map(|_| generate_template(&mut rng, &cfg, &mut assets)).collect();
    let (g, z) = (4, 32);
    let mut codes = ImageCodes::new(g);
    for (href, img) in assets.iter() {
        let block = ImageTokenBlock {
            width: img.width() as u32,
            height: img.height() as u32,
            codes: (0..g * g).map(|_| rng.gen_range(0..z as u32)).collect(),
        };
        codes.insert(href, block);
    }
    let docs: Vec<_> = templates.iter().map(|t| build_document_stream(t, &cfg.fonts, &codes).unwrap()).collect();

    let codebook = Tensor::new([z, 8], (0..z * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let lm_cfg = LmConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 1024,
        lr: 3e-3,
        final_lr_fraction: 0.02,
        ..LmConfig::default()
    };
    let mut lm = Lm::new(lm_cfg, &codebook, g).unwrap();
    println!("{} parameters", lm.num_params());
    let fim = FimConfig {
        p_fim: 0.9,
        p_span_aligned: 1.0,
    };
    lm.fit(&docs, steps, &fim, |r| {
        if r.step % 100 == 0 {
            println!("step {:>5}  loss {:.4}  accuracy {:.3}", r.step, r.loss, r.accuracy);
        }
    })
    .unwrap();

    let span = Span::Attribute(1, "font-family".into());
    let c = make_completion_prompt(&docs[0], &span).unwrap();
    let out = generate(&mut lm.session(), &c.fim.prefix, &c.prompt(), Task::Attribute, g, &SamplerConfig::greedy(), &mut rng).unwrap();
    println!("{span:?}: predicted {:?}, gold {:?}", describe(&out.tokens), describe(c.gold()));
}
