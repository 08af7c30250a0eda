//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use markupdm::datagen::{generate_template, AssetStore, GenConfig};
use markupdm::sequence::{build_document_stream, DocStream, ImageCodes};
use markupdm::template::{DesignTemplate, Element, ImageTokenBlock};
use markupdm_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Short documents: one sprite, one text, no background or styling.
pub fn compact_config() -> GenConfig {
    GenConfig {
        canvas_width: (100, 400),
        canvas_height: (100, 400),
        sprites: (1, 1),
        texts: (1, 1),
        sprite_size: (16, 24),
        p_repetition: 0.0,
        p_symmetry: 0.0,
        p_background: 0.0,
        p_styled: 0.0,
        ..GenConfig::default()
    }
}

/// Uniformly random `g x g` codes for every asset. Distinct assets get
/// distinct blocks with overwhelming probability.
pub fn random_codes(assets: &AssetStore, grid_side: usize, codebook_size: usize, seed: u64) -> ImageCodes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = ImageCodes::new(grid_side);
    for (href, img) in assets.iter() {
        codes.insert(
            href,
            ImageTokenBlock {
                width: img.width() as u32,
                height: img.height() as u32,
                codes: (0..grid_side * grid_side).map(|_| rng.gen_range(0..codebook_size as u32)).collect(),
            },
        );
    }
    codes
}

pub fn random_codebook(codebook_size: usize, code_dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([codebook_size, code_dim], (0..codebook_size * code_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
}

pub struct Fixture {
    pub ids: Vec<String>,
    pub templates: Vec<DesignTemplate>,
    pub docs: Vec<DocStream>,
    pub assets: AssetStore,
}

impl Fixture {
    pub fn entries(&self) -> Vec<(String, &DesignTemplate, &DocStream)> {
        self.ids.iter().cloned().zip(&self.templates).zip(&self.docs).map(|((i, t), d)| (i, t, d)).collect()
    }
}

/// `n` compact templates with random image codes. With `duplicate`, the
/// sprite is repeated at a second position so every template holds two
/// image elements sharing one asset.
pub fn fixture(n: usize, seed: u64, grid_side: usize, codebook_size: usize, duplicate: bool) -> Fixture {
    let cfg = compact_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assets = AssetStore::new();
    let mut templates = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = generate_template(&mut rng, &cfg, &mut assets);
        if duplicate {
            let Element::Image(img) = t.elements[0].clone() else {
                panic!("compact templates start with their sprite");
            };
            let x = rng.gen_range(0..=i64::from(t.canvas.width) - 20);
            t.elements.insert(1, Element::Image(markupdm::template::ImageElement { x, ..img }));
        }
        templates.push(t);
    }
    let codes = random_codes(&assets, grid_side, codebook_size, seed ^ 0xc0de);
    let docs = templates
        .iter()
        .map(|t| build_document_stream(t, &cfg.fonts, &codes).expect("generated templates are valid"))
        .collect();
    Fixture {
        ids: (0..n).map(|i| format!("f{i:02}")).collect(),
        templates,
        docs,
        assets,
    }
}

// ---------------------------------------------------------------- gradient checks

pub mod fd {
    use markupdm::datagen::{generate_sprites, GenConfig};
    use markupdm::lm::{Lm, LmConfig};
    use markupdm::quantizer::{Bottleneck, Quantizer, QuantizerConfig};
    use markupdm::sequence::{text_tokens, Token};
    use markupdm::tokenizer::{BOI, BOS, EOI, EOS, SEP};
    use markupdm_nn::gradcheck::{check_against, spread_indices, GradCheckReport};
    use markupdm_nn::{Graph, ParamId, ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const EPS: f64 = 1e-6;
    pub const FLOOR: f64 = 1e-8;
    pub const TOL: f64 = 1e-4;

    pub fn tiny_quantizer() -> (Quantizer, Tensor<f64>) {
        let q = Quantizer::new(QuantizerConfig {
            square_size: 8,
            scale_factor: 4,
            codebook_size: 6,
            code_dim: 3,
            channels: vec![4, 4],
            res_blocks: 1,
            groups: 2,
            batch_size: 2,
            data_init_codebook: false,
            seed: 5,
            ..QuantizerConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sprites = generate_sprites(&mut rng, &GenConfig::default(), 2, 8);
        let refs: Vec<_> = sprites.iter().collect();
        let x = q.batch_tensor::<f64>(&refs);
        (q, x)
    }

    /// Central differences of `objective` against `analytic` on a spread of
    /// coordinates of one parameter.
    pub fn check_param(
        store: &ParamStore<f64>,
        id: ParamId,
        analytic: &Tensor<f64>,
        objective: impl Fn(&ParamStore<f64>) -> f64,
    ) -> GradCheckReport {
        let x = store.get(id).clone();
        let idx = spread_indices(x.numel(), 12);
        check_against(&x, analytic, &idx, EPS, FLOOR, |probe| {
            let mut s = store.clone();
            s.set(id, probe.clone());
            objective(&s)
        })
    }

    fn quantizer_objective<'a>(q: &'a Quantizer, x: &Tensor<f64>, b: Bottleneck, codebook_only: bool) -> impl Fn(&ParamStore<f64>) -> f64 + 'a {
        let x = x.clone();
        move |s| {
            let mut g = Graph::new();
            let lg = q.loss_graph(&mut g, s, &x, b);
            g.value(if codebook_only { lg.codebook } else { lg.total }).item()
        }
    }

    /// Per-parameter reports: decoder parameters against the total loss,
    /// the codebook against its own term (straight-through routing gives it
    /// nothing else), encoder parameters with the bottleneck bypassed.
    pub fn quantizer_reports() -> Vec<(String, GradCheckReport)> {
        let (q, x) = tiny_quantizer();
        let store = q.store.cast::<f64>();
        let mut out = Vec::new();
        for b in [Bottleneck::Quantize, Bottleneck::Bypass] {
            let mut g = Graph::new();
            let lg = q.loss_graph(&mut g, &store, &x, b);
            let grads = g.backward(lg.total);
            let prefix = if b == Bottleneck::Quantize { "dec." } else { "enc." };
            for (id, name, _) in store.iter() {
                if name.starts_with(prefix) {
                    let a = grads.param(id).expect("parameter reached").clone();
                    out.push((name.to_string(), check_param(&store, id, &a, quantizer_objective(&q, &x, b, false))));
                }
            }
            if b == Bottleneck::Quantize {
                let a = grads.param(q.codebook_id()).expect("codebook reached").clone();
                let r = check_param(&store, q.codebook_id(), &a, quantizer_objective(&q, &x, b, true));
                out.push(("codebook".into(), r));
            }
        }
        out
    }

    /// Largest deviation of the encoder-output gradient from the decoder-input
    /// gradient plus the commitment term.
    pub fn straight_through_error() -> f64 {
        let (q, x) = tiny_quantizer();
        let store = q.store.cast::<f64>();
        let mut g = Graph::new();
        let lg = q.loss_graph(&mut g, &store, &x, Bottleneck::Quantize);
        let z_e = g.value(lg.z_e).clone();
        let grads = g.backward(lg.total);
        let (g_ze, g_zq) = (grads.get(lg.z_e).unwrap(), grads.get(lg.z_q).unwrap());
        let n = z_e.numel() as f64;
        let cb = store.get(q.codebook_id());
        let mut worst = 0.0f64;
        for (i, &code) in lg.codes.iter().enumerate() {
            for (j, &ej) in cb.row(code).iter().enumerate() {
                let k = i * cb.dim(1) + j;
                // d/dz_e of beta * mean((z_e - sg[e])^2)
                let commit = 2.0 * q.config.beta * (z_e.data()[k] - ej) / n;
                worst = worst.max((g_ze.data()[k] - g_zq.data()[k] - commit).abs());
            }
        }
        worst
    }

    pub fn tiny_lm() -> (Lm, Vec<Vec<Token>>) {
        let cfg = LmConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            fourier_freqs: 2,
            init_std: 0.3,
            seed: 4,
            ..LmConfig::default()
        };
        let lm = Lm::new(cfg, &super::random_codebook(5, 3, 11), 2).unwrap();
        let mut doc = vec![Token::text(BOS)];
        doc.extend(text_tokens("<svg w=\"4\">"));
        doc.push(Token::text(BOI));
        doc.extend(text_tokens("7"));
        doc.push(Token::text(SEP));
        doc.extend(text_tokens("9"));
        doc.push(Token::text(SEP));
        for (k, id) in [3, 0, 4, 3].into_iter().enumerate() {
            doc.push(Token::image(id, (k / 2) as u16, (k % 2) as u16));
        }
        doc.push(Token::text(EOI));
        doc.extend(text_tokens("</svg>"));
        doc.push(Token::text(EOS));
        let short: Vec<Token> = text_tokens("ab\"c").collect();
        (lm, vec![doc, short])
    }

    /// Every trainable LM parameter against the mean next-token loss. Frozen
    /// parameters must receive no gradient at all.
    pub fn lm_reports() -> Vec<(String, GradCheckReport)> {
        let (lm, batch) = tiny_lm();
        let store = lm.store.cast::<f64>();
        let mut g = Graph::new();
        let lg = lm.loss_graph(&mut g, &store, &batch, None).unwrap();
        let grads = g.backward(lg.total);
        let total = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let lg = lm.loss_graph(&mut g, s, &batch, None).unwrap();
            g.value(lg.total).item()
        };
        let mut out = Vec::new();
        for (id, name, _) in store.iter() {
            if !store.is_trainable(id) {
                assert!(grads.param(id).is_none(), "frozen {name} received a gradient");
                continue;
            }
            let a = grads.param(id).unwrap_or_else(|| panic!("{name} unreached")).clone();
            out.push((name.to_string(), check_param(&store, id, &a, total)));
        }
        out
    }
}
