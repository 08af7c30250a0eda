//! Property tests over generated templates and streams.

mod common;

use markupdm::datagen::{generate_template, AssetStore, GenConfig};
use markupdm::eval::{score_suffix_breakdown, AttrKind, Binning};
use markupdm::sampler::{keep_set, validate_document, Router};
use markupdm::sequence::{build_document_stream, reassemble, Corpus, CorpusHeader, DocStream, FimStream};
use markupdm::svg;
use markupdm::template::{Canvas, DesignTemplate};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn template(seed: u64) -> (DesignTemplate, AssetStore) {
    let mut assets = AssetStore::new();
    let t = generate_template(&mut ChaCha8Rng::seed_from_u64(seed), &GenConfig::default(), &mut assets);
    (t, assets)
}

fn doc(seed: u64, g: usize) -> DocStream {
    let (t, assets) = template(seed);
    let codes = common::random_codes(&assets, g, 64, seed);
    build_document_stream(&t, &GenConfig::default().fonts, &codes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_parse_round_trip(seed in any::<u64>()) {
        let fonts = GenConfig::default().fonts;
        let (t, _) = template(seed);
        let s = svg::serialize(&t, &fonts).unwrap();
        let back = svg::parse(&s).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(svg::serialize(&back, &fonts).unwrap(), s);
    }

    #[test]
    fn streams_obey_the_grammar_and_spans_cover_values(seed in any::<u64>(), g in 1usize..6) {
        let d = doc(seed, g);
        prop_assert!(validate_document(&d.tokens, g).is_ok());
        let mut last_end = 0;
        for (_, r) in &d.spans {
            prop_assert!(r.start >= last_end && r.end < d.tokens.len());
            last_end = r.end;
        }
    }

    #[test]
    fn any_split_reassembles(seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let d = doc(seed, 2);
        let n = d.inner().len();
        let (i, j) = ((a.min(b) * n as f64) as usize, (a.max(b) * n as f64) as usize);
        let f = FimStream::split(&d, i, j);
        prop_assert_eq!(reassemble(&f.to_tokens()).unwrap(), d.tokens.clone());
        prop_assert_eq!(FimStream::parse(&f.to_tokens()).unwrap(), f);
    }

    #[test]
    fn router_replays_any_prefix(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let d = doc(seed, 3);
        let inner = d.inner();
        let k = (cut * inner.len() as f64) as usize;
        let mut r = Router::new(3, true);
        prop_assert!(r.observe_all(&inner[..k]).is_ok());
        // The next gold token is always admissible.
        let next = inner[k];
        match r.allowed_text(264) {
            Some(mask) if next.modality == markupdm::sequence::Modality::Text => prop_assert!(mask[next.id as usize]),
            _ => {}
        }
        prop_assert!(r.observe(&next).is_ok());
    }

    #[test]
    fn corpus_file_round_trips(seeds in proptest::collection::vec(any::<u64>(), 1..4)) {
        let docs: Vec<DocStream> = seeds.iter().map(|&s| doc(s, 2)).collect();
        let c = Corpus { header: CorpusHeader::new(2, 64), docs };
        let back = Corpus::read_from(c.to_bytes().unwrap().as_slice()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn keep_set_is_a_normalized_admissible_prefix(
        logits in proptest::collection::vec(-10.0f32..10.0, 1..40),
        p in 0.01f64..=1.0,
        temperature in 0.1f64..3.0,
        mask_seed in any::<u64>(),
    ) {
        let allowed: Vec<bool> = (0..logits.len()).map(|i| (mask_seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        let kept = keep_set(&logits, p, temperature, Some(&allowed)).unwrap();
        let total: f64 = kept.iter().map(|&(_, q)| q).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(kept.iter().all(|&(i, _)| allowed[i]));
        prop_assert!(kept.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn suffix_bins_partition_the_results(results in proptest::collection::vec((0usize..5000, any::<bool>()), 0..60)) {
        let bins = score_suffix_breakdown(&results);
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), results.len());
        prop_assert_eq!(bins.iter().map(|b| b.correct).sum::<usize>(), results.iter().filter(|r| r.1).count());
        for w in bins.windows(2) {
            prop_assert_eq!(w[0].hi, w[1].lo);
        }
    }

    #[test]
    fn position_bins_are_monotone(w in 1u32..2000, a in -100.0f64..2100.0, b in -100.0f64..2100.0) {
        let binning = Binning { position_bins: 64, font_size_bins: 16, font_size_range: (8.0, 80.0) };
        let canvas = Canvas { width: w, height: w };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(binning.bin(AttrKind::X, lo, canvas) <= binning.bin(AttrKind::X, hi, canvas));
        prop_assert!(binning.bin(AttrKind::X, hi, canvas) < 64);
    }
}
