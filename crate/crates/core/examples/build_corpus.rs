//! Generates a dataset, quantizes its assets and writes a token corpus.

use markupdm::datagen::{generate_dataset, GenConfig};
use markupdm::pipeline::build_corpus;
use markupdm::quantizer::{Quantizer, QuantizerConfig};
use markupdm::sequence::{describe, Corpus};

fn main() {
    let ds = generate_dataset(&GenConfig::default(), 20, 7).unwrap();
    // Untrained, so codes are arbitrary; the stream layout is what matters here.
    let q = Quantizer::new(QuantizerConfig {
        channels: vec![4, 8, 8],
        code_dim: 4,
        res_blocks: 0,
        ..QuantizerConfig::default()
    })
    .unwrap();
    let corpus = build_corpus(&ds, &ds.manifest.splits.train, &q, "untrained").unwrap();
    let path = std::env::temp_dir().join("markupdm-example.corpus");
    corpus.save(&path).unwrap();
    let back = Corpus::load(&path).unwrap();
    assert_eq!(back, corpus);
    let doc = &back.docs[0];
    println!("{} documents -> {}", back.docs.len(), path.display());
    println!("first document, {} tokens:\n{}", doc.tokens.len(), describe(&doc.tokens));
    for (span, range) in doc.spans.iter().take(6) {
        println!("{span:?} -> tokens {range:?}");
    }
}
