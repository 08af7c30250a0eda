//! Scores gold middles and a deliberately shifted prediction through the
//! binned attribute metric, then prints the table and suffix breakdown.

use markupdm::datagen::{generate_dataset, GenConfig};
use markupdm::eval::{build_eval_set, score_case, self_consistency, suffix_csv, Binning, EvalReport};
use markupdm::quantizer::{Quantizer, QuantizerConfig};
use markupdm::sampler::{StopReason, Task};
use markupdm::sequence::{build_document_stream, text_tokens, ImageCodes};

fn main() {
    let ds = generate_dataset(&GenConfig::default(), 40, 11).unwrap();
    let q = Quantizer::new(QuantizerConfig {
        channels: vec![4, 8, 8],
        code_dim: 4,
        res_blocks: 0,
        ..QuantizerConfig::default()
    })
    .unwrap();
    let codes = ImageCodes::encode_assets(&q, &ds.assets);
    let docs: Vec<_> = ds.templates.values().map(|t| build_document_stream(t, &ds.manifest.fonts, &codes).unwrap()).collect();
    let entries: Vec<_> = ds.templates.iter().zip(&docs).map(|((id, t), d)| (id.clone(), t, d)).collect();
    let binning = Binning::from_corpus(ds.templates.values());
    let cases = build_eval_set(&entries, Task::Attribute, usize::MAX);

    print!("gold against itself\n{}", self_consistency(&cases, &binning).table());

    // Every numeric prediction nudged by 3 units: small shifts stay in bin,
    // the rest do not.
    let results = cases
        .iter()
        .map(|c| {
            let gold: String = markupdm::sequence::describe(&c.gold);
            let guess = gold.parse::<i64>().map_or(gold.clone(), |v| (v + 3).to_string());
            let middle: Vec<_> = text_tokens(&guess).collect();
            score_case(c, &middle, StopReason::Quote, &binning)
        })
        .collect();
    let report = EvalReport::new(Task::Attribute, binning, results);
    print!("\nshifted by 3\n{}\n{}", report.table(), suffix_csv(&report.suffix));
}
