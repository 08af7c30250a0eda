//! Samples image completions from pure noise logits. The router keeps every
//! completion a well-formed block regardless of what the logits prefer.

use markupdm::sampler::{generate, validate_document, HeadLogits, LogitSource, SamplerConfig, SamplerError, Task};
use markupdm::sequence::{describe, text_tokens, Token};
use markupdm::tokenizer::{BOS, EOS, TEXT_VOCAB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Noise(ChaCha8Rng);

impl LogitSource for Noise {
    fn feed(&mut self, _: &[Token]) -> Result<HeadLogits, SamplerError> {
        Ok(HeadLogits {
            text: (0..TEXT_VOCAB).map(|_| self.0.gen_range(-3.0..3.0)).collect(),
            image: (0..64).map(|_| self.0.gen_range(-3.0..3.0)).collect(),
        })
    }
}

fn main() {
    let g = 3;
    let prefix: Vec<Token> = text_tokens("<svg><image href=\"").collect();
    let suffix: Vec<Token> = text_tokens("\"/></svg>").collect();
    let mut model = Noise(ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let out = generate(&mut model, &prefix, &[], Task::Image, g, &SamplerConfig::default(), &mut rng).unwrap();
        let mut doc = vec![Token::text(BOS)];
        doc.extend(&prefix);
        doc.extend(&out.tokens);
        doc.extend(&suffix);
        doc.push(Token::text(EOS));
        validate_document(&doc, g).expect("router-constrained output is grammatical");
        println!("{:?}: {}", out.stop, describe(&out.tokens));
    }
}
