//! Mixed text/image token streams, the fill-in-the-middle transform, task
//! prompts, and the binary corpus file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::AssetStore;
use crate::quantizer::{Quantizer, QuantizerError};
use crate::raster::resize_bilinear;
use crate::svg::{self, Piece, Span};
use crate::template::{DesignTemplate, FontList, ImagePayload, ImageTokenBlock, ValidationReport};
use crate::tokenizer::{self, VocabManifest, BOI, BOS, EOI, EOS, FIM_MIDDLE, FIM_PREFIX, FIM_SUFFIX, SEP, TEXT_VOCAB};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

/// `grid_pos` is `Some` exactly for image tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub modality: Modality,
    pub id: u32,
    pub grid_pos: Option<(u16, u16)>,
}

impl Token {
    pub const fn text(id: u32) -> Self {
        Self {
            modality: Modality::Text,
            id,
            grid_pos: None,
        }
    }

    pub const fn image(id: u32, row: u16, col: u16) -> Self {
        Self {
            modality: Modality::Image,
            id,
            grid_pos: Some((row, col)),
        }
    }

    pub fn is_text(&self, id: u32) -> bool {
        self.modality == Modality::Text && self.id == id
    }
}

pub fn text_tokens(s: &str) -> impl Iterator<Item = Token> + '_ {
    s.bytes().map(|b| Token::text(u32::from(b)))
}

#[derive(Debug, thiserror::Error)]
pub enum SequenceError {
    #[error("invalid template:\n{0}")]
    Invalid(ValidationReport),
    #[error("no image codes for asset {0:?}")]
    MissingImageCodes(String),
    #[error("element {element}: token block has grid side {found}, expected {expected}")]
    GridMismatch {
        element: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed FIM stream: {0}")]
    MalformedFim(String),
    #[error("span {0:?} not found in document")]
    SpanNotFound(Span),
    #[error("corpus file: {0}")]
    Corpus(String),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Image token blocks keyed by asset href, all on a `g x g` grid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImageCodes {
    grid_side: usize,
    blocks: BTreeMap<String, ImageTokenBlock>,
}

impl ImageCodes {
    pub fn new(grid_side: usize) -> Self {
        Self {
            grid_side,
            blocks: BTreeMap::new(),
        }
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    /// # Panics
    /// If the block does not hold `g * g` codes.
    pub fn insert(&mut self, href: impl Into<String>, block: ImageTokenBlock) {
        assert_eq!(block.codes.len(), self.grid_side * self.grid_side, "block is not g x g");
        self.blocks.insert(href.into(), block);
    }

    pub fn get(&self, href: &str) -> Option<&ImageTokenBlock> {
        self.blocks.get(href)
    }

    /// Quantizes every asset at the model's square size; the block keeps the
    /// asset's intrinsic width and height.
    pub fn encode_assets(quantizer: &Quantizer, assets: &AssetStore) -> Self {
        let s = quantizer.config.square_size;
        let entries: Vec<(&str, _)> = assets.iter().collect();
        let squared: Vec<_> = entries.iter().map(|(_, img)| resize_bilinear(img, s, s)).collect();
        let refs: Vec<_> = squared.iter().collect();
        let grids = quantizer.encode_batch(&refs);
        let mut out = Self::new(quantizer.grid_side());
        for ((href, img), grid) in entries.into_iter().zip(grids) {
            out.insert(
                href,
                ImageTokenBlock {
                    width: img.width() as u32,
                    height: img.height() as u32,
                    codes: grid.codes,
                },
            );
        }
        out
    }

    fn block_for<'a>(&'a self, payload: &'a ImagePayload, element: usize) -> Result<&'a ImageTokenBlock, SequenceError> {
        let block = match payload {
            ImagePayload::Asset(href) => self.get(href).ok_or_else(|| SequenceError::MissingImageCodes(href.clone()))?,
            ImagePayload::Tokens(block) => block,
        };
        let found = block.grid_side().unwrap_or(0);
        if found != self.grid_side {
            return Err(SequenceError::GridMismatch {
                element,
                expected: self.grid_side,
                found,
            });
        }
        Ok(block)
    }
}

/// `[boi] W [sep] H [sep] <g*g image tokens, row-major> [eoi]`.
pub fn block_tokens(block: &ImageTokenBlock) -> Vec<Token> {
    let g = block.grid_side().unwrap_or(0);
    let mut out = vec![Token::text(BOI)];
    out.extend(text_tokens(&block.width.to_string()));
    out.push(Token::text(SEP));
    out.extend(text_tokens(&block.height.to_string()));
    out.push(Token::text(SEP));
    out.extend(block.codes.iter().enumerate().map(|(k, &c)| Token::image(c, (k / g) as u16, (k % g) as u16)));
    out.push(Token::text(EOI));
    out
}

/// `4 + digits(w) + digits(h) + g^2`: four specials around two numbers and the grid.
pub fn block_len(width: u32, height: u32, grid_side: usize) -> usize {
    4 + width.to_string().len() + height.to_string().len() + grid_side * grid_side
}

/// A `[bos] ... [eos]` document with the token range of every spanned value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocStream {
    pub tokens: Vec<Token>,
    pub spans: Vec<(Span, Range<usize>)>,
}

impl DocStream {
    pub fn span_range(&self, span: &Span) -> Option<Range<usize>> {
        self.spans.iter().find(|(s, _)| s == span).map(|(_, r)| r.clone())
    }

    /// Tokens strictly between `[bos]` and `[eos]`.
    pub fn inner(&self) -> &[Token] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

pub fn build_document_stream(t: &DesignTemplate, fonts: &FontList, codes: &ImageCodes) -> Result<DocStream, SequenceError> {
    let report = t.validate(fonts);
    if !report.is_empty() {
        return Err(SequenceError::Invalid(report));
    }
    let mut tokens = vec![Token::text(BOS)];
    let mut spans = Vec::new();
    for piece in svg::serialize_pieces(t) {
        let start = tokens.len();
        let span = match piece {
            Piece::Markup { text, span } => {
                tokens.extend(text_tokens(&text));
                span
            }
            Piece::Href { element } => {
                let img = t.elements[element].as_image().expect("href piece on an image");
                tokens.extend(block_tokens(codes.block_for(&img.payload, element)?));
                Some(Span::ImageHref(element))
            }
        };
        if let Some(span) = span {
            spans.push((span, start..tokens.len()));
        }
    }
    tokens.push(Token::text(EOS));
    Ok(DocStream { tokens, spans })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FimConfig {
    /// Chance a training document is FIM-transformed at all.
    pub p_fim: f64,
    /// Among FIM samples, the chance the middle is a whole semantic span
    /// (attribute value, text content, image block) rather than a uniform
    /// token range.
    pub p_span_aligned: f64,
}

impl Default for FimConfig {
    fn default() -> Self {
        Self {
            p_fim: 0.9,
            p_span_aligned: 0.0,
        }
    }
}

/// Prefix, suffix and middle of an inner document (no `[bos]`/`[eos]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FimStream {
    pub prefix: Vec<Token>,
    pub suffix: Vec<Token>,
    pub middle: Vec<Token>,
}

impl FimStream {
    /// Splits the inner document at `i <= j` into P, M, S.
    pub fn split(doc: &DocStream, i: usize, j: usize) -> Self {
        let inner = doc.inner();
        assert!(i <= j && j <= inner.len(), "split points out of order");
        Self {
            prefix: inner[..i].to_vec(),
            middle: inner[i..j].to_vec(),
            suffix: inner[j..].to_vec(),
        }
    }

    /// `[fim_prefix] P [fim_suffix] S [fim_middle]`.
    pub fn prompt(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.prefix.len() + self.suffix.len() + 3);
        out.push(Token::text(FIM_PREFIX));
        out.extend_from_slice(&self.prefix);
        out.push(Token::text(FIM_SUFFIX));
        out.extend_from_slice(&self.suffix);
        out.push(Token::text(FIM_MIDDLE));
        out
    }

    /// The prompt followed by `M [eos]`.
    pub fn to_tokens(&self) -> Vec<Token> {
        let mut out = self.prompt();
        out.extend_from_slice(&self.middle);
        out.push(Token::text(EOS));
        out
    }

    /// `[bos] P M S [eos]`.
    pub fn reassemble(&self) -> Vec<Token> {
        let mut out = vec![Token::text(BOS)];
        out.extend_from_slice(&self.prefix);
        out.extend_from_slice(&self.middle);
        out.extend_from_slice(&self.suffix);
        out.push(Token::text(EOS));
        out
    }

    /// Inverse of [`to_tokens`](Self::to_tokens); the trailing `[eos]` is
    /// optional so prompt-plus-partial-middle streams also parse.
    pub fn parse(tokens: &[Token]) -> Result<Self, SequenceError> {
        let bad = |m: &str| Err(SequenceError::MalformedFim(m.into()));
        if !tokens.first().is_some_and(|t| t.is_text(FIM_PREFIX)) {
            return bad("does not start with [fim_prefix]");
        }
        let find_all = |id: u32| -> Vec<usize> { (0..tokens.len()).filter(|&k| tokens[k].is_text(id)).collect() };
        let (pre, suf, mid) = (find_all(FIM_PREFIX), find_all(FIM_SUFFIX), find_all(FIM_MIDDLE));
        if pre.len() != 1 || suf.len() != 1 || mid.len() != 1 {
            return bad("each sentinel must occur exactly once");
        }
        let (s, m) = (suf[0], mid[0]);
        if s > m {
            return bad("[fim_suffix] after [fim_middle]");
        }
        let mut end = tokens.len();
        if end > m + 1 && tokens[end - 1].is_text(EOS) {
            end -= 1;
        }
        let middle = &tokens[m + 1..end];
        if let Some(k) = middle.iter().position(|t| t.is_text(EOS) || t.is_text(BOS)) {
            return bad(&format!("document delimiter inside the middle at offset {k}"));
        }
        Ok(Self {
            prefix: tokens[1..s].to_vec(),
            suffix: tokens[s + 1..m].to_vec(),
            middle: middle.to_vec(),
        })
    }
}

/// Reassembles a serialized FIM stream to `[bos] P M S [eos]`.
pub fn reassemble(tokens: &[Token]) -> Result<Vec<Token>, SequenceError> {
    Ok(FimStream::parse(tokens)?.reassemble())
}

/// One training sample: the document itself or its FIM transform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sample {
    Plain(Vec<Token>),
    Fim(FimStream),
}

impl Sample {
    pub fn tokens(&self) -> Vec<Token> {
        match self {
            Sample::Plain(t) => t.clone(),
            Sample::Fim(f) => f.to_tokens(),
        }
    }
}

/// Context-level FIM: with probability `p_fim` pick `i <= j` uniformly over
/// inner positions (or a whole span, see [`FimConfig`]), else pass through.
pub fn apply_fim(doc: &DocStream, config: &FimConfig, rng: &mut impl Rng) -> Sample {
    if config.p_fim <= 0.0 || !rng.gen_bool(config.p_fim.min(1.0)) {
        return Sample::Plain(doc.tokens.clone());
    }
    if !doc.spans.is_empty() && config.p_span_aligned > 0.0 && rng.gen_bool(config.p_span_aligned.min(1.0)) {
        let (_, r) = &doc.spans[rng.gen_range(0..doc.spans.len())];
        return Sample::Fim(FimStream::split(doc, r.start - 1, r.end - 1));
    }
    let n = doc.inner().len();
    let (a, b) = (rng.gen_range(0..=n), rng.gen_range(0..=n));
    Sample::Fim(FimStream::split(doc, a.min(b), a.max(b)))
}

/// A task prompt with its gold middle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub span: Span,
    pub fim: FimStream,
}

impl Completion {
    pub fn prompt(&self) -> Vec<Token> {
        self.fim.prompt()
    }

    pub fn gold(&self) -> &[Token] {
        &self.fim.middle
    }

    pub fn suffix_len(&self) -> usize {
        self.fim.suffix.len()
    }
}

pub fn make_completion_prompt(doc: &DocStream, span: &Span) -> Result<Completion, SequenceError> {
    let r = doc.span_range(span).ok_or_else(|| SequenceError::SpanNotFound(span.clone()))?;
    Ok(Completion {
        span: span.clone(),
        fim: FimStream::split(doc, r.start - 1, r.end - 1),
    })
}

// ---------------------------------------------------------------- corpus file

const MAGIC: &[u8; 8] = b"MDMCORP1";
const NO_POS: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub grid_side: usize,
    pub codebook_size: usize,
    pub text_vocab: usize,
    pub vocab_hash: String,
    /// FIM middles are drawn uniformly over token positions and may cut
    /// through an image block.
    pub fim_splits_image_blocks: bool,
    pub quantizer_sha256: Option<String>,
    pub template_ids: Vec<String>,
}

impl CorpusHeader {
    pub fn new(grid_side: usize, codebook_size: usize) -> Self {
        Self {
            grid_side,
            codebook_size,
            text_vocab: TEXT_VOCAB as usize,
            vocab_hash: VocabManifest::current().hash(),
            fim_splits_image_blocks: true,
            quantizer_sha256: None,
            template_ids: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub docs: Vec<DocStream>,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_usize(w: &mut impl Write, v: usize) -> Result<(), SequenceError> {
    let v = u32::try_from(v).map_err(|_| SequenceError::Corpus(format!("length {v} exceeds u32")))?;
    Ok(put_u32(w, v)?)
}

fn get_u32(r: &mut impl Read) -> Result<u32, SequenceError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: u32) -> Result<Vec<u8>, SequenceError> {
    let mut b = Vec::new();
    r.take(u64::from(n)).read_to_end(&mut b)?;
    if b.len() != n as usize {
        return Err(SequenceError::Corpus("truncated".into()));
    }
    Ok(b)
}

impl Corpus {
    /// Layout: magic, u32 header length, header JSON, u32 record count, then
    /// per record u32 token count, `(modality, id, row, col)` as four LE u32
    /// (row/col `u32::MAX` for text), u32 span-JSON length, span JSON.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), SequenceError> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header).map_err(|e| SequenceError::Corpus(e.to_string()))?;
        put_usize(&mut w, header.len())?;
        w.write_all(&header)?;
        put_usize(&mut w, self.docs.len())?;
        for doc in &self.docs {
            put_usize(&mut w, doc.tokens.len())?;
            for t in &doc.tokens {
                let (row, col) = t.grid_pos.map_or((NO_POS, NO_POS), |(r, c)| (u32::from(r), u32::from(c)));
                for v in [t.modality as u32, t.id, row, col] {
                    put_u32(&mut w, v)?;
                }
            }
            let spans: Vec<(&Span, usize, usize)> = doc.spans.iter().map(|(s, r)| (s, r.start, r.end)).collect();
            let json = serde_json::to_vec(&spans).map_err(|e| SequenceError::Corpus(e.to_string()))?;
            put_usize(&mut w, json.len())?;
            w.write_all(&json)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, SequenceError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), SequenceError> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, SequenceError> {
        let corrupt = |m: String| SequenceError::Corpus(m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let n = get_u32(&mut r)?;
        let header: CorpusHeader = serde_json::from_slice(&get_bytes(&mut r, n)?).map_err(|e| corrupt(e.to_string()))?;
        let g = header.grid_side as u32;
        let count = get_u32(&mut r)?;
        let mut docs = Vec::new();
        for d in 0..count {
            let n = get_u32(&mut r)?;
            let mut tokens = Vec::with_capacity(n.min(1 << 20) as usize);
            for _ in 0..n {
                let (m, id) = (get_u32(&mut r)?, get_u32(&mut r)?);
                let (row, col) = (get_u32(&mut r)?, get_u32(&mut r)?);
                let token = match m {
                    0 if row == NO_POS && col == NO_POS && (id as usize) < TEXT_VOCAB as usize => Token::text(id),
                    1 if row < g && col < g && (id as usize) < header.codebook_size => Token::image(id, row as u16, col as u16),
                    _ => return Err(corrupt(format!("doc {d}: bad token ({m}, {id}, {row}, {col})"))),
                };
                tokens.push(token);
            }
            let n = get_u32(&mut r)?;
            let spans: Vec<(Span, usize, usize)> = serde_json::from_slice(&get_bytes(&mut r, n)?).map_err(|e| corrupt(e.to_string()))?;
            if spans.iter().any(|&(_, a, b)| a > b || b > tokens.len()) {
                return Err(corrupt(format!("doc {d}: span out of range")));
            }
            if tokens.len() < 2 || !tokens[0].is_text(BOS) || !tokens[tokens.len() - 1].is_text(EOS) {
                return Err(corrupt(format!("doc {d}: not a [bos]..[eos] document")));
            }
            docs.push(DocStream {
                tokens,
                spans: spans.into_iter().map(|(s, a, b)| (s, a..b)).collect(),
            });
        }
        Ok(Self { header, docs })
    }

    pub fn load(path: &Path) -> Result<Self, SequenceError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Readable rendering for transcripts: bytes as text, specials by name,
/// image tokens as `[img:N]`.
pub fn describe(tokens: &[Token]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for t in tokens {
        match t.modality {
            Modality::Text if t.id < 256 => bytes.push(t.id as u8),
            Modality::Text => {
                flush(&mut bytes, &mut out);
                out.push_str(tokenizer::special_name(t.id).unwrap_or("[?]"));
            }
            Modality::Image => {
                flush(&mut bytes, &mut out);
                out.push_str(&format!("[img:{}]", t.id));
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{Element, Fixed, ImageElement, TextElement};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codes_for(g: usize) -> ImageCodes {
        let mut codes = ImageCodes::new(g);
        codes.insert(
            "a.png",
            ImageTokenBlock {
                width: 360,
                height: 260,
                codes: (0..(g * g) as u32).map(|k| k % 7).collect(),
            },
        );
        codes
    }

    fn template() -> DesignTemplate {
        let mut t = DesignTemplate::new(400, 300);
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset("a.png".into()), 10, 20, 100, 80)));
        t.elements.push(Element::Text(TextElement::new("FAMILY", 32, 81, "Lato", Fixed::from_int(24))));
        t
    }

    fn doc() -> DocStream {
        build_document_stream(&template(), &FontList::default(), &codes_for(16)).unwrap()
    }

    #[test]
    fn block_length_formula() {
        assert_eq!(block_len(360, 260, 16), 266);
        let d = doc();
        assert_eq!(d.span_range(&Span::ImageHref(0)).unwrap().len(), 266);
        let images = d.tokens.iter().filter(|t| t.modality == Modality::Image).count();
        assert_eq!(images, 256);
        let text = svg::serialize_pieces(&template())
            .iter()
            .map(|p| match p {
                Piece::Markup { text, .. } => text.len(),
                Piece::Href { .. } => 0,
            })
            .sum::<usize>();
        assert_eq!(d.tokens.len(), 2 + text + 266);
    }

    #[test]
    fn image_tokens_are_row_major() {
        let d = doc();
        let r = d.span_range(&Span::ImageHref(0)).unwrap();
        let block = &d.tokens[r];
        assert!(block[0].is_text(BOI));
        assert_eq!(describe(&block[..9]), "[boi]360[sep]260[sep]");
        assert_eq!(block[9].grid_pos, Some((0, 0)));
        assert_eq!(block[9 + 17].grid_pos, Some((1, 1)));
        assert!(block.last().unwrap().is_text(EOI));
    }

    #[test]
    fn text_only_template_has_no_image_tokens() {
        let mut t = template();
        t.elements.remove(0);
        let d = build_document_stream(&t, &FontList::default(), &ImageCodes::new(16)).unwrap();
        assert!(d.tokens.iter().all(|t| t.modality == Modality::Text && !t.is_text(BOI) && !t.is_text(EOI)));
    }

    #[test]
    fn missing_asset_codes_is_an_error() {
        let err = build_document_stream(&template(), &FontList::default(), &ImageCodes::new(16)).unwrap_err();
        assert!(matches!(err, SequenceError::MissingImageCodes(_)));
        let err = build_document_stream(&template(), &FontList::default(), &ImageCodes::new(8)).unwrap_err();
        assert!(matches!(err, SequenceError::MissingImageCodes(_)));
    }

    #[test]
    fn inline_blocks_must_match_grid() {
        let mut t = template();
        t.elements[0] = Element::Image(ImageElement::new(
            ImagePayload::Tokens(ImageTokenBlock {
                width: 4,
                height: 4,
                codes: vec![0; 4],
            }),
            0,
            0,
            4,
            4,
        ));
        let err = build_document_stream(&t, &FontList::default(), &codes_for(16)).unwrap_err();
        assert!(matches!(err, SequenceError::GridMismatch { found: 2, .. }));
    }

    #[test]
    fn completion_gold_middles() {
        let d = doc();
        let x = make_completion_prompt(&d, &Span::Attribute(1, "x".into())).unwrap();
        assert_eq!(describe(x.gold()), "32");
        assert_eq!(describe(&x.fim.prefix).chars().last(), Some('"'));
        let text = make_completion_prompt(&d, &Span::TextContent(1)).unwrap();
        assert_eq!(describe(text.gold()), "FAMILY");
        assert!(describe(&text.fim.suffix).starts_with("</text>"));
        let img = make_completion_prompt(&d, &Span::ImageHref(0)).unwrap();
        assert_eq!(img.gold().len(), 266);
        let prompt = img.prompt();
        assert!(prompt[0].is_text(FIM_PREFIX) && prompt.last().unwrap().is_text(FIM_MIDDLE));
        assert!(matches!(
            make_completion_prompt(&d, &Span::TextContent(0)),
            Err(SequenceError::SpanNotFound(_))
        ));
    }

    #[test]
    fn fim_reassembles_and_p_zero_is_identity() {
        let d = doc();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = FimConfig {
            p_fim: 1.0,
            p_span_aligned: 0.3,
        };
        for _ in 0..500 {
            let s = apply_fim(&d, &cfg, &mut rng);
            let Sample::Fim(f) = &s else { panic!("p_fim=1") };
            assert_eq!(f.reassemble(), d.tokens);
            assert_eq!(reassemble(&s.tokens()).unwrap(), d.tokens);
        }
        let off = FimConfig {
            p_fim: 0.0,
            ..cfg
        };
        assert_eq!(apply_fim(&d, &off, &mut rng), Sample::Plain(d.tokens.clone()));
    }

    #[test]
    fn empty_middle_reassembles() {
        let d = doc();
        let f = FimStream::split(&d, 7, 7);
        assert!(f.middle.is_empty());
        assert_eq!(reassemble(&f.to_tokens()).unwrap(), d.tokens);
    }

    #[test]
    fn malformed_fim_streams() {
        let d = doc();
        let mut toks = FimStream::split(&d, 3, 9).to_tokens();
        let mid = toks.iter().position(|t| t.is_text(FIM_MIDDLE)).unwrap();
        toks.remove(mid);
        assert!(matches!(reassemble(&toks), Err(SequenceError::MalformedFim(_))));
        let mut dup = FimStream::split(&d, 3, 9).to_tokens();
        dup.insert(2, Token::text(FIM_SUFFIX));
        assert!(reassemble(&dup).is_err());
        assert!(reassemble(&d.tokens).is_err());
    }

    #[test]
    fn image_token_with_sentinel_id_is_not_a_sentinel() {
        let f = FimStream {
            prefix: vec![Token::image(FIM_MIDDLE, 0, 0)],
            suffix: vec![Token::text(65)],
            middle: vec![Token::image(FIM_SUFFIX, 0, 1)],
        };
        assert_eq!(FimStream::parse(&f.to_tokens()).unwrap(), f);
    }

    #[test]
    fn corpus_round_trip_is_byte_stable() {
        let mut header = CorpusHeader::new(16, 256);
        header.template_ids = vec!["t0".into()];
        let corpus = Corpus {
            header,
            docs: vec![doc()],
        };
        let bytes = corpus.to_bytes().unwrap();
        let back = Corpus::read_from(&bytes[..]).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Corpus::read_from(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Corpus::read_from(&bad[..]).is_err());
    }
}
