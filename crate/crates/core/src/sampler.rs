//! Modality routing over the image-block grammar, nucleus sampling, and the
//! completion loop.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sequence::{Modality, Token};
use crate::tokenizer::{BOI, BOS, EOI, EOS, FIM_MIDDLE, FIM_PREFIX, FIM_SUFFIX, SEP};

/// Digits allowed per block dimension under enforcement; keeps a block
/// within `4 + 2 * 5 + g^2` tokens.
pub const MAX_DIM_DIGITS: usize = 5;

const QUOTE: u32 = b'"' as u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Text,
    /// Reading the width; `digits` already seen.
    Width { digits: usize },
    Height { digits: usize },
    /// `remaining` image tokens left in the block.
    ImageTokens { remaining: usize },
    ForceEoi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Text => f.write_str("TEXT_MODE"),
            Mode::Width { .. } => f.write_str("IMG_WIDTH"),
            Mode::Height { .. } => f.write_str("IMG_HEIGHT"),
            Mode::ImageTokens { remaining } => write!(f, "IMG_TOKENS({remaining})"),
            Mode::ForceEoi => f.write_str("FORCE_EOI"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("grammar violation at token {position}: {token:?} in {mode}")]
pub struct GrammarViolation {
    pub position: usize,
    pub mode: Mode,
    pub token: Token,
}

/// What the next token must be.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Next {
    pub modality: Modality,
    pub forced: Option<u32>,
    /// Row-major grid cell of the next image token.
    pub grid_pos: Option<(u16, u16)>,
}

/// Deterministic state machine over `[boi] digits [sep] digits [sep] <g*g
/// image tokens> [eoi]`. With `strict`, width/height accept only digits (at
/// most [`MAX_DIM_DIGITS`], at least one) and text mode rejects stray `[sep]`
/// and `[eoi]`; without it, non-digits inside a dimension are tolerated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Router {
    grid_side: usize,
    strict: bool,
    mode: Mode,
    seen: usize,
}

impl Router {
    pub fn new(grid_side: usize, strict: bool) -> Self {
        Self {
            grid_side,
            strict,
            mode: Mode::Text,
            seen: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn next(&self) -> Next {
        let g = self.grid_side;
        match self.mode {
            Mode::ImageTokens { remaining } => {
                let k = g * g - remaining;
                Next {
                    modality: Modality::Image,
                    forced: None,
                    grid_pos: Some(((k / g) as u16, (k % g) as u16)),
                }
            }
            Mode::ForceEoi => Next {
                modality: Modality::Text,
                forced: Some(EOI),
                grid_pos: None,
            },
            _ => Next {
                modality: Modality::Text,
                forced: None,
                grid_pos: None,
            },
        }
    }

    /// Text ids admissible next; `None` when every text id is.
    pub fn allowed_text(&self, vocab: usize) -> Option<Vec<bool>> {
        if !self.strict {
            return None;
        }
        let mut mask = vec![false; vocab];
        let mut allow = |id: u32| {
            if let Some(m) = mask.get_mut(id as usize) {
                *m = true;
            }
        };
        match self.mode {
            Mode::Width { digits } | Mode::Height { digits } => {
                if digits < MAX_DIM_DIGITS {
                    (b'0'..=b'9').for_each(|d| allow(u32::from(d)));
                }
                if digits > 0 {
                    allow(SEP);
                }
            }
            Mode::ForceEoi => allow(EOI),
            Mode::Text => {
                for id in 0..vocab as u32 {
                    if ![SEP, EOI, BOS, FIM_PREFIX, FIM_SUFFIX, FIM_MIDDLE].contains(&id) {
                        allow(id);
                    }
                }
            }
            Mode::ImageTokens { .. } => {}
        }
        Some(mask)
    }

    /// Advances past `token`, or reports why it cannot follow.
    pub fn observe(&mut self, token: &Token) -> Result<(), GrammarViolation> {
        let violation = GrammarViolation {
            position: self.seen,
            mode: self.mode,
            token: *token,
        };
        let is_digit = |t: &Token| t.modality == Modality::Text && (u32::from(b'0')..=u32::from(b'9')).contains(&t.id);
        let g2 = self.grid_side * self.grid_side;
        let next = match (self.mode, token.modality) {
            (Mode::Text, Modality::Text) => match token.id {
                BOI => Mode::Width { digits: 0 },
                SEP | EOI if self.strict => return Err(violation),
                _ => Mode::Text,
            },
            (Mode::Width { digits } | Mode::Height { digits }, Modality::Text) => {
                let width = matches!(self.mode, Mode::Width { .. });
                if token.id == SEP && (digits > 0 || !self.strict) {
                    if width {
                        Mode::Height { digits: 0 }
                    } else if g2 == 0 {
                        Mode::ForceEoi
                    } else {
                        Mode::ImageTokens { remaining: g2 }
                    }
                } else if (is_digit(token) && (digits < MAX_DIM_DIGITS || !self.strict))
                    || (!self.strict && ![SEP, BOI, EOI, EOS, BOS].contains(&token.id))
                {
                    if width {
                        Mode::Width { digits: digits + 1 }
                    } else {
                        Mode::Height { digits: digits + 1 }
                    }
                } else {
                    return Err(violation);
                }
            }
            (Mode::ImageTokens { remaining }, Modality::Image) => {
                if token.grid_pos != self.next().grid_pos {
                    return Err(violation);
                }
                if remaining == 1 {
                    Mode::ForceEoi
                } else {
                    Mode::ImageTokens { remaining: remaining - 1 }
                }
            }
            (Mode::ForceEoi, Modality::Text) if token.id == EOI => Mode::Text,
            _ => return Err(violation),
        };
        self.mode = next;
        self.seen += 1;
        Ok(())
    }

    /// Replays `tokens` from the current state.
    pub fn observe_all(&mut self, tokens: &[Token]) -> Result<(), GrammarViolation> {
        tokens.iter().try_for_each(|t| self.observe(t))
    }
}

/// Checks a complete `[bos] ... [eos]` document: strict grammar, delimiters
/// only at the ends, and text mode at the end.
pub fn validate_document(tokens: &[Token], grid_side: usize) -> Result<(), GrammarViolation> {
    let mut router = Router::new(grid_side, true);
    let n = tokens.len();
    for (k, t) in tokens.iter().enumerate() {
        let delimiter = if k == 0 {
            Some(BOS)
        } else if k + 1 == n {
            Some(EOS)
        } else {
            None
        };
        let ok = match delimiter {
            Some(id) => t.is_text(id) && router.mode() == Mode::Text,
            None => !(t.is_text(BOS) || t.is_text(EOS)) && router.observe(t).is_ok(),
        };
        if !ok {
            return Err(GrammarViolation {
                position: k,
                mode: router.mode(),
                token: *t,
            });
        }
    }
    if n < 2 {
        return Err(GrammarViolation {
            position: n,
            mode: router.mode(),
            token: Token::text(EOS),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SamplerError {
    #[error("no admissible token has finite positive probability")]
    EmptySupport,
    #[error(transparent)]
    Grammar(#[from] GrammarViolation),
    #[error("model: {0}")]
    Model(String),
}

/// Tokens that survive temperature, masking and the nucleus cut, with their
/// renormalized probabilities in descending order (ties by index).
pub fn keep_set(
    logits: &[f32],
    p: f64,
    temperature: f64,
    allowed: Option<&[bool]>,
) -> Result<Vec<(usize, f64)>, SamplerError> {
    let admissible = |i: usize| allowed.is_none_or(|m| m.get(i).copied().unwrap_or(false)) && logits[i].is_finite();
    let scaled: Vec<(usize, f64)> = (0..logits.len())
        .filter(|&i| admissible(i))
        .map(|i| (i, f64::from(logits[i]) / temperature))
        .collect();
    let max = scaled.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
    if scaled.is_empty() || !max.is_finite() {
        return Err(SamplerError::EmptySupport);
    }
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|&(i, v)| (i, (v - max).exp())).collect();
    let z: f64 = probs.iter().map(|&(_, q)| q).sum();
    probs.iter_mut().for_each(|(_, q)| *q /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = if p >= 1.0 {
        probs.len()
    } else {
        let mut cum = 0.0;
        probs.iter().position(|&(_, q)| {
            cum += q;
            cum >= p
        })
        .map_or(probs.len(), |k| k + 1)
    };
    probs.truncate(keep);
    let z: f64 = probs.iter().map(|&(_, q)| q).sum();
    probs.iter_mut().for_each(|(_, q)| *q /= z);
    Ok(probs)
}

/// Nucleus sampling: temperature, mask, minimal prefix with mass >= `p`,
/// renormalize, draw.
pub fn top_p_sample(
    logits: &[f32],
    p: f64,
    temperature: f64,
    rng: &mut impl Rng,
    allowed: Option<&[bool]>,
) -> Result<usize, SamplerError> {
    let kept = keep_set(logits, p, temperature, allowed)?;
    let mut u: f64 = rng.gen();
    for &(i, q) in &kept {
        if u < q {
            return Ok(i);
        }
        u -= q;
    }
    Ok(kept.last().expect("non-empty keep set").0)
}

/// Highest admissible logit, lowest index on ties.
pub fn argmax(logits: &[f32], allowed: Option<&[bool]>) -> Result<usize, SamplerError> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        let ok = allowed.is_none_or(|m| m.get(i).copied().unwrap_or(false)) && !v.is_nan();
        if ok && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or(SamplerError::EmptySupport)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decoding {
    Greedy,
    TopP { p: f64, temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Attribute,
    Text,
    Image,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Attribute => "attr",
            Task::Text => "text",
            Task::Image => "image",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub decoding: Decoding,
    /// In byte tokens; 24 fits the longest whitelisted font family.
    pub budget_attribute: usize,
    pub budget_text: usize,
    pub budget_image: usize,
    /// Strict block grammar (digit-only dimensions, no stray `[sep]`/`[eoi]`).
    pub enforce_grammar: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::TopP {
                p: 0.9,
                temperature: 1.0,
            },
            budget_attribute: 24,
            budget_text: 50,
            budget_image: 278,
            enforce_grammar: true,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            decoding: Decoding::Greedy,
            ..Self::default()
        }
    }

    pub fn budget(&self, task: Task) -> usize {
        match task {
            Task::Attribute => self.budget_attribute,
            Task::Text => self.budget_text,
            Task::Image => self.budget_image,
        }
    }
}

/// Logits of both heads at the last fed position.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub text: Vec<f32>,
    pub image: Vec<f32>,
}

/// An incremental model: appends tokens, returns logits after the last one.
pub trait LogitSource {
    fn feed(&mut self, tokens: &[Token]) -> Result<HeadLogits, SamplerError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    /// Attribute middles end at the closing quote, which is not kept.
    Quote,
    /// Image middles end once their block is closed.
    BlockClosed,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<Token>,
    pub stop: StopReason,
}

impl Generation {
    pub fn complete(&self) -> bool {
        self.stop != StopReason::Budget
    }
}

/// Generates a middle for the prompt `[fim_prefix] P [fim_suffix] S
/// [fim_middle]`. The router starts from the state at the end of `prefix`.
/// Image tasks open with a forced `[boi]` and stop when the block closes.
pub fn generate(
    model: &mut impl LogitSource,
    prefix: &[Token],
    prompt: &[Token],
    task: Task,
    grid_side: usize,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Generation, SamplerError> {
    let mut router = Router::new(grid_side, config.enforce_grammar);
    router.observe_all(prefix)?;
    let mut logits = model.feed(prompt)?;
    let mut out = Vec::new();
    for step in 0..config.budget(task) {
        let next = router.next();
        let token = if let Some(id) = next.forced {
            Token::text(id)
        } else if task == Task::Image && step == 0 && router.mode() == Mode::Text {
            Token::text(BOI)
        } else if next.modality == Modality::Image {
            let id = pick(&logits.image, None, config, rng)?;
            let (r, c) = next.grid_pos.expect("image step has a grid cell");
            Token::image(id as u32, r, c)
        } else {
            let mask = router.allowed_text(logits.text.len());
            Token::text(pick(&logits.text, mask.as_deref(), config, rng)? as u32)
        };
        if router.mode() == Mode::Text && token.modality == Modality::Text {
            if token.id == EOS {
                return Ok(Generation {
                    tokens: out,
                    stop: StopReason::Eos,
                });
            }
            if task == Task::Attribute && token.id == QUOTE {
                return Ok(Generation {
                    tokens: out,
                    stop: StopReason::Quote,
                });
            }
        }
        router.observe(&token)?;
        out.push(token);
        if task == Task::Image && token.is_text(EOI) && router.mode() == Mode::Text {
            return Ok(Generation {
                tokens: out,
                stop: StopReason::BlockClosed,
            });
        }
        logits = model.feed(&[token])?;
    }
    Ok(Generation {
        tokens: out,
        stop: StopReason::Budget,
    })
}

fn pick(logits: &[f32], mask: Option<&[bool]>, config: &SamplerConfig, rng: &mut impl Rng) -> Result<usize, SamplerError> {
    match config.decoding {
        Decoding::Greedy => argmax(logits, mask),
        Decoding::TopP { p, temperature } => top_p_sample(logits, p, temperature, rng, mask),
    }
}
