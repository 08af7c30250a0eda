//! Causal transformer over mixed text/image token streams.
//!
//! Text tokens use a trainable table. Image tokens are embedded from a frozen
//! copy of the quantizer codebook concatenated with a Fourier encoding of
//! their grid cell, then projected to `d_model`; the projection over the
//! concatenation is stored as two blocks (`img.code`, `img.grid`). Each
//! modality has its own output head.

use std::path::Path;

use markupdm_nn::layers::{normal, Embedding, LayerNorm, Linear};
use markupdm_nn::{kernels, Adam, AdamConfig, Float, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::sampler::{HeadLogits, LogitSource, SamplerError};
use crate::sequence::{apply_fim, DocStream, FimConfig, Modality, Token};
use crate::tokenizer::{VocabManifest, TEXT_VOCAB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mlp_ratio: usize,
    /// Fourier frequencies per grid axis; the grid code is `4 * L` wide.
    pub fourier_freqs: usize,
    pub dropout: f64,
    pub lr: f64,
    /// `fit` anneals the rate along a half cosine to `lr * final_lr_fraction`;
    /// 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 2048,
            mlp_ratio: 4,
            fourier_freqs: 8,
            dropout: 0.0,
            lr: 5e-5,
            final_lr_fraction: 1.0,
            clip_norm: 1.0,
            batch_size: 4,
            init_std: 0.02,
            seed: 0,
        }
    }
}

/// Sizes fixed by the vocabulary and the quantizer the model is paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub text: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub grid_side: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid LM config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("image token at position {0} has no grid position")]
    MissingGridPos(usize),
    #[error("token {id} at position {position} is out of range for its vocabulary")]
    TokenOutOfRange { position: usize, id: u32 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl LmConfig {
    pub fn check(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 2 || self.mlp_ratio == 0 || self.batch_size == 0 {
            return bad("max_seq_len >= 2, mlp_ratio and batch_size > 0 required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad(format!("final_lr_fraction {} outside [0, 1]", self.final_lr_fraction));
        }
        Ok(())
    }
}

/// `[sin(2^k pi u), cos(2^k pi u)]` for `k < L`, for `u = row/g` then
/// `u = col/g`.
pub fn fourier_features(row: usize, col: usize, grid_side: usize, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * freqs);
    for u in [row as f64 / grid_side as f64, col as f64 / grid_side as f64] {
        for k in 0..freqs {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * u;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Net {
    text_emb: Embedding,
    pos_emb: ParamId,
    codebook: ParamId,
    img_code: Linear,
    img_grid: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    text_head: Linear,
    image_head: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub step: u64,
    pub loss: f64,
    pub text_loss: f64,
    pub image_loss: f64,
    /// Teacher-forced argmax accuracy over predicted positions.
    pub accuracy: f64,
    pub grad_norm: f64,
}

/// Loss terms of one batch.
pub struct LossGraph {
    /// `(sum text CE + sum image CE) / predicted positions`.
    pub total: Var,
    pub text_sum: Var,
    pub image_sum: Var,
    pub text_logits: Var,
    pub image_logits: Var,
    pub text_targets: Vec<Option<usize>>,
    pub image_targets: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct Lm {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    net: Net,
    pub steps: u64,
}

impl Lm {
    /// A fresh model around a frozen copy of `codebook` (`[Z, d_z]`).
    pub fn new(config: LmConfig, codebook: &Tensor<f32>, grid_side: usize) -> Result<Self, LmError> {
        config.check()?;
        if codebook.shape().len() != 2 || grid_side == 0 {
            return Err(LmError::Config("codebook must be [Z, d_z] and grid_side positive".into()));
        }
        let vocab = Vocab {
            text: TEXT_VOCAB,
            codebook_size: codebook.dim(0),
            code_dim: codebook.dim(1),
            grid_side,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, std) = (config.d_model, config.init_std);
        let text_emb = Embedding::new(&mut store, "text_emb", vocab.text, d, std, &mut rng);
        let pos_emb = store.add("pos_emb", normal(&mut rng, &[config.max_seq_len, d], std));
        let cb = store.add("codebook", codebook.clone());
        store.set_trainable(cb, false);
        let img_code = Linear::new(&mut store, "img.code", vocab.code_dim, d, true, std, &mut rng);
        let img_grid = Linear::new(&mut store, "img.grid", 4 * config.fourier_freqs, d, false, std, &mut rng);
        let out_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|l| Block {
                ln1: LayerNorm::new(&mut store, &format!("h{l}.ln1"), d),
                qkv: Linear::new(&mut store, &format!("h{l}.qkv"), d, 3 * d, true, std, &mut rng),
                proj: Linear::new(&mut store, &format!("h{l}.proj"), d, d, true, out_std, &mut rng),
                ln2: LayerNorm::new(&mut store, &format!("h{l}.ln2"), d),
                fc1: Linear::new(&mut store, &format!("h{l}.fc1"), d, config.mlp_ratio * d, true, std, &mut rng),
                fc2: Linear::new(&mut store, &format!("h{l}.fc2"), config.mlp_ratio * d, d, true, out_std, &mut rng),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", d);
        let text_head = Linear::new(&mut store, "head.text", d, vocab.text, true, std, &mut rng);
        let image_head = Linear::new(&mut store, "head.image", d, vocab.codebook_size, true, std, &mut rng);
        Ok(Self {
            config,
            vocab,
            store,
            net: Net {
                text_emb,
                pos_emb,
                codebook: cb,
                img_code,
                img_grid,
                blocks,
                ln_f,
                text_head,
                image_head,
            },
            steps: 0,
        })
    }

    pub fn codebook(&self) -> &Tensor<f32> {
        self.store.get(self.net.codebook)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn optimizer(&self) -> Adam<f32> {
        Adam::new(AdamConfig {
            lr: self.config.lr,
            clip_norm: Some(self.config.clip_norm),
            ..AdamConfig::default()
        })
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), LmError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(LmError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for (position, t) in tokens.iter().enumerate() {
            let limit = match t.modality {
                Modality::Text => self.vocab.text,
                Modality::Image => {
                    let (r, c) = t.grid_pos.ok_or(LmError::MissingGridPos(position))?;
                    if usize::from(r.max(c)) >= self.vocab.grid_side {
                        return Err(LmError::MissingGridPos(position));
                    }
                    self.vocab.codebook_size
                }
            };
            if t.id as usize >= limit {
                return Err(LmError::TokenOutOfRange { position, id: t.id });
            }
        }
        Ok(())
    }

    fn grid_code<T: Float>(&self, t: &Token) -> Vec<T> {
        let (r, c) = t.grid_pos.expect("checked");
        fourier_features(r.into(), c.into(), self.vocab.grid_side, self.config.fourier_freqs)
            .into_iter()
            .map(T::from_f64)
            .collect()
    }

    /// Input embeddings (token plus sequence position) of the concatenated
    /// sequences; positions restart at each segment.
    fn embed_graph<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: &[Token], segments: &[Segment]) -> Var {
        let mut picks = Vec::with_capacity(tokens.len());
        let (mut text_ids, mut image_ids, mut grid) = (Vec::new(), Vec::new(), Vec::new());
        let has_text = tokens.iter().any(|t| t.modality == Modality::Text);
        for t in tokens {
            match t.modality {
                Modality::Text => {
                    picks.push((0, text_ids.len()));
                    text_ids.push(t.id as usize);
                }
                Modality::Image => {
                    picks.push((usize::from(has_text), image_ids.len()));
                    image_ids.push(t.id as usize);
                    grid.extend(self.grid_code::<T>(t));
                }
            }
        }
        let mut inputs = Vec::new();
        if has_text {
            inputs.push(self.net.text_emb.forward(g, store, &text_ids));
        }
        if !image_ids.is_empty() {
            let cb = g.param(store, self.net.codebook);
            let projected = self.net.img_code.forward(g, store, cb);
            let rows = g.index_rows(projected, &image_ids);
            let f = g.constant(Tensor::new([image_ids.len(), 4 * self.config.fourier_freqs], grid));
            let fg = self.net.img_grid.forward(g, store, f);
            inputs.push(g.add(rows, fg));
        }
        let x = g.gather_rows(&inputs, picks);
        let positions: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
        let table = g.param(store, self.net.pos_emb);
        let pos = g.index_rows(table, &positions);
        g.add(x, pos)
    }

    fn dropout<T: Float>(&self, g: &mut Graph<T>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask = (0..n).map(|_| if rng.gen_bool(p) { T::ZERO } else { keep }).collect();
        let m = g.constant(Tensor::new(shape, mask));
        g.mul(x, m)
    }

    /// Both heads' logits for every row of the concatenated `segments`.
    pub fn forward_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: &[Token],
        segments: &[Segment],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Var, Var) {
        let heads = self.config.n_heads;
        let mut x = self.embed_graph(g, store, tokens, segments);
        x = self.dropout(g, x, &mut dropout_rng);
        for b in &self.net.blocks {
            let h = b.ln1.forward(g, store, x);
            let qkv = b.qkv.forward(g, store, h);
            let a = g.causal_attention(qkv, heads, segments);
            let a = b.proj.forward(g, store, a);
            let a = self.dropout(g, a, &mut dropout_rng);
            x = g.add(x, a);
            let h = b.ln2.forward(g, store, x);
            let h = b.fc1.forward(g, store, h);
            let h = g.gelu(h);
            let h = b.fc2.forward(g, store, h);
            let h = self.dropout(g, h, &mut dropout_rng);
            x = g.add(x, h);
        }
        let x = self.net.ln_f.forward(g, store, x);
        (self.net.text_head.forward(g, store, x), self.net.image_head.forward(g, store, x))
    }

    /// Next-token loss over a batch of sequences: each position predicts its
    /// successor with the head of the successor's modality.
    pub fn loss_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &[Vec<Token>],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossGraph, LmError> {
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        let (mut text_targets, mut image_targets) = (Vec::new(), Vec::new());
        for seq in batch {
            self.check_tokens(seq)?;
            segments.push(Segment {
                start: tokens.len(),
                len: seq.len(),
            });
            tokens.extend_from_slice(seq);
            for (i, _) in seq.iter().enumerate() {
                let next = seq.get(i + 1);
                text_targets.push(next.filter(|t| t.modality == Modality::Text).map(|t| t.id as usize));
                image_targets.push(next.filter(|t| t.modality == Modality::Image).map(|t| t.id as usize));
            }
        }
        let predicted = text_targets.iter().chain(&image_targets).filter(|t| t.is_some()).count();
        let (text_logits, image_logits) = self.forward_graph(g, store, &tokens, &segments, dropout_rng);
        let text_sum = g.cross_entropy_sum(text_logits, &text_targets);
        let image_sum = g.cross_entropy_sum(image_logits, &image_targets);
        let both = g.add(text_sum, image_sum);
        let total = g.scale(both, 1.0 / predicted.max(1) as f64);
        Ok(LossGraph {
            total,
            text_sum,
            image_sum,
            text_logits,
            image_logits,
            text_targets,
            image_targets,
        })
    }

    /// Scalar loss in `f32` without building gradients.
    pub fn loss(&self, batch: &[Vec<Token>]) -> Result<f64, LmError> {
        let mut g = Graph::new();
        let lg = self.loss_graph(&mut g, &self.store, batch, None)?;
        Ok(f64::from(g.value(lg.total).item()))
    }

    pub fn train_step(&mut self, batch: &[Vec<Token>], opt: &mut Adam<f32>, dropout_rng: &mut ChaCha8Rng) -> Result<LmReport, LmError> {
        let mut g = Graph::new();
        let lg = self.loss_graph(&mut g, &self.store, batch, Some(dropout_rng))?;
        let total = f64::from(g.value(lg.total).item());
        let step = self.steps + 1;
        if !total.is_finite() {
            return Err(LmError::NonFiniteLoss {
                step,
                detail: format!("loss {total}"),
            });
        }
        let n_text = lg.text_targets.iter().flatten().count();
        let n_image = lg.image_targets.iter().flatten().count();
        let per = |v: Var, n: usize| if n == 0 { 0.0 } else { f64::from(g.value(v).item()) / n as f64 };
        let correct = count_correct(g.value(lg.text_logits), &lg.text_targets)
            + count_correct(g.value(lg.image_logits), &lg.image_targets);
        let mut report = LmReport {
            step,
            loss: total,
            text_loss: per(lg.text_sum, n_text),
            image_loss: per(lg.image_sum, n_image),
            accuracy: correct as f64 / (n_text + n_image).max(1) as f64,
            grad_norm: 0.0,
        };
        let grads = g.backward(lg.total).into_param_grads();
        report.grad_norm = opt.step(&mut self.store, &grads);
        if !report.grad_norm.is_finite() {
            return Err(LmError::NonFiniteLoss {
                step,
                detail: format!("gradient norm {}", report.grad_norm),
            });
        }
        self.steps = step;
        Ok(report)
    }

    /// Trains on `docs` for `steps` updates. Each batch draws documents from
    /// shuffled epochs and FIM-transforms each draw independently.
    pub fn fit(
        &mut self,
        docs: &[DocStream],
        steps: u64,
        fim: &FimConfig,
        mut log: impl FnMut(&LmReport),
    ) -> Result<Vec<LmReport>, LmError> {
        if let Some(d) = docs.iter().find(|d| d.tokens.len() + 2 > self.config.max_seq_len) {
            return Err(LmError::SequenceTooLong {
                len: d.tokens.len() + 2,
                max: self.config.max_seq_len,
            });
        }
        if docs.is_empty() {
            return Ok(Vec::new());
        }
        let mut opt = self.optimizer();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x1f));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x2f));
        let mut order: Vec<usize> = Vec::new();
        let bs = self.config.batch_size.min(docs.len());
        let mut history = Vec::with_capacity(steps as usize);
        let (lr0, floor) = (self.config.lr, self.config.lr * self.config.final_lr_fraction);
        for k in 0..steps {
            let progress = k as f64 / steps.max(1) as f64;
            opt.config.lr = floor + (lr0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            if order.len() < bs {
                let mut epoch: Vec<usize> = (0..docs.len()).collect();
                epoch.shuffle(&mut rng);
                order.extend(epoch);
            }
            let batch: Vec<Vec<Token>> = order.drain(..bs).map(|i| apply_fim(&docs[i], fim, &mut rng).tokens()).collect();
            let report = self.train_step(&batch, &mut opt, &mut dropout_rng)?;
            log(&report);
            history.push(report);
        }
        Ok(history)
    }

    /// Teacher-forced next-token accuracy over each sequence.
    pub fn accuracy(&self, batch: &[Vec<Token>]) -> Result<f64, LmError> {
        let (mut correct, mut total) = (0, 0);
        for seq in batch {
            let mut g = Graph::new();
            let lg = self.loss_graph(&mut g, &self.store, std::slice::from_ref(seq), None)?;
            correct += count_correct(g.value(lg.text_logits), &lg.text_targets)
                + count_correct(g.value(lg.image_logits), &lg.image_targets);
            total += seq.len().saturating_sub(1);
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    /// Logits of both heads at every position of one sequence.
    pub fn logits(&self, tokens: &[Token]) -> Result<(Tensor<f32>, Tensor<f32>), LmError> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let seg = [Segment {
            start: 0,
            len: tokens.len(),
        }];
        let (t, i) = self.forward_graph(&mut g, &self.store, tokens, &seg, None);
        Ok((g.value(t).clone(), g.value(i).clone()))
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            lm: self,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    pub fn save(&self, path: &Path, manifest: &LmManifest) -> Result<String, LmError> {
        Ok(checkpoint::save(path, &self.store, manifest)?)
    }

    /// Loads a checkpoint, refusing it unless it was trained against the
    /// current vocabulary and (when given) the quantizer with sha256
    /// `quantizer_sha256`.
    pub fn load(path: &Path, quantizer_sha256: Option<&str>) -> Result<(Self, LmManifest, String), LmError> {
        let loaded = checkpoint::load::<LmManifest>(path)?;
        let m = loaded.manifest;
        let vocab_hash = VocabManifest::current().hash();
        if m.vocab_hash != vocab_hash {
            return Err(CheckpointError::Lineage {
                what: "vocabulary",
                stored: m.vocab_hash,
                actual: vocab_hash,
            }
            .into());
        }
        if let Some(q) = quantizer_sha256 {
            if m.quantizer_sha256 != q {
                return Err(CheckpointError::Lineage {
                    what: "quantizer",
                    stored: m.quantizer_sha256,
                    actual: q.to_string(),
                }
                .into());
            }
        }
        let cb = loaded
            .tensors
            .get("codebook")
            .ok_or_else(|| CheckpointError::MissingTensor("codebook".into()))?;
        let mut lm = Lm::new(m.config.clone(), cb, m.vocab.grid_side)?;
        checkpoint::restore(&mut lm.store, &loaded.tensors)?;
        lm.steps = m.steps;
        Ok((lm, m, loaded.sha256))
    }
}

fn count_correct(logits: &Tensor<f32>, targets: &[Option<usize>]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|(r, t)| t.is_some_and(|t| argmax_row(logits.row(*r)) == t))
        .count()
}

fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmManifest {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub quantizer_sha256: String,
    pub steps: u64,
    pub history: Vec<LmReport>,
}

impl LmManifest {
    pub fn new(lm: &Lm, quantizer_sha256: impl Into<String>, history: Vec<LmReport>) -> Self {
        Self {
            config: lm.config.clone(),
            vocab: lm.vocab,
            vocab_hash: VocabManifest::current().hash(),
            quantizer_sha256: quantizer_sha256.into(),
            steps: lm.steps,
            history,
        }
    }
}

// ---------------------------------------------------------------- inference

/// Incremental decoding with per-layer key/value caches.
pub struct Session<'a> {
    lm: &'a Lm,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn layer_norm_rows(x: &[f32], d: usize, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f32> {
    let (mean, rstd) = kernels::group_stats(x, d, eps);
    let mut out = x.to_vec();
    for (r, row) in out.chunks_exact_mut(d).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[r]) * rstd[r] * gamma[j] + beta[j];
        }
    }
    out
}

impl Session<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn linear(&self, x: &[f32], rows: usize, l: &Linear) -> Vec<f32> {
        let w = self.lm.store.get(l.weight).data();
        let mut out = vec![0.0f32; rows * l.out_dim];
        if let Some(b) = l.bias {
            let b = self.lm.store.get(b).data();
            out.chunks_exact_mut(l.out_dim).for_each(|r| r.copy_from_slice(b));
        }
        let beta = if l.bias.is_some() { 1.0 } else { 0.0 };
        f32::gemm(
            rows,
            l.in_dim,
            l.out_dim,
            1.0,
            (x, l.in_dim as isize, 1),
            (w, l.out_dim as isize, 1),
            beta,
            (&mut out, l.out_dim as isize, 1),
        );
        out
    }

    fn ln(&self, x: &[f32], l: &LayerNorm) -> Vec<f32> {
        let s = &self.lm.store;
        layer_norm_rows(x, self.lm.config.d_model, s.get(l.gamma).data(), s.get(l.beta).data(), l.eps)
    }

    fn embed(&self, tokens: &[Token]) -> Vec<f32> {
        let lm = self.lm;
        let d = lm.config.d_model;
        let s = &lm.store;
        let text = s.get(lm.net.text_emb.table);
        let pos = s.get(lm.net.pos_emb);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (k, t) in tokens.iter().enumerate() {
            let row: Vec<f32> = match t.modality {
                Modality::Text => text.row(t.id as usize).to_vec(),
                Modality::Image => {
                    let code = self.linear(s.get(lm.net.codebook).row(t.id as usize), 1, &lm.net.img_code);
                    let f = self.linear(&lm.grid_code::<f32>(t), 1, &lm.net.img_grid);
                    code.iter().zip(&f).map(|(a, b)| a + b).collect()
                }
            };
            out.extend(row.iter().zip(pos.row(self.len + k)).map(|(a, b)| a + b));
        }
        out
    }

    /// Appends `tokens` and returns both heads' logits at the last one.
    pub fn push(&mut self, tokens: &[Token]) -> Result<HeadLogits, LmError> {
        let lm = self.lm;
        if tokens.is_empty() {
            return Err(LmError::Config("push needs at least one token".into()));
        }
        if self.len + tokens.len() > lm.config.max_seq_len {
            return Err(LmError::SequenceTooLong {
                len: self.len + tokens.len(),
                max: lm.config.max_seq_len,
            });
        }
        lm.check_tokens(tokens)?;
        let (d, heads, m) = (lm.config.d_model, lm.config.n_heads, tokens.len());
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = self.embed(tokens);
        for (l, b) in lm.net.blocks.iter().enumerate() {
            let h = self.ln(&x, &b.ln1);
            let qkv = self.linear(&h, m, &b.qkv);
            for r in 0..m {
                self.keys[l].extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                self.values[l].extend_from_slice(&qkv[r * 3 * d + 2 * d..(r + 1) * 3 * d]);
            }
            let mut att = vec![0.0f32; m * d];
            for r in 0..m {
                let ctx = self.len + r + 1;
                for hd in 0..heads {
                    let q = &qkv[r * 3 * d + hd * dh..r * 3 * d + (hd + 1) * dh];
                    let mut p: Vec<f32> = (0..ctx)
                        .map(|j| {
                            let k = &self.keys[l][j * d + hd * dh..j * d + (hd + 1) * dh];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale
                        })
                        .collect();
                    kernels::softmax_in_place(&mut p);
                    let o = &mut att[r * d + hd * dh..r * d + (hd + 1) * dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let v = &self.values[l][j * d + hd * dh..j * d + (hd + 1) * dh];
                        o.iter_mut().zip(v).for_each(|(o, v)| *o += pj * v);
                    }
                }
            }
            let a = self.linear(&att, m, &b.proj);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let h = self.ln(&x, &b.ln2);
            let h: Vec<f32> = self.linear(&h, m, &b.fc1).into_iter().map(kernels::gelu).collect();
            let h = self.linear(&h, m, &b.fc2);
            x.iter_mut().zip(&h).for_each(|(x, h)| *x += h);
        }
        self.len += m;
        let last = self.ln(&x[(m - 1) * d..], &lm.net.ln_f);
        Ok(HeadLogits {
            text: self.linear(&last, 1, &lm.net.text_head),
            image: self.linear(&last, 1, &lm.net.image_head),
        })
    }
}

impl LogitSource for Session<'_> {
    fn feed(&mut self, tokens: &[Token]) -> Result<HeadLogits, SamplerError> {
        self.push(tokens).map_err(|e| SamplerError::Model(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::text_tokens;
    use crate::tokenizer::{BOI, BOS, EOI, EOS, SEP};

    fn tiny() -> LmConfig {
        LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            mlp_ratio: 2,
            fourier_freqs: 3,
            init_std: 0.2,
            ..LmConfig::default()
        }
    }

    fn codebook() -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        normal(&mut rng, &[6, 4], 1.0)
    }

    fn seq() -> Vec<Token> {
        let mut s = vec![Token::text(BOS)];
        s.extend(text_tokens("ab"));
        s.push(Token::text(BOI));
        s.extend(text_tokens("4"));
        s.push(Token::text(SEP));
        s.extend(text_tokens("4"));
        s.push(Token::text(SEP));
        for k in 0..4u16 {
            s.push(Token::image(u32::from(k) + 1, k / 2, k % 2));
        }
        s.push(Token::text(EOI));
        s.push(Token::text(EOS));
        s
    }

    #[test]
    fn fourier_at_origin() {
        let f = fourier_features(0, 0, 16, 8);
        assert_eq!(f.len(), 32);
        for k in 0..16 {
            assert_eq!(f[2 * k], 0.0);
            assert_eq!(f[2 * k + 1], 1.0);
        }
        // Grid projector input: code dimension plus 4L.
        let lm = Lm::new(LmConfig { fourier_freqs: 8, ..tiny() }, &Tensor::zeros([3, 64]), 16).unwrap();
        assert_eq!(lm.store.get(lm.net.img_code.weight).dim(0) + lm.store.get(lm.net.img_grid.weight).dim(0), 64 + 32);
    }

    #[test]
    fn same_code_different_cells_embed_differently() {
        let lm = Lm::new(tiny(), &codebook(), 2).unwrap();
        let s = lm.session();
        let a = s.embed(&[Token::image(3, 0, 0)]);
        let b = s.embed(&[Token::image(3, 1, 1)]);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn causal_prefix_invariance() {
        let lm = Lm::new(tiny(), &codebook(), 2).unwrap();
        let s = seq();
        let (t1, i1) = lm.logits(&s).unwrap();
        let mut other = s.clone();
        other[9] = Token::image(5, 0, 1);
        other[12] = Token::text(7);
        let (t2, i2) = lm.logits(&other).unwrap();
        for r in 0..9 {
            assert_eq!(t1.row(r), t2.row(r));
            assert_eq!(i1.row(r), i2.row(r));
        }
    }

    #[test]
    fn session_matches_full_forward() {
        let lm = Lm::new(tiny(), &codebook(), 2).unwrap();
        let s = seq();
        let (t, i) = lm.logits(&s).unwrap();
        let mut sess = lm.session();
        let mut out = sess.push(&s[..5]).unwrap();
        let check = |out: &HeadLogits, r: usize| {
            let dt = out.text.iter().zip(t.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            let di = out.image.iter().zip(i.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(dt < 1e-4 && di < 1e-4, "row {r}: {dt} {di}");
        };
        check(&out, 4);
        for r in 5..s.len() {
            out = sess.push(&s[r..=r]).unwrap();
            check(&out, r);
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let mut lm = Lm::new(tiny(), &codebook(), 2).unwrap();
        for id in [lm.net.text_head.weight, lm.net.image_head.weight] {
            let shape = lm.store.get(id).shape().to_vec();
            lm.store.set(id, Tensor::zeros(shape));
        }
        let s = seq();
        let mut g = Graph::<f32>::new();
        let lg = lm.loss_graph(&mut g, &lm.store, &[s.clone()], None).unwrap();
        let n_text = lg.text_targets.iter().flatten().count() as f64;
        let n_img = lg.image_targets.iter().flatten().count() as f64;
        let text = f64::from(g.value(lg.text_sum).item()) / n_text;
        let img = f64::from(g.value(lg.image_sum).item()) / n_img;
        assert!((text - 264f64.ln()).abs() < 1e-4, "{text}");
        assert!((img - 6f64.ln()).abs() < 1e-4, "{img}");
    }

    #[test]
    fn softmax_of_heads_normalizes() {
        let lm = Lm::new(tiny(), &codebook(), 2).unwrap();
        let (t, _) = lm.logits(&seq()).unwrap();
        for r in 0..t.dim(0) {
            let mut row = t.row(r).to_vec();
            kernels::softmax_in_place(&mut row);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn training_leaves_codebook_untouched_and_lowers_loss() {
        let mut lm = Lm::new(LmConfig { lr: 3e-3, ..tiny() }, &codebook(), 2).unwrap();
        let before = lm.codebook().clone();
        let mut opt = lm.optimizer();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = vec![seq()];
        let first = lm.loss(&batch).unwrap();
        for _ in 0..60 {
            lm.train_step(&batch, &mut opt, &mut rng).unwrap();
        }
        assert!(lm.loss(&batch).unwrap() < first * 0.5);
        assert_eq!(lm.codebook().data(), before.data());
    }

    #[test]
    fn errors() {
        let lm = Lm::new(tiny(), &codebook(), 2).unwrap();
        let long = vec![Token::text(1); 65];
        assert!(matches!(lm.logits(&long), Err(LmError::SequenceTooLong { .. })));
        let bad = [Token { grid_pos: None, ..Token::image(1, 0, 0) }];
        assert!(matches!(lm.logits(&bad), Err(LmError::MissingGridPos(0))));
        assert!(matches!(lm.logits(&[Token::image(6, 0, 0)]), Err(LmError::TokenOutOfRange { .. })));
        assert!(Lm::new(LmConfig { n_heads: 3, ..tiny() }, &codebook(), 2).is_err());
    }

    #[test]
    fn checkpoint_lineage() {
        let lm = Lm::new(tiny(), &codebook(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.safetensors");
        lm.save(&path, &LmManifest::new(&lm, "q1", Vec::new())).unwrap();
        let (back, m, _) = Lm::load(&path, Some("q1")).unwrap();
        assert_eq!(m.quantizer_sha256, "q1");
        assert_eq!(back.logits(&seq()).unwrap().0.data(), lm.logits(&seq()).unwrap().0.data());
        assert!(matches!(
            Lm::load(&path, Some("q2")),
            Err(LmError::Checkpoint(CheckpointError::Lineage { what: "quantizer", .. }))
        ));
    }
}
