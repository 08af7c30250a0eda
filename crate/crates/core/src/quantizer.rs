//! RGBA vector-quantizing autoencoder.
//!
//! An `s x s` image becomes a `g x g` grid of codebook indices, `g = s / f`.
//! The encoder is a strided conv stack with residual blocks and group norm;
//! the decoder mirrors it with nearest-neighbour upsampling. Images enter the
//! network mapped to `[-1, 1]` and leave through `0.5 * y + 0.5`.

use markupdm_nn::layers::{Conv2d, GroupNorm};
use markupdm_nn::{Adam, AdamConfig, Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::raster::{resize_bilinear, RasterImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Side of the fixed square every image is resized to.
    pub square_size: usize,
    /// Spatial downsampling factor; a power of two.
    pub scale_factor: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Conv width of each resolution level, outermost first; one entry per
    /// factor-of-two downsampling.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    /// Commitment weight.
    pub beta: f64,
    pub lr: f64,
    /// `fit` anneals the rate along a half cosine to `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    /// Seed the codebook from encoder outputs of the training images
    /// (all of them under `fit`, else the first batch).
    pub data_init_codebook: bool,
    /// Reserved: no pretrained feature network ships with this crate.
    pub perceptual_loss: bool,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            square_size: 64,
            scale_factor: 8,
            codebook_size: 256,
            code_dim: 32,
            channels: vec![16, 32, 64],
            res_blocks: 1,
            groups: 4,
            beta: 0.25,
            lr: 1e-3,
            final_lr_fraction: 1.0,
            batch_size: 8,
            data_init_codebook: true,
            perceptual_loss: false,
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn grid_side(&self) -> usize {
        self.square_size / self.scale_factor
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_side().pow(2)
    }

    pub fn check(&self) -> Result<(), QuantizerError> {
        let bad = |m: String| Err(QuantizerError::Config(m));
        let f = self.scale_factor;
        if f < 2 || !f.is_power_of_two() {
            return bad(format!("scale_factor {f} must be a power of two >= 2"));
        }
        if self.square_size % f != 0 {
            return bad(format!("square_size {} not divisible by {f}", self.square_size));
        }
        if self.channels.len() != f.trailing_zeros() as usize {
            return bad(format!("{} channel levels for f={f}; need {}", self.channels.len(), f.trailing_zeros()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.groups != 0) {
            return bad(format!("channel width {c} not divisible by {} groups", self.groups));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad(format!("final_lr_fraction {} outside [0, 1]", self.final_lr_fraction));
        }
        if self.codebook_size == 0 || self.code_dim == 0 || self.batch_size == 0 {
            return bad("codebook_size, code_dim and batch_size must be positive".into());
        }
        if self.perceptual_loss {
            return bad("perceptual_loss requires a feature network, which is not available".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QuantizerError {
    #[error("invalid quantizer config: {0}")]
    Config(String),
    #[error("code {index} out of range for codebook of {size}")]
    IndexOutOfRange { index: u32, size: usize },
    #[error("grid has {found} codes, expected {expected}")]
    GridShape { expected: usize, found: usize },
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: u64, report: String },
    #[error("weight shape mismatch for {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Row-major `side x side` code grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexGrid {
    pub side: usize,
    pub codes: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub recon_l1: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub grad_norm: f64,
}

/// Index of the entry nearest to `z` in squared L2; ties go to the lowest index.
pub fn nearest_code<T: Float>(z: &[T], codebook: &Tensor<T>) -> usize {
    let d = codebook.dim(1);
    assert_eq!(z.len(), d, "code dimension");
    let mut best = (f64::INFINITY, 0);
    for k in 0..codebook.dim(0) {
        let dist: f64 = codebook.data()[k * d..(k + 1) * d]
            .iter()
            .zip(z)
            .map(|(&e, &v)| (v.to_f64() - e.to_f64()).powi(2))
            .sum();
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}

#[derive(Clone, Debug)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore<f32>, name: &str, ch: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            n1: GroupNorm::new(store, &format!("{name}.norm1"), ch, groups),
            c1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, rng),
            n2: GroupNorm::new(store, &format!("{name}.norm2"), ch, groups),
            c2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, rng),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let h = self.n1.forward(g, s, x);
        let h = g.silu(h);
        let h = self.c1.forward(g, s, h);
        let h = self.n2.forward(g, s, h);
        let h = g.silu(h);
        let h = self.c2.forward(g, s, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Conv2d,
}

#[derive(Clone, Debug)]
struct Net {
    enc_in: Conv2d,
    enc_levels: Vec<Level>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    codebook: ParamId,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    /// Innermost level first.
    dec_levels: Vec<Level>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

/// Trained or freshly initialised quantizer. Parameters are `f32`; the same
/// graph code runs in `f64` on a cast copy for gradient checks.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub config: QuantizerConfig,
    /// 4 for RGBA; 3 only for the RGB source model of [`init_alpha_from_rgb`].
    pub image_channels: usize,
    pub store: ParamStore<f32>,
    net: Net,
    pub steps: u64,
    pub codebook_initialized: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: QuantizerConfig,
    image_channels: usize,
    steps: u64,
    codebook_initialized: bool,
    history: Vec<LossReport>,
}

/// Graph handles of one loss evaluation.
pub struct LossGraph {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    /// Encoder output as `[B*g*g, d_z]` rows.
    pub z_e: Var,
    /// Decoder input as rows (the straight-through node when quantizing).
    pub z_q: Var,
    pub codes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bottleneck {
    Quantize,
    /// Decoder consumes `z_e` directly; used to check encoder gradients.
    Bypass,
}

impl Quantizer {
    pub fn new(config: QuantizerConfig) -> Result<Self, QuantizerError> {
        Self::with_image_channels(config, 4)
    }

    pub fn with_image_channels(config: QuantizerConfig, image_channels: usize) -> Result<Self, QuantizerError> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let ch = &config.channels;
        let (gr, last) = (config.groups, *ch.last().expect("checked non-empty"));
        let r = &mut rng;
        let enc_in = Conv2d::new(&mut s, "enc.conv_in", image_channels, ch[0], 3, 1, r);
        let mut enc_levels = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            let blocks = (0..config.res_blocks)
                .map(|b| ResBlock::new(&mut s, &format!("enc.level{i}.block{b}"), c, gr, r))
                .collect();
            let next = ch.get(i + 1).copied().unwrap_or(last);
            let resample = Conv2d::new(&mut s, &format!("enc.level{i}.down"), c, next, 3, 2, r);
            enc_levels.push(Level { blocks, resample });
        }
        let enc_mid = ResBlock::new(&mut s, "enc.mid", last, gr, r);
        let enc_norm = GroupNorm::new(&mut s, "enc.norm_out", last, gr);
        let enc_out = Conv2d::new(&mut s, "enc.conv_out", last, config.code_dim, 1, 1, r);
        let bound = 1.0 / config.codebook_size as f64;
        let cb: Vec<f32> = (0..config.codebook_size * config.code_dim)
            .map(|_| r.gen_range(-bound..=bound) as f32)
            .collect();
        let codebook = s.add("codebook", Tensor::new([config.codebook_size, config.code_dim], cb));
        let dec_in = Conv2d::new(&mut s, "dec.conv_in", config.code_dim, last, 3, 1, r);
        let dec_mid = ResBlock::new(&mut s, "dec.mid", last, gr, r);
        let mut dec_levels = Vec::new();
        for i in (0..ch.len()).rev() {
            let here = ch.get(i + 1).copied().unwrap_or(last);
            let blocks = (0..config.res_blocks)
                .map(|b| ResBlock::new(&mut s, &format!("dec.level{i}.block{b}"), here, gr, r))
                .collect();
            let resample = Conv2d::new(&mut s, &format!("dec.level{i}.up"), here, ch[i], 3, 1, r);
            dec_levels.push(Level { blocks, resample });
        }
        let dec_norm = GroupNorm::new(&mut s, "dec.norm_out", ch[0], gr);
        let dec_out = Conv2d::new(&mut s, "dec.conv_out", ch[0], image_channels, 3, 1, r);
        Ok(Self {
            config,
            image_channels,
            store: s,
            net: Net {
                enc_in,
                enc_levels,
                enc_mid,
                enc_norm,
                enc_out,
                codebook,
                dec_in,
                dec_mid,
                dec_levels,
                dec_norm,
                dec_out,
            },
            steps: 0,
            codebook_initialized: false,
        })
    }

    pub fn codebook(&self) -> &Tensor<f32> {
        self.store.get(self.net.codebook)
    }

    pub fn codebook_id(&self) -> ParamId {
        self.net.codebook
    }

    pub fn grid_side(&self) -> usize {
        self.config.grid_side()
    }

    /// `[B, C, s, s]` batch from images, resized to the square size as needed.
    pub fn batch_tensor<T: Float>(&self, images: &[&RasterImage]) -> Tensor<T> {
        let s = self.config.square_size;
        let c = self.image_channels;
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for img in images {
            let sq = if img.height() == s && img.width() == s {
                (*img).clone()
            } else {
                resize_bilinear(img, s, s)
            };
            data.extend(sq.to_chw()[..c * s * s].iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Tensor::new([images.len(), c, s, s], data)
    }

    pub fn encoder_graph<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x01: &Tensor<T>) -> Var {
        let two = T::from_f64(2.0);
        let x = g.constant(x01.map(|v| two * v - T::ONE));
        let n = &self.net;
        let mut h = n.enc_in.forward(g, store, x);
        for level in &n.enc_levels {
            for b in &level.blocks {
                h = b.forward(g, store, h);
            }
            h = level.resample.forward(g, store, h);
        }
        h = n.enc_mid.forward(g, store, h);
        h = n.enc_norm.forward(g, store, h);
        h = g.silu(h);
        n.enc_out.forward(g, store, h)
    }

    /// Decoder output in network space (`[-1, 1]` nominal), `[B, C, s, s]`.
    pub fn decoder_graph<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z_q: Var) -> Var {
        let n = &self.net;
        let mut h = n.dec_in.forward(g, store, z_q);
        h = n.dec_mid.forward(g, store, h);
        for level in &n.dec_levels {
            for b in &level.blocks {
                h = b.forward(g, store, h);
            }
            h = g.upsample2x(h);
            h = level.resample.forward(g, store, h);
        }
        h = n.dec_norm.forward(g, store, h);
        h = g.silu(h);
        n.dec_out.forward(g, store, h)
    }

    /// Total loss = L1(recon, target) + |sg[z_e] - e|^2 + beta |z_e - sg[e]|^2,
    /// with the squared terms averaged over elements.
    pub fn loss_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x01: &Tensor<T>,
        bottleneck: Bottleneck,
    ) -> LossGraph {
        let (b, side) = (x01.dim(0), self.grid_side());
        let z = self.encoder_graph(g, store, x01);
        let z_e = g.nchw_to_rows(z);
        let codebook = g.param(store, self.net.codebook);
        let codes: Vec<usize> = {
            let (rows, cb) = (g.value(z_e), store.get(self.net.codebook));
            (0..rows.dim(0)).map(|i| nearest_code(rows.row(i), cb)).collect()
        };
        let e = g.index_rows(codebook, &codes);
        let z_e_sg = g.detach(z_e);
        let e_sg = g.detach(e);
        let d_cb = g.sub(z_e_sg, e);
        let sq_cb = g.square(d_cb);
        let codebook_loss = g.mean(sq_cb);
        let d_cm = g.sub(z_e, e_sg);
        let sq_cm = g.square(d_cm);
        let commit = g.mean(sq_cm);
        let z_q = match bottleneck {
            Bottleneck::Quantize => {
                let v = g.value(e).clone();
                g.straight_through(z_e, v)
            }
            Bottleneck::Bypass => z_e,
        };
        let dec_in = g.rows_to_nchw(z_q, b, side, side);
        let y = self.decoder_graph(g, store, dec_in);
        let two = T::from_f64(2.0);
        let target = g.constant(x01.map(|v| two * v - T::ONE));
        let diff = g.sub(y, target);
        let abs = g.abs(diff);
        let l1 = g.mean(abs);
        // L1 in network space is twice the L1 in [0, 1].
        let recon = g.scale(l1, 0.5);
        let vq = match bottleneck {
            Bottleneck::Quantize => {
                let beta_commit = g.scale(commit, self.config.beta);
                g.add(codebook_loss, beta_commit)
            }
            Bottleneck::Bypass => g.scale(recon, 0.0),
        };
        let total = g.add(recon, vq);
        LossGraph {
            total,
            recon,
            codebook: codebook_loss,
            commitment: commit,
            z_e,
            z_q,
            codes,
        }
    }

    /// Replaces codebook rows with encoder outputs of `images` (cycled, with a
    /// small deterministic jitter on repeats).
    pub fn init_codebook_from(&mut self, images: &[&RasterImage]) {
        let x = self.batch_tensor::<f32>(images);
        let mut g = Graph::new();
        let z = self.encoder_graph(&mut g, &self.store, &x);
        let rows = g.nchw_to_rows(z);
        let rows = g.value(rows).clone();
        let (n, d) = (rows.dim(0), rows.dim(1));
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let z_count = self.config.codebook_size;
        let mut cb = Vec::with_capacity(z_count * d);
        for k in 0..z_count {
            let src = rows.row(order[k % n]);
            let jitter = if k < n { 0.0 } else { 1e-2 };
            cb.extend(src.iter().map(|&v| v + jitter * rng.gen_range(-1.0f32..1.0)));
        }
        self.store.set(self.net.codebook, Tensor::new([z_count, d], cb));
        self.codebook_initialized = true;
    }

    /// One optimizer update on `images`.
    pub fn train_step(&mut self, images: &[&RasterImage], opt: &mut Adam<f32>) -> Result<LossReport, QuantizerError> {
        if self.config.data_init_codebook && !self.codebook_initialized {
            self.init_codebook_from(images);
        }
        let x = self.batch_tensor::<f32>(images);
        let mut g = Graph::new();
        let lg = self.loss_graph(&mut g, &self.store, &x, Bottleneck::Quantize);
        let scalar = |v: Var| f64::from(g.value(v).item());
        let mut report = LossReport {
            step: self.steps + 1,
            total: scalar(lg.total),
            recon_l1: scalar(lg.recon),
            codebook: scalar(lg.codebook),
            commitment: scalar(lg.commitment),
            grad_norm: 0.0,
        };
        if !report.total.is_finite() {
            return Err(QuantizerError::NonFiniteLoss {
                step: report.step,
                report: format!("{report:?}"),
            });
        }
        let grads = g.backward(lg.total).into_param_grads();
        report.grad_norm = opt.step(&mut self.store, &grads);
        if !report.grad_norm.is_finite() {
            return Err(QuantizerError::NonFiniteLoss {
                step: report.step,
                report: format!("gradient norm {}", report.grad_norm),
            });
        }
        self.steps += 1;
        Ok(report)
    }

    pub fn optimizer(&self) -> Adam<f32> {
        Adam::new(AdamConfig {
            lr: self.config.lr,
            ..AdamConfig::default()
        })
    }

    /// Trains with shuffled mini-batches until `max_steps` or until `stop`
    /// returns true (checked every `check_every` steps).
    pub fn fit(
        &mut self,
        images: &[RasterImage],
        max_steps: u64,
        check_every: u64,
        mut stop: impl FnMut(&mut Self, &LossReport) -> bool,
    ) -> Result<Vec<LossReport>, QuantizerError> {
        let s = self.config.square_size;
        let squared: Vec<RasterImage> = images.iter().map(|i| resize_bilinear(i, s, s)).collect();
        if self.config.data_init_codebook && !self.codebook_initialized && !squared.is_empty() {
            let refs: Vec<&RasterImage> = squared.iter().collect();
            self.init_codebook_from(&refs);
        }
        let mut opt = self.optimizer();
        let (lr0, lr_floor) = (self.config.lr, self.config.lr * self.config.final_lr_fraction);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        let mut order: Vec<usize> = Vec::new();
        let mut history = Vec::new();
        let bs = self.config.batch_size.min(squared.len());
        for step in 1..=max_steps {
            if order.len() < bs {
                let mut epoch: Vec<usize> = (0..squared.len()).collect();
                epoch.shuffle(&mut rng);
                order.extend(epoch);
            }
            let picks: Vec<&RasterImage> = order.drain(..bs).map(|i| &squared[i]).collect();
            let progress = (step - 1) as f64 / max_steps.max(1) as f64;
            opt.config.lr = lr_floor + (lr0 - lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let report = self.train_step(&picks, &mut opt)?;
            let check = check_every > 0 && step % check_every == 0;
            history.push(report.clone());
            if check && stop(self, &report) {
                break;
            }
        }
        Ok(history)
    }

    pub fn encode(&self, img: &RasterImage) -> IndexGrid {
        self.encode_batch(&[img]).pop().expect("one grid")
    }

    pub fn encode_batch(&self, images: &[&RasterImage]) -> Vec<IndexGrid> {
        let side = self.grid_side();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let x = self.batch_tensor::<f32>(chunk);
            let mut g = Graph::new();
            let z = self.encoder_graph(&mut g, &self.store, &x);
            let rows = g.nchw_to_rows(z);
            let rows = g.value(rows);
            for b in 0..chunk.len() {
                let codes = (0..side * side)
                    .map(|p| nearest_code(rows.row(b * side * side + p), self.codebook()) as u32)
                    .collect();
                out.push(IndexGrid { side, codes });
            }
        }
        out
    }

    /// Decodes to `s x s`, then resizes to `out_h x out_w`.
    pub fn decode(&self, grid: &IndexGrid, out_w: usize, out_h: usize) -> Result<RasterImage, QuantizerError> {
        let sq = self.decode_square_batch(std::slice::from_ref(grid))?.pop().expect("one image");
        Ok(resize_bilinear(&sq, out_h.max(1), out_w.max(1)))
    }

    pub fn decode_square_batch(&self, grids: &[IndexGrid]) -> Result<Vec<RasterImage>, QuantizerError> {
        let (side, s, z) = (self.grid_side(), self.config.square_size, self.config.codebook_size);
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(16) {
            let mut ids = Vec::with_capacity(chunk.len() * side * side);
            for grid in chunk {
                if grid.codes.len() != side * side {
                    return Err(QuantizerError::GridShape {
                        expected: side * side,
                        found: grid.codes.len(),
                    });
                }
                for &c in &grid.codes {
                    if c as usize >= z {
                        return Err(QuantizerError::IndexOutOfRange { index: c, size: z });
                    }
                    ids.push(c as usize);
                }
            }
            let y = self.decode_rows(&ids, chunk.len());
            let c = self.image_channels;
            for b in 0..chunk.len() {
                let mut planar = vec![1.0f32; 4 * s * s];
                for (i, v) in y[b * c * s * s..(b + 1) * c * s * s].iter().enumerate() {
                    planar[i] = 0.5 * v + 0.5;
                }
                out.push(RasterImage::from_chw(s, s, &planar).expect("positive size"));
            }
        }
        Ok(out)
    }

    /// Raw decoder output (network space) for codebook rows `ids`.
    fn decode_rows(&self, ids: &[usize], batch: usize) -> Vec<f32> {
        let side = self.grid_side();
        let mut g = Graph::new();
        let cb = g.constant(self.codebook().clone());
        let rows = g.index_rows(cb, ids);
        let z = g.rows_to_nchw(rows, batch, side, side);
        let y = self.decoder_graph(&mut g, &self.store, z);
        g.value(y).data().to_vec()
    }

    /// Raw decoder output for one grid, exposed for the alpha-init check.
    pub fn decode_raw(&self, grid: &IndexGrid) -> Vec<f32> {
        let ids: Vec<usize> = grid.codes.iter().map(|&c| c as usize).collect();
        self.decode_rows(&ids, 1)
    }

    pub fn save(&self, path: &std::path::Path, history: &[LossReport]) -> Result<String, QuantizerError> {
        let manifest = Manifest {
            config: self.config.clone(),
            image_channels: self.image_channels,
            steps: self.steps,
            codebook_initialized: self.codebook_initialized,
            history: history.to_vec(),
        };
        Ok(checkpoint::save(path, &self.store, &manifest)?)
    }

    /// Returns the model, the stored loss history and the file's sha256.
    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<LossReport>, String), QuantizerError> {
        let loaded: checkpoint::Loaded<Manifest> = checkpoint::load(path)?;
        let m = loaded.manifest;
        let mut q = Self::with_image_channels(m.config, m.image_channels)?;
        checkpoint::restore(&mut q.store, &loaded.tensors)?;
        q.steps = m.steps;
        q.codebook_initialized = m.codebook_initialized;
        Ok((q, m.history, loaded.sha256))
    }
}

/// Fraction of codebook entries used at least once across `grids`.
pub fn codebook_utilization(grids: &[IndexGrid], codebook_size: usize) -> f64 {
    let mut used = vec![false; codebook_size];
    for g in grids {
        for &c in &g.codes {
            if let Some(u) = used.get_mut(c as usize) {
                *u = true;
            }
        }
    }
    used.iter().filter(|&&u| u).count() as f64 / codebook_size as f64
}

/// Builds an RGBA model from an RGB one: the alpha input filters of the first
/// conv, and the alpha output filters and bias of the last conv, are the mean
/// of the three RGB slices. Every other tensor is copied verbatim.
pub fn init_alpha_from_rgb(rgb: &Quantizer) -> Result<Quantizer, QuantizerError> {
    if rgb.image_channels != 3 {
        return Err(QuantizerError::ShapeMismatch {
            name: "image_channels".into(),
            detail: format!("source has {} channels, expected 3", rgb.image_channels),
        });
    }
    let mut out = Quantizer::new(rgb.config.clone())?;
    out.steps = rgb.steps;
    out.codebook_initialized = rgb.codebook_initialized;
    let ids: Vec<ParamId> = out.store.ids().collect();
    for id in ids {
        let name = out.store.name(id).to_string();
        let src_id = rgb.store.find(&name).ok_or_else(|| QuantizerError::ShapeMismatch {
            name: name.clone(),
            detail: "missing in source".into(),
        })?;
        let src = rgb.store.get(src_id);
        let want = out.store.get(id).shape().to_vec();
        let value = match name.as_str() {
            "enc.conv_in.weight" => widen_axis(src, 1, &want),
            "dec.conv_out.weight" | "dec.conv_out.bias" => widen_axis(src, 0, &want),
            _ if src.shape() == want.as_slice() => Some(src.clone()),
            _ => None,
        }
        .ok_or_else(|| QuantizerError::ShapeMismatch {
            name: name.clone(),
            detail: format!("source {:?}, target {:?}", src.shape(), want),
        })?;
        out.store.set(id, value);
    }
    Ok(out)
}

/// Appends along `axis` (of size 3) a fourth slice equal to the mean of the three.
fn widen_axis(src: &Tensor<f32>, axis: usize, want: &[usize]) -> Option<Tensor<f32>> {
    let shape = src.shape();
    let mut expect = shape.to_vec();
    if expect.get(axis) != Some(&3) {
        return None;
    }
    expect[axis] = 4;
    if expect != want {
        return None;
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * 4 * inner);
    for o in 0..outer {
        let base = o * 3 * inner;
        let slice = |c: usize| &src.data()[base + c * inner..base + (c + 1) * inner];
        for c in 0..3 {
            data.extend_from_slice(slice(c));
        }
        data.extend((0..inner).map(|i| {
            let sum: f64 = (0..3).map(|c| f64::from(slice(c)[i])).sum();
            (sum / 3.0) as f32
        }));
    }
    Some(Tensor::new(expect, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> QuantizerConfig {
        QuantizerConfig {
            square_size: 8,
            scale_factor: 4,
            codebook_size: 16,
            code_dim: 4,
            channels: vec![4, 4],
            groups: 2,
            batch_size: 2,
            ..QuantizerConfig::default()
        }
    }

    fn sprite(seed: u64, size: usize) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..size * size * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        RasterImage::from_pixels(size, size, px).unwrap()
    }

    #[test]
    fn nearest_code_examples() {
        let cb = Tensor::new([10, 2], (0..20).map(|i| i as f32).collect());
        assert_eq!(nearest_code(&[14.0, 15.0], &cb), 7);
        let mut tie = vec![0.0f32; 20];
        tie[6..8].copy_from_slice(&[1.0, 0.0]);
        tie[18..20].copy_from_slice(&[-1.0, 0.0]);
        for k in [0, 1, 2, 4, 5, 6, 7, 8] {
            tie[2 * k..2 * k + 2].copy_from_slice(&[50.0, 50.0]);
        }
        assert_eq!(nearest_code(&[0.0, 0.0], &Tensor::new([10, 2], tie)), 3);
    }

    #[test]
    fn nearest_code_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = Tensor::new([256, 8], (0..256 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        for _ in 0..50 {
            let z: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let dists: Vec<f64> = (0..256)
                .map(|k| (0..8).map(|j| f64::from(z[j] - cb.row(k)[j]).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(nearest_code(&z, &cb), want);
        }
    }

    #[test]
    fn config_checks() {
        assert!(QuantizerConfig::default().check().is_ok());
        let paper = QuantizerConfig {
            square_size: 256,
            scale_factor: 16,
            codebook_size: 16_384,
            channels: vec![16, 32, 64, 64],
            ..QuantizerConfig::default()
        };
        assert!(paper.check().is_ok());
        assert_eq!(paper.tokens_per_image(), 256);
        assert_eq!(QuantizerConfig::default().tokens_per_image(), 64);
        let bad = QuantizerConfig {
            square_size: 60,
            ..QuantizerConfig::default()
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn encode_decode_shapes_and_ranges() {
        let q = Quantizer::new(tiny_config()).unwrap();
        let img = sprite(1, 13);
        let grid = q.encode(&img);
        assert_eq!(grid.side, 2);
        assert!(grid.codes.iter().all(|&c| (c as usize) < 16));
        let out = q.decode(&grid, 8, 8).unwrap();
        assert_eq!((out.height(), out.width()), (8, 8));
        let out = q.decode(&grid, 5, 3).unwrap();
        assert_eq!((out.height(), out.width()), (3, 5));
        let bad = IndexGrid { side: 2, codes: vec![0, 1, 16, 0] };
        assert!(matches!(q.decode(&bad, 8, 8), Err(QuantizerError::IndexOutOfRange { index: 16, .. })));
    }

    #[test]
    fn train_step_recon_term_is_mean_abs_error() {
        let mut q = Quantizer::new(tiny_config()).unwrap();
        let img = sprite(2, 8);
        let batch = [&img, &img];
        let x = q.batch_tensor::<f32>(&batch);
        let mut g = Graph::new();
        let lg = q.loss_graph(&mut g, &q.store, &x, Bottleneck::Quantize);
        let recon_img = {
            let grid = IndexGrid {
                side: 2,
                codes: lg.codes[..4].iter().map(|&c| c as u32).collect(),
            };
            q.decode_raw(&grid)
        };
        let want: f64 = recon_img
            .iter()
            .zip(img.to_chw())
            .map(|(&y, t)| (f64::from(0.5 * y + 0.5) - f64::from(t)).abs())
            .sum::<f64>()
            / recon_img.len() as f64;
        let got = f64::from(g.value(lg.recon).item());
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        let mut opt = q.optimizer();
        let r = q.train_step(&batch, &mut opt).unwrap();
        assert!(r.total.is_finite() && r.recon_l1 >= 0.0 && r.codebook >= 0.0 && r.commitment >= 0.0);
    }

    #[test]
    fn alpha_init_averages_rgb_slices() {
        let rgb = Quantizer::with_image_channels(tiny_config(), 3).unwrap();
        let rgba = init_alpha_from_rgb(&rgb).unwrap();
        let w3 = rgb.store.get(rgb.store.find("enc.conv_in.weight").unwrap());
        let w4 = rgba.store.get(rgba.store.find("enc.conv_in.weight").unwrap());
        assert_eq!(w4.shape(), &[4, 4, 3, 3]);
        for o in 0..4 {
            for k in 0..9 {
                let s = |c: usize| w3.data()[(o * 3 + c) * 9 + k];
                let a = w4.data()[(o * 4 + 3) * 9 + k];
                assert!((a - (s(0) + s(1) + s(2)) / 3.0).abs() < 1e-7);
                assert_eq!(w4.data()[(o * 4) * 9 + k], s(0));
            }
        }
        let b3 = rgb.store.get(rgb.store.find("dec.conv_out.bias").unwrap()).data().to_vec();
        let b4 = rgba.store.get(rgba.store.find("dec.conv_out.bias").unwrap()).data().to_vec();
        assert_eq!(&b4[..3], &b3[..]);
        assert!((b4[3] - (b3[0] + b3[1] + b3[2]) / 3.0).abs() < 1e-7);
        assert_eq!(rgba.codebook(), rgb.codebook());
    }

    #[test]
    fn alpha_init_with_equal_slices_copies_them() {
        let mut rgb = Quantizer::with_image_channels(tiny_config(), 3).unwrap();
        let id = rgb.store.find("enc.conv_in.weight").unwrap();
        let w = rgb.store.get(id).clone();
        let mut d = w.data().to_vec();
        for o in 0..4 {
            for k in 0..9 {
                let v = d[(o * 3) * 9 + k];
                d[(o * 3 + 1) * 9 + k] = v;
                d[(o * 3 + 2) * 9 + k] = v;
            }
        }
        rgb.store.set(id, Tensor::new(w.shape().to_vec(), d.clone()));
        let rgba = init_alpha_from_rgb(&rgb).unwrap();
        let w4 = rgba.store.get(rgba.store.find("enc.conv_in.weight").unwrap());
        for o in 0..4 {
            for k in 0..9 {
                assert_eq!(w4.data()[(o * 4 + 3) * 9 + k], d[(o * 3) * 9 + k]);
            }
        }
    }

    #[test]
    fn alpha_init_keeps_decoded_rgb_at_step_zero() {
        let rgb = Quantizer::with_image_channels(tiny_config(), 3).unwrap();
        let rgba = init_alpha_from_rgb(&rgb).unwrap();
        let grid = IndexGrid { side: 2, codes: vec![3, 0, 15, 7] };
        let (y3, y4) = (rgb.decode_raw(&grid), rgba.decode_raw(&grid));
        let hw = 64;
        assert_eq!(&y4[..3 * hw], &y3[..]);
    }

    #[test]
    fn alpha_init_rejects_rgba_source() {
        let q = Quantizer::new(tiny_config()).unwrap();
        assert!(matches!(init_alpha_from_rgb(&q), Err(QuantizerError::ShapeMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trip_preserves_codes() {
        let q = Quantizer::new(tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.safetensors");
        let hash = q.save(&path, &[]).unwrap();
        let (back, hist, hash2) = Quantizer::load(&path).unwrap();
        assert_eq!(hash, hash2);
        assert!(hist.is_empty());
        let img = sprite(5, 8);
        assert_eq!(back.encode(&img), q.encode(&img));
    }

    #[test]
    fn utilization_counts_distinct_codes() {
        let grids = [
            IndexGrid { side: 1, codes: vec![0] },
            IndexGrid { side: 1, codes: vec![3] },
            IndexGrid { side: 1, codes: vec![3] },
        ];
        assert_eq!(codebook_utilization(&grids, 4), 0.5);
    }
}
