//! End-to-end stages behind the command line: run configuration, run
//! manifests, and one function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{blob_hash, CheckpointError};
use crate::datagen::{self, Dataset, DatagenError, GenConfig};
use crate::eval::{self, build_eval_set, recon_metrics, score_case, Binning, EvalReport, ReconReport};
use crate::lm::{Lm, LmConfig, LmError, LmManifest, LmReport};
use crate::quantizer::{LossReport, Quantizer, QuantizerConfig, QuantizerError};
use crate::raster::RasterImage;
use crate::sampler::{generate, SamplerConfig, SamplerError, Task};
use crate::sequence::{build_document_stream, describe, make_completion_prompt, Corpus, CorpusHeader, DocStream, FimConfig, ImageCodes, SequenceError};
use crate::svg::{self, Span};
use crate::template::DesignTemplate;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl PipelineError {
    /// 1 usage, 2 validation or data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numeric(_) => 3,
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<DatagenError> for PipelineError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Config(m) => PipelineError::Usage(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<QuantizerError> for PipelineError {
    fn from(e: QuantizerError) -> Self {
        match e {
            QuantizerError::NonFiniteLoss { .. } => PipelineError::Numeric(e.to_string()),
            QuantizerError::Config(m) => PipelineError::Usage(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<LmError> for PipelineError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::NonFiniteLoss { .. } => PipelineError::Numeric(e.to_string()),
            LmError::Config(m) => PipelineError::Usage(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(SequenceError, SamplerError, CheckpointError, svg::SvgError, serde_json::Error, crate::raster::RasterError);

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub count: usize,
    pub generator: GenConfig,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            count: 200,
            generator: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    pub model: QuantizerConfig,
    pub steps: u64,
    pub check_every: u64,
    /// Stop once training-set RGB and alpha MSE both fall below this.
    pub stop_below_mse: Option<f64>,
    /// Cap on training images (first in split order); 0 keeps all.
    pub max_images: usize,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            model: QuantizerConfig::default(),
            steps: 2000,
            check_every: 250,
            stop_below_mse: None,
            max_images: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub model: LmConfig,
    pub steps: u64,
    pub fim: FimConfig,
    pub log_every: u64,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            model: LmConfig::default(),
            steps: 1000,
            fim: FimConfig::default(),
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub position_bins: u32,
    pub font_size_bins: u32,
    pub max_templates: usize,
    /// Dataset split evaluated: `train`, `val` or `test`.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            position_bins: 64,
            font_size_bins: 16,
            max_templates: 100,
            split: "test".into(),
        }
    }
}

/// The single JSON configuration document, one section per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub datagen: DatagenSection,
    pub quantizer: QuantizerSection,
    pub lm: LmSection,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            datagen: DatagenSection::default(),
            quantizer: QuantizerSection::default(),
            lm: LmSection::default(),
            sampler: SamplerConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))
    }

    /// Applies `section.field=value` overrides; `value` is read as JSON when
    /// it parses, otherwise as a string.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(&self)?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Usage(format!("override {o:?} is not path=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for key in path.split('.') {
                slot = match slot {
                    Value::Object(map) => map.entry(key.to_string()).or_insert(Value::Null),
                    _ => return Err(PipelineError::Usage(format!("override path {path:?} does not name a field"))),
                };
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| PipelineError::Usage(format!("config override: {e}")))
    }

    pub fn binning(&self, templates: &[&DesignTemplate]) -> Binning {
        Binning {
            position_bins: self.eval.position_bins,
            font_size_bins: self.eval.font_size_bins,
            ..Binning::from_corpus(templates.iter().copied())
        }
    }
}

/// Written next to every output: resolved config, inputs with content
/// hashes, and the outputs produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

/// Git-style blob hashes of a file, or of every file under a directory
/// (keys relative to it), sorted by path.
pub fn hash_inputs(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        let mut stack = vec![path.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(path).expect("under root").to_string_lossy().replace('\\', "/");
                    out.insert(format!("{}/{rel}", path.display()), blob_hash(&std::fs::read(&p)?));
                }
            }
        }
    } else {
        out.insert(path.display().to_string(), blob_hash(&std::fs::read(path)?));
    }
    Ok(out)
}

fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("run.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }
}

fn write_manifest(command: &str, config: &RunConfig, inputs: &[&Path], output: &Path, outputs: Vec<String>) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.extend(hash_inputs(p)?);
    }
    let m = RunManifest {
        command: command.into(),
        config: config.clone(),
        inputs: hashes,
        outputs,
    };
    std::fs::write(manifest_path(output), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Refuses to replace an existing output unless `force`.
pub fn guard_output(path: &Path, force: bool) -> Result<()> {
    let occupied = path.is_file() || (path.is_dir() && std::fs::read_dir(path)?.next().is_some());
    if occupied && !force {
        return Err(PipelineError::Data(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn split_ids<'a>(ds: &'a Dataset, split: &str) -> Result<&'a [String]> {
    let s = &ds.manifest.splits;
    match split {
        "train" => Ok(&s.train),
        "val" => Ok(&s.val),
        "test" => Ok(&s.test),
        other => Err(PipelineError::Usage(format!("unknown split {other:?}"))),
    }
}

// ---------------------------------------------------------------- stages

pub fn run_datagen(config: &RunConfig, out: &Path, force: bool) -> Result<Dataset> {
    guard_output(out, force)?;
    let ds = datagen::generate_dataset(&config.datagen.generator, config.datagen.count, config.seed)?;
    let written = datagen::write_dataset(out, &ds)?;
    write_manifest(
        "datagen",
        config,
        &[],
        out,
        written.iter().map(|p| p.display().to_string()).collect(),
    )?;
    Ok(ds)
}

/// Training images of a dataset: every asset of the train split, in
/// first-reference order.
pub fn training_images(ds: &Dataset, max_images: usize) -> Vec<RasterImage> {
    let mut imgs = ds.images_of(&ds.manifest.splits.train);
    if max_images > 0 {
        imgs.truncate(max_images);
    }
    imgs
}

/// Fits `q` on `images`, stopping early once both training-set MSEs fall
/// below `stop_below` (checked every `check_every` steps).
pub fn fit_quantizer(
    q: &mut Quantizer,
    images: &[RasterImage],
    steps: u64,
    check_every: u64,
    stop_below: Option<f64>,
    mut log: impl FnMut(&LossReport, Option<&ReconReport>),
) -> Result<Vec<LossReport>> {
    let history = q.fit(images, steps, check_every, |q, r| {
        let metrics = stop_below.map(|_| recon_metrics(&*q, images));
        log(r, metrics.as_ref());
        match (stop_below, metrics) {
            (Some(t), Some(m)) => m.rgb_mse < t && m.alpha_mse < t,
            _ => false,
        }
    })?;
    Ok(history)
}

pub fn run_train_quantizer(config: &RunConfig, data: &Path, out: &Path, force: bool, log: &mut dyn FnMut(&str)) -> Result<(Quantizer, String)> {
    guard_output(out, force)?;
    let ds = datagen::load_dataset(data)?;
    let images = training_images(&ds, config.quantizer.max_images);
    if images.is_empty() {
        return Err(PipelineError::Data("training split has no images".into()));
    }
    let sec = &config.quantizer;
    let mut q = Quantizer::new(QuantizerConfig {
        seed: config.seed,
        ..sec.model.clone()
    })?;
    let history = fit_quantizer(&mut q, &images, sec.steps, sec.check_every, sec.stop_below_mse, |r, m| {
        let mut line = format!("step {} loss {:.5} recon {:.5}", r.step, r.total, r.recon_l1);
        if let Some(m) = m {
            let _ = write!(line, " rgb_mse {:.5} alpha_mse {:.5}", m.rgb_mse, m.alpha_mse);
        }
        log(&line);
    })?;
    let sha = q.save(out, &history)?;
    write_manifest("train-quantizer", config, &[data], out, vec![format!("{} sha256:{sha}", out.display())])?;
    Ok((q, sha))
}

pub fn run_eval_quantizer(config: &RunConfig, data: &Path, quantizer: &Path, out: &Path, force: bool) -> Result<ReconReport> {
    guard_output(out, force)?;
    let ds = datagen::load_dataset(data)?;
    let (q, _, _) = Quantizer::load(quantizer)?;
    let images = ds.images_of(split_ids(&ds, &config.eval.split)?);
    let report = recon_metrics(&q, &images);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("recon.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.join("recon.txt"), report.table())?;
    write_manifest("eval-quantizer", config, &[data, quantizer], out, vec!["recon.json".into(), "recon.txt".into()])?;
    Ok(report)
}

/// Token streams for the given templates.
pub fn build_docs(ds: &Dataset, ids: &[String], codes: &ImageCodes) -> Result<Vec<DocStream>> {
    ds.split(ids)
        .into_iter()
        .map(|(_, t)| Ok(build_document_stream(t, &ds.manifest.fonts, codes)?))
        .collect()
}

pub fn build_corpus(ds: &Dataset, ids: &[String], q: &Quantizer, quantizer_sha: &str) -> Result<Corpus> {
    let codes = ImageCodes::encode_assets(q, &ds.assets);
    let docs = build_docs(ds, ids, &codes)?;
    let mut header = CorpusHeader::new(q.grid_side(), q.config.codebook_size);
    header.quantizer_sha256 = Some(quantizer_sha.to_string());
    header.template_ids = ds.split(ids).into_iter().map(|(id, _)| id).collect();
    Ok(Corpus { header, docs })
}

pub fn run_build_corpus(config: &RunConfig, data: &Path, quantizer: &Path, split: &str, out: &Path, force: bool) -> Result<Corpus> {
    guard_output(out, force)?;
    let ds = datagen::load_dataset(data)?;
    let (q, _, sha) = Quantizer::load(quantizer)?;
    let corpus = build_corpus(&ds, split_ids(&ds, split)?, &q, &sha)?;
    corpus.save(out)?;
    let sha_out = crate::checkpoint::sha256_hex(&std::fs::read(out)?);
    write_manifest("build-corpus", config, &[data, quantizer], out, vec![format!("{} sha256:{sha_out}", out.display())])?;
    Ok(corpus)
}

pub fn train_lm(config: &RunConfig, corpus: &Corpus, q: &Quantizer, log: &mut dyn FnMut(&LmReport)) -> Result<(Lm, Vec<LmReport>)> {
    let sec = &config.lm;
    let mut lm = Lm::new(
        LmConfig {
            seed: config.seed,
            ..sec.model.clone()
        },
        q.codebook(),
        q.grid_side(),
    )?;
    let history = lm.fit(&corpus.docs, sec.steps, &sec.fim, |r| log(r))?;
    Ok((lm, history))
}

pub fn run_train_lm(config: &RunConfig, corpus_path: &Path, quantizer: &Path, out: &Path, force: bool, log: &mut dyn FnMut(&str)) -> Result<(Lm, String)> {
    guard_output(out, force)?;
    let corpus = Corpus::load(corpus_path)?;
    let (q, _, q_sha) = Quantizer::load(quantizer)?;
    check_corpus_lineage(&corpus, &q, &q_sha)?;
    let every = config.lm.log_every.max(1);
    let (lm, history) = train_lm(config, &corpus, &q, &mut |r| {
        if r.step % every == 0 || r.step == 1 {
            log(&format!("step {} loss {:.5} text {:.5} image {:.5} acc {:.4}", r.step, r.loss, r.text_loss, r.image_loss, r.accuracy));
        }
    })?;
    let sha = lm.save(out, &LmManifest::new(&lm, &q_sha, history))?;
    write_manifest("train-lm", config, &[corpus_path, quantizer], out, vec![format!("{} sha256:{sha}", out.display())])?;
    Ok((lm, sha))
}

fn check_corpus_lineage(corpus: &Corpus, q: &Quantizer, q_sha: &str) -> Result<()> {
    let h = &corpus.header;
    if h.quantizer_sha256.as_deref().is_some_and(|s| s != q_sha) {
        return Err(CheckpointError::Lineage {
            what: "quantizer",
            stored: h.quantizer_sha256.clone().unwrap_or_default(),
            actual: q_sha.into(),
        }
        .into());
    }
    if h.grid_side != q.grid_side() || h.codebook_size != q.config.codebook_size {
        return Err(PipelineError::Data("corpus grid or codebook size differs from the quantizer".into()));
    }
    Ok(())
}

/// `ELEM` for text/image tasks, `ELEM:NAME` for attributes.
pub fn parse_span(task: Task, spec: &str) -> Result<Span> {
    let bad = || PipelineError::Usage(format!("bad span {spec:?}; expected ELEM or ELEM:ATTRIBUTE"));
    match task {
        Task::Attribute => {
            let (e, name) = spec.split_once(':').ok_or_else(bad)?;
            Ok(Span::Attribute(e.parse().map_err(|_| bad())?, name.to_string()))
        }
        Task::Text => Ok(Span::TextContent(spec.parse().map_err(|_| bad())?)),
        Task::Image => Ok(Span::ImageHref(spec.parse().map_err(|_| bad())?)),
    }
}

/// One line of a generation transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template_id: String,
    pub span: Span,
    pub prompt_tokens: usize,
    pub middle: String,
    pub stop: crate::sampler::StopReason,
}

fn case_rng(seed: u64, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(k as u64))
}

pub struct CompleteArgs<'a> {
    pub data: &'a Path,
    pub template_id: &'a str,
    pub task: Task,
    pub span: &'a str,
    pub quantizer: &'a Path,
    pub lm: &'a Path,
    pub out: &'a Path,
    pub force: bool,
}

pub fn run_complete(config: &RunConfig, a: &CompleteArgs) -> Result<TranscriptEntry> {
    guard_output(a.out, a.force)?;
    let ds = datagen::load_dataset(a.data)?;
    let (q, _, q_sha) = Quantizer::load(a.quantizer)?;
    let (lm, _, _) = Lm::load(a.lm, Some(&q_sha))?;
    let t = ds
        .templates
        .get(a.template_id)
        .ok_or_else(|| PipelineError::Usage(format!("no template {:?}", a.template_id)))?;
    let span = parse_span(a.task, a.span)?;
    let codes = ImageCodes::encode_assets(&q, &ds.assets);
    let doc = build_document_stream(t, &ds.manifest.fonts, &codes)?;
    let c = make_completion_prompt(&doc, &span)?;
    let mut rng = case_rng(config.seed, 0);
    let gen = generate(&mut lm.session(), &c.fim.prefix, &c.prompt(), a.task, q.grid_side(), &config.sampler, &mut rng)?;
    let files = eval::export_qualitative(a.out, t, &span, &gen.tokens, gen.complete(), &ds.assets, Some(&q))?;
    let entry = TranscriptEntry {
        template_id: a.template_id.into(),
        span,
        prompt_tokens: c.prompt().len(),
        middle: describe(&gen.tokens),
        stop: gen.stop,
    };
    std::fs::write(a.out.join("transcript.json"), serde_json::to_string_pretty(&entry)? + "\n")?;
    let mut outputs = vec!["input.png".to_string(), "original.png".into(), "transcript.json".into()];
    outputs.extend(files.prediction.map(|_| "prediction.png".to_string()));
    outputs.extend(files.completed_svg.map(|_| "completed.svg".to_string()));
    write_manifest("complete", config, &[a.data, a.quantizer, a.lm], a.out, outputs)?;
    Ok(entry)
}

/// Generates and scores every case of `task` on the configured split.
pub fn evaluate(
    config: &RunConfig,
    ds: &Dataset,
    q: &Quantizer,
    lm: &Lm,
    task: Task,
) -> Result<(EvalReport, Vec<TranscriptEntry>)> {
    let ids = split_ids(ds, &config.eval.split)?;
    let codes = ImageCodes::encode_assets(q, &ds.assets);
    let docs = build_docs(ds, ids, &codes)?;
    let templates = ds.split(ids);
    let entries: Vec<(String, &DesignTemplate, &DocStream)> =
        templates.iter().zip(&docs).map(|((id, t), d)| (id.clone(), *t, d)).collect();
    let cases = build_eval_set(&entries, task, config.eval.max_templates);
    let all_templates: Vec<&DesignTemplate> = ds.templates.values().collect();
    let binning = config.binning(&all_templates);
    let mut results = Vec::with_capacity(cases.len());
    let mut transcript = Vec::with_capacity(cases.len());
    for (k, case) in cases.iter().enumerate() {
        let mut rng = case_rng(config.seed, k);
        let gen = generate(&mut lm.session(), &case.prefix, &case.prompt, task, q.grid_side(), &config.sampler, &mut rng)?;
        results.push(score_case(case, &gen.tokens, gen.stop, &binning));
        transcript.push(TranscriptEntry {
            template_id: case.template_id.clone(),
            span: case.span.clone(),
            prompt_tokens: case.prompt.len(),
            middle: describe(&gen.tokens),
            stop: gen.stop,
        });
    }
    Ok((EvalReport::new(task, binning, results), transcript))
}

pub fn write_eval_outputs(out: &Path, report: &EvalReport, transcript: &[TranscriptEntry]) -> Result<Vec<String>> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(out.join("report.txt"), report.table())?;
    std::fs::write(out.join("suffix.csv"), eval::suffix_csv(&report.suffix))?;
    let mut lines = String::new();
    for e in transcript {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    std::fs::write(out.join("transcript.jsonl"), lines)?;
    Ok(["report.json", "report.txt", "suffix.csv", "transcript.jsonl"].map(String::from).to_vec())
}

pub fn run_evaluate(config: &RunConfig, data: &Path, quantizer: &Path, lm: &Path, task: Task, out: &Path, force: bool) -> Result<EvalReport> {
    guard_output(out, force)?;
    let ds = datagen::load_dataset(data)?;
    let (q, _, q_sha) = Quantizer::load(quantizer)?;
    let (lm_model, _, _) = Lm::load(lm, Some(&q_sha))?;
    let (report, transcript) = evaluate(config, &ds, &q, &lm_model, task)?;
    let outputs = write_eval_outputs(out, &report, &transcript)?;
    write_manifest("evaluate", config, &[data, quantizer, lm], out, outputs)?;
    Ok(report)
}
