//! Completion benchmarks, attribute scoring, suffix-length breakdowns and
//! quantizer reconstruction metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{render_preview, AssetStore, DatagenError};
use crate::quantizer::{codebook_utilization, IndexGrid, Quantizer};
use crate::raster::{composite_over_white, mse, resize_bilinear, Channels, RasterImage};
use crate::sampler::{StopReason, Task};
use crate::sequence::{describe, make_completion_prompt, DocStream, Token};
use crate::svg::{self, token_block_string, Piece, Span, SvgError};
use crate::template::{Canvas, DesignTemplate, Element, Fixed, ImagePayload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrKind {
    X,
    Y,
    Width,
    Height,
    FontFamily,
    FontSize,
}

pub const ATTR_KINDS: [AttrKind; 6] = [
    AttrKind::X,
    AttrKind::Y,
    AttrKind::Width,
    AttrKind::Height,
    AttrKind::FontFamily,
    AttrKind::FontSize,
];

impl AttrKind {
    pub fn attribute(self) -> &'static str {
        match self {
            AttrKind::X => "x",
            AttrKind::Y => "y",
            AttrKind::Width => "width",
            AttrKind::Height => "height",
            AttrKind::FontFamily => "font-family",
            AttrKind::FontSize => "font-size",
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            AttrKind::X => "X",
            AttrKind::Y => "Y",
            AttrKind::Width => "Width",
            AttrKind::Height => "Height",
            AttrKind::FontFamily => "Font",
            AttrKind::FontSize => "F-Size",
        }
    }

    pub fn from_attribute(name: &str) -> Option<Self> {
        ATTR_KINDS.into_iter().find(|k| k.attribute() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Binning {
    /// Uniform bins over `[0, canvas dimension]` for x, y, width, height.
    pub position_bins: u32,
    pub font_size_bins: u32,
    /// Font-size range the bins span; set from the corpus.
    pub font_size_range: (f64, f64),
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            position_bins: 64,
            font_size_bins: 16,
            font_size_range: (0.0, 1.0),
        }
    }
}

impl Binning {
    /// Font-size range taken from every text element of `templates`.
    pub fn from_corpus<'a>(templates: impl IntoIterator<Item = &'a DesignTemplate>) -> Self {
        let sizes: Vec<f64> = templates
            .into_iter()
            .flat_map(|t| t.elements.iter().filter_map(|e| e.as_text().map(|x| x.font_size.to_f64())))
            .collect();
        let lo = sizes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sizes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            font_size_range: if sizes.is_empty() { (0.0, 1.0) } else { (lo, hi) },
            ..Self::default()
        }
    }

    fn uniform(v: f64, lo: f64, hi: f64, bins: u32) -> u32 {
        if hi <= lo {
            return 0;
        }
        let b = ((v - lo) / (hi - lo) * f64::from(bins)).floor();
        b.clamp(0.0, f64::from(bins - 1)) as u32
    }

    /// Bin id of a numeric attribute value.
    pub fn bin(&self, kind: AttrKind, value: f64, canvas: Canvas) -> u32 {
        match kind {
            AttrKind::X | AttrKind::Width => Self::uniform(value, 0.0, f64::from(canvas.width), self.position_bins),
            AttrKind::Y | AttrKind::Height => Self::uniform(value, 0.0, f64::from(canvas.height), self.position_bins),
            AttrKind::FontSize => Self::uniform(value, self.font_size_range.0, self.font_size_range.1, self.font_size_bins),
            AttrKind::FontFamily => 0,
        }
    }
}

fn parse_value(kind: AttrKind, s: &str) -> Option<f64> {
    match kind {
        AttrKind::X | AttrKind::Y => s.parse::<i64>().ok().map(|v| v as f64),
        AttrKind::Width | AttrKind::Height => s.parse::<u32>().ok().filter(|&v| v > 0).map(f64::from),
        AttrKind::FontSize => s.parse::<Fixed>().ok().filter(|v| v.0 > 0).map(Fixed::to_f64),
        AttrKind::FontFamily => None,
    }
}

/// 1 iff the prediction parses and lands in the gold value's bin; font
/// families compare exactly.
pub fn score_attribute(pred: &str, gold: &str, kind: AttrKind, canvas: Canvas, binning: &Binning) -> bool {
    if kind == AttrKind::FontFamily {
        return pred == gold;
    }
    match (parse_value(kind, pred), parse_value(kind, gold)) {
        (Some(p), Some(g)) => binning.bin(kind, p, canvas) == binning.bin(kind, g, canvas),
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub template_id: String,
    pub task: Task,
    pub span: Span,
    pub kind: Option<AttrKind>,
    pub canvas: Canvas,
    pub prefix: Vec<Token>,
    pub prompt: Vec<Token>,
    pub gold: Vec<Token>,
    pub suffix_len: usize,
}

fn span_task(span: &Span) -> (Task, Option<AttrKind>) {
    match span {
        Span::Attribute(_, name) => (Task::Attribute, AttrKind::from_attribute(name)),
        Span::TextContent(_) => (Task::Text, None),
        Span::ImageHref(_) => (Task::Image, None),
    }
}

/// One case per matching span, in document order, templates in the given
/// order. Attribute cases cover only the six scored attributes.
pub fn build_eval_set(docs: &[(String, &DesignTemplate, &DocStream)], task: Task, max_templates: usize) -> Vec<EvalCase> {
    let mut out = Vec::new();
    for (id, t, doc) in docs.iter().take(max_templates) {
        for (span, _) in &doc.spans {
            let (span_task, kind) = span_task(span);
            if span_task != task || (task == Task::Attribute && kind.is_none()) {
                continue;
            }
            let c = make_completion_prompt(doc, span).expect("span taken from the document");
            out.push(EvalCase {
                template_id: id.clone(),
                task,
                span: span.clone(),
                kind,
                canvas: t.canvas,
                prefix: c.fim.prefix.clone(),
                prompt: c.prompt(),
                gold: c.gold().to_vec(),
                suffix_len: c.suffix_len(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub template_id: String,
    pub span: Span,
    pub kind: Option<AttrKind>,
    pub suffix_len: usize,
    pub predicted: String,
    pub gold: String,
    pub stop: StopReason,
    pub correct: bool,
}

/// Scores one generated middle. Attributes use binned comparison; text and
/// image middles must match exactly.
pub fn score_case(case: &EvalCase, middle: &[Token], stop: StopReason, binning: &Binning) -> CaseResult {
    let (predicted, gold) = (describe(middle), describe(&case.gold));
    let correct = match case.kind {
        Some(kind) => score_attribute(&predicted, &gold, kind, case.canvas, binning),
        None => stop != StopReason::Budget && middle == case.gold.as_slice(),
    };
    CaseResult {
        template_id: case.template_id.clone(),
        span: case.span.clone(),
        kind: case.kind,
        suffix_len: case.suffix_len,
        predicted,
        gold,
        stop,
        correct,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuffixBin {
    /// Suffix lengths in `[lo, hi)`.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

/// Mean accuracy per log2-spaced suffix-length bin: `[0,1)`, `[1,2)`,
/// `[2,4)`, ...; every bin up to the longest suffix is listed.
pub fn score_suffix_breakdown(results: &[(usize, bool)]) -> Vec<SuffixBin> {
    let index = |len: usize| if len == 0 { 0 } else { len.ilog2() as usize + 1 };
    let Some(top) = results.iter().map(|&(l, _)| index(l)).max() else {
        return Vec::new();
    };
    let mut bins: Vec<SuffixBin> = (0..=top)
        .map(|k| SuffixBin {
            lo: if k == 0 { 0 } else { 1 << (k - 1) },
            hi: 1 << k,
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    for &(len, ok) in results {
        let b = &mut bins[index(len)];
        b.count += 1;
        b.correct += usize::from(ok);
    }
    for b in &mut bins {
        b.accuracy = (b.count > 0).then(|| b.correct as f64 / b.count as f64);
    }
    bins
}

pub fn suffix_csv(bins: &[SuffixBin]) -> String {
    let mut s = String::from("suffix_lo,suffix_hi,count,correct,accuracy\n");
    for b in bins {
        let acc = b.accuracy.map_or(String::new(), |a| format!("{a:.6}"));
        let _ = writeln!(s, "{},{},{},{},{}", b.lo, b.hi, b.count, b.correct, acc);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub binning: Binning,
    pub cases: usize,
    pub accuracy: Option<f64>,
    /// Per attribute column (attribute task only), in table order.
    pub columns: Vec<(AttrKind, ColumnScore)>,
    pub suffix: Vec<SuffixBin>,
    pub results: Vec<CaseResult>,
}

fn column(results: &[&CaseResult]) -> ColumnScore {
    let correct = results.iter().filter(|r| r.correct).count();
    ColumnScore {
        correct,
        total: results.len(),
        accuracy: (!results.is_empty()).then(|| correct as f64 / results.len() as f64),
    }
}

impl EvalReport {
    /// Aggregates case results; the order of `results` does not matter.
    pub fn new(task: Task, binning: Binning, mut results: Vec<CaseResult>) -> Self {
        results.sort_by(|a, b| (&a.template_id, format!("{:?}", a.span)).cmp(&(&b.template_id, format!("{:?}", b.span))));
        let all: Vec<&CaseResult> = results.iter().collect();
        let columns = if task == Task::Attribute {
            ATTR_KINDS
                .iter()
                .map(|&k| (k, column(&all.iter().copied().filter(|r| r.kind == Some(k)).collect::<Vec<_>>())))
                .collect()
        } else {
            Vec::new()
        };
        let suffix = score_suffix_breakdown(&results.iter().map(|r| (r.suffix_len, r.correct)).collect::<Vec<_>>());
        Self {
            task,
            binning,
            cases: results.len(),
            accuracy: column(&all).accuracy,
            columns,
            suffix,
            results,
        }
    }

    /// Plain-text table: one row, one column per attribute (or the overall
    /// exact-match rate for text and image tasks).
    pub fn table(&self) -> String {
        let fmt = |a: Option<f64>| a.map_or("-".to_string(), |a| format!("{a:.3}"));
        let mut s = format!(
            "task: {}  cases: {}  bins: position {} / font-size {} over [{}, {}]\n",
            self.task.name(),
            self.cases,
            self.binning.position_bins,
            self.binning.font_size_bins,
            self.binning.font_size_range.0,
            self.binning.font_size_range.1
        );
        if self.columns.is_empty() {
            let _ = writeln!(s, "{:>12}\n{:>12}", "Exact", fmt(self.accuracy));
        } else {
            let head: Vec<String> = self.columns.iter().map(|(k, _)| format!("{:>8}", k.column())).collect();
            let row: Vec<String> = self.columns.iter().map(|(_, c)| format!("{:>8}", fmt(c.accuracy))).collect();
            let _ = writeln!(s, "{}\n{}", head.join(""), row.join(""));
        }
        s
    }
}

// ---------------------------------------------------------------- reconstruction

/// Anything that maps a square RGBA image to a reconstruction of it.
pub trait Reconstructor {
    fn square_size(&self) -> usize;
    /// Reconstructions of `images` (already `s x s`), plus code grids when
    /// the model has a codebook.
    fn reconstruct(&self, images: &[&RasterImage]) -> (Vec<RasterImage>, Option<(Vec<IndexGrid>, usize)>);
}

impl Reconstructor for Quantizer {
    fn square_size(&self) -> usize {
        self.config.square_size
    }

    fn reconstruct(&self, images: &[&RasterImage]) -> (Vec<RasterImage>, Option<(Vec<IndexGrid>, usize)>) {
        let grids = self.encode_batch(images);
        let recon = self.decode_square_batch(&grids).expect("grids come from this quantizer");
        (recon, Some((grids, self.config.codebook_size)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub images: usize,
    /// RGB MSE after compositing both images over white.
    pub rgb_mse: f64,
    pub alpha_mse: f64,
    /// Alpha MSE of a model that predicts alpha 1 everywhere.
    pub fixed_alpha_baseline_mse: f64,
    pub codebook_utilization: Option<f64>,
}

impl ReconReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<24}{:>14}{:>14}\n", "model", "RGB (x1e-3)", "Alpha (x1e-1)");
        let _ = writeln!(s, "{:<24}{:>14.3}{:>14.3}", "quantizer", self.rgb_mse * 1e3, self.alpha_mse * 1e1);
        let _ = writeln!(s, "{:<24}{:>14}{:>14.3}", "alpha fixed to 1.0", "-", self.fixed_alpha_baseline_mse * 1e1);
        if let Some(u) = self.codebook_utilization {
            let _ = writeln!(s, "codebook utilization: {u:.3}");
        }
        let _ = writeln!(s, "images: {}", self.images);
        s
    }
}

/// Mean per-image MSEs between each image (resized to `s x s`) and its
/// reconstruction.
pub fn recon_metrics(model: &impl Reconstructor, images: &[RasterImage]) -> ReconReport {
    let s = model.square_size();
    let squared: Vec<RasterImage> = images.iter().map(|i| resize_bilinear(i, s, s)).collect();
    let (mut rgb, mut alpha, mut base) = (0.0, 0.0, 0.0);
    let mut grids = Vec::new();
    let mut z = None;
    for chunk in squared.chunks(32) {
        let refs: Vec<&RasterImage> = chunk.iter().collect();
        let (recon, codes) = model.reconstruct(&refs);
        for (x, y) in chunk.iter().zip(&recon) {
            rgb += mse(&composite_over_white(x), &composite_over_white(y), Channels::Rgb).expect("same size");
            alpha += mse(x, y, Channels::Alpha).expect("same size");
            let opaque = RasterImage::filled(s, s, [0.0, 0.0, 0.0, 1.0]);
            base += mse(x, &opaque, Channels::Alpha).expect("same size");
        }
        if let Some((g, size)) = codes {
            grids.extend(g);
            z = Some(size);
        }
    }
    let n = images.len().max(1) as f64;
    ReconReport {
        images: images.len(),
        rgb_mse: rgb / n,
        alpha_mse: alpha / n,
        fixed_alpha_baseline_mse: base / n,
        codebook_utilization: z.map(|z| codebook_utilization(&grids, z)),
    }
}

// ---------------------------------------------------------------- qualitative

/// Re-parses the template with `span` replaced by the markup of `middle`.
pub fn substitute(t: &DesignTemplate, span: &Span, middle: &[Token]) -> Result<DesignTemplate, SvgError> {
    let mut s = String::new();
    for piece in svg::serialize_pieces(t) {
        match piece {
            Piece::Markup { span: Some(sp), .. } if &sp == span => s.push_str(&describe(middle)),
            Piece::Markup { text, .. } => s.push_str(&text),
            Piece::Href { element } if &Span::ImageHref(element) == span => s.push_str(&describe(middle)),
            Piece::Href { element } => match &t.elements[element] {
                Element::Image(img) => match &img.payload {
                    ImagePayload::Asset(h) => s.push_str(h),
                    ImagePayload::Tokens(b) => s.push_str(&token_block_string(b)),
                },
                Element::Text(_) => unreachable!("href pieces belong to images"),
            },
        }
    }
    svg::parse(&s)
}

fn span_element(span: &Span) -> usize {
    match span {
        Span::Attribute(e, _) | Span::ImageHref(e) | Span::TextContent(e) => *e,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QualitativeFiles {
    pub input: PathBuf,
    pub original: PathBuf,
    /// `None` when the prediction was partial or did not re-parse.
    pub prediction: Option<PathBuf>,
    pub completed_svg: Option<PathBuf>,
}

/// Writes `input.png` (target element hidden), `prediction.png`,
/// `original.png` and `completed.svg` into `dir`; a failed prediction leaves
/// a `prediction.failed.txt` note instead.
pub fn export_qualitative(
    dir: &Path,
    t: &DesignTemplate,
    span: &Span,
    middle: &[Token],
    complete: bool,
    assets: &AssetStore,
    quantizer: Option<&Quantizer>,
) -> Result<QualitativeFiles, DatagenError> {
    std::fs::create_dir_all(dir)?;
    let mut masked = t.clone();
    masked.elements.remove(span_element(span));
    let files = QualitativeFiles {
        input: dir.join("input.png"),
        original: dir.join("original.png"),
        prediction: None,
        completed_svg: None,
    };
    render_preview(&masked, assets, quantizer)?.write_png(&files.input)?;
    render_preview(t, assets, quantizer)?.write_png(&files.original)?;
    let predicted = if complete {
        substitute(t, span, middle).map_err(|e| e.to_string())
    } else {
        Err("generation stopped at the token budget".to_string())
    };
    match predicted {
        Ok(p) => {
            let svg_path = dir.join("completed.svg");
            std::fs::write(&svg_path, svg::serialize_unchecked(&p))?;
            let png = dir.join("prediction.png");
            match render_preview(&p, assets, quantizer) {
                Ok(img) => {
                    img.write_png(&png)?;
                    Ok(QualitativeFiles {
                        prediction: Some(png),
                        completed_svg: Some(svg_path),
                        ..files
                    })
                }
                Err(e) => {
                    std::fs::write(dir.join("prediction.failed.txt"), e.to_string())?;
                    Ok(QualitativeFiles {
                        completed_svg: Some(svg_path),
                        ..files
                    })
                }
            }
        }
        Err(reason) => {
            std::fs::write(dir.join("prediction.failed.txt"), reason)?;
            Ok(files)
        }
    }
}

/// Gold middles scored against themselves, per task; used as a
/// self-consistency check of parse and binning.
pub fn self_consistency(cases: &[EvalCase], binning: &Binning) -> EvalReport {
    let task = cases.first().map_or(Task::Attribute, |c| c.task);
    let results = cases.iter().map(|c| score_case(c, &c.gold, StopReason::Eos, binning)).collect();
    EvalReport::new(task, binning.clone(), results)
}

/// Count of cases per attribute column.
pub fn column_counts(cases: &[EvalCase]) -> BTreeMap<AttrKind, usize> {
    let mut m = BTreeMap::new();
    for c in cases {
        if let Some(k) = c.kind {
            *m.entry(k).or_default() += 1;
        }
    }
    m
}
