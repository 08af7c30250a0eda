//! Synthetic design templates, the asset store they reference, dataset
//! directories, and a small preview renderer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::quantizer::{IndexGrid, Quantizer};
use crate::raster::{resize_bilinear, RasterError, RasterImage};
use crate::svg::{self, SvgError};
use crate::template::{
    Affine, DesignTemplate, Element, Fixed, FontList, FontStyle, FontWeight, ImageElement, ImagePayload, Rgba,
    TextAnchor, TextElement,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Rect,
    Circle,
    Ring,
    RoundedBar,
}

pub const SHAPES: [SpriteShape; 4] = [SpriteShape::Rect, SpriteShape::Circle, SpriteShape::Ring, SpriteShape::RoundedBar];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub canvas_width: (u32, u32),
    pub canvas_height: (u32, u32),
    /// Foreground sprites per template (before repetition/symmetry copies).
    pub sprites: (usize, usize),
    pub texts: (usize, usize),
    /// Intrinsic pixel size of generated sprite rasters.
    pub sprite_size: (u32, u32),
    /// Sampling weights over [`SHAPES`]; must sum to 1.
    pub shape_weights: [f64; 4],
    pub palette: Vec<[u8; 3]>,
    pub fonts: FontList,
    pub lexicon: Vec<String>,
    pub font_size: (u32, u32),
    pub p_repetition: f64,
    pub p_symmetry: f64,
    pub p_background: f64,
    /// Chance that an element carries a non-default styling attribute.
    pub p_styled: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let lexicon = [
            "SALE", "FAMILY", "Summer", "Open", "Coffee", "Hello", "NEW", "Party", "Menu", "Yoga", "Travel", "Books",
            "Fresh", "Music", "Thank you", "Big news", "Jazz", "Garden",
        ];
        Self {
            canvas_width: (240, 480),
            canvas_height: (240, 480),
            sprites: (1, 3),
            texts: (1, 2),
            sprite_size: (32, 96),
            shape_weights: [0.25; 4],
            palette: vec![
                [231, 76, 60],
                [241, 196, 15],
                [46, 204, 113],
                [52, 152, 219],
                [155, 89, 182],
                [52, 73, 94],
                [236, 240, 241],
                [230, 126, 34],
            ],
            fonts: FontList::default(),
            lexicon: lexicon.into_iter().map(String::from).collect(),
            font_size: (12, 48),
            p_repetition: 0.3,
            p_symmetry: 0.3,
            p_background: 0.6,
            p_styled: 0.2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("canvas {0}x{1} exceeds the 16 Mpx render limit")]
    CanvasTooLarge(u32, u32),
    #[error("asset {0:?} not found")]
    MissingAsset(String),
    #[error("token payload on element {0} needs a quantizer to render")]
    NoDecoder(usize),
    #[error("decode failed on element {0}: {1}")]
    Decode(usize, String),
    #[error("template {id}: {source}")]
    Template { id: String, source: SvgError },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GenConfig {
    pub fn check(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::Config(m.into()));
        let ranges = [
            (self.canvas_width.0 as usize, self.canvas_width.1 as usize),
            (self.canvas_height.0 as usize, self.canvas_height.1 as usize),
            self.sprites,
            self.texts,
            (self.sprite_size.0 as usize, self.sprite_size.1 as usize),
            (self.font_size.0 as usize, self.font_size.1 as usize),
        ];
        if ranges.iter().any(|(lo, hi)| lo > hi) {
            return bad("empty range");
        }
        if self.canvas_width.0 < 16 || self.canvas_height.0 < 16 || self.sprite_size.0 < 4 || self.font_size.0 == 0 {
            return bad("canvas, sprite and font sizes too small");
        }
        let total: f64 = self.shape_weights.iter().sum();
        if self.shape_weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad("shape weights must be non-negative and sum to 1");
        }
        for p in [self.p_repetition, self.p_symmetry, self.p_background, self.p_styled] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.palette.is_empty() || self.lexicon.is_empty() || self.fonts.0.is_empty() {
            return bad("palette, lexicon and fonts must be non-empty");
        }
        if self.lexicon.iter().any(|w| w.contains(['\n', '\r'])) {
            return bad("lexicon entries must be single-line");
        }
        Ok(())
    }
}

/// Rasters referenced by `href`, keyed by a content-derived relative path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssetStore {
    assets: BTreeMap<String, RasterImage>,
}

impl AssetStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `img` under `assets/<hash>.png`; identical rasters share a path.
    pub fn insert(&mut self, img: RasterImage) -> String {
        let href = format!("assets/{}.png", &sha256_hex(&img.png_bytes())[..16]);
        self.assets.entry(href.clone()).or_insert(img);
        href
    }

    pub fn insert_at(&mut self, href: impl Into<String>, img: RasterImage) {
        self.assets.insert(href.into(), img);
    }

    pub fn get(&self, href: &str) -> Option<&RasterImage> {
        self.assets.get(href)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RasterImage)> {
        self.assets.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn merge(&mut self, other: AssetStore) {
        for (k, v) in other.assets {
            self.assets.entry(k).or_insert(v);
        }
    }
}

fn rng_range(rng: &mut impl Rng, (lo, hi): (u32, u32)) -> u32 {
    rng.gen_range(lo..=hi)
}

/// Rounds every channel to a multiple of 1/255 so PNG storage is lossless.
fn snap_8bit(img: RasterImage) -> RasterImage {
    let px = img.to_rgba8().iter().map(|&b| f32::from(b) / 255.0).collect();
    RasterImage::from_pixels(img.height(), img.width(), px).expect("same size")
}

fn lerp_color(a: [u8; 3], b: [u8; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| (f32::from(a[c]) + (f32::from(b[c]) - f32::from(a[c])) * t) / 255.0)
}

/// A sprite: a vertical two-colour gradient over the whole raster, with the
/// shape carried by the alpha channel (1 px anti-aliased edge).
pub fn render_sprite(shape: SpriteShape, size: u32, top: [u8; 3], bottom: [u8; 3], alpha: f32) -> RasterImage {
    let n = size as usize;
    let s = size as f32;
    let mut img = RasterImage::filled(n, n, [0.0; 4]);
    let half = s * 0.45;
    for y in 0..n {
        let rgb = lerp_color(top, bottom, y as f32 / (s - 1.0).max(1.0));
        for x in 0..n {
            let (dx, dy) = (x as f32 + 0.5 - s / 2.0, y as f32 + 0.5 - s / 2.0);
            let dist = (dx * dx + dy * dy).sqrt();
            let sd = match shape {
                SpriteShape::Rect => (dx.abs() - half).max(dy.abs() - half * 0.75),
                SpriteShape::Circle => dist - half,
                SpriteShape::Ring => (dist - half * 0.75).abs() - half * 0.25,
                SpriteShape::RoundedBar => {
                    let r = half * 0.3;
                    let (qx, qy) = ((dx.abs() - (half - r)).max(0.0), (dy.abs() - (r * 0.9)).max(0.0));
                    (qx * qx + qy * qy).sqrt() - r
                }
            };
            let a = (0.5 - sd).clamp(0.0, 1.0) * alpha;
            img.set(y, x, [rgb[0], rgb[1], rgb[2], a]);
        }
    }
    snap_8bit(img)
}

/// Opaque full-canvas backdrop: diagonal gradient with a soft disc.
pub fn render_background(size: u32, a: [u8; 3], b: [u8; 3], disc: [u8; 3]) -> RasterImage {
    let n = size as usize;
    let s = size as f32;
    let mut img = RasterImage::filled(n, n, [1.0; 4]);
    for y in 0..n {
        for x in 0..n {
            let t = (x + y) as f32 / (2.0 * s - 2.0).max(1.0);
            let base = lerp_color(a, b, t);
            let (dx, dy) = (x as f32 - s * 0.7, y as f32 - s * 0.3);
            let w = (1.0 - (dx * dx + dy * dy).sqrt() / (s * 0.35)).clamp(0.0, 1.0) * 0.6;
            let d = [0, 1, 2].map(|c| f32::from(disc[c]) / 255.0);
            let [r, g, b] = [0, 1, 2].map(|c| base[c] * (1.0 - w) + d[c] * w);
            img.set(y, x, [r, g, b, 1.0]);
        }
    }
    snap_8bit(img)
}

/// Sprite-only image set, for quantizer training.
pub fn generate_sprites(rng: &mut impl Rng, config: &GenConfig, count: usize, size: u32) -> Vec<RasterImage> {
    (0..count).map(|_| random_sprite(rng, config, size)).collect()
}

fn pick_shape(rng: &mut impl Rng, weights: &[f64; 4]) -> SpriteShape {
    let mut u: f64 = rng.gen();
    for (shape, w) in SHAPES.iter().zip(weights) {
        if u < *w {
            return *shape;
        }
        u -= w;
    }
    SHAPES[3]
}

fn random_sprite(rng: &mut impl Rng, config: &GenConfig, size: u32) -> RasterImage {
    let shape = pick_shape(rng, &config.shape_weights);
    let top = *config.palette.choose(rng).expect("non-empty palette");
    let bottom = *config.palette.choose(rng).expect("non-empty palette");
    let alpha = if rng.gen_bool(0.25) { 0.6 } else { 1.0 };
    render_sprite(shape, size, top, bottom, alpha)
}

fn random_style(rng: &mut impl Rng, p: f64) -> (Affine, Fixed) {
    let transform = if rng.gen_bool(p) {
        let k = rng.gen_range(-3i64..=3);
        // Small rotations stored at three decimals.
        let theta = k as f64 * 0.1;
        let (c, s) = (Fixed::from_f64(theta.cos()), Fixed::from_f64(theta.sin()));
        Affine([c, s, Fixed(-s.0), c, Fixed::from_int(rng.gen_range(-8..=8)), Fixed::from_int(rng.gen_range(-8..=8))])
    } else {
        Affine::IDENTITY
    };
    let opacity = if rng.gen_bool(p) { Fixed(rng.gen_range(3..=9) * 100) } else { Fixed::ONE };
    (transform, opacity)
}

/// One random template; every image payload is added to `assets`.
pub fn generate_template(rng: &mut impl Rng, config: &GenConfig, assets: &mut AssetStore) -> DesignTemplate {
    let (w, h) = (rng_range(rng, config.canvas_width), rng_range(rng, config.canvas_height));
    let mut t = DesignTemplate::new(w, h);
    if rng.gen_bool(config.p_background) {
        let pal = &config.palette;
        let bg = render_background(64, *pal.choose(rng).unwrap(), *pal.choose(rng).unwrap(), *pal.choose(rng).unwrap());
        let href = assets.insert(bg);
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset(href), 0, 0, w, h)));
    }
    let repeat = rng.gen_bool(config.p_repetition);
    let mirror = rng.gen_bool(config.p_symmetry);
    let n_sprites = rng.gen_range(config.sprites.0..=config.sprites.1).max(usize::from(repeat || mirror));
    for i in 0..n_sprites {
        let size = rng_range(rng, config.sprite_size);
        let raster = random_sprite(rng, config, size);
        let ew = rng.gen_range(w / 8..=w / 3).max(1);
        let eh = rng.gen_range(h / 8..=h / 3).max(1);
        let x = rng.gen_range(-(ew as i64) / 4..=(w as i64 - ew as i64 * 3 / 4));
        let y = rng.gen_range(-(eh as i64) / 4..=(h as i64 - eh as i64 * 3 / 4));
        let (transform, opacity) = random_style(rng, config.p_styled);
        let mirrored = mirror && i == 0;
        let flipped = mirrored.then(|| raster.flip_x());
        let href = assets.insert(raster);
        let base = ImageElement {
            transform,
            opacity,
            ..ImageElement::new(ImagePayload::Asset(href.clone()), x, y, ew, eh)
        };
        t.elements.push(Element::Image(base.clone()));
        if let Some(f) = flipped {
            let mx = w as i64 - x - ew as i64;
            t.elements.push(Element::Image(ImageElement {
                payload: ImagePayload::Asset(assets.insert(f)),
                x: mx,
                ..base.clone()
            }));
        }
        if repeat && i == 0 {
            let rx = rng.gen_range(0..=(w as i64 - ew as i64).max(0));
            let ry = rng.gen_range(0..=(h as i64 - eh as i64).max(0));
            t.elements.push(Element::Image(ImageElement { x: rx, y: ry, ..base }));
        }
    }
    let n_texts = rng.gen_range(config.texts.0..=config.texts.1);
    for _ in 0..n_texts {
        let word = config.lexicon.choose(rng).unwrap().clone();
        let font = config.fonts.0.choose(rng).unwrap().clone();
        let size = rng_range(rng, config.font_size);
        let x = rng.gen_range(0..=(w as i64 * 3 / 4));
        let y = rng.gen_range(size as i64..=h as i64);
        let mut text = TextElement::new(word, x, y, font, Fixed::from_int(size as i64));
        let [r, g, b] = *config.palette.choose(rng).unwrap();
        text.fill = Rgba::opaque(r, g, b);
        if rng.gen_bool(0.4) {
            text.font_weight = FontWeight::Bold;
        }
        if rng.gen_bool(config.p_styled) {
            text.font_style = FontStyle::Italic;
        }
        if rng.gen_bool(config.p_styled) {
            text.text_anchor = *[TextAnchor::Middle, TextAnchor::End].choose(rng).unwrap();
        }
        if rng.gen_bool(config.p_styled) {
            text.letter_spacing = Fixed(rng.gen_range(-2..=8) * 250);
        }
        if rng.gen_bool(config.p_styled) {
            text.fill.a = Fixed(rng.gen_range(5..=9) * 100);
        }
        (text.transform, text.opacity) = random_style(rng, config.p_styled);
        t.elements.push(Element::Text(text));
    }
    t
}

// ---------------------------------------------------------------- rendering

pub const MAX_RENDER_PIXELS: u64 = 16 * 1024 * 1024;

/// Decoded raster of an image element's payload at its intrinsic size.
pub fn payload_raster(
    el: &ImageElement,
    index: usize,
    assets: &AssetStore,
    quantizer: Option<&Quantizer>,
) -> Result<RasterImage, DatagenError> {
    match &el.payload {
        ImagePayload::Asset(href) => assets.get(href).cloned().ok_or_else(|| DatagenError::MissingAsset(href.clone())),
        ImagePayload::Tokens(block) => {
            let q = quantizer.ok_or(DatagenError::NoDecoder(index))?;
            let side = block.grid_side().unwrap_or(0);
            let grid = IndexGrid {
                side,
                codes: block.codes.clone(),
            };
            q.decode(&grid, block.width.max(1) as usize, block.height.max(1) as usize)
                .map_err(|e| DatagenError::Decode(index, e.to_string()))
        }
    }
}

fn over(dst: &mut RasterImage, y: usize, x: usize, rgb: [f32; 3], a: f32) {
    let d = dst.get(y, x);
    let [r, g, b] = [0, 1, 2].map(|c| rgb[c] * a + d[c] * (1.0 - a));
    dst.set(y, x, [r, g, b, 1.0]);
}

/// Canvas pixels whose centers map (through the inverse transform) into the
/// element rectangle `[ox, ox+w) x [oy, oy+h)`, with local coordinates.
fn covered_pixels(
    canvas: (usize, usize),
    transform: &Affine,
    rect: (f64, f64, f64, f64),
    mut visit: impl FnMut(usize, usize, f64, f64),
) {
    let Some(inv) = transform.inverse() else { return };
    let (ox, oy, w, h) = rect;
    let corners = [(ox, oy), (ox + w, oy), (ox, oy + h), (ox + w, oy + h)].map(|(x, y)| transform.apply(x, y));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in corners {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    let (cw, ch) = (canvas.0 as f64, canvas.1 as f64);
    let xs = x0.floor().max(0.0) as usize..x1.ceil().min(cw).max(0.0) as usize;
    let ys = y0.floor().max(0.0) as usize..y1.ceil().min(ch).max(0.0) as usize;
    for py in ys {
        for px in xs.clone() {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let (lx, ly) = (inv[0] * cx + inv[2] * cy + inv[4] - ox, inv[1] * cx + inv[3] * cy + inv[5] - oy);
            if lx >= 0.0 && ly >= 0.0 && lx < w && ly < h {
                visit(py, px, lx, ly);
            }
        }
    }
}

/// Renders a preview: white canvas, elements composited in document order.
/// Text is a translucent placeholder box with 5x7 bitmap glyphs.
pub fn render_preview(
    t: &DesignTemplate,
    assets: &AssetStore,
    quantizer: Option<&Quantizer>,
) -> Result<RasterImage, DatagenError> {
    let (w, h) = (t.canvas.width, t.canvas.height);
    if u64::from(w) * u64::from(h) > MAX_RENDER_PIXELS || w == 0 || h == 0 {
        return Err(DatagenError::CanvasTooLarge(w, h));
    }
    let (cw, ch) = (w as usize, h as usize);
    let mut canvas = RasterImage::filled(ch, cw, [1.0; 4]);
    for (i, el) in t.elements.iter().enumerate() {
        match el {
            Element::Image(img) => {
                let src = payload_raster(img, i, assets, quantizer)?;
                let scaled = resize_bilinear(&src, img.height.max(1) as usize, img.width.max(1) as usize);
                let op = img.opacity.to_f64() as f32;
                let rect = (img.x as f64, img.y as f64, f64::from(img.width), f64::from(img.height));
                covered_pixels((cw, ch), &img.transform, rect, |py, px, lx, ly| {
                    let p = scaled.get(ly as usize, lx as usize);
                    over(&mut canvas, py, px, [p[0], p[1], p[2]], p[3] * op);
                });
            }
            Element::Text(tx) => draw_text(&mut canvas, tx),
        }
    }
    Ok(canvas)
}

fn draw_text(canvas: &mut RasterImage, tx: &TextElement) {
    let fs = tx.font_size.to_f64().max(1.0);
    let chars: Vec<char> = tx.content.chars().collect();
    let cell = fs * 0.6;
    let spacing = tx.letter_spacing.to_f64();
    let n = chars.len() as f64;
    let width = (n * cell + (n - 1.0).max(0.0) * spacing).max(cell * 0.5);
    let height = fs * 0.8;
    let left = match tx.text_anchor {
        TextAnchor::Start => tx.x as f64,
        TextAnchor::Middle => tx.x as f64 - width / 2.0,
        TextAnchor::End => tx.x as f64 - width,
    };
    let top = tx.y as f64 - height;
    let [r, g, b, fa] = tx.fill.to_unit();
    let alpha = fa * tx.opacity.to_f64() as f32;
    let size = (canvas.width(), canvas.height());
    let weight_boost = if tx.font_weight == FontWeight::Bold { 0.15 } else { 0.0 };
    let slant = if tx.font_style == FontStyle::Italic { 0.2 } else { 0.0 };
    let mut glyph_hits = Vec::new();
    covered_pixels(size, &tx.transform, (left, top, width, height), |py, px, lx, ly| {
        let col = (lx + slant * (height - ly)) / (cell + spacing);
        let k = col.floor() as usize;
        let within = (col - col.floor()) * (cell + spacing) / cell;
        let on = k < chars.len()
            && within < 1.0
            && glyph_pixel(chars[k], (within * 5.0 - weight_boost).max(0.0) as usize, (ly / height * 7.0) as usize);
        glyph_hits.push((py, px, on));
    });
    for (py, px, on) in glyph_hits {
        over(canvas, py, px, [r, g, b], if on { alpha } else { alpha * 0.15 });
    }
}

/// 5x7 glyph rows (bit 4 = leftmost column); unknown characters are a box.
fn glyph_rows(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        ' ' => [0; 7],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '!' => [0x04, 0x04, 0x04, 0x04, 0x04, 0, 0x04],
        '?' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '\'' => [0x04, 0x04, 0x08, 0, 0, 0, 0],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '&' => [0x0C, 0x12, 0x14, 0x08, 0x15, 0x12, 0x0D],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn glyph_pixel(c: char, col: usize, row: usize) -> bool {
    col < 5 && row < 7 && glyph_rows(c)[row] & (0x10 >> col) != 0
}

// ---------------------------------------------------------------- datasets

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub fonts: FontList,
    pub seed: u64,
    pub generator: Option<GenConfig>,
    pub splits: Splits,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Template id to template, in id order.
    pub templates: BTreeMap<String, DesignTemplate>,
    pub assets: AssetStore,
}

impl Dataset {
    pub fn split(&self, ids: &[String]) -> Vec<(String, &DesignTemplate)> {
        ids.iter().filter_map(|id| self.templates.get(id).map(|t| (id.clone(), t))).collect()
    }

    pub fn train(&self) -> Vec<(String, &DesignTemplate)> {
        self.split(&self.manifest.splits.train)
    }

    pub fn test(&self) -> Vec<(String, &DesignTemplate)> {
        self.split(&self.manifest.splits.test)
    }

    /// Every raster referenced by the given split, in first-reference order.
    pub fn images_of(&self, ids: &[String]) -> Vec<RasterImage> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for (_, t) in self.split(ids) {
            for el in &t.elements {
                if let Some(ImageElement { payload: ImagePayload::Asset(h), .. }) = el.as_image() {
                    if seen.insert(h.clone()) {
                        out.extend(self.assets.get(h).cloned());
                    }
                }
            }
        }
        out
    }
}

/// Generates `count` templates with per-template seeds derived from `seed`,
/// split 80/10/10 by a seeded shuffle of ids.
pub fn generate_dataset(config: &GenConfig, count: usize, seed: u64) -> Result<Dataset, DatagenError> {
    config.check()?;
    let mut assets = AssetStore::new();
    let mut templates = BTreeMap::new();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
        templates.insert(format!("t{i:05}"), generate_template(&mut rng, config, &mut assets));
    }
    let mut ids: Vec<String> = templates.keys().cloned().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let n_test = count / 10;
    let n_val = count / 10;
    let test = ids.split_off(count - n_test);
    let val = ids.split_off(count - n_test - n_val);
    let sort = |mut v: Vec<String>| {
        v.sort();
        v
    };
    Ok(Dataset {
        manifest: DatasetManifest {
            fonts: config.fonts.clone(),
            seed,
            generator: Some(config.clone()),
            splits: Splits {
                train: sort(ids),
                val: sort(val),
                test: sort(test),
            },
        },
        templates,
        assets,
    })
}

/// Writes `templates/<id>.svg`, `assets/*.png` and `manifest.json`; returns
/// the written paths relative to `dir`, sorted.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>, DatagenError> {
    std::fs::create_dir_all(dir.join("templates"))?;
    std::fs::create_dir_all(dir.join("assets"))?;
    let mut written = Vec::new();
    for (id, t) in &ds.templates {
        let text = svg::serialize(t, &ds.manifest.fonts).map_err(|source| DatagenError::Template {
            id: id.clone(),
            source,
        })?;
        let rel = PathBuf::from(format!("templates/{id}.svg"));
        std::fs::write(dir.join(&rel), text)?;
        written.push(rel);
    }
    for (href, img) in ds.assets.iter() {
        img.write_png(&dir.join(href))?;
        written.push(PathBuf::from(href));
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&ds.manifest)?)?;
    written.push(PathBuf::from("manifest.json"));
    written.sort();
    Ok(written)
}

/// Loads a dataset directory written by [`write_dataset`] (or laid out the
/// same way). Asset hrefs resolve against `dir`.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatagenError> {
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut templates = BTreeMap::new();
    let mut assets = AssetStore::new();
    let splits = &manifest.splits;
    for id in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        let text = std::fs::read_to_string(dir.join(format!("templates/{id}.svg")))?;
        let t = svg::parse(&text).map_err(|source| DatagenError::Template { id: id.clone(), source })?;
        for el in &t.elements {
            if let Some(ImageElement { payload: ImagePayload::Asset(h), .. }) = el.as_image() {
                if assets.get(h).is_none() {
                    assets.insert_at(h.clone(), RasterImage::read_png(&dir.join(h))?);
                }
            }
        }
        templates.insert(id.clone(), t);
    }
    Ok(Dataset {
        manifest,
        templates,
        assets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenConfig {
        GenConfig::default()
    }

    #[test]
    fn same_seed_same_template() {
        let (mut a1, mut a2) = (AssetStore::new(), AssetStore::new());
        let t1 = generate_template(&mut ChaCha8Rng::seed_from_u64(0), &cfg(), &mut a1);
        let t2 = generate_template(&mut ChaCha8Rng::seed_from_u64(0), &cfg(), &mut a2);
        assert_eq!(t1, t2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn repetition_flag_shares_a_payload() {
        let c = GenConfig {
            p_repetition: 1.0,
            ..cfg()
        };
        for seed in 0..20 {
            let mut assets = AssetStore::new();
            let t = generate_template(&mut ChaCha8Rng::seed_from_u64(seed), &c, &mut assets);
            let mut hrefs: Vec<&ImagePayload> = t.elements.iter().filter_map(|e| e.as_image().map(|i| &i.payload)).collect();
            let n = hrefs.len();
            hrefs.sort_by_key(|p| format!("{p:?}"));
            hrefs.dedup();
            assert!(hrefs.len() < n, "seed {seed}: no repeated payload");
        }
    }

    #[test]
    fn symmetry_flag_mirrors_positions() {
        let c = GenConfig {
            p_symmetry: 1.0,
            p_repetition: 0.0,
            p_background: 0.0,
            ..cfg()
        };
        let mut assets = AssetStore::new();
        let t = generate_template(&mut ChaCha8Rng::seed_from_u64(4), &c, &mut assets);
        let (a, b) = (t.elements[0].as_image().unwrap(), t.elements[1].as_image().unwrap());
        assert_eq!(a.x + b.x + a.width as i64, t.canvas.width as i64);
        assert_eq!(a.y, b.y);
        let (ra, rb) = (payload_raster(a, 0, &assets, None).unwrap(), payload_raster(b, 1, &assets, None).unwrap());
        assert_eq!(ra.flip_x(), rb);
    }

    #[test]
    fn generated_templates_validate_and_round_trip() {
        let c = cfg();
        let mut assets = AssetStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = generate_template(&mut rng, &c, &mut assets);
            assert!(t.validate(&c.fonts).is_empty());
            let s = svg::serialize(&t, &c.fonts).unwrap();
            assert_eq!(svg::parse(&s).unwrap(), t);
        }
    }

    #[test]
    fn sprite_png_storage_is_lossless() {
        let s = render_sprite(SpriteShape::Ring, 33, [10, 20, 30], [200, 100, 0], 0.6);
        assert_eq!(RasterImage::decode_png(&s.png_bytes()).unwrap(), s);
        assert!(!s.is_opaque());
    }

    #[test]
    fn empty_template_renders_white() {
        let t = DesignTemplate::new(7, 5);
        let img = render_preview(&t, &AssetStore::new(), None).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn covering_opaque_image_shows_resized_payload() {
        let mut assets = AssetStore::new();
        let src = render_background(16, [255, 0, 0], [0, 0, 255], [0, 255, 0]);
        let href = assets.insert(src.clone());
        let mut t = DesignTemplate::new(24, 20);
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset(href), 0, 0, 24, 20)));
        let img = render_preview(&t, &assets, None).unwrap();
        assert_eq!(img, resize_bilinear(&src, 20, 24));
    }

    #[test]
    fn overlapping_half_alpha_squares() {
        let mut assets = AssetStore::new();
        let href = assets.insert(RasterImage::filled(4, 4, [0.0, 0.0, 0.0, 0.5]));
        let mut t = DesignTemplate::new(12, 12);
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset(href.clone()), 0, 0, 8, 8)));
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset(href), 4, 4, 8, 8)));
        let img = render_preview(&t, &assets, None).unwrap();
        assert_eq!(img.get(6, 6)[0], 0.25);
        assert_eq!(img.get(1, 1)[0], 0.5);
        assert_eq!(img.get(10, 10)[0], 0.5);
        assert_eq!(img.get(1, 10)[0], 1.0);
    }

    #[test]
    fn z_order_matters() {
        let mut assets = AssetStore::new();
        let red = assets.insert(RasterImage::filled(2, 2, [1.0, 0.0, 0.0, 1.0]));
        let blue = assets.insert(RasterImage::filled(2, 2, [0.0, 0.0, 1.0, 1.0]));
        let mut t = DesignTemplate::new(8, 8);
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset(red), 0, 0, 6, 6)));
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset(blue), 2, 2, 6, 6)));
        let a = render_preview(&t, &assets, None).unwrap();
        t.elements.swap(0, 1);
        let b = render_preview(&t, &assets, None).unwrap();
        assert_eq!(a.get(4, 4), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(b.get(4, 4), [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn oversized_canvas_is_refused() {
        let t = DesignTemplate::new(5000, 5000);
        assert!(matches!(render_preview(&t, &AssetStore::new(), None), Err(DatagenError::CanvasTooLarge(..))));
    }

    #[test]
    fn text_draws_glyph_pixels() {
        let mut t = DesignTemplate::new(60, 30);
        t.elements.push(Element::Text(TextElement::new("HI", 5, 25, "Lato", Fixed::from_int(20))));
        let img = render_preview(&t, &AssetStore::new(), None).unwrap();
        let dark = img.pixels().chunks_exact(4).filter(|p| p[0] < 0.1).count();
        assert!(dark > 20, "{dark}");
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let ds = generate_dataset(&cfg(), 12, 3).unwrap();
        let s = &ds.manifest.splits;
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 12);
        assert!(s.train.iter().all(|id| !s.test.contains(id) && !s.val.contains(id)));
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.templates, ds.templates);
        assert_eq!(back.assets, ds.assets);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().check().is_ok());
        let bad = GenConfig {
            shape_weights: [0.5, 0.5, 0.5, 0.0],
            ..cfg()
        };
        assert!(bad.check().is_err());
    }
}
