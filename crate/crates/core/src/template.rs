//! In-memory design templates: a canvas plus an ordered list of image and
//! text elements. Document order is stacking order (later elements on top).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Fixed-point real with three fractional digits, stored in thousandths.
///
/// Every real-valued attribute uses this so that serialization (at most three
/// decimals) round-trips exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fixed(pub i64);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);
    pub const ONE: Fixed = Fixed(1000);

    pub fn from_int(v: i64) -> Self {
        Fixed(v * 1000)
    }

    /// Rounds to the nearest thousandth (half away from zero).
    pub fn from_f64(v: f64) -> Self {
        Fixed((v * 1000.0).round() as i64)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let (int, frac) = (abs / 1000, abs % 1000);
        if frac == 0 {
            write!(f, "{sign}{int}")
        } else {
            let digits = format!("{frac:03}");
            write!(f, "{sign}{int}.{}", digits.trim_end_matches('0'))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("invalid number {0:?}")]
pub struct ParseNumberError(pub String);

impl FromStr for Fixed {
    type Err = ParseNumberError;

    /// Accepts `-?digits[.digits]`; more than three decimals are rounded.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseNumberError(s.to_string());
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) || (body.contains('.') && frac.is_empty()) {
            return Err(err());
        }
        let int: i64 = int.parse().map_err(|_| err())?;
        let mut milli: i64 = 0;
        for (i, b) in frac.bytes().take(3).enumerate() {
            milli += i64::from(b - b'0') * 10i64.pow(2 - i as u32);
        }
        if frac.len() > 3 && frac.as_bytes()[3] >= b'5' {
            milli += 1;
        }
        let v = int.checked_mul(1000).and_then(|v| v.checked_add(milli)).ok_or_else(err)?;
        Ok(Fixed(if neg { -v } else { v }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgba {
    pub r: u8,
    pub g: u8,
    pub b: u8,
    /// Alpha in `[0, 1]`.
    pub a: Fixed,
}

impl Rgba {
    pub const WHITE: Rgba = Rgba::opaque(255, 255, 255);
    pub const BLACK: Rgba = Rgba::opaque(0, 0, 0);

    pub const fn opaque(r: u8, g: u8, b: u8) -> Self {
        Rgba { r, g, b, a: Fixed::ONE }
    }

    pub fn to_unit(self) -> [f32; 4] {
        [
            f32::from(self.r) / 255.0,
            f32::from(self.g) / 255.0,
            f32::from(self.b) / 255.0,
            self.a.to_f64() as f32,
        ]
    }
}

impl fmt::Display for Rgba {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rgba({}, {}, {}, {})", self.r, self.g, self.b, self.a)
    }
}

/// 2-D affine map `(x, y) -> (a x + c y + e, b x + d y + f)`, SVG `matrix()` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Affine(pub [Fixed; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([Fixed::ONE, Fixed::ZERO, Fixed::ZERO, Fixed::ONE, Fixed::ZERO, Fixed::ZERO]);

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c, d, e, f] = self.0.map(Fixed::to_f64);
        (a * x + c * y + e, b * x + d * y + f)
    }

    /// Inverse map, or `None` for a singular matrix.
    pub fn inverse(&self) -> Option<[f64; 6]> {
        let [a, b, c, d, e, f] = self.0.map(Fixed::to_f64);
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some([ia, ib, ic, id, -(ia * e + ic * f), -(ib * e + id * f)])
    }
}

impl Default for Affine {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for Affine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e, g] = self.0;
        write!(f, "matrix({a} {b} {c} {d} {e} {g})")
    }
}

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            #[default]
            $($variant),+
        }

        impl $name {
            pub fn keyword(self) -> &'static str {
                match self { $(Self::$variant => $kw),+ }
            }

            pub fn from_keyword(s: &str) -> Option<Self> {
                match s { $($kw => Some(Self::$variant),)+ _ => None }
            }
        }
    };
}

keyword_enum!(FontWeight { Normal => "normal", Bold => "bold" });
keyword_enum!(FontStyle { Normal => "normal", Italic => "italic" });
keyword_enum!(TextAnchor { Start => "start", Middle => "middle", End => "end" });

/// Quantized image content: intrinsic size plus a row-major `g x g` code grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageTokenBlock {
    pub width: u32,
    pub height: u32,
    pub codes: Vec<u32>,
}

impl ImageTokenBlock {
    /// Grid side, if the code count is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let n = self.codes.len();
        let g = (n as f64).sqrt().round() as usize;
        (g * g == n).then_some(g)
    }
}

/// Where an image element's pixels come from.
///
/// Raster payloads are referenced by a relative PNG path and resolved against
/// an [`AssetStore`](crate::datagen::AssetStore); quantized payloads carry the
/// tokens inline.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImagePayload {
    Asset(String),
    Tokens(ImageTokenBlock),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageElement {
    pub payload: ImagePayload,
    pub x: i64,
    pub y: i64,
    pub width: u32,
    pub height: u32,
    pub transform: Affine,
    pub opacity: Fixed,
}

impl ImageElement {
    pub fn new(payload: ImagePayload, x: i64, y: i64, width: u32, height: u32) -> Self {
        Self {
            payload,
            x,
            y,
            width,
            height,
            transform: Affine::IDENTITY,
            opacity: Fixed::ONE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextElement {
    pub content: String,
    pub x: i64,
    pub y: i64,
    pub fill: Rgba,
    pub font_family: String,
    pub font_size: Fixed,
    pub font_weight: FontWeight,
    pub font_style: FontStyle,
    pub text_anchor: TextAnchor,
    pub letter_spacing: Fixed,
    pub transform: Affine,
    pub opacity: Fixed,
}

impl TextElement {
    pub fn new(content: impl Into<String>, x: i64, y: i64, font_family: impl Into<String>, font_size: Fixed) -> Self {
        Self {
            content: content.into(),
            x,
            y,
            fill: Rgba::BLACK,
            font_family: font_family.into(),
            font_size,
            font_weight: FontWeight::Normal,
            font_style: FontStyle::Normal,
            text_anchor: TextAnchor::Start,
            letter_spacing: Fixed::ZERO,
            transform: Affine::IDENTITY,
            opacity: Fixed::ONE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Element {
    Image(ImageElement),
    Text(TextElement),
}

impl Element {
    pub fn as_image(&self) -> Option<&ImageElement> {
        match self {
            Element::Image(i) => Some(i),
            Element::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&TextElement> {
        match self {
            Element::Text(t) => Some(t),
            Element::Image(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignTemplate {
    pub canvas: Canvas,
    pub elements: Vec<Element>,
}

/// Closed vocabulary of font families accepted by validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FontList(pub Vec<String>);

impl Default for FontList {
    fn default() -> Self {
        FontList(
            ["Montserrat", "Roboto", "Lato", "Oswald", "Playfair Display", "Open Sans", "Raleway", "Poppins"]
                .into_iter()
                .map(String::from)
                .collect(),
        )
    }
}

impl FontList {
    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|f| f == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|f| f == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Element index, `None` for canvas-level problems.
    pub element: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            match v.element {
                Some(i) => writeln!(f, "element {i}: {}: {}", v.field, v.message)?,
                None => writeln!(f, "canvas: {}: {}", v.field, v.message)?,
            }
        }
        Ok(())
    }
}

/// Prefix that marks an inline token block inside an `href`.
pub(crate) const BOI_MARK: &str = "[boi]";

impl DesignTemplate {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            canvas: Canvas { width, height },
            elements: Vec::new(),
        }
    }

    /// Lists every invariant violation. Never fails; an empty report means the
    /// template can be serialized.
    pub fn validate(&self, fonts: &FontList) -> ValidationReport {
        let mut out = Vec::new();
        let mut push = |element, field, message: String| out.push(Violation { element, field, message });
        if self.canvas.width == 0 {
            push(None, "width", "canvas width must be >= 1".into());
        }
        if self.canvas.height == 0 {
            push(None, "height", "canvas height must be >= 1".into());
        }
        let unit = |v: Fixed| (Fixed::ZERO..=Fixed::ONE).contains(&v);
        for (i, el) in self.elements.iter().enumerate() {
            let e = Some(i);
            match el {
                Element::Image(img) => {
                    if img.width == 0 {
                        push(e, "width", "image width must be >= 1".into());
                    }
                    if img.height == 0 {
                        push(e, "height", "image height must be >= 1".into());
                    }
                    if !unit(img.opacity) {
                        push(e, "opacity", format!("{} outside [0, 1]", img.opacity));
                    }
                    match &img.payload {
                        ImagePayload::Asset(href) => {
                            if href.is_empty() {
                                push(e, "href", "empty asset path".into());
                            } else if href.starts_with(BOI_MARK) {
                                push(e, "href", "asset path collides with the token-block marker".into());
                            }
                        }
                        ImagePayload::Tokens(block) => {
                            if block.width == 0 || block.height == 0 {
                                push(e, "href", "token block has a zero intrinsic size".into());
                            }
                            if block.grid_side().is_none_or(|g| g == 0) {
                                push(e, "href", format!("{} codes do not form a square grid", block.codes.len()));
                            }
                        }
                    }
                }
                Element::Text(t) => {
                    if t.content.contains(['\n', '\r']) {
                        push(e, "content", "text content must be a single line".into());
                    }
                    if t.font_size <= Fixed::ZERO {
                        push(e, "font-size", format!("{} is not positive", t.font_size));
                    }
                    if !fonts.contains(&t.font_family) {
                        push(e, "font-family", format!("unknown font {:?}", t.font_family));
                    }
                    if !unit(t.opacity) {
                        push(e, "opacity", format!("{} outside [0, 1]", t.opacity));
                    }
                    if !unit(t.fill.a) {
                        push(e, "fill", format!("alpha {} outside [0, 1]", t.fill.a));
                    }
                }
            }
        }
        ValidationReport { violations: out }
    }

    pub fn image_count(&self) -> usize {
        self.elements.iter().filter(|e| e.as_image().is_some()).count()
    }

    pub fn text_count(&self) -> usize {
        self.elements.iter().filter(|e| e.as_text().is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cover() -> DesignTemplate {
        let mut t = DesignTemplate::new(100, 80);
        t.elements.push(Element::Image(ImageElement::new(
            ImagePayload::Asset("assets/bg.png".into()),
            0,
            0,
            100,
            80,
        )));
        t
    }

    #[test]
    fn opaque_cover_image_is_valid() {
        assert!(cover().validate(&FontList::default()).is_empty());
    }

    #[test]
    fn newline_in_text_is_reported() {
        let mut t = DesignTemplate::new(10, 10);
        t.elements.push(Element::Text(TextElement::new("A\nB", 0, 5, "Roboto", Fixed::from_int(12))));
        let r = t.validate(&FontList::default());
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].element, Some(0));
        assert_eq!(r.violations[0].field, "content");
    }

    #[test]
    fn zero_width_image_is_reported() {
        let mut t = cover();
        if let Element::Image(img) = &mut t.elements[0] {
            img.width = 0;
        }
        let r = t.validate(&FontList::default());
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].field, "width");
    }

    #[test]
    fn unknown_font_is_a_violation() {
        let mut t = DesignTemplate::new(10, 10);
        t.elements.push(Element::Text(TextElement::new("x", 0, 5, "Comic Sans", Fixed::from_int(12))));
        let r = t.validate(&FontList::default());
        assert_eq!(r.violations[0].field, "font-family");
    }

    #[test]
    fn validate_is_pure() {
        let mut t = cover();
        t.elements.push(Element::Text(TextElement::new("a\nb", 0, 0, "x", Fixed::ZERO)));
        let fonts = FontList::default();
        assert_eq!(t.validate(&fonts), t.validate(&fonts));
    }

    #[test]
    fn fixed_formatting_and_parsing() {
        for (s, v) in [("0", 0), ("30", 30_000), ("-9", -9_000), ("0.5", 500), ("1.25", 1250), ("-0.125", -125)] {
            assert_eq!(s.parse::<Fixed>().unwrap(), Fixed(v));
            assert_eq!(Fixed(v).to_string(), s);
        }
        assert_eq!("2.0005".parse::<Fixed>().unwrap(), Fixed(2001));
        assert_eq!("1.500".parse::<Fixed>().unwrap().to_string(), "1.5");
        for bad in ["", "-", "1.", ".5", "1e3", "abc", "1.2.3"] {
            assert!(bad.parse::<Fixed>().is_err(), "{bad:?} should fail");
        }
    }

    #[test]
    fn affine_inverse_round_trips() {
        let m = Affine([Fixed(866), Fixed(500), Fixed(-500), Fixed(866), Fixed(10_000), Fixed(-4_000)]);
        let inv = m.inverse().unwrap();
        let (x, y) = m.apply(3.0, 7.0);
        let (bx, by) = (inv[0] * x + inv[2] * y + inv[4], inv[1] * x + inv[3] * y + inv[5]);
        assert!((bx - 3.0).abs() < 1e-9 && (by - 7.0).abs() < 1e-9);
    }
}
