//! Canonical SVG-subset codec.
//!
//! One `<svg>` root with `<image>` and `<text>` children. Attribute order is
//! fixed per tag, default-valued attributes are omitted, children are joined by
//! a single newline, and attributes by a single space. The canonical form is a
//! fixed point: `serialize(parse(serialize(t))) == serialize(t)`.
//!
//! The serializer works in [`Piece`]s so that callers that need token-level
//! positions (the sequence builder) can see where each attribute value, text
//! body and `href` payload begins and ends.

use std::fmt::Write as _;

use crate::template::{
    Affine, Canvas, DesignTemplate, Element, FontList, FontStyle, FontWeight, Fixed, ImageElement, ImagePayload,
    ImageTokenBlock, Rgba, TextAnchor, TextElement, ValidationReport, BOI_MARK,
};

pub const XMLNS: &str = "http://www.w3.org/2000/svg";

pub const IMAGE_ATTRS: [&str; 7] = ["href", "x", "y", "width", "height", "transform", "opacity"];
pub const TEXT_ATTRS: [&str; 11] = [
    "x",
    "y",
    "fill",
    "font-family",
    "font-size",
    "font-weight",
    "font-style",
    "text-anchor",
    "letter-spacing",
    "transform",
    "opacity",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SvgError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown tag <{tag}> at byte {position}")]
    UnknownTag { position: usize, tag: String },
    #[error("bad attribute {name:?} at byte {position}: {message}")]
    Attribute { position: usize, name: String, message: String },
    #[error("template is not serializable:\n{0}")]
    Invalid(ValidationReport),
    #[error("{lines} lines but {ys} y positions")]
    LengthMismatch { lines: usize, ys: usize },
}

/// A semantic unit of a serialized template that completion tasks mask out.
#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Span {
    /// Value of the named attribute (between the quotes).
    Attribute(usize, String),
    /// The whole `href` payload of an image element.
    ImageHref(usize),
    /// Body of a `<text>` element (between `>` and `</text>`).
    TextContent(usize),
}

/// A run of serialized output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Markup { text: String, span: Option<Span> },
    /// The `href` value of image element `element`; rendered by the caller.
    Href { element: usize },
}

/// `[boi]W[sep]H[sep][img:..]...[eoi]` textual form of a token block.
pub fn token_block_string(block: &ImageTokenBlock) -> String {
    let mut s = format!("{BOI_MARK}{}[sep]{}[sep]", block.width, block.height);
    for c in &block.codes {
        let _ = write!(s, "[img:{c}]");
    }
    s.push_str("[eoi]");
    s
}

fn href_string(payload: &ImagePayload) -> String {
    match payload {
        ImagePayload::Asset(path) => path.clone(),
        ImagePayload::Tokens(block) => token_block_string(block),
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

struct PieceWriter {
    pieces: Vec<Piece>,
    buf: String,
}

impl PieceWriter {
    fn raw(&mut self, s: &str) {
        self.buf.push_str(s);
    }

    fn flush(&mut self) {
        if !self.buf.is_empty() {
            self.pieces.push(Piece::Markup {
                text: std::mem::take(&mut self.buf),
                span: None,
            });
        }
    }

    fn spanned(&mut self, text: String, span: Span) {
        self.flush();
        self.pieces.push(Piece::Markup { text, span: Some(span) });
    }

    fn attr(&mut self, element: usize, name: &str, value: String) {
        self.raw(&format!(" {name}=\""));
        self.spanned(escape(&value), Span::Attribute(element, name.to_string()));
        self.raw("\"");
    }

    fn href(&mut self, element: usize) {
        self.raw(" href=\"");
        self.flush();
        self.pieces.push(Piece::Href { element });
        self.raw("\"");
    }
}

fn write_transform_opacity(w: &mut PieceWriter, i: usize, transform: &Affine, opacity: Fixed) {
    if !transform.is_identity() {
        w.attr(i, "transform", transform.to_string());
    }
    if opacity != Fixed::ONE {
        w.attr(i, "opacity", opacity.to_string());
    }
}

/// Serialized template as pieces; see the module docs.
pub fn serialize_pieces(t: &DesignTemplate) -> Vec<Piece> {
    let Canvas { width, height } = t.canvas;
    let mut w = PieceWriter {
        pieces: Vec::new(),
        buf: format!("<svg xmlns=\"{XMLNS}\" viewBox=\"0 0 {width} {height}\" width=\"{width}\" height=\"{height}\">"),
    };
    for (i, el) in t.elements.iter().enumerate() {
        w.raw("\n");
        match el {
            Element::Image(img) => {
                w.raw("<image");
                w.href(i);
                w.attr(i, "x", img.x.to_string());
                w.attr(i, "y", img.y.to_string());
                w.attr(i, "width", img.width.to_string());
                w.attr(i, "height", img.height.to_string());
                write_transform_opacity(&mut w, i, &img.transform, img.opacity);
                w.raw("/>");
            }
            Element::Text(tx) => {
                w.raw("<text");
                w.attr(i, "x", tx.x.to_string());
                w.attr(i, "y", tx.y.to_string());
                w.attr(i, "fill", tx.fill.to_string());
                w.attr(i, "font-family", tx.font_family.clone());
                w.attr(i, "font-size", tx.font_size.to_string());
                if tx.font_weight != FontWeight::default() {
                    w.attr(i, "font-weight", tx.font_weight.keyword().into());
                }
                if tx.font_style != FontStyle::default() {
                    w.attr(i, "font-style", tx.font_style.keyword().into());
                }
                if tx.text_anchor != TextAnchor::default() {
                    w.attr(i, "text-anchor", tx.text_anchor.keyword().into());
                }
                if tx.letter_spacing != Fixed::ZERO {
                    w.attr(i, "letter-spacing", tx.letter_spacing.to_string());
                }
                write_transform_opacity(&mut w, i, &tx.transform, tx.opacity);
                w.raw(">");
                w.spanned(escape(&tx.content), Span::TextContent(i));
                w.raw("</text>");
            }
        }
    }
    w.raw("\n</svg>");
    w.flush();
    w.pieces
}

/// Canonical markup. `href` values are rendered from each payload: asset
/// paths verbatim, token blocks in their `[boi]...[eoi]` form.
pub fn serialize(t: &DesignTemplate, fonts: &FontList) -> Result<String, SvgError> {
    let report = t.validate(fonts);
    if !report.is_empty() {
        return Err(SvgError::Invalid(report));
    }
    Ok(serialize_unchecked(t))
}

/// [`serialize`] without the validation precondition.
pub fn serialize_unchecked(t: &DesignTemplate) -> String {
    let mut out = String::new();
    for piece in serialize_pieces(t) {
        match piece {
            Piece::Markup { text, .. } => out.push_str(&text),
            Piece::Href { element } => {
                let img = t.elements[element].as_image().expect("href piece on image");
                out.push_str(&escape(&href_string(&img.payload)));
            }
        }
    }
    out
}

/// Splits `raw` on every `\n` into one element per line, styled like `base`.
/// Empty lines are kept.
pub fn split_multiline(raw: &str, base: &TextElement, per_line_y: &[i64]) -> Result<Vec<TextElement>, SvgError> {
    let lines: Vec<&str> = raw.split('\n').collect();
    if lines.len() != per_line_y.len() {
        return Err(SvgError::LengthMismatch {
            lines: lines.len(),
            ys: per_line_y.len(),
        });
    }
    Ok(lines
        .into_iter()
        .zip(per_line_y)
        .map(|(line, &y)| TextElement {
            content: line.to_string(),
            y,
            ..base.clone()
        })
        .collect())
}

// ---------------------------------------------------------------- parsing

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

struct RawAttr<'a> {
    name: &'a str,
    value: String,
    position: usize,
}

impl<'a> Cursor<'a> {
    fn syntax(&self, message: impl Into<String>) -> SvgError {
        SvgError::Syntax {
            position: self.pos,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) -> bool {
        let before = self.pos;
        let trimmed = self.rest().trim_start_matches([' ', '\t', '\n', '\r']);
        self.pos = self.src.len() - trimmed.len();
        self.pos > before
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), SvgError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.syntax(format!("expected {lit:?}")))
        }
    }

    fn name(&mut self) -> Result<&'a str, SvgError> {
        let rest = self.rest();
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == ':' || c == '_'))
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(self.syntax("expected a name"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    /// Reads up to (not including) `stop`, decoding the five XML entities.
    fn escaped_until(&mut self, stop: char) -> Result<String, SvgError> {
        let mut out = String::new();
        loop {
            let rest = self.rest();
            let Some(i) = rest.find([stop, '&', '<']) else {
                return Err(self.syntax(format!("unterminated value, expected {stop:?}")));
            };
            out.push_str(&rest[..i]);
            self.pos += i;
            let c = self.rest().chars().next().expect("found above");
            if c == stop {
                return Ok(out);
            }
            if c == '<' {
                return Err(self.syntax("unexpected '<'"));
            }
            let ent = [("&amp;", '&'), ("&lt;", '<'), ("&gt;", '>'), ("&quot;", '"'), ("&apos;", '\'')]
                .into_iter()
                .find(|(e, _)| self.rest().starts_with(e));
            match ent {
                Some((e, ch)) => {
                    out.push(ch);
                    self.pos += e.len();
                }
                None => return Err(self.syntax("unknown entity")),
            }
        }
    }

    /// Attributes up to `>` or `/>`; returns whether the tag self-closed.
    fn attrs(&mut self) -> Result<(Vec<RawAttr<'a>>, bool), SvgError> {
        let mut out: Vec<RawAttr<'a>> = Vec::new();
        loop {
            let had_ws = self.skip_ws();
            if self.eat("/>") {
                return Ok((out, true));
            }
            if self.eat(">") {
                return Ok((out, false));
            }
            if !had_ws {
                return Err(self.syntax("expected whitespace before attribute"));
            }
            let position = self.pos;
            let name = self.name()?;
            self.skip_ws();
            self.expect("=")?;
            self.skip_ws();
            self.expect("\"")?;
            let value = self.escaped_until('"')?;
            self.pos += 1;
            if out.iter().any(|a| a.name == name) {
                return Err(SvgError::Attribute {
                    position,
                    name: name.into(),
                    message: "duplicate attribute".into(),
                });
            }
            out.push(RawAttr { name, value, position });
        }
    }
}

fn attr_err(a: &RawAttr, message: impl Into<String>) -> SvgError {
    SvgError::Attribute {
        position: a.position,
        name: a.name.into(),
        message: message.into(),
    }
}

fn parse_int<T: std::str::FromStr>(a: &RawAttr) -> Result<T, SvgError> {
    let v = a.value.as_str();
    let canonical = !v.is_empty() && v.trim_start_matches('-').bytes().all(|b| b.is_ascii_digit());
    canonical
        .then(|| v.parse().ok())
        .flatten()
        .ok_or_else(|| attr_err(a, format!("expected an integer, got {v:?}")))
}

fn parse_fixed(a: &RawAttr) -> Result<Fixed, SvgError> {
    a.value.parse().map_err(|e| attr_err(a, format!("{e}")))
}

fn parse_color(a: &RawAttr) -> Result<Rgba, SvgError> {
    let bad = || attr_err(a, format!("expected rgba(r, g, b, a), got {:?}", a.value));
    let inner = a
        .value
        .trim()
        .strip_prefix("rgba(")
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(bad)?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    let [r, g, b, alpha] = parts.as_slice() else {
        return Err(bad());
    };
    Ok(Rgba {
        r: r.parse().map_err(|_| bad())?,
        g: g.parse().map_err(|_| bad())?,
        b: b.parse().map_err(|_| bad())?,
        a: alpha.parse().map_err(|_| bad())?,
    })
}

fn parse_transform(a: &RawAttr) -> Result<Affine, SvgError> {
    let bad = || attr_err(a, format!("expected matrix(a b c d e f), got {:?}", a.value));
    let inner = a
        .value
        .trim()
        .strip_prefix("matrix(")
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(bad)?;
    let nums: Vec<Fixed> = inner
        .split([' ', ','])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let m: [Fixed; 6] = nums.try_into().map_err(|_| bad())?;
    Ok(Affine(m))
}

fn parse_keyword<T>(a: &RawAttr, f: fn(&str) -> Option<T>) -> Result<T, SvgError> {
    f(&a.value).ok_or_else(|| attr_err(a, format!("unknown keyword {:?}", a.value)))
}

/// Parses a `[boi]W[sep]H[sep][img:..]*[eoi]` string.
pub fn parse_token_block(s: &str) -> Option<ImageTokenBlock> {
    let body = s.strip_prefix(BOI_MARK)?.strip_suffix("[eoi]")?;
    let (w, rest) = body.split_once("[sep]")?;
    let (h, mut codes_str) = rest.split_once("[sep]")?;
    let digits = |d: &str| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit());
    if !digits(w) || !digits(h) {
        return None;
    }
    let mut codes = Vec::new();
    while !codes_str.is_empty() {
        let tail = codes_str.strip_prefix("[img:")?;
        let end = tail.find(']')?;
        if !digits(&tail[..end]) {
            return None;
        }
        codes.push(tail[..end].parse().ok()?);
        codes_str = &tail[end + 1..];
    }
    Some(ImageTokenBlock {
        width: w.parse().ok()?,
        height: h.parse().ok()?,
        codes,
    })
}

fn parse_image(attrs: &[RawAttr]) -> Result<ImageElement, SvgError> {
    let mut img = ImageElement::new(ImagePayload::Asset(String::new()), 0, 0, 0, 0);
    let mut seen = [false; 5];
    for a in attrs {
        match a.name {
            "href" => {
                img.payload = if a.value.starts_with(BOI_MARK) {
                    ImagePayload::Tokens(parse_token_block(&a.value).ok_or_else(|| attr_err(a, "malformed token block"))?)
                } else {
                    ImagePayload::Asset(a.value.clone())
                };
                seen[0] = true;
            }
            "x" => (img.x, seen[1]) = (parse_int(a)?, true),
            "y" => (img.y, seen[2]) = (parse_int(a)?, true),
            "width" => (img.width, seen[3]) = (parse_int(a)?, true),
            "height" => (img.height, seen[4]) = (parse_int(a)?, true),
            "transform" => img.transform = parse_transform(a)?,
            "opacity" => img.opacity = parse_fixed(a)?,
            _ => return Err(attr_err(a, "not allowed on <image>")),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(SvgError::Attribute {
            position: attrs.first().map_or(0, |a| a.position),
            name: IMAGE_ATTRS[i].into(),
            message: "required attribute missing on <image>".into(),
        });
    }
    Ok(img)
}

fn parse_text(attrs: &[RawAttr], content: String) -> Result<TextElement, SvgError> {
    let mut t = TextElement::new(content, 0, 0, String::new(), Fixed::ZERO);
    let mut seen = [false; 5];
    for a in attrs {
        match a.name {
            "x" => (t.x, seen[0]) = (parse_int(a)?, true),
            "y" => (t.y, seen[1]) = (parse_int(a)?, true),
            "fill" => (t.fill, seen[2]) = (parse_color(a)?, true),
            "font-family" => (t.font_family, seen[3]) = (a.value.clone(), true),
            "font-size" => (t.font_size, seen[4]) = (parse_fixed(a)?, true),
            "font-weight" => t.font_weight = parse_keyword(a, FontWeight::from_keyword)?,
            "font-style" => t.font_style = parse_keyword(a, FontStyle::from_keyword)?,
            "text-anchor" => t.text_anchor = parse_keyword(a, TextAnchor::from_keyword)?,
            "letter-spacing" => t.letter_spacing = parse_fixed(a)?,
            "transform" => t.transform = parse_transform(a)?,
            "opacity" => t.opacity = parse_fixed(a)?,
            _ => return Err(attr_err(a, "not allowed on <text>")),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(SvgError::Attribute {
            position: attrs.first().map_or(0, |a| a.position),
            name: TEXT_ATTRS[i].into(),
            message: "required attribute missing on <text>".into(),
        });
    }
    Ok(t)
}

fn parse_root(attrs: &[RawAttr]) -> Result<Canvas, SvgError> {
    let (mut w, mut h, mut view_box) = (None, None, None);
    for a in attrs {
        match a.name {
            "xmlns" if a.value == XMLNS => {}
            "xmlns" => return Err(attr_err(a, "unexpected namespace")),
            "width" => w = Some(parse_int::<u32>(a)?),
            "height" => h = Some(parse_int::<u32>(a)?),
            "viewBox" => view_box = Some(a),
            _ => return Err(attr_err(a, "not allowed on <svg>")),
        }
    }
    let missing = |name: &str| SvgError::Attribute {
        position: 0,
        name: name.into(),
        message: "required attribute missing on <svg>".into(),
    };
    let canvas = Canvas {
        width: w.ok_or_else(|| missing("width"))?,
        height: h.ok_or_else(|| missing("height"))?,
    };
    if let Some(vb) = view_box {
        let want = format!("0 0 {} {}", canvas.width, canvas.height);
        if vb.value.split_whitespace().collect::<Vec<_>>().join(" ") != want {
            return Err(attr_err(vb, format!("expected {want:?}")));
        }
    }
    Ok(canvas)
}

/// Parses one `<svg>` document of the supported subset.
pub fn parse(markup: &str) -> Result<DesignTemplate, SvgError> {
    let mut c = Cursor { src: markup, pos: 0 };
    c.skip_ws();
    c.expect("<")?;
    let tag_pos = c.pos;
    let root = c.name()?;
    if root != "svg" {
        return Err(SvgError::UnknownTag {
            position: tag_pos,
            tag: root.into(),
        });
    }
    let (attrs, closed) = c.attrs()?;
    let canvas = parse_root(&attrs)?;
    let mut elements = Vec::new();
    if !closed {
        loop {
            c.skip_ws();
            if c.eat("</") {
                let p = c.pos;
                if c.name()? != "svg" {
                    return Err(SvgError::Syntax {
                        position: p,
                        message: "mismatched closing tag".into(),
                    });
                }
                c.skip_ws();
                c.expect(">")?;
                break;
            }
            c.expect("<")?;
            let tag_pos = c.pos;
            let tag = c.name()?;
            match tag {
                "image" => {
                    let (attrs, closed) = c.attrs()?;
                    if !closed {
                        c.skip_ws();
                        c.expect("</image>")?;
                    }
                    elements.push(Element::Image(parse_image(&attrs)?));
                }
                "text" => {
                    let (attrs, closed) = c.attrs()?;
                    let content = if closed {
                        String::new()
                    } else {
                        let body = c.escaped_until('<')?;
                        c.expect("</text>")?;
                        body
                    };
                    elements.push(Element::Text(parse_text(&attrs, content)?));
                }
                other => {
                    return Err(SvgError::UnknownTag {
                        position: tag_pos,
                        tag: other.into(),
                    })
                }
            }
        }
    }
    c.skip_ws();
    if c.pos != markup.len() {
        return Err(c.syntax("trailing content after </svg>"));
    }
    Ok(DesignTemplate { canvas, elements })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing_template() -> DesignTemplate {
        let mut t = DesignTemplate::new(419, 298);
        t.elements.push(Element::Image(ImageElement::new(
            ImagePayload::Tokens(ImageTokenBlock {
                width: 360,
                height: 260,
                codes: vec![1, 42, 3, 94],
            }),
            -9,
            -9,
            436,
            315,
        )));
        let mut text = TextElement::new("FAMILY", 32, 81, "Montserrat", Fixed::from_int(30));
        text.font_weight = FontWeight::Bold;
        text.fill = Rgba::WHITE;
        t.elements.push(Element::Text(text));
        t
    }

    const LISTING: &str = concat!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 419 298\" width=\"419\" height=\"298\">\n",
        "<image href=\"[boi]360[sep]260[sep][img:1][img:42][img:3][img:94][eoi]\" x=\"-9\" y=\"-9\" width=\"436\" height=\"315\"/>\n",
        "<text x=\"32\" y=\"81\" fill=\"rgba(255, 255, 255, 1)\" font-family=\"Montserrat\" font-size=\"30\" font-weight=\"bold\">FAMILY</text>\n",
        "</svg>"
    );

    #[test]
    fn serializes_listing_structure() {
        let s = serialize(&listing_template(), &FontList::default()).unwrap();
        assert_eq!(s, LISTING);
    }

    #[test]
    fn parses_listing_structure() {
        let t = parse(LISTING).unwrap();
        assert_eq!(t.canvas, Canvas { width: 419, height: 298 });
        assert_eq!(t.elements[0].as_image().unwrap().x, -9);
        assert_eq!(t, listing_template());
    }

    #[test]
    fn accepts_wrapped_listing_with_attributes_reordered() {
        let wrapped = "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 419 298\" width=\"419\" height=\"298\">\n  \
            <image href=\"[boi]360[sep]260[sep][img:1][img:42][img:3][img:94][eoi]\" x=\"-9\" y=\"-9\"\n  width=\"436\" height=\"315\"/>\n  \
            <text font-family=\"Montserrat\" font-size=\"30\" font-weight=\"bold\" fill=\"rgba(255, 255, 255, 1)\" x=\"32\" y=\"81\">FAMILY</text>\n</svg>\n";
        assert_eq!(parse(wrapped).unwrap(), listing_template());
    }

    #[test]
    fn default_opacity_is_elided() {
        let s = serialize_unchecked(&listing_template());
        let text_line = s.lines().find(|l| l.starts_with("<text")).unwrap();
        assert!(!text_line.contains("opacity"));
    }

    #[test]
    fn non_defaults_are_emitted_in_fixed_order() {
        let mut t = listing_template();
        if let Element::Text(tx) = &mut t.elements[1] {
            tx.opacity = Fixed(500);
            tx.letter_spacing = Fixed(-250);
            tx.text_anchor = TextAnchor::Middle;
            tx.font_style = FontStyle::Italic;
            tx.transform = Affine([Fixed(1000), Fixed(0), Fixed(0), Fixed(1000), Fixed(5000), Fixed(0)]);
        }
        let s = serialize_unchecked(&t);
        let line = s.lines().find(|l| l.starts_with("<text")).unwrap();
        let order: Vec<usize> = TEXT_ATTRS.iter().map(|a| line.find(&format!(" {a}=\"")).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]), "{line}");
        assert!(line.contains("transform=\"matrix(1 0 0 1 5 0)\""));
        assert_eq!(parse(&s).unwrap(), t);
    }

    #[test]
    fn unknown_tag_is_rejected() {
        let s = "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 4 4\" width=\"4\" height=\"4\">\n<circle/>\n</svg>";
        assert!(matches!(parse(s), Err(SvgError::UnknownTag { tag, .. }) if tag == "circle"));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse("<svg width=\"4\""), Err(SvgError::Syntax { .. })));
        let bad_num = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"4\" height=\"4\">\n<text x=\"1.5\" y=\"0\" fill=\"rgba(0, 0, 0, 1)\" font-family=\"Lato\" font-size=\"3\">a</text>\n</svg>";
        assert!(matches!(parse(bad_num), Err(SvgError::Attribute { name, .. }) if name == "x"));
        let bad_vb = "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 4 19 298\" width=\"419\" height=\"298\">\n</svg>";
        assert!(matches!(parse(bad_vb), Err(SvgError::Attribute { name, .. }) if name == "viewBox"));
        let trailing = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"4\" height=\"4\">\n</svg>x";
        assert!(matches!(parse(trailing), Err(SvgError::Syntax { .. })));
    }

    #[test]
    fn escaping_round_trips() {
        let mut t = DesignTemplate::new(10, 10);
        t.elements.push(Element::Text(TextElement::new("a<b & \"c\">", 0, 5, "Lato", Fixed::from_int(4))));
        t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset("assets/a&b.png".into()), 0, 0, 3, 3)));
        let s = serialize(&t, &FontList::default()).unwrap();
        assert!(s.contains(">a&lt;b &amp; &quot;c&quot;&gt;</text>"));
        assert_eq!(parse(&s).unwrap(), t);
    }

    #[test]
    fn invalid_template_refuses_to_serialize() {
        let mut t = DesignTemplate::new(10, 10);
        t.elements.push(Element::Text(TextElement::new("a\nb", 0, 5, "Lato", Fixed::from_int(4))));
        assert!(matches!(serialize(&t, &FontList::default()), Err(SvgError::Invalid(_))));
    }

    #[test]
    fn empty_template_round_trips() {
        let t = DesignTemplate::new(7, 9);
        let s = serialize_unchecked(&t);
        assert_eq!(parse(&s).unwrap(), t);
    }

    #[test]
    fn pieces_concatenate_to_markup_and_mark_spans() {
        let t = listing_template();
        let pieces = serialize_pieces(&t);
        let spans: Vec<&Span> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Markup { span, .. } => span.as_ref(),
                Piece::Href { .. } => None,
            })
            .collect();
        assert!(spans.contains(&&Span::Attribute(1, "x".into())));
        assert!(spans.contains(&&Span::TextContent(1)));
        assert_eq!(pieces.iter().filter(|p| matches!(p, Piece::Href { .. })).count(), 1);
    }

    #[test]
    fn split_multiline_cases() {
        let base = TextElement::new("", 4, 0, "Lato", Fixed::from_int(12));
        let two = split_multiline("A\nB", &base, &[10, 40]).unwrap();
        assert_eq!(two.iter().map(|t| t.content.as_str()).collect::<Vec<_>>(), ["A", "B"]);
        assert_eq!((two[0].y, two[1].y), (10, 40));
        let one = split_multiline("A", &base, &[10]).unwrap();
        assert_eq!(one, vec![TextElement { content: "A".into(), y: 10, ..base.clone() }]);
        let three = split_multiline("A\n\nB", &base, &[10, 25, 40]).unwrap();
        assert_eq!(three.iter().map(|t| t.content.as_str()).collect::<Vec<_>>(), ["A", "", "B"]);
        assert_eq!(split_multiline("A\nB", &base, &[1]), Err(SvgError::LengthMismatch { lines: 2, ys: 1 }));
    }

    #[test]
    fn token_block_text_form() {
        let b = ImageTokenBlock { width: 3, height: 12, codes: vec![0, 255] };
        let s = token_block_string(&b);
        assert_eq!(s, "[boi]3[sep]12[sep][img:0][img:255][eoi]");
        assert_eq!(parse_token_block(&s), Some(b));
        assert_eq!(parse_token_block("[boi]3[sep][sep][eoi]"), None);
    }
}
