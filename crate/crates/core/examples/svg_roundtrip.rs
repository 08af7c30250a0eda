//! Builds a template by hand, serializes it, and parses it back.

use markupdm::svg;
use markupdm::template::{DesignTemplate, Element, Fixed, FontList, ImageElement, ImagePayload, ImageTokenBlock, TextElement};

fn main() {
    let mut t = DesignTemplate::new(360, 260);
    t.elements.push(Element::Image(ImageElement::new(ImagePayload::Asset("assets/bg.png".into()), 0, 0, 360, 260)));
    let block = ImageTokenBlock {
        width: 48,
        height: 48,
        codes: (0..16).collect(),
    };
    t.elements.push(Element::Image(ImageElement::new(ImagePayload::Tokens(block), 40, 30, 96, 96)));
    t.elements.push(Element::Text(TextElement::new("Summer SALE", 160, 120, "Roboto", Fixed::from_int(28))));

    let fonts = FontList::default();
    let markup = svg::serialize(&t, &fonts).expect("template is valid");
    println!("{markup}");
    let back = svg::parse(&markup).expect("canonical markup parses");
    assert_eq!(back, t);
    assert_eq!(svg::serialize(&back, &fonts).unwrap(), markup);
    println!("round trip ok: {} elements", back.elements.len());
}
