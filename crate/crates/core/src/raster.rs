//! RGBA raster images with channel values in `[0, 1]`.

use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    /// Row-major `H x W x 4`.
    pixels: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image dimensions must be positive, got {0}x{1}")]
    EmptyImage(usize, usize),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("unsupported png layout {0:?}/{1:?}")]
    Unsupported(png::ColorType, png::BitDepth),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Rgb,
    Alpha,
}

impl RasterImage {
    /// Values are clamped into `[0, 1]`.
    pub fn from_pixels(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::EmptyImage(height, width));
        }
        assert_eq!(pixels.len(), height * width * 4, "pixel buffer length");
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgba: [f32; 4]) -> Self {
        let pixels = rgba.iter().copied().cycle().take(height * width * 4).collect();
        Self::from_pixels(height, width, pixels).expect("positive size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 4] {
        let i = (y * self.width + x) * 4;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2], self.pixels[i + 3]]
    }

    pub fn set(&mut self, y: usize, x: usize, v: [f32; 4]) {
        let i = (y * self.width + x) * 4;
        for c in 0..4 {
            self.pixels[i + c] = v[c].clamp(0.0, 1.0);
        }
    }

    /// Planar `4 x H x W` copy, the layout the quantizer consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 4 * hw];
        for (p, px) in self.pixels.chunks_exact(4).enumerate() {
            for c in 0..4 {
                out[c * hw + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, planar: &[f32]) -> Result<Self, RasterError> {
        let hw = height * width;
        assert_eq!(planar.len(), 4 * hw, "planar buffer length");
        let mut px = vec![0.0; 4 * hw];
        for p in 0..hw {
            for c in 0..4 {
                px[p * 4 + c] = planar[c * hw + p];
            }
        }
        Self::from_pixels(height, width, px)
    }

    pub fn is_opaque(&self) -> bool {
        self.pixels.chunks_exact(4).all(|p| p[3] >= 1.0)
    }

    /// Horizontal mirror.
    pub fn flip_x(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn read_png(path: &Path) -> Result<Self, RasterError> {
        Self::decode_png(&std::fs::read(path)?)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().expect("sane png size")];
        let info = reader.next_frame(&mut buf)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = &buf[..info.buffer_size()];
        let to_rgba: fn(&[u8]) -> [u8; 4] = match info.color_type {
            png::ColorType::Rgba => |p| [p[0], p[1], p[2], p[3]],
            png::ColorType::Rgb => |p| [p[0], p[1], p[2], 255],
            png::ColorType::GrayscaleAlpha => |p| [p[0], p[0], p[0], p[1]],
            png::ColorType::Grayscale => |p| [p[0], p[0], p[0], 255],
            other => return Err(RasterError::Unsupported(other, info.bit_depth)),
        };
        let stride = info.color_type.samples();
        let pixels = data
            .chunks_exact(stride)
            .flat_map(to_rgba)
            .map(|b| f32::from(b) / 255.0)
            .collect();
        Self::from_pixels(h, w, pixels)
    }

    /// 8-bit RGBA bytes, rounding half up.
    pub fn to_rgba8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn encode_png(&self, w: impl Write) -> Result<(), RasterError> {
        let mut enc = png::Encoder::new(BufWriter::new(w), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.to_rgba8())?;
        writer.finish()?;
        Ok(())
    }

    pub fn write_png(&self, path: &Path) -> Result<(), RasterError> {
        self.encode_png(std::fs::File::create(path)?)
    }

    pub fn png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_png(&mut out).expect("in-memory png encode");
        out
    }
}

fn quantize_u8(v: f32) -> u8 {
    (f64::from(v.clamp(0.0, 1.0)) * 255.0 + 0.5).floor() as u8
}

/// Bilinear resize with half-pixel centers (align-corners off) and clamp-to-edge.
pub fn resize_bilinear(img: &RasterImage, out_h: usize, out_w: usize) -> RasterImage {
    assert!(out_h >= 1 && out_w >= 1, "resize target must be positive");
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let ys = axis_taps(img.height, out_h);
    let xs = axis_taps(img.width, out_w);
    let mut px = Vec::with_capacity(out_h * out_w * 4);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (a, b, c, d) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
            for ch in 0..4 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bot = c[ch] + (d[ch] - c[ch]) * fx;
                px.push(top + (bot - top) * fy);
            }
        }
    }
    RasterImage::from_pixels(out_h, out_w, px).expect("positive size")
}

/// Per output index: the two source taps and the weight of the second.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

pub fn composite_over_white(img: &RasterImage) -> RasterImage {
    let mut px = img.pixels.clone();
    for p in px.chunks_exact_mut(4) {
        let a = p[3];
        for c in &mut p[..3] {
            *c = a * *c + (1.0 - a);
        }
        p[3] = 1.0;
    }
    RasterImage::from_pixels(img.height, img.width, px).expect("positive size")
}

/// Mean squared error over the selected channels, accumulated in f64.
pub fn mse(a: &RasterImage, b: &RasterImage, channels: Channels) -> Result<f64, RasterError> {
    if a.height != b.height || a.width != b.width {
        return Err(RasterError::ShapeMismatch(a.height, a.width, b.height, b.width));
    }
    let range = match channels {
        Channels::Rgb => 0..3,
        Channels::Alpha => 3..4,
    };
    let n = (a.height * a.width * range.len()) as f64;
    let sum: f64 = a
        .pixels
        .chunks_exact(4)
        .zip(b.pixels.chunks_exact(4))
        .map(|(p, q)| {
            range
                .clone()
                .map(|c| (f64::from(p[c]) - f64::from(q[c])).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent scalar bilinear: explicit source coordinate per output pixel,
    /// clamped neighbours, weights computed from scratch.
    fn oracle_resize(src: &[f64], sh: usize, sw: usize, oh: usize, ow: usize) -> Vec<f64> {
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * sh as f64 / oh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
                let sx = ((ox as f64 + 0.5) * sw as f64 / ow as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
                let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |y: usize, x: usize| src[y * sw + x];
                out[oy * ow + ox] = (1.0 - wy) * ((1.0 - wx) * v(y0, x0) + wx * v(y0, x1))
                    + wy * ((1.0 - wx) * v(y1, x0) + wx * v(y1, x1));
            }
        }
        out
    }

    fn gray(h: usize, w: usize, vals: &[f32]) -> RasterImage {
        let px = vals.iter().flat_map(|&v| [v, v, v, v]).collect();
        RasterImage::from_pixels(h, w, px).unwrap()
    }

    #[test]
    fn resize_one_by_two_to_one_by_four_matches_oracle() {
        let img = gray(1, 2, &[0.0, 1.0]);
        let out = resize_bilinear(&img, 1, 4);
        let want = oracle_resize(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(want, vec![0.0, 0.25, 0.75, 1.0]);
        for (x, w) in want.iter().enumerate() {
            assert!((f64::from(out.get(0, x)[0]) - w).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = gray(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(resize_bilinear(&img, 2, 3), img);
    }

    #[test]
    fn composite_examples() {
        let opaque = RasterImage::filled(2, 2, [0.2, 0.4, 0.6, 1.0]);
        assert_eq!(composite_over_white(&opaque), opaque);
        let clear = RasterImage::filled(2, 2, [0.2, 0.4, 0.6, 0.0]);
        assert_eq!(composite_over_white(&clear), RasterImage::filled(2, 2, [1.0; 4]));
        let half_black = RasterImage::filled(1, 1, [0.0, 0.0, 0.0, 0.5]);
        assert_eq!(composite_over_white(&half_black).get(0, 0), [0.5, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn mse_examples() {
        let x = RasterImage::filled(3, 3, [0.3, 0.6, 0.9, 0.5]);
        assert_eq!(mse(&x, &x, Channels::Rgb).unwrap(), 0.0);
        let a = RasterImage::filled(2, 2, [0.0; 4]);
        let b = RasterImage::filled(2, 2, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(mse(&a, &b, Channels::Alpha).unwrap(), 1.0);
        assert_eq!(mse(&a, &b, Channels::Rgb).unwrap(), 0.0);
        let c = RasterImage::filled(2, 3, [0.0; 4]);
        assert!(matches!(mse(&a, &c, Channels::Rgb), Err(RasterError::ShapeMismatch(..))));
    }

    #[test]
    fn png_round_trip_of_8bit_values_is_exact() {
        let vals: Vec<f32> = (0..16u8).map(|i| f32::from(i * 17) / 255.0).collect();
        let img = RasterImage::from_pixels(2, 2, vals).unwrap();
        let back = RasterImage::decode_png(&img.png_bytes()).unwrap();
        assert_eq!(back.to_rgba8(), img.to_rgba8());
        assert_eq!(back, img);
    }

    #[test]
    fn png_rounding_is_half_up() {
        assert_eq!(quantize_u8(0.5 / 255.0), 1);
        assert_eq!(quantize_u8(0.49 / 255.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
    }

    fn arb_image() -> impl Strategy<Value = RasterImage> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f32..=1.0, h * w * 4)
                .prop_map(move |px| RasterImage::from_pixels(h, w, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn composite_is_idempotent(img in arb_image()) {
            let once = composite_over_white(&img);
            prop_assert_eq!(composite_over_white(&once), once);
        }

        #[test]
        fn mse_symmetric_and_nonnegative((a, b) in (1usize..5, 1usize..5).prop_flat_map(|(h, w)| {
            let v = proptest::collection::vec(0.0f32..=1.0, h * w * 4);
            (v.clone(), v).prop_map(move |(p, q)| {
                (RasterImage::from_pixels(h, w, p).unwrap(), RasterImage::from_pixels(h, w, q).unwrap())
            })
        })) {
            for ch in [Channels::Rgb, Channels::Alpha] {
                let ab = mse(&a, &b, ch).unwrap();
                prop_assert_eq!(ab, mse(&b, &a, ch).unwrap());
                prop_assert!(ab >= 0.0);
            }
        }

        #[test]
        fn resize_preserves_constants(v in 0.0f32..=1.0, h in 1usize..8, w in 1usize..8) {
            let img = RasterImage::filled(2, 2, [v; 4]);
            let out = resize_bilinear(&img, h, w);
            prop_assert!(out.pixels().iter().all(|&p| p == v));
        }

        #[test]
        fn resize_matches_scalar_oracle(img in arb_image(), oh in 1usize..9, ow in 1usize..9) {
            let out = resize_bilinear(&img, oh, ow);
            for c in 0..4 {
                let src: Vec<f64> = img.pixels().chunks_exact(4).map(|p| f64::from(p[c])).collect();
                let want = oracle_resize(&src, img.height(), img.width(), oh, ow);
                for (i, w) in want.iter().enumerate() {
                    let got = f64::from(out.pixels()[i * 4 + c]);
                    prop_assert!((got - w).abs() < 1e-5, "{} vs {}", got, w);
                }
            }
        }
    }
}
