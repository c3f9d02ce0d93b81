//! Image and map types, PNG/JPEG I/O, derivative operators and Retinex
//! recomposition.
//!
//! Every field is stored planar (channel-major): index `(c * height + y) *
//! width + x`. Values are `f64`; the network engine converts to `f32` at its
//! boundary.

use std::io::Cursor;
use std::ops::Deref;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{shape_mismatch, Error, Result};

/// A dense `height × width × channels` real field.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_mismatch(
                format!("{} values for {height}x{width}x{channels}", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a field from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial positions.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn ensure_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_mismatch(self.shape_string(), other.shape_string()));
        }
        Ok(())
    }

    pub fn ensure_same_spatial(&self, other: &Field) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_mismatch(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp01(&self) -> Field {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Copies the top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Field {
        self.window(0, 0, height, width)
    }

    /// Copies the `height × width` window whose top-left corner is `(y0, x0)`.
    pub fn window(&self, y0: usize, x0: usize, height: usize, width: usize) -> Field {
        assert!(y0 + height <= self.height && x0 + width <= self.width);
        Field::from_fn(height, width, self.channels, |y, x, c| {
            self.at(y0 + y, x0 + x, c)
        })
    }

    /// Mirrors the field left-to-right.
    pub fn flip_horizontal(&self) -> Field {
        let w = self.width;
        Field::from_fn(self.height, w, self.channels, |y, x, c| self.at(y, w - 1 - x, c))
    }

    /// Reflect-pads on the bottom and right edges up to `height × width`.
    ///
    /// The padded region mirrors the field about its last row/column without
    /// repeating the edge sample; fields narrower than the padding are
    /// reflected repeatedly.
    pub fn reflect_pad_to(&self, height: usize, width: usize) -> Field {
        assert!(height >= self.height && width >= self.width);
        Field::from_fn(height, width, self.channels, |y, x, c| {
            self.at(reflect_index(y, self.height), reflect_index(x, self.width), c)
        })
    }

    /// Reflect-pads so both spatial dimensions become multiples of `multiple`.
    pub fn reflect_pad_multiple(&self, multiple: usize) -> Field {
        self.reflect_pad_to(
            round_up(self.height, multiple),
            round_up(self.width, multiple),
        )
    }
}

/// Rounds `n` up to the next multiple of `multiple`.
pub fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Maps an arbitrary index onto `0..n` by mirror reflection with period
/// `2(n - 1)`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn check_unit_range(field: &Field, what: &str) -> Result<()> {
    if let Some(v) = field.data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::OutOfRange(format!(
            "{what} value {v} is not a finite number in [0, 1]"
        )));
    }
    if field.height == 0 || field.width == 0 {
        return Err(Error::InvalidArgument(format!("{what} has zero size")));
    }
    Ok(())
}

macro_rules! unit_map {
    ($(#[$doc:meta])* $name:ident, $channels:expr, $what:literal) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Field);

        impl $name {
            pub const CHANNELS: usize = $channels;

            /// Validates channel count, finiteness and the `[0, 1]` range.
            pub fn new(field: Field) -> Result<Self> {
                if field.channels() != $channels {
                    return Err(shape_mismatch(
                        format!("{} channel(s)", $channels),
                        format!("{} channel(s)", field.channels()),
                    ));
                }
                check_unit_range(&field, $what)?;
                Ok(Self(field))
            }

            /// Clamps into `[0, 1]` (non-finite values become 0).
            pub fn from_field_clamped(field: Field) -> Result<Self> {
                let clamped = field.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
                Self::new(clamped)
            }

            pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
                Self::new(Field::filled(height, width, $channels, value))
            }

            pub fn as_field(&self) -> &Field {
                &self.0
            }

            pub fn into_field(self) -> Field {
                self.0
            }
        }

        impl Deref for $name {
            type Target = Field;

            fn deref(&self) -> &Field {
                &self.0
            }
        }

        impl AsRef<Field> for $name {
            fn as_ref(&self) -> &Field {
                &self.0
            }
        }
    };
}

unit_map!(
    /// An RGB image with values in `[0, 1]`, sRGB-coded.
    Image,
    3,
    "image"
);
unit_map!(
    /// Single-channel illumination in `[0, 1]`.
    IlluminationMap,
    1,
    "illumination"
);
unit_map!(
    /// Three-channel reflectance in `[0, 1]`.
    ReflectanceMap,
    3,
    "reflectance"
);

impl IlluminationMap {
    /// Replicates the map into a gray RGB image, for viewing.
    pub fn to_image(&self) -> Image {
        let f = &self.0;
        Image(Field::from_fn(f.height(), f.width(), 3, |y, x, _| f.at(y, x, 0)))
    }
}

impl ReflectanceMap {
    pub fn to_image(&self) -> Image {
        Image(self.0.clone())
    }
}

impl Image {
    pub fn to_reflectance(&self) -> ReflectanceMap {
        ReflectanceMap(self.0.clone())
    }
}

/// Horizontal and vertical forward differences of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub dx: Field,
    pub dy: Field,
}

/// Forward differences with replicate padding: the last column of `dx` and
/// the last row of `dy` are zero.
pub fn grad(field: &Field) -> GradientField {
    let (h, w, c) = field.shape();
    let dx = Field::from_fn(h, w, c, |y, x, ch| {
        if x + 1 < w {
            field.at(y, x + 1, ch) - field.at(y, x, ch)
        } else {
            0.0
        }
    });
    let dy = Field::from_fn(h, w, c, |y, x, ch| {
        if y + 1 < h {
            field.at(y + 1, x, ch) - field.at(y, x, ch)
        } else {
            0.0
        }
    });
    GradientField { dx, dy }
}

/// Adjoint of [`grad`]: maps upstream gradients on `(dx, dy)` back onto the
/// source field.
pub fn grad_adjoint(gdx: &Field, gdy: &Field) -> Field {
    let (h, w, c) = gdx.shape();
    debug_assert_eq!(gdx.shape(), gdy.shape());
    let mut out = Field::zeros(h, w, c);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut g = 0.0;
                if x + 1 < w {
                    g -= gdx.at(y, x, ch);
                }
                if x > 0 {
                    g += gdx.at(y, x - 1, ch);
                }
                if y + 1 < h {
                    g -= gdy.at(y, x, ch);
                }
                if y > 0 {
                    g += gdy.at(y - 1, x, ch);
                }
                out.set(y, x, ch, g);
            }
        }
    }
    out
}

/// Per-direction maximum over channels of `|grad(image)|`, a single-channel
/// gradient field.
pub fn channel_max_abs_grad(image: &Field) -> GradientField {
    let g = grad(image);
    let reduce = |f: &Field| {
        Field::from_fn(f.height(), f.width(), 1, |y, x, _| {
            (0..f.channels()).map(|c| f.at(y, x, c).abs()).fold(0.0, f64::max)
        })
    };
    GradientField {
        dx: reduce(&g.dx),
        dy: reduce(&g.dy),
    }
}

/// `R ∘ L` with the single-channel illumination broadcast over RGB, clamped
/// to `[0, 1]`.
pub fn recompose(reflectance: &ReflectanceMap, illumination: &IlluminationMap) -> Result<Image> {
    reflectance.ensure_same_spatial(illumination)?;
    let product = product_broadcast(reflectance, illumination);
    Ok(Image(product.clamp01()))
}

/// Unclamped elementwise product of a multi-channel field with a
/// single-channel one.
pub(crate) fn product_broadcast(field: &Field, single: &Field) -> Field {
    let n = field.pixels();
    let mut out = field.clone();
    for c in 0..field.channels() {
        for (v, l) in out.data[c * n..(c + 1) * n].iter_mut().zip(single.channel(0)) {
            *v *= l;
        }
    }
    out
}

/// Reads an 8- or 16-bit PNG or JPEG, normalizing by the maximum code value.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    decode_reader(reader)
}

/// Decodes PNG or JPEG bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    decode_reader(reader)
}

/// Width and height from the header of PNG or JPEG bytes, without decoding
/// pixels.
pub fn probe_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => return Err(Error::UnsupportedFormat("unrecognized".into())),
    }
    let (w, h) = reader.into_dimensions()?;
    Ok((w as usize, h as usize))
}

fn decode_reader<R: std::io::BufRead + std::io::Seek>(reader: ImageReader<R>) -> Result<Image> {
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => return Err(Error::UnsupportedFormat("unrecognized".into())),
    }
    let decoded = reader.decode()?;
    from_dynamic(&decoded)
}

fn from_dynamic(decoded: &DynamicImage) -> Result<Image> {
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("zero-size image".into()));
    }
    let sixteen_bit = matches!(
        decoded,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let field = if sixteen_bit {
        let buf = decoded.to_rgb16();
        Field::from_fn(h, w, 3, |y, x, c| {
            buf.get_pixel(x as u32, y as u32)[c] as f64 / u16::MAX as f64
        })
    } else {
        let buf = decoded.to_rgb8();
        Field::from_fn(h, w, 3, |y, x, c| {
            buf.get_pixel(x as u32, y as u32)[c] as f64 / u8::MAX as f64
        })
    };
    Ok(Image(field))
}

/// Quantizes to 8 bits per channel (round to nearest).
pub fn to_rgb8(image: &Image) -> RgbImage {
    let f = image.as_field();
    RgbImage::from_fn(f.width() as u32, f.height() as u32, |x, y| {
        let q = |c| (f.at(y as usize, x as usize, c) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

/// Encodes as an 8-bit RGB PNG. Deterministic: identical images give
/// identical bytes.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    to_rgb8(image).write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
