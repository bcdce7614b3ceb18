//! PNG I/O, value-range handling and the random-noise baseline.

use std::fs;
use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage, RgbaImage};
use rand::Rng as _;

use crate::error::{io_err, shape_err, Error, Result};
use crate::rng::seeded;
use crate::tensor::{Shape, Tensor};

/// A decoded PNG: colour planes plus the alpha plane for RGBA files.
#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub rgb: Tensor,
    pub alpha: Option<Tensor>,
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[inline]
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Snaps every value onto the 1/255 grid used by 8-bit files.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| from_u8(to_u8(v)))
}

/// Reads an 8-bit RGB or RGBA PNG into a 1×3×H×W tensor in [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<LoadedImage> {
    let path = path.as_ref();
    let unsupported = |reason: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(unsupported(format!("expected PNG, detected {:?}", reader.format())));
    }
    match reader.decode()? {
        image::DynamicImage::ImageRgb8(img) => Ok(LoadedImage {
            rgb: rgb_to_tensor(&img),
            alpha: None,
        }),
        image::DynamicImage::ImageRgba8(img) => {
            let (w, h) = img.dimensions();
            let (w, h) = (w as usize, h as usize);
            let rgb = Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
                from_u8(img.get_pixel(x as u32, y as u32)[c])
            });
            let alpha = Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
                from_u8(img.get_pixel(x as u32, y as u32)[3])
            });
            Ok(LoadedImage {
                rgb,
                alpha: Some(alpha),
            })
        }
        other => Err(unsupported(format!(
            "only 8-bit RGB/RGBA is supported, got {:?}",
            other.color()
        ))),
    }
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    })
}

/// Writes a 1×3×H×W (colour) or 1×1×H×W (grey) tensor as an 8-bit RGB PNG.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let [n, c, h, w] = t.shape();
    if n != 1 || (c != 3 && c != 1) {
        return Err(shape_err("save_image", format!("expected 1x3xHxW or 1x1xHxW, got {:?}", t.shape())));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_u8(t.get(0, if c == 1 { 0 } else { ch }, y as usize, x as usize));
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

/// Writes colour + alpha planes as an 8-bit RGBA PNG.
pub fn save_rgba(rgb: &Tensor, alpha: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let [_, _, h, w] = rgb.shape();
    rgb.expect_shape("save_rgba", [1, 3, h, w])?;
    alpha.expect_shape("save_rgba", [1, 1, h, w])?;
    let img = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgba([
            to_u8(rgb.get(0, 0, y, x)),
            to_u8(rgb.get(0, 1, y, x)),
            to_u8(rgb.get(0, 2, y, x)),
            to_u8(alpha.get(0, 0, y, x)),
        ])
    });
    img.save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

/// I.i.d. uniform noise on [-epsilon, +epsilon].
pub fn uniform_noise(shape: Shape, epsilon: f32, seed: u64) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise bound must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let mut rng = seeded(seed);
    let data = (0..crate::tensor::numel(shape))
        .map(|_| rng.gen_range(-epsilon..=epsilon))
        .collect();
    Tensor::new(shape, data)
}

const RAW_MAGIC: &[u8; 8] = b"WMVXRAW1";

/// Dumps a tensor exactly: magic, four u32 dims, little-endian f32 payload.
pub fn save_raw(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 4 * t.len());
    buf.extend_from_slice(RAW_MAGIC);
    for d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.as_ref(), buf).map_err(io_err(path.as_ref()))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    let bad = |why: &str| Error::InvalidArgument(format!("{}: {why}", path.as_ref().display()));
    if bytes.len() < 24 || &bytes[..8] != RAW_MAGIC {
        return Err(bad("not a raw tensor file"));
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        let o = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let payload = &bytes[24..];
    if payload.len() != 4 * crate::tensor::numel(shape) {
        return Err(bad("payload length does not match header"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}
