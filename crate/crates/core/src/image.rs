//! RGB images with values in [0, 1].

use std::io::Cursor;
use std::path::Path;

use dlf_tensor::{Element, Tensor};
use image::{ImageFormat, Rgb32FImage, RgbImage};

use crate::error::{contract, Error, Result};

/// Planar RGB image, stored channel-major as `[3][H][W]`. Every value lies in
/// [0, 1]; constructors clamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract(format!("empty image {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(contract(format!("{} values for a {height}x{width} RGB image", data.len())));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(contract("image contains NaN"));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { height, width, data })
    }

    /// Builds an image from planar f64 channels, clamping to [0, 1].
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        if planes.len() != 3 {
            return Err(contract(format!("{} planes, expected 3", planes.len())));
        }
        Self::new(height, width, planes.iter().flatten().map(|&v| v as f32).collect())
    }

    /// `f(channel, y, x)` at every position.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// The three channels widened to f64.
    pub fn planes_f64(&self) -> Vec<Vec<f64>> {
        (0..3).map(|c| self.plane(c).iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(contract(format!(
                "crop {height}x{width}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(height, width, |c, y, x| self.get(c, y0 + y, x0 + x))
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            [1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("image dimensions")
    }

    /// Reads sample `n` of a `[N, 3, H, W]` tensor, clamping to [0, 1].
    pub fn from_tensor<T: Element>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let &[batch, 3, h, w] = t.shape() else {
            return Err(contract(format!("expected [N, 3, H, W], got {:?}", t.shape())));
        };
        if n >= batch {
            return Err(contract(format!("sample {n} of batch {batch}")));
        }
        let len = 3 * h * w;
        let data = t.data()[n * len..(n + 1) * len]
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN) as f32)
            .collect();
        Self::new(h, w, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// Decodes any supported image format; 8- and 16-bit inputs map to
    /// [0, 1] by their full scale.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.into_rgb32f();
        Self::from_rgb32f(&img)
    }

    fn from_rgb32f(img: &Rgb32FImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32).0[c])
    }

    /// 8-bit sRGB PNG encoding.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                p.0[c] = (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            }
        }
        let mut buf = Cursor::new(Vec::new());
        out.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// The values an 8-bit encoding stores: clamped to [0, 1] and rounded
    /// to the nearest multiple of 1/255.
    pub fn quantize8(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }
}

/// Packs images of one size into a `[N, 3, H, W]` batch.
pub fn batch<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| contract("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(contract(format!("batch mixes {h}x{w} with {}x{}", im.height, im.width)));
        }
        data.extend(im.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new([images.len(), 3, h, w], data)?)
}
