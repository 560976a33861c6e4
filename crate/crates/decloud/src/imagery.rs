//! RGB images in [0,1], PNG/PPM I/O, and model-space conversion.
//!
//! Everything outside the diffusion model works in [0,1] raster space; the
//! model itself sees [-1,1] tensors via [`to_model_space`] /
//! [`from_model_space`], which are exact inverses (no quantization inside the
//! pipeline).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MIN_DIM: usize = 8;

/// RGB raster with pixel values in [0,1], row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>, // len = width * height * 3
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < MIN_DIM || height < MIN_DIM {
            return Err(Error::shape(format!(
                "image dimensions {width}x{height} below minimum {MIN_DIM}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("pixel value outside [0,1]".to_string()));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Image::new(width, height, vec![value; width * height * 3])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.set(x, y, c, self.get(self.width - 1 - x, y, c));
                }
            }
        }
        out
    }
}

/// Loads an 8-bit PNG (RGB or RGBA, alpha dropped) or binary PPM (P6).
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => load_ppm(path),
        _ => load_png(path),
    }
}

fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let decoded = image::ImageReader::new(BufReader::new(file))
        .with_guessed_format()
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?
        .decode()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    use image::DynamicImage;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        DynamicImage::ImageRgba8(img) => DynamicImage::ImageRgba8(img).to_rgb8(),
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel format {:?}, expected 8-bit RGB/RGBA", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(w, h, pixels)
}

fn load_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let parse_err = |reason: &str| Error::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // header: "P6" <w> <h> <maxval> single-whitespace, then raw RGB bytes
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        let mut s = String::new();
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            s.push(bytes[pos] as char);
            pos += 1;
        }
        if s.is_empty() {
            Err(Error::Parse {
                path: path.to_path_buf(),
                reason: "truncated header".to_string(),
            })
        } else {
            Ok(s)
        }
    };
    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(parse_err(&format!("expected P6 magic, got {magic}")));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| parse_err("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| parse_err("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| parse_err("bad maxval"))?;
    if maxval != 255 {
        return Err(parse_err(&format!(
            "unsupported bit depth (maxval {maxval}, expected 255)"
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(parse_err("truncated pixel data"));
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(w, h, pixels)
}

/// Saves an 8-bit RGB PNG; values are `round(v * 255)` clamped to [0,255].
/// Out-of-range inputs are clamped with a warning on stderr.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut warned = false;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) && !warned {
                eprintln!("warning: clamping out-of-range pixel value {v}");
                warned = true;
            }
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("pixel buffer length is checked at construction");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(format!("write {}", path.display()), std::io::Error::other(e)))
}

/// Saves a binary PPM (P6).
pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Maps [0,1] pixels to a `[1,3,H,W]` tensor in [-1,1] (v -> 2v - 1).
pub fn to_model_space(img: &Image) -> Tensor {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = 2.0 * img.get(x, y, c) - 1.0;
            }
        }
    }
    Tensor {
        shape: vec![1, 3, h, w],
        data,
        requires_grad: false,
        grad: None,
    }
}

/// Inverse of [`to_model_space`]; out-of-range values clamp to [0,1].
pub fn from_model_space(t: &Tensor) -> Result<Image> {
    if t.shape.len() != 4 || t.shape[0] != 1 || t.shape[1] != 3 {
        return Err(Error::shape(format!(
            "expected [1,3,H,W] tensor, got {:?}",
            t.shape
        )));
    }
    let (h, w) = (t.shape[2], t.shape[3]);
    let mut pixels = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (t.data[(c * h + y) * w + x] + 1.0) / 2.0;
                pixels[(y * w + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(w, h, pixels)
}
