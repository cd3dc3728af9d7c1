//! 8-bit RGB images: binary PPM (P6) always, PNG with the `png` feature.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, ImageError, Result};
use crate::tensor::{Scalar, Tensor};

/// Interleaved RGB, row-major, 8 bits per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFile {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub source: Option<PathBuf>,
}

impl ImageFile {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height * 3 {
            return Err(ImageError::Truncated {
                expected: width * height * 3,
                found: pixels.len(),
            });
        }
        Ok(ImageFile {
            width,
            height,
            pixels,
            source: None,
        })
    }

    /// `(H, W, 3)` tensor with values `v / 255`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width, 3],
            self.pixels
                .iter()
                .map(|&p| T::from_f64(p as f64 / 255.0))
                .collect(),
        )
        .expect("image shape")
    }

    /// Quantizes an `(H, W, 3)` tensor: clamp to `[0, 1]`, scale by 255,
    /// round half away from zero.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w, 3] => (h, w),
            _ => {
                return Err(crate::error::TensorError::Rank {
                    op: "ImageFile::from_tensor",
                    expected: "(H, W, 3)",
                    shape: t.shape().to_vec(),
                }
                .into())
            }
        };
        let pixels = t
            .data()
            .iter()
            .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(ImageFile::new(w, h, pixels)?)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let p = (y * self.width + x) * 3;
        [self.pixels[p], self.pixels[p + 1], self.pixels[p + 2]]
    }
}

fn ppm_token<'a>(data: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Header("unexpected end of header".into()));
    }
    Ok(&data[start..*pos])
}

fn ppm_number(data: &[u8], pos: &mut usize, what: &str) -> Result<usize, ImageError> {
    let tok = ppm_token(data, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            ImageError::Header(format!("invalid {what} {:?}", String::from_utf8_lossy(tok)))
        })
}

pub fn decode_ppm(data: &[u8]) -> Result<ImageFile, ImageError> {
    let mut pos = 0;
    let magic = ppm_token(data, &mut pos)?;
    if magic != b"P6" {
        return Err(ImageError::Unsupported(format!(
            "magic {:?}, only binary P6 is supported",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = ppm_number(data, &mut pos, "width")?;
    let height = ppm_number(data, &mut pos, "height")?;
    let maxval = ppm_number(data, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ImageError::Unsupported(format!(
            "maxval {maxval}, only 255 is supported"
        )));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Header(format!("empty image {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= data.len() {
        return Err(ImageError::Truncated {
            expected: width * height * 3,
            found: 0,
        });
    }
    pos += 1;
    let raster = &data[pos..];
    let expected = width * height * 3;
    if raster.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    ImageFile::new(width, height, raster[..expected].to_vec())
}

pub fn encode_ppm(image: &ImageFile) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

#[cfg(feature = "png")]
fn decode_png(data: &[u8]) -> Result<ImageFile, ImageError> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(data));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let pixels: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => return Err(ImageError::Unsupported(format!("png color type {other:?}"))),
    };
    ImageFile::new(w, h, pixels)
}

#[cfg(feature = "png")]
fn encode_png(image: &ImageFile, out: impl Write) -> Result<(), ImageError> {
    let mut enc = png::Encoder::new(out, image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&image.pixels)?;
    writer.finish()?;
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

/// True when [`load_image`] understands the file extension.
pub fn is_supported(path: &Path) -> bool {
    match extension(path).as_str() {
        "ppm" => true,
        "png" => cfg!(feature = "png"),
        _ => false,
    }
}

fn path_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Path {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_image(path: &Path) -> Result<ImageFile> {
    let data = fs::read(path).map_err(path_err(path))?;
    let mut img = match extension(path).as_str() {
        "ppm" => decode_ppm(&data)?,
        #[cfg(feature = "png")]
        "png" => decode_png(&data)?,
        _ => return Err(ImageError::Extension(path.to_path_buf()).into()),
    };
    img.source = Some(path.to_path_buf());
    Ok(img)
}

pub fn save_image(path: &Path, image: &ImageFile) -> Result<()> {
    let file = fs::File::create(path).map_err(path_err(path))?;
    let mut w = BufWriter::new(file);
    match extension(path).as_str() {
        "ppm" => w.write_all(&encode_ppm(image)).map_err(path_err(path))?,
        #[cfg(feature = "png")]
        "png" => encode_png(image, &mut w)?,
        _ => return Err(ImageError::Extension(path.to_path_buf()).into()),
    }
    w.flush().map_err(path_err(path))?;
    Ok(())
}
