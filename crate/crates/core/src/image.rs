//! RGB float images (row-major, interleaved channels) and PNG I/O.

use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Image { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::OutOfBounds(format!(
                "crop {height}x{width} at ({row},{col}) of {}x{} image",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(width, height, |r, c| self.pixel(row + r, col + c)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// `[1, 3, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                out[ch * hw + p] = self.data[p * 3 + ch];
            }
        }
        Tensor::new([1, 3, self.height, self.width], out)
    }

    /// Stack images into a `[n, 3, h, w]` batch.
    pub fn batch_to_tensor(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for im in images {
            if !im.same_shape(first) {
                return Err(Error::shape("images in a batch must share a size"));
            }
            data.extend_from_slice(im.to_tensor().data());
        }
        Ok(Tensor::new([images.len(), 3, h, w], data))
    }

    /// Image `index` of a `[n, 3, h, w]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Image> {
        if t.shape().len() != 4 || t.shape()[1] != 3 || index >= t.shape()[0] {
            return Err(Error::shape(format!("cannot read image {index} from tensor {:?}", t.shape())));
        }
        let (_, _, h, w) = t.dims4();
        let hw = h * w;
        let src = &t.data()[index * 3 * hw..(index + 1) * 3 * hw];
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                data[p * 3 + ch] = src[ch * hw + p];
            }
        }
        Image::new(w, h, data)
    }

    /// 16-bit RGB PNG bytes (values clamped to `[0, 1]`).
    pub fn encode_png16(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut writer = enc.write_header().expect("in-memory png header");
            let mut raw = Vec::with_capacity(self.data.len() * 2);
            for &v in &self.data {
                raw.extend_from_slice(&quantize16(v).to_be_bytes());
            }
            writer.write_image_data(&raw).expect("in-memory png data");
        }
        out
    }

    /// 8-bit RGB PNG bytes, for previews.
    pub fn encode_png8(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("in-memory png header");
            let raw: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            writer.write_image_data(&raw).expect("in-memory png data");
        }
        out
    }

    /// Decode an 8- or 16-bit RGB or RGBA PNG. Alpha is dropped.
    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let bad = |e: png::DecodingError| Error::format("png", e.to_string());
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(bad)?;
        let (w, h) = {
            let info = reader.info();
            (info.width as usize, info.height as usize)
        };
        if w == 0 || h == 0 || w.saturating_mul(h) > 1 << 26 {
            return Err(Error::format("png", format!("unsupported size {w}x{h}")));
        }
        let mut buf = vec![0; reader.output_buffer_size()];
        let frame = reader.next_frame(&mut buf).map_err(bad)?;
        let channels = match frame.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(Error::format("png", format!("unsupported color type {other:?}"))),
        };
        let wide = frame.bit_depth == png::BitDepth::Sixteen;
        let bytes_per_sample = if wide { 2 } else { 1 };
        let data = &buf[..frame.buffer_size()];
        let row_bytes = frame.line_size;
        let mut out = Vec::with_capacity(w * h * 3);
        for r in 0..h {
            let row = &data[r * row_bytes..(r + 1) * row_bytes];
            for c in 0..w {
                for ch in 0..3 {
                    let src_ch = if channels < 3 { 0 } else { ch };
                    let off = (c * channels + src_ch) * bytes_per_sample;
                    let v = if wide {
                        u16::from_be_bytes([row[off], row[off + 1]]) as f64 / 65535.0
                    } else {
                        row[off] as f64 / 255.0
                    };
                    out.push(v);
                }
            }
        }
        Image::new(w, h, out)
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png16()).map_err(|e| Error::io(path, e))
    }

    pub fn save_png8(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png8()).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_png(&bytes)
    }
}

pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}
