//! Camera frames: decoding, nearest-neighbor resizing, standardization and
//! 4-frame stacking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FRAME_HEIGHT: usize = 90;
pub const FRAME_WIDTH: usize = 160;
/// Frames stacked per model input.
pub const STACK_DEPTH: usize = 4;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                op: "image",
                message: format!("{} bytes for {height}x{width}x3", data.len()),
            });
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        RgbImage { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let o = (r * self.width + c) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let o = (r * self.width + c) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn read(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => read_png(path),
            Some("ppm") => read_ppm(path),
            _ => Err(Error::Image(format!("{}: expected .png or .ppm", path.display()))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => self.write_png(path),
            Some("ppm") => self.write_ppm(path),
            _ => Err(Error::Image(format!("{}: expected .png or .ppm", path.display()))),
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let img_err = |e: png::EncodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut w = enc.write_header().map_err(img_err)?;
        w.write_image_data(&self.data).map_err(img_err)?;
        w.finish().map_err(img_err)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(|e| Error::io(path, e))?;
        w.write_all(&self.data).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn read_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img_err = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(img_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Image(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    RgbImage::new(h, w, data)
}

fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Image(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P6") {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut num = || token().and_then(|t| t.parse::<usize>().ok());
    let (w, h, max) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(bad("malformed header")),
    };
    if max != 255 {
        return Err(bad("only 8-bit PPM supported"));
    }
    let body = bytes.get(pos + 1..pos + 1 + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
    RgbImage::new(h, w, body.to_vec())
}

/// Nearest-neighbor resize: destination pixel (r, c) takes source
/// (floor(r·H_src/H_dst), floor(c·W_src/W_dst)).
pub fn resize_nearest(img: &RgbImage, height: usize, width: usize) -> Result<RgbImage> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("target size {height}x{width}")));
    }
    let mut data = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        let sr = r * img.height / height;
        for c in 0..width {
            let sc = c * img.width / width;
            data.extend_from_slice(&img.pixel(sr, sc));
        }
    }
    RgbImage::new(height, width, data)
}

/// Per-channel mean and standard deviation in raw 0–255 units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl PixelStats {
    /// Population statistics over the given images (after resizing to the model size).
    pub fn compute<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a RgbImage>,
    {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for p in img.data.chunks_exact(3) {
                for ch in 0..3 {
                    let v = p[ch] as f64;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += img.height * img.width;
        }
        if n == 0 {
            return Err(Error::InsufficientData("no pixels for statistics".into()));
        }
        let nf = n as f64;
        let mean = sum.map(|s| s / nf);
        let std = [0, 1, 2].map(|ch| (sq[ch] / nf - mean[ch] * mean[ch]).max(0.0).sqrt());
        Ok(PixelStats { mean, std })
    }

    fn validate(&self) -> Result<()> {
        for ch in 0..3 {
            if !(self.std[ch] > 0.0 && self.std[ch].is_finite()) || !self.mean[ch].is_finite() {
                return Err(Error::Degenerate(format!("channel {ch} has std {}", self.std[ch])));
            }
        }
        Ok(())
    }
}

/// Resizes to 90×160 and standardizes each channel. Output is `[3, 90, 160]`.
pub fn preprocess_frame(raw: &RgbImage, stats: &PixelStats) -> Result<Tensor> {
    preprocess_frame_to(raw, stats, FRAME_HEIGHT, FRAME_WIDTH)
}

pub fn preprocess_frame_to(raw: &RgbImage, stats: &PixelStats, height: usize, width: usize) -> Result<Tensor> {
    stats.validate()?;
    let img = if raw.height == height && raw.width == width {
        raw.clone()
    } else {
        resize_nearest(raw, height, width)?
    };
    let plane = height * width;
    let mut out = vec![0.0; 3 * plane];
    for (i, p) in img.data.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = (p[ch] as f64 - stats.mean[ch]) / stats.std[ch];
        }
    }
    Tensor::new(vec![3, height, width], out)
}

/// Four preprocessed frames concatenated along channels, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    tensor: Tensor,
}

impl FrameStack {
    pub fn new(frames: &[&Tensor]) -> Result<Self> {
        if frames.len() != STACK_DEPTH {
            return Err(Error::dim("frame_stack", "frames", STACK_DEPTH, frames.len()));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape {
                op: "frame_stack",
                message: format!("frame shape {shape:?}, expected [3, H, W]"),
            });
        }
        let mut data = Vec::with_capacity(STACK_DEPTH * frames[0].len());
        for f in frames {
            if f.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "frame_stack",
                    message: format!("mixed frame shapes {shape:?} and {:?}", f.shape()),
                });
            }
            data.extend_from_slice(f.data());
        }
        Ok(FrameStack {
            tensor: Tensor::new(vec![3 * STACK_DEPTH, shape[1], shape[2]], data)?,
        })
    }

    /// Stack ending at `index`; earlier frames clamp to the first.
    pub fn ending_at(frames: &[Tensor], index: usize) -> Result<Self> {
        if index >= frames.len() {
            return Err(Error::InvalidArgument(format!("frame {index} of {}", frames.len())));
        }
        let picks: Vec<&Tensor> = (0..STACK_DEPTH)
            .map(|k| &frames[(index + k + 1).saturating_sub(STACK_DEPTH)])
            .collect();
        Self::new(&picks)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct FrameRow {
    index: usize,
    timestamp_s: f64,
}

/// Frame file name for an index.
pub fn frame_file_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

/// Lists `(timestamp, path)` for a frame directory described by `frames.csv`.
/// Each index resolves to `NNNNNN.png` or `NNNNNN.ppm` next to the CSV
/// (or under a `frames/` subdirectory).
pub fn list_frames(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let csv_path = dir.join("frames.csv");
    let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| super::csv_err(&csv_path, e))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let row: FrameRow = row.map_err(|e| Error::Parse {
            path: csv_path.display().to_string(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let candidates = [
            dir.join("frames").join(frame_file_name(row.index, "png")),
            dir.join("frames").join(frame_file_name(row.index, "ppm")),
            dir.join(frame_file_name(row.index, "png")),
            dir.join(frame_file_name(row.index, "ppm")),
        ];
        let path = candidates.into_iter().find(|p| p.exists()).ok_or_else(|| Error::Parse {
            path: csv_path.display().to_string(),
            line: i + 2,
            message: format!("no image file for frame {}", row.index),
        })?;
        if out.last().is_some_and(|(t, _): &(f64, PathBuf)| *t >= row.timestamp_s) {
            return Err(Error::Parse {
                path: csv_path.display().to_string(),
                line: i + 2,
                message: "frame timestamps not strictly increasing".into(),
            });
        }
        out.push((row.timestamp_s, path));
    }
    Ok(out)
}

/// Writes frames as `frames/NNNNNN.png` plus `frames.csv`.
pub fn write_frames(dir: &Path, frames: &[(f64, RgbImage)]) -> Result<()> {
    let sub = dir.join("frames");
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let csv_path = dir.join("frames.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| super::csv_err(&csv_path, e))?;
    for (i, (t, img)) in frames.iter().enumerate() {
        img.write_png(&sub.join(frame_file_name(i, "png")))?;
        w.serialize(FrameRow { index: i, timestamp_s: *t })
            .map_err(|e| super::csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

/// Index of the latest frame with timestamp ≤ `t` (or the first frame).
pub fn frame_at(timestamps: &[f64], t: f64) -> usize {
    timestamps.partition_point(|&ft| ft <= t + 1e-9).saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_stats(g: f64) -> PixelStats {
        PixelStats {
            mean: [g; 3],
            std: [1.0; 3],
        }
    }

    #[test]
    fn gray_image_standardizes_to_zero() {
        let img = RgbImage::filled(30, 40, [128, 128, 128]);
        let t = preprocess_frame(&img, &gray_stats(128.0)).unwrap();
        assert_eq!(t.shape(), &[3, 90, 160]);
        assert!(t.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_std_is_degenerate() {
        let img = RgbImage::filled(2, 2, [1, 2, 3]);
        let stats = PixelStats::compute([&img]).unwrap();
        assert!(matches!(preprocess_frame(&img, &stats), Err(Error::Degenerate(_))));
    }

    #[test]
    fn checkerboard_upscales_to_blocks() {
        let (b, w) = ([0u8; 3], [255u8; 3]);
        let mut img = RgbImage::filled(2, 2, b);
        img.set_pixel(0, 1, w);
        img.set_pixel(1, 0, w);
        let big = resize_nearest(&img, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if (r / 2 + c / 2) % 2 == 1 { w } else { b };
                assert_eq!(big.pixel(r, c), want, "({r},{c})");
            }
        }
    }

    #[test]
    fn downsample_picks_even_pixels() {
        let data: Vec<u8> = (0..180 * 320 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let img = RgbImage::new(180, 320, data).unwrap();
        let small = resize_nearest(&img, 90, 160).unwrap();
        for r in 0..90 {
            for c in 0..160 {
                assert_eq!(small.pixel(r, c), img.pixel(2 * r, 2 * c));
            }
        }
    }

    #[test]
    fn stack_keeps_oldest_first() {
        let frames: Vec<Tensor> = (0..5).map(|k| Tensor::filled(&[3, 2, 2], k as f64)).collect();
        let s = FrameStack::ending_at(&frames, 4).unwrap();
        assert_eq!(s.tensor().shape(), &[12, 2, 2]);
        assert_eq!(s.tensor().data()[0], 1.0);
        assert_eq!(s.tensor().data()[47], 4.0);
        let early = FrameStack::ending_at(&frames, 1).unwrap();
        assert_eq!(early.tensor().data()[0], 0.0);
        assert_eq!(early.tensor().data()[12 * 2], 0.0);
        assert_eq!(early.tensor().data()[36], 1.0);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..5 * 7 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let img = RgbImage::new(5, 7, data).unwrap();
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("x.{ext}"));
            img.write(&p).unwrap();
            assert_eq!(RgbImage::read(&p).unwrap(), img);
        }
    }

    #[test]
    fn frame_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..3).map(|k| (k as f64 * 0.1, RgbImage::filled(4, 4, [k as u8; 3]))).collect();
        write_frames(dir.path(), &frames).unwrap();
        let listed = list_frames(dir.path()).unwrap();
        assert_eq!(listed.len(), 3);
        assert_eq!(RgbImage::read(&listed[2].1).unwrap(), frames[2].1);
        assert_eq!(frame_at(&[0.0, 0.1, 0.2], 0.15), 1);
        assert_eq!(frame_at(&[0.0, 0.1, 0.2], -1.0), 0);
    }
}
