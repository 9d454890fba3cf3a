use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, 3 interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "image buffer of {} bytes does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Single-channel buffer replicated into RGB.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "gray buffer of {} bytes does not match {width}x{height}",
                gray.len()
            )));
        }
        Self::from_raw(width, height, gray.iter().flat_map(|&g| [g, g, g]).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w x h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// Nearest-neighbour resampling to `w x h`.
    pub fn resize_nearest(&self, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument("resize to an empty image".into()));
        }
        let mut out = Self::new(w, h);
        for y in 0..h {
            let sy = y * self.height / h;
            for x in 0..w {
                let sx = x * self.width / w;
                out.set(x, y, self.get(sx, sy));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Png,
    Ppm,
}

fn format_from_extension(path: &Path) -> Option<Format> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(Format::Png),
        "ppm" | "pnm" | "pgm" => Some(Format::Ppm),
        _ => None,
    }
}

/// Loads a PNG (8-bit gray, gray+alpha, RGB or RGBA) or binary PNM (P5/P6)
/// file. The format is detected from the file contents.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image8> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(path, &bytes)
    } else {
        Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
        })
    }
}

/// Writes PNG or binary PPM depending on the file extension.
pub fn save_image(image: &Image8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format_from_extension(path) {
        Some(Format::Png) => encode_png(image).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })?,
        Some(Format::Ppm) => encode_ppm(image),
        None => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
            })
        }
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Image8> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| corrupt(path, e.to_string()))?;
    let info = reader.info();
    if info.bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: 16,
        });
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| corrupt(path, e.to_string()))?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: frame.bit_depth as u8,
        });
    }
    let (w, h) = (frame.width as usize, frame.height as usize);
    let buf = &buf[..frame.buffer_size()];
    let data: Vec<u8> = match frame.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => {
            warn!("{}: alpha channel dropped", path.display());
            buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
        }
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => {
            warn!("{}: alpha channel dropped", path.display());
            buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
        }
        png::ColorType::Indexed => return Err(corrupt(path, "palette was not expanded")),
    };
    Image8::from_raw(w, h, data).map_err(|e| corrupt(path, e.to_string()))
}

fn encode_png(image: &Image8) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer
            .write_image_data(&image.data)
            .map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn encode_ppm(image: &Image8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Image8> {
    let gray = bytes.starts_with(b"P5");
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(corrupt(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(path, "malformed header"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt(path, "malformed header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: 16,
        });
    }
    let channels = if gray { 1 } else { 3 };
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| corrupt(path, "truncated raster"))?;
    let scale = |v: u8| -> u8 {
        if maxval == 255 {
            v
        } else {
            ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8
        }
    };
    let data: Vec<u8> = if gray {
        raster.iter().flat_map(|&g| [scale(g); 3]).collect()
    } else {
        raster.iter().map(|&v| scale(v)).collect()
    };
    Image8::from_raw(w, h, data).map_err(|e| corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Image8 {
        let mut img = Image8::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [(x * 7) as u8, (y * 13) as u8, ((x + y) * 3) as u8]);
            }
        }
        img
    }

    #[test]
    fn ppm_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(17, 9);
        let p = dir.path().join("a.ppm");
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn png_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(23, 11);
        let p = dir.path().join("a.png");
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn one_pixel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image8::filled(1, 1, [9, 200, 31]);
        for name in ["p.png", "p.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 24]).unwrap();
        }
        fs::write(&p, out).unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::UnsupportedBitDepth { depth: 16, .. }), "{err}");
        assert!(err.to_string().contains("unsupported bit depth"));
    }

    #[test]
    fn gray_and_alpha_pngs_expand_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(png::ColorType::GrayscaleAlpha);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[10, 255, 200, 0]).unwrap();
        }
        fs::write(&p, out).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.get(0, 0), [10, 10, 10]);
        assert_eq!(img.get(1, 0), [200, 200, 200]);
    }

    #[test]
    fn pgm_with_comment_loads_as_gray() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 250]);
        fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.get(1, 0), [250, 250, 250]);
    }

    #[test]
    fn corrupt_and_unknown_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(load_image(&p).unwrap_err().to_string().contains("bad.png"));
        let q = dir.path().join("x.jpg");
        fs::write(&q, b"\xff\xd8\xff").unwrap();
        assert!(matches!(load_image(&q), Err(Error::UnsupportedFormat { .. })));
        assert!(matches!(
            save_image(&Image8::new(1, 1), dir.path().join("x.bmp")),
            Err(Error::UnsupportedFormat { .. })
        ));
        let missing = dir.path().join("missing.png");
        assert!(load_image(&missing).unwrap_err().to_string().contains("missing.png"));
    }

    #[test]
    fn truncated_ppm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        fs::write(&p, b"P6\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
    }

    #[test]
    fn crop_extracts_window() {
        let img = gradient_image(8, 8);
        let c = img.crop(2, 3, 4, 2).unwrap();
        assert_eq!(c.get(0, 0), img.get(2, 3));
        assert_eq!(c.get(3, 1), img.get(5, 4));
        assert!(img.crop(6, 0, 4, 1).is_err());
    }
}
