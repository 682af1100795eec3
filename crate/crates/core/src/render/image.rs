use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::camera::Camera;
use crate::diff::Mat;
use crate::error::{Error, Result};

/// Row-major RGB image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim("image", format!("{}x{}x3 values", height, width), data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| color).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, c: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// One row per pixel.
    pub fn to_mat(&self) -> Mat {
        Mat::from_shape_vec((self.width * self.height, 3), self.data.clone()).expect("sized")
    }

    pub fn from_mat(width: usize, height: usize, m: &Mat) -> Result<Self> {
        if m.dim() != (width * height, 3) {
            return Err(Error::dim("image from matrix", format!("{}x3", width * height), format!("{:?}", m.dim())));
        }
        Self::new(width, height, m.iter().copied().collect())
    }

    /// Rows of [`Image::to_mat`] for the given pixel indices.
    pub fn gather(&self, pixels: &[usize]) -> Mat {
        Mat::from_shape_fn((pixels.len(), 3), |(r, c)| self.data[pixels[r] * 3 + c])
    }

    pub fn write_ppm<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::Format(format!("PPM header: {e}")))? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("expected binary PPM (P6), got {}", fields[0])));
        }
        let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM {what} {s:?}")));
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if fields.len() > 4 || !(1..=255).contains(&maxval) || width == 0 || height == 0 {
            return Err(Error::Format("unsupported PPM header".into()));
        }
        let n = width.checked_mul(height).and_then(|p| p.checked_mul(3)).filter(|&n| n <= 1 << 28);
        let n = n.ok_or_else(|| Error::Format("PPM dimensions too large".into()))?;
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes).map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
        let data = bytes.iter().map(|&b| b as f64 / maxval as f64).collect();
        Self::new(width, height, data)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_ppm(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ppm(f)
    }

    /// Values rounded to the 8-bit grid a PPM stores.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Self { width: self.width, height: self.height, data }
    }
}

/// An image with the camera it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub camera: Camera,
}

impl View {
    pub fn new(image: Image, camera: Camera) -> Result<Self> {
        camera.validate()?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::dim(
                "view",
                format!("{}x{} image", camera.width, camera.height),
                format!("{}x{}", image.width, image.height),
            ));
        }
        Ok(Self { image, camera })
    }
}
