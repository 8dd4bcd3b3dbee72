//! Minimal RGB raster with binary PPM/PGM I/O (no codec dependencies).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies `src` into this image with its top-left corner at (x, y).
    pub fn blit(&mut self, src: &RgbImage, x: usize, y: usize) {
        for sy in 0..src.height.min(self.height.saturating_sub(y)) {
            let srow = sy * src.width * 3;
            let drow = ((y + sy) * self.width + x) * 3;
            let n = src.width.min(self.width - x) * 3;
            self.data[drow..drow + n].copy_from_slice(&src.data[srow..srow + n]);
        }
    }

    /// Bilinear sample with clamp-to-edge, coordinates in pixel units where
    /// (0.5, 0.5) is the center of the top-left pixel.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let mut out = [0.0; 3];
        let (p00, p10, p01, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
            let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
            out[c] = top * (1.0 - ty) + bot * ty;
        }
        out
    }

    /// Bilinear resize to exactly (new_w, new_h).
    pub fn resize(&self, new_w: usize, new_h: usize) -> RgbImage {
        if new_w == self.width && new_h == self.height {
            return self.clone();
        }
        let mut out = RgbImage::new(new_w, new_h);
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        for y in 0..new_h {
            for x in 0..new_w {
                let p = self.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
                out.set(x, y, [round_u8(p[0]), round_u8(p[1]), round_u8(p[2])]);
            }
        }
        out
    }

    /// [3, H, W] tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = self.get(x, y);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = p[c] as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("raster tensor shape")
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<RgbImage> {
        let mut r = BufReader::new(File::open(path)?);
        let (magic, width, height, maxval) = read_pnm_header(&mut r, path)?;
        if magic != "P6" {
            return Err(Error::Format(format!("{}: expected P6, got {magic}", path.display())));
        }
        if maxval != 255 {
            return Err(Error::Format(format!("{}: only maxval 255 supported", path.display())));
        }
        let mut data = vec![0u8; width * height * 3];
        r.read_exact(&mut data)?;
        Ok(RgbImage { width, height, data })
    }

    /// Writes channel 0 as a binary PGM (used for grayscale sketches).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let gray: Vec<u8> = self.data.chunks_exact(3).map(|p| p[0]).collect();
        w.write_all(&gray)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a PGM, replicating gray into all three channels.
    pub fn read_pgm(path: &Path) -> Result<RgbImage> {
        let mut r = BufReader::new(File::open(path)?);
        let (magic, width, height, maxval) = read_pnm_header(&mut r, path)?;
        if magic != "P5" {
            return Err(Error::Format(format!("{}: expected P5, got {magic}", path.display())));
        }
        if maxval != 255 {
            return Err(Error::Format(format!("{}: only maxval 255 supported", path.display())));
        }
        let mut gray = vec![0u8; width * height];
        r.read_exact(&mut gray)?;
        let mut data = Vec::with_capacity(gray.len() * 3);
        for g in gray {
            data.extend_from_slice(&[g, g, g]);
        }
        Ok(RgbImage { width, height, data })
    }
}

pub fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn read_pnm_header<R: Read>(r: &mut R, path: &Path) -> Result<(String, usize, usize, usize)> {
    // Magic, width, height, maxval separated by whitespace; '#' comments
    // allowed between tokens. A single whitespace byte ends the header.
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_comment = false;
    let mut byte = [0u8; 1];
    while tokens.len() < 4 {
        r.read_exact(&mut byte).map_err(|_| {
            Error::Format(format!("{}: truncated header", path.display()))
        })?;
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
        } else if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c);
        }
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{}: bad header token '{s}'", path.display())))
    };
    Ok((tokens[0].clone(), parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 7 % 256) as u8;
        }
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        assert_eq!(RgbImage::read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_replicates_gray() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let g = (x * 60 + y * 3) as u8;
                img.set(x, y, [g, g, g]);
            }
        }
        let path = dir.path().join("t.pgm");
        img.write_pgm(&path).unwrap();
        assert_eq!(RgbImage::read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn resize_identity_is_exact() {
        let mut img = RgbImage::new(8, 6);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i % 251) as u8;
        }
        assert_eq!(img.resize(8, 6), img);
    }

    #[test]
    fn blit_places_content() {
        let mut canvas = RgbImage::new(4, 4);
        let patch = RgbImage::filled(2, 2, [9, 8, 7]);
        canvas.blit(&patch, 2, 1);
        assert_eq!(canvas.get(2, 1), [9, 8, 7]);
        assert_eq!(canvas.get(3, 2), [9, 8, 7]);
        assert_eq!(canvas.get(0, 0), [0, 0, 0]);
    }

    #[test]
    fn tensor_conversion_normalizes() {
        let img = RgbImage::filled(2, 2, [255, 0, 128]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[4], 0.0);
        assert!((t.data()[8] - 128.0 / 255.0).abs() < 1e-12);
    }
}
