//! Core domain records: meme images, captions, masks, and the corpus
//! manifest format (JSONL rows of `id,image_path,mask_path,text,label`).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image pixels in `[0,1]`, shape `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub pixels: Array3<f64>,
}

impl ImageInput {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("image must be at least 1x1".into()));
        }
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(
                "pixel values must be finite and within [0,1]".into(),
            ));
        }
        Ok(ImageInput { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Canonical byte encoding (shape header + f64 LE pixels); the mock
    /// encoder and provenance digests hash this.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let (h, w, c) = self.pixels.dim();
        let mut out = Vec::with_capacity(12 + h * w * c * 8);
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in self.pixels.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Tokenized caption. Token ids come from the encoder backend's tokenizer;
/// `raw_text` keeps the original string for rendering and manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInput {
    pub tokens: Vec<u32>,
    pub raw_text: String,
}

impl TextInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.tokens.len() * 4);
        out.extend_from_slice(&(self.tokens.len() as u32).to_le_bytes());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }
}

/// One meme: pixels, overlaid caption, caption-pixel mask, optional label.
#[derive(Debug, Clone)]
pub struct MemeRecord {
    pub id: String,
    pub image: ImageInput,
    pub text: TextInput,
    /// 1 marks caption pixels; shape equals the image's `[H, W]`.
    pub caption_mask: Array2<u8>,
    pub label: Option<u8>,
}

impl MemeRecord {
    pub fn validate(&self) -> Result<()> {
        let (h, w, _) = self.image.pixels.dim();
        if self.caption_mask.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "meme {}: caption mask {:?} does not match image {}x{}",
                self.id,
                self.caption_mask.dim(),
                h,
                w
            )));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::InvalidInput(format!(
                    "meme {}: label must be 0 or 1, got {l}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// One row of the corpus manifest; paths are resolved relative to the
/// manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct CorpusRow {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// Corpus manifest rows plus the directory they resolve against.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub rows: Vec<CorpusRow>,
    pub base_dir: PathBuf,
}

impl Corpus {
    pub fn load(manifest: &Path) -> Result<Self> {
        let file = File::open(manifest).map_err(|e| {
            Error::MissingArtifact(format!("corpus manifest {}: {e}", manifest.display()))
        })?;
        let base_dir = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: CorpusRow = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidInput(format!("{} line {}: {e}", manifest.display(), i + 1))
            })?;
            rows.push(row);
        }
        Ok(Corpus { rows, base_dir })
    }

    pub fn save(rows: &[CorpusRow], manifest: &Path) -> Result<()> {
        if let Some(dir) = manifest.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut out, row)?;
            out.push(b'\n');
        }
        let mut f = File::create(manifest)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads pixels and mask for one row. Tokenization is the encoder
    /// gateway's job, so `text` is carried through untokenized here.
    pub fn load_pixels(&self, row: &CorpusRow) -> Result<(ImageInput, Array2<u8>)> {
        let image = load_image(&self.resolve(&row.image_path))?;
        let mask = load_mask(&self.resolve(&row.mask_path))?;
        let (h, w, _) = image.pixels.dim();
        if mask.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "meme {}: mask {:?} does not match image {}x{}",
                row.id,
                mask.dim(),
                h,
                w
            )));
        }
        Ok((image, mask))
    }
}

pub fn load_image(path: &Path) -> Result<ImageInput> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[y as usize, x as usize, c]] = f64::from(p[c]) / 255.0;
        }
    }
    ImageInput::new(pixels)
}

pub fn save_image(image: &ImageInput, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (h, w, _) = image.pixels.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image.pixels[[y, x, 0]] * 255.0).round() as u8,
                (image.pixels[[y, x, 1]] * 255.0).round() as u8,
                (image.pixels[[y, x, 2]] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Loads a grayscale mask image; any nonzero pixel counts as masked.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut mask = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        mask[[y as usize, x as usize]] = u8::from(p[0] > 0);
    }
    Ok(mask)
}

pub fn save_mask(mask: &Array2<u8>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask[[y, x]] > 0 { 255 } else { 0 }]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}
