//! Generation backends for counterpart construction: caption inpainting,
//! positive captioning, and text-to-image. The real large models are not
//! bundled; the built-in mocks are deterministic under a fixed seed so
//! every generated pair can be regenerated bit-identically.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::ImageInput;
use crate::error::{Error, Result};
use crate::seeding::content_hash;

/// Removes the masked region from an image (caption removal).
pub trait Inpainter: Send + Sync {
    fn name(&self) -> &'static str;
    fn version(&self) -> String;
    /// Fills pixels where `mask == 1`; pixels outside the mask are
    /// returned unchanged. An all-ones mask is an error (nothing left to
    /// inpaint from).
    fn inpaint(&self, image: &ImageInput, mask: &Array2<u8>) -> Result<ImageInput>;
}

/// Produces a caption for an image under a prompt.
pub trait Captioner: Send + Sync {
    fn name(&self) -> &'static str;
    fn version(&self) -> String;
    fn caption(&self, image: &ImageInput, prompt: &str) -> Result<String>;
}

/// Produces an image from a caption.
pub trait TextToImage: Send + Sync {
    fn name(&self) -> &'static str;
    fn version(&self) -> String;
    fn generate(&self, caption: &str) -> Result<ImageInput>;
}

/// `cmgen` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmgenConfig {
    pub inpainter: String,
    pub captioner: String,
    pub text_to_image: String,
    /// Prompt handed to the captioner when generating the positive caption.
    pub positive_prompt: String,
    /// Hateful reference corpus manifest; an index is built from it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_manifest: Option<String>,
    /// Persisted reference index directory (alternative to the manifest).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index_dir: Option<String>,
    /// Output side length of the mock text-to-image backend.
    pub t2i_size: usize,
    pub seed: u64,
}

impl Default for CmgenConfig {
    fn default() -> Self {
        CmgenConfig {
            inpainter: "mock".into(),
            captioner: "mock".into(),
            text_to_image: "mock".into(),
            positive_prompt:
                "Please generate a positive and descriptive caption for the provided image"
                    .into(),
            reference_manifest: None,
            index_dir: None,
            t2i_size: 32,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Mock inpainter: border-ring mean fill
// ---------------------------------------------------------------------------

/// Fills the masked region with the per-channel mean of its 1-pixel
/// border ring (unmasked pixels 8-adjacent to the masked set).
#[derive(Debug, Clone, Default)]
pub struct RingMeanInpainter;

impl Inpainter for RingMeanInpainter {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn version(&self) -> String {
        "mock-inpainter/ring-mean".into()
    }

    fn inpaint(&self, image: &ImageInput, mask: &Array2<u8>) -> Result<ImageInput> {
        let (h, w, _) = image.pixels.dim();
        if mask.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} does not match image {h}x{w}",
                mask.dim()
            )));
        }
        let masked: usize = mask.iter().filter(|&&m| m > 0).count();
        if masked == h * w {
            return Err(Error::InvalidInput(
                "all-ones caption mask: no unmasked pixels to inpaint from".into(),
            ));
        }
        if masked == 0 {
            return Ok(image.clone());
        }

        // Border ring: unmasked pixels 8-adjacent to at least one masked pixel.
        let mut ring_sum = [0.0f64; 3];
        let mut ring_count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] > 0 {
                    continue;
                }
                let mut adjacent = false;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny >= 0
                            && nx >= 0
                            && (ny as usize) < h
                            && (nx as usize) < w
                            && mask[[ny as usize, nx as usize]] > 0
                        {
                            adjacent = true;
                            break 'scan;
                        }
                    }
                }
                if adjacent {
                    for c in 0..3 {
                        ring_sum[c] += image.pixels[[y, x, c]];
                    }
                    ring_count += 1;
                }
            }
        }
        debug_assert!(ring_count > 0, "masked set nonempty and not all-ones");
        let fill = [
            ring_sum[0] / ring_count as f64,
            ring_sum[1] / ring_count as f64,
            ring_sum[2] / ring_count as f64,
        ];

        let mut out = image.pixels.clone();
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] > 0 {
                    for c in 0..3 {
                        out[[y, x, c]] = fill[c];
                    }
                }
            }
        }
        ImageInput::new(out)
    }
}

// ---------------------------------------------------------------------------
// Mock captioner: deterministic template keyed by image hash
// ---------------------------------------------------------------------------

const CAPTION_SUBJECTS: [&str; 8] = [
    "meadow", "harbor", "orchard", "skyline", "garden", "coastline", "library", "market",
];
const CAPTION_MOODS: [&str; 8] = [
    "sunlit", "peaceful", "vibrant", "gentle", "welcoming", "serene", "lively", "bright",
];

#[derive(Debug, Clone, Default)]
pub struct TemplateCaptioner;

impl Captioner for TemplateCaptioner {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn version(&self) -> String {
        "mock-captioner/template".into()
    }

    fn caption(&self, image: &ImageInput, prompt: &str) -> Result<String> {
        let h = content_hash(&[&image.canonical_bytes(), prompt.as_bytes()]);
        let mood = CAPTION_MOODS[(h >> 8) as usize % CAPTION_MOODS.len()];
        let subject = CAPTION_SUBJECTS[(h >> 16) as usize % CAPTION_SUBJECTS.len()];
        // The hex tag keeps captions injective per source image.
        Ok(format!("a {mood} {subject} scene {:016x}", h))
    }
}

// ---------------------------------------------------------------------------
// Mock text-to-image: procedural pattern seeded by the caption hash
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProceduralTextToImage {
    pub size: usize,
}

impl Default for ProceduralTextToImage {
    fn default() -> Self {
        ProceduralTextToImage { size: 32 }
    }
}

impl TextToImage for ProceduralTextToImage {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn version(&self) -> String {
        format!("mock-text-to-image/procedural-{}", self.size)
    }

    fn generate(&self, caption: &str) -> Result<ImageInput> {
        let h = content_hash(&[caption.as_bytes()]);
        let mut rng = ChaCha12Rng::seed_from_u64(h);
        let n = self.size;
        let (fx, fy, phase) = (
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let base = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        let mut px = Array3::<f64>::zeros((n, n, 3));
        for y in 0..n {
            for x in 0..n {
                let u = x as f64 / n as f64;
                let v = y as f64 / n as f64;
                let wave =
                    0.5 + 0.5 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
                for c in 0..3 {
                    let val = (base[c] * 0.6 + wave * 0.4).clamp(0.0, 1.0);
                    // Quantize to 8-bit so a PNG round trip is lossless.
                    px[[y, x, c]] = (val * 255.0).round() / 255.0;
                }
            }
        }
        ImageInput::new(px)
    }
}
