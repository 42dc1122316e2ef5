//! Pre-filter backends: a binary offensive-text classifier and a binary
//! NSFW-image classifier. The named production filter models are out of
//! scope; the built-in mocks are a keyword lexicon and a pixel-statistic
//! threshold.

use serde::{Deserialize, Serialize};

use crate::data::ImageInput;
use crate::error::Result;

/// Binary text filter: returns 1 for offensive/controversial text.
pub trait TextFilter: Send + Sync {
    fn name(&self) -> &'static str;
    fn version(&self) -> String;
    fn classify(&self, text: &str) -> Result<u8>;
}

/// Binary image filter: returns 1 for NSFW imagery.
pub trait ImageFilter: Send + Sync {
    fn name(&self) -> &'static str;
    fn version(&self) -> String;
    fn classify(&self, image: &ImageInput) -> Result<u8>;
}

/// `filters` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiltersConfig {
    pub text_filter: String,
    pub image_filter: String,
    /// Lexicon for the mock text filter (case-insensitive whole-word hits).
    pub lexicon: Vec<String>,
    /// Flagged-pixel fraction above which the mock image filter fires.
    pub nsfw_threshold: f64,
}

impl Default for FiltersConfig {
    fn default() -> Self {
        FiltersConfig {
            text_filter: "lexicon".into(),
            image_filter: "pixel-stat".into(),
            lexicon: Vec::new(),
            nsfw_threshold: 0.5,
        }
    }
}

/// Flags text containing any lexicon word (case-insensitive, whole word).
#[derive(Debug, Clone)]
pub struct LexiconTextFilter {
    lexicon: Vec<String>,
}

impl LexiconTextFilter {
    pub fn new(lexicon: &[String]) -> Self {
        LexiconTextFilter {
            lexicon: lexicon.iter().map(|w| w.to_lowercase()).collect(),
        }
    }
}

impl TextFilter for LexiconTextFilter {
    fn name(&self) -> &'static str {
        "lexicon"
    }

    fn version(&self) -> String {
        format!("mock-text-filter/lexicon-{}", self.lexicon.len())
    }

    fn classify(&self, text: &str) -> Result<u8> {
        let hit = text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .any(|w| self.lexicon.iter().any(|l| *l == w));
        Ok(u8::from(hit))
    }
}

/// Flags images whose fraction of warm, skin-tone-like pixels exceeds a
/// threshold. A pixel counts when red dominates, the channels are warm,
/// and saturation is moderate.
#[derive(Debug, Clone)]
pub struct PixelStatImageFilter {
    threshold: f64,
}

impl PixelStatImageFilter {
    pub fn new(threshold: f64) -> Self {
        PixelStatImageFilter { threshold }
    }

    fn flagged(r: f64, g: f64, b: f64) -> bool {
        r > 0.5 && g > 0.2 && b > 0.1 && r > g && g > b && (r - b) > 0.15
    }
}

impl ImageFilter for PixelStatImageFilter {
    fn name(&self) -> &'static str {
        "pixel-stat"
    }

    fn version(&self) -> String {
        format!("mock-image-filter/threshold-{}", self.threshold)
    }

    fn classify(&self, image: &ImageInput) -> Result<u8> {
        let (h, w, _) = image.pixels.dim();
        let mut flagged = 0usize;
        for y in 0..h {
            for x in 0..w {
                if Self::flagged(
                    image.pixels[[y, x, 0]],
                    image.pixels[[y, x, 1]],
                    image.pixels[[y, x, 2]],
                ) {
                    flagged += 1;
                }
            }
        }
        let fraction = flagged as f64 / (h * w) as f64;
        Ok(u8::from(fraction > self.threshold))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn empty_lexicon_never_fires() {
        let f = LexiconTextFilter::new(&[]);
        assert_eq!(f.classify("a perfectly ordinary caption").unwrap(), 0);
    }

    #[test]
    fn lexicon_hit_fires() {
        let f = LexiconTextFilter::new(&["slur1".to_string()]);
        assert_eq!(f.classify("text containing slur1 today").unwrap(), 1);
        assert_eq!(f.classify("text with SLUR1, punctuated").unwrap(), 1);
        assert_eq!(f.classify("text without the word").unwrap(), 0);
    }

    #[test]
    fn all_black_image_not_flagged() {
        let f = PixelStatImageFilter::new(0.5);
        let img = ImageInput::new(Array3::zeros((4, 4, 3))).unwrap();
        assert_eq!(f.classify(&img).unwrap(), 0);
    }

    #[test]
    fn warm_image_flagged() {
        let f = PixelStatImageFilter::new(0.5);
        let mut px = Array3::<f64>::zeros((4, 4, 3));
        for y in 0..4 {
            for x in 0..4 {
                px[[y, x, 0]] = 0.85;
                px[[y, x, 1]] = 0.6;
                px[[y, x, 2]] = 0.45;
            }
        }
        let img = ImageInput::new(px).unwrap();
        assert_eq!(f.classify(&img).unwrap(), 1);
    }
}
