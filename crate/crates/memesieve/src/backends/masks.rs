//! Object-mask proposer backend. The production pipeline would call an
//! external segmenter here; the built-in mock emits connected components
//! of a luminance threshold, which is enough to exercise mask-aligned
//! attention scoring end to end.

use ndarray::Array2;

use crate::data::ImageInput;
use crate::error::Result;

pub trait MaskProposer: Send + Sync {
    fn name(&self) -> &'static str;
    fn version(&self) -> String;
    /// Proposes binary object masks, each the same `[H, W]` shape as the
    /// image. Order is deterministic (scan order of first pixel).
    fn propose(&self, image: &ImageInput) -> Result<Vec<Array2<u8>>>;
}

/// Connected components (8-connectivity) of `luminance > threshold`.
#[derive(Debug, Clone)]
pub struct LuminanceComponents {
    pub threshold: f64,
    /// Components smaller than this many pixels are dropped.
    pub min_pixels: usize,
}

impl Default for LuminanceComponents {
    fn default() -> Self {
        LuminanceComponents {
            threshold: 0.5,
            min_pixels: 4,
        }
    }
}

impl MaskProposer for LuminanceComponents {
    fn name(&self) -> &'static str {
        "luminance-cc"
    }

    fn version(&self) -> String {
        format!(
            "mock-mask-proposer/luminance-{}-min-{}",
            self.threshold, self.min_pixels
        )
    }

    fn propose(&self, image: &ImageInput) -> Result<Vec<Array2<u8>>> {
        let (h, w, _) = image.pixels.dim();
        let mut bright = Array2::<bool>::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                let lum = (image.pixels[[y, x, 0]]
                    + image.pixels[[y, x, 1]]
                    + image.pixels[[y, x, 2]])
                    / 3.0;
                bright[[y, x]] = lum > self.threshold;
            }
        }

        let mut visited = Array2::<bool>::from_elem((h, w), false);
        let mut masks = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                if !bright[[sy, sx]] || visited[[sy, sx]] {
                    continue;
                }
                let mut mask = Array2::<u8>::zeros((h, w));
                let mut stack = vec![(sy, sx)];
                visited[[sy, sx]] = true;
                let mut size = 0usize;
                while let Some((y, x)) = stack.pop() {
                    mask[[y, x]] = 1;
                    size += 1;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let ny = y as i64 + dy;
                            let nx = x as i64 + dx;
                            if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if bright[[ny, nx]] && !visited[[ny, nx]] {
                                visited[[ny, nx]] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
                if size >= self.min_pixels {
                    masks.push(mask);
                }
            }
        }
        Ok(masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn two_separated_blobs_become_two_masks() {
        let mut px = Array3::<f64>::zeros((8, 8, 3));
        for y in 0..3 {
            for x in 0..3 {
                for c in 0..3 {
                    px[[y, x, c]] = 0.9; // blob A, top-left
                    px[[y + 5, x + 5, c]] = 0.9; // blob B, bottom-right
                }
            }
        }
        let img = ImageInput::new(px).unwrap();
        let proposer = LuminanceComponents {
            threshold: 0.5,
            min_pixels: 4,
        };
        let masks = proposer.propose(&img).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0].iter().map(|&v| v as usize).sum::<usize>(), 9);
        assert_eq!(masks[1].iter().map(|&v| v as usize).sum::<usize>(), 9);
        // deterministic scan order: top-left blob first
        assert_eq!(masks[0][[0, 0]], 1);
        assert_eq!(masks[1][[5, 5]], 1);
    }

    #[test]
    fn dark_image_yields_no_masks() {
        let img = ImageInput::new(Array3::from_elem((4, 4, 3), 0.1)).unwrap();
        let masks = LuminanceComponents::default().propose(&img).unwrap();
        assert!(masks.is_empty());
    }
}
