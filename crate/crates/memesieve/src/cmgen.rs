//! Contrastive counterpart construction: strip the caption from a meme,
//! generate a non-hateful (caption, image) pair, and retrieve the most
//! similar hateful pair from a reference index by exact Euclidean
//! nearest-neighbour search over image embeddings.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{
    BackendRegistry, Captioner, CmgenConfig, DualEncoder, Inpainter, TextToImage,
};
use crate::config::hex_string;
use crate::data::{ImageInput, MemeRecord};
use crate::error::{Error, Result};

/// The three generation backends plus the fixed positive-caption prompt.
pub struct GenerationBackends {
    pub inpainter: Arc<dyn Inpainter>,
    pub captioner: Arc<dyn Captioner>,
    pub text_to_image: Arc<dyn TextToImage>,
    pub positive_prompt: String,
}

impl GenerationBackends {
    pub fn from_registry(registry: &BackendRegistry, cfg: &CmgenConfig) -> Result<Self> {
        Ok(GenerationBackends {
            inpainter: registry.inpainter(cfg)?,
            captioner: registry.captioner(cfg)?,
            text_to_image: registry.text_to_image(cfg)?,
            positive_prompt: cfg.positive_prompt.clone(),
        })
    }

    pub fn versions(&self) -> Vec<(String, String)> {
        vec![
            ("inpainter".into(), self.inpainter.version()),
            ("captioner".into(), self.captioner.version()),
            ("text_to_image".into(), self.text_to_image.version()),
        ]
    }
}

/// Removes the overlaid caption: inpaints the caption-mask region. The
/// mask must leave at least one unmasked pixel.
pub fn separate_modalities(
    meme: &MemeRecord,
    backends: &GenerationBackends,
) -> Result<ImageInput> {
    meme.validate()?;
    backends.inpainter.inpaint(&meme.image, &meme.caption_mask)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositiveProvenance {
    pub source_id: String,
    pub inpainter: String,
    pub captioner: String,
    pub text_to_image: String,
    pub prompt: String,
    pub caption: String,
    pub purified_digest: String,
    pub image_digest: String,
}

#[derive(Debug, Clone)]
pub struct GeneratedPositive {
    pub caption: String,
    pub image: ImageInput,
    pub provenance: PositiveProvenance,
}

pub fn image_digest(image: &ImageInput) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image.canonical_bytes());
    hex_string(&hasher.finalize())
}

/// Caption the purified image under the positive prompt, then synthesize
/// a matching image from the caption.
pub fn generate_positive(
    source_id: &str,
    purified: &ImageInput,
    backends: &GenerationBackends,
) -> Result<GeneratedPositive> {
    let caption = backends
        .captioner
        .caption(purified, &backends.positive_prompt)
        .map_err(|e| Error::InvalidInput(format!("captioner failed for meme {source_id}: {e}")))?;
    let image = backends
        .text_to_image
        .generate(&caption)
        .map_err(|e| {
            Error::InvalidInput(format!("text-to-image failed for meme {source_id}: {e}"))
        })?;
    let provenance = PositiveProvenance {
        source_id: source_id.to_string(),
        inpainter: backends.inpainter.version(),
        captioner: backends.captioner.version(),
        text_to_image: backends.text_to_image.version(),
        prompt: backends.positive_prompt.clone(),
        caption: caption.clone(),
        purified_digest: image_digest(purified),
        image_digest: image_digest(&image),
    };
    Ok(GeneratedPositive {
        caption,
        image,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Reference index
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub id: String,
    pub embedding: Array1<f64>,
    /// Path string as given by the source manifest; resolved by callers
    /// against the reference corpus directory.
    pub image_path: String,
    pub text: String,
}

/// In-memory exact-search index over pooled image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    pub entries: Vec<ReferenceEntry>,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub id: String,
    pub distance: f64,
}

/// One source record for index construction.
pub struct IndexSource {
    pub id: String,
    pub image: ImageInput,
    pub text: String,
    pub image_path: String,
}

impl ReferenceIndex {
    /// Embeds every record with the frozen encoder's image branch.
    /// Retrieval never sees text embeddings.
    pub fn build(
        sources: impl IntoIterator<Item = IndexSource>,
        gateway: &dyn DualEncoder,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for src in sources {
            let embedding = gateway.encode_image(&src.image)?;
            entries.push(ReferenceEntry {
                id: src.id,
                embedding,
                image_path: src.image_path,
                text: src.text,
            });
        }
        if entries.is_empty() {
            return Err(Error::InvalidInput(
                "reference index needs at least one entry".into(),
            ));
        }
        let embed_dim = entries[0].embedding.len();
        Ok(ReferenceIndex { entries, embed_dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact argmin of Euclidean distance over all entries; ties break to
    /// the lowest entry index (strict `<` keeps the first minimum).
    pub fn query(&self, embedding: &Array1<f64>) -> Result<Retrieval> {
        if self.entries.is_empty() {
            return Err(Error::InvalidInput("query against empty index".into()));
        }
        if embedding.len() != self.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "query dim {} vs index dim {}",
                embedding.len(),
                self.embed_dim
            )));
        }
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, entry) in self.entries.iter().enumerate() {
            let d = euclidean(embedding, &entry.embedding);
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        Ok(Retrieval {
            index: best,
            id: self.entries[best].id.clone(),
            distance: best_dist,
        })
    }

    /// Persists as a directory: `embeddings.bin` (count, dim, f64 LE
    /// row-major) plus `meta.jsonl` (`id,text,image_path`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bin = Vec::with_capacity(16 + self.entries.len() * self.embed_dim * 8);
        bin.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        bin.extend_from_slice(&(self.embed_dim as u64).to_le_bytes());
        for entry in &self.entries {
            for v in entry.embedding.iter() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(dir.join("embeddings.bin"), bin)?;

        let metas: Vec<IndexMeta> = self
            .entries
            .iter()
            .map(|e| IndexMeta {
                id: e.id.clone(),
                text: e.text.clone(),
                image_path: e.image_path.clone(),
            })
            .collect();
        crate::io::write_jsonl(&dir.join("meta.jsonl"), &metas)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bin = std::fs::read(dir.join("embeddings.bin"))
            .map_err(|e| Error::MissingArtifact(format!("index {}: {e}", dir.display())))?;
        if bin.len() < 16 {
            return Err(Error::InvalidInput("truncated embeddings.bin".into()));
        }
        let count = u64::from_le_bytes(bin[..8].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bin[8..16].try_into().unwrap()) as usize;
        if bin.len() != 16 + count * dim * 8 {
            return Err(Error::InvalidInput(
                "embeddings.bin size does not match header".into(),
            ));
        }
        let mut embeddings = Vec::with_capacity(count);
        for r in 0..count {
            let start = 16 + r * dim * 8;
            let mut row = Vec::with_capacity(dim);
            for chunk in bin[start..start + dim * 8].chunks_exact(8) {
                row.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            embeddings.push(Array1::from_vec(row));
        }

        let meta_file = std::fs::File::open(dir.join("meta.jsonl"))
            .map_err(|e| Error::MissingArtifact(format!("index meta {}: {e}", dir.display())))?;
        let mut entries = Vec::with_capacity(count);
        for (line, embedding) in BufReader::new(meta_file).lines().zip(embeddings) {
            let meta: IndexMeta = serde_json::from_str(&line?)?;
            entries.push(ReferenceEntry {
                id: meta.id,
                embedding,
                image_path: meta.image_path,
                text: meta.text,
            });
        }
        if entries.len() != count {
            return Err(Error::InvalidInput(format!(
                "meta.jsonl has {} rows, embeddings.bin {count}",
                entries.len()
            )));
        }
        Ok(ReferenceIndex {
            entries,
            embed_dim: dim,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    id: String,
    text: String,
    image_path: String,
}

fn euclidean(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Embeds the purified image and retrieves the closest hateful entry.
pub fn retrieve_negative(
    purified: &ImageInput,
    index: &ReferenceIndex,
    gateway: &dyn DualEncoder,
) -> Result<Retrieval> {
    let embedding = gateway.encode_image(purified)?;
    index.query(&embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        MockEncoder, ProceduralTextToImage, RingMeanInpainter, TemplateCaptioner,
    };
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn backends() -> GenerationBackends {
        GenerationBackends {
            inpainter: Arc::new(RingMeanInpainter),
            captioner: Arc::new(TemplateCaptioner),
            text_to_image: Arc::new(ProceduralTextToImage { size: 8 }),
            positive_prompt: "please describe kindly".into(),
        }
    }

    fn random_image(rng: &mut ChaCha12Rng, n: usize) -> ImageInput {
        let mut px = Array3::<f64>::zeros((n, n, 3));
        for v in px.iter_mut() {
            *v = rng.random_range(0.0..=1.0);
        }
        ImageInput::new(px).unwrap()
    }

    fn entry(id: &str, emb: Vec<f64>) -> ReferenceEntry {
        ReferenceEntry {
            id: id.into(),
            embedding: Array1::from_vec(emb),
            image_path: format!("{id}.png"),
            text: format!("text {id}"),
        }
    }

    #[test]
    fn generate_positive_is_deterministic_with_provenance() {
        let b = backends();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 6);
        let a = generate_positive("m1", &img, &b).unwrap();
        let c = generate_positive("m1", &img, &b).unwrap();
        assert_eq!(a.caption, c.caption);
        assert_eq!(a.image.pixels, c.image.pixels);
        assert_eq!(a.provenance.image_digest, c.provenance.image_digest);
        assert_eq!(a.provenance.source_id, "m1");
        assert!(!a.provenance.captioner.is_empty());
    }

    #[test]
    fn two_meme_corpus_emits_two_distinct_positive_pairs() {
        let b = backends();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let img1 = random_image(&mut rng, 6);
        let img2 = random_image(&mut rng, 6);
        let p1 = generate_positive("a", &img1, &b).unwrap();
        let p2 = generate_positive("b", &img2, &b).unwrap();
        assert_ne!(p1.caption, p2.caption);
        assert_ne!(p1.provenance.image_digest, p2.provenance.image_digest);
    }

    #[test]
    fn singleton_index_always_returns_its_entry() {
        let index = ReferenceIndex {
            entries: vec![entry("only", vec![1.0, 2.0])],
            embed_dim: 2,
        };
        for q in [[0.0, 0.0], [5.0, -3.0], [1.0, 2.0]] {
            let r = index.query(&Array1::from_vec(q.to_vec())).unwrap();
            assert_eq!(r.index, 0);
            assert_eq!(r.id, "only");
        }
    }

    #[test]
    fn self_retrieval_has_zero_distance() {
        let entries: Vec<ReferenceEntry> = (0..10)
            .map(|i| entry(&format!("e{i}"), vec![i as f64, 2.0 * i as f64]))
            .collect();
        let index = ReferenceIndex {
            entries,
            embed_dim: 2,
        };
        let r = index.query(&Array1::from_vec(vec![7.0, 14.0])).unwrap();
        assert_eq!(r.index, 7);
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn equal_distance_breaks_to_lower_index() {
        let index = ReferenceIndex {
            entries: vec![
                entry("far", vec![0.0, 3.0]),
                entry("left", vec![-1.0, 0.0]),
                entry("right", vec![1.0, 0.0]),
            ],
            embed_dim: 2,
        };
        let r = index.query(&Array1::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(r.index, 1, "lower of the two equidistant entries");
        assert_eq!(r.id, "left");
    }

    #[test]
    fn query_matches_linear_scan_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dim = 8;
        let entries: Vec<ReferenceEntry> = (0..200)
            .map(|i| {
                let emb: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                entry(&format!("e{i}"), emb)
            })
            .collect();
        let index = ReferenceIndex {
            entries: entries.clone(),
            embed_dim: dim,
        };
        for _ in 0..30 {
            let q: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.random_range(-1.0..1.0)));
            // independent argmin with explicit loops and the declared tie-break
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (i, e) in entries.iter().enumerate() {
                let mut acc = 0.0;
                for k in 0..dim {
                    let diff = q[k] - e.embedding[k];
                    acc += diff * diff;
                }
                let d = acc.sqrt();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            let r = index.query(&q).unwrap();
            assert_eq!(r.index, best);
            assert_eq!(r.distance, best_d);
        }
    }

    #[test]
    fn best_distance_is_monotone_as_entries_are_added() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let dim = 4;
        let q: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.random_range(-1.0..1.0)));
        let mut prev = f64::INFINITY;
        let mut index = ReferenceIndex {
            entries: vec![],
            embed_dim: dim,
        };
        for i in 0..50 {
            let emb: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            index.entries.push(entry(&format!("e{i}"), emb));
            let d = index.query(&q).unwrap().distance;
            assert!(d <= prev + 1e-15);
            prev = d;
        }
    }

    #[test]
    fn index_build_uses_image_embeddings_only() {
        let enc = MockEncoder::new(0);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 4);
        let source = |text: &str| IndexSource {
            id: "x".into(),
            image: img.clone(),
            text: text.into(),
            image_path: "x.png".into(),
        };
        let a = ReferenceIndex::build([source("text one")], &enc).unwrap();
        let b = ReferenceIndex::build([source("completely different caption")], &enc).unwrap();
        assert_eq!(a.entries[0].embedding, b.entries[0].embedding);
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let enc = MockEncoder::new(0);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let sources: Vec<IndexSource> = (0..5)
            .map(|i| IndexSource {
                id: format!("e{i}"),
                image: random_image(&mut rng, 4),
                text: format!("caption {i}"),
                image_path: format!("imgs/e{i}.png"),
            })
            .collect();
        let index = ReferenceIndex::build(sources, &enc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        index.save(dir.path()).unwrap();
        let loaded = ReferenceIndex::load(dir.path()).unwrap();
        assert_eq!(index, loaded);
    }

    #[test]
    fn retrieve_negative_matches_manual_embedding_query() {
        let enc = MockEncoder::new(0);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let sources: Vec<IndexSource> = (0..8)
            .map(|i| IndexSource {
                id: format!("e{i}"),
                image: random_image(&mut rng, 4),
                text: format!("caption {i}"),
                image_path: format!("e{i}.png"),
            })
            .collect();
        let index = ReferenceIndex::build(sources, &enc).unwrap();
        let query_img = random_image(&mut rng, 4);
        let direct = index.query(&enc.encode_image(&query_img).unwrap()).unwrap();
        let via = retrieve_negative(&query_img, &index, &enc).unwrap();
        assert_eq!(direct, via);
    }
}
