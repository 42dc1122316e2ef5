//! Triplet dataset assembly: pre-filter each meme for offensive text and
//! NSFW imagery, then pair the anchor with one non-hateful and one hateful
//! counterpart sampled uniformly from the eligible combinations.
//!
//! Eligibility:
//! * non-hateful — (generated image, generated text) always; (original
//!   image, generated text) only if the image is safe; (generated image,
//!   original text) only if the text is safe.
//! * hateful — (retrieved image, retrieved text) always; (original image,
//!   retrieved text) only if the image is NSFW; (retrieved image, original
//!   text) only if the text is offensive.
//!
//! The fully generated/retrieved combo is unconditionally eligible, so
//! assembly never fails.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::prelude::IndexedRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{DualEncoder, ImageFilter, TextFilter};
use crate::cmgen::{
    generate_positive, retrieve_negative, separate_modalities, GenerationBackends, ReferenceIndex,
};
use crate::config::hex_string;
use crate::data::{load_image, save_image, Corpus, MemeRecord};
use crate::error::{Error, Result};
use crate::seeding::Seeder;
use crate::train::TripletItem;

/// Pre-filter outcome for one meme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    /// 1 = offensive text.
    pub text_offensive: u8,
    /// 1 = NSFW image.
    pub image_nsfw: u8,
}

pub fn filter_meme(
    meme: &MemeRecord,
    text_filter: &dyn TextFilter,
    image_filter: &dyn ImageFilter,
) -> Result<FilterVerdict> {
    Ok(FilterVerdict {
        text_offensive: text_filter.classify(&meme.text.raw_text)?,
        image_nsfw: image_filter.classify(&meme.image)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NonHateCombo {
    #[serde(rename = "gen_image+gen_text")]
    GeneratedBoth,
    #[serde(rename = "orig_image+gen_text")]
    OriginalImageGeneratedText,
    #[serde(rename = "gen_image+orig_text")]
    GeneratedImageOriginalText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HateCombo {
    #[serde(rename = "ref_image+ref_text")]
    RetrievedBoth,
    #[serde(rename = "orig_image+ref_text")]
    OriginalImageRetrievedText,
    #[serde(rename = "ref_image+orig_text")]
    RetrievedImageOriginalText,
}

pub fn eligible_nonhate(verdict: &FilterVerdict) -> Vec<NonHateCombo> {
    let mut combos = vec![NonHateCombo::GeneratedBoth];
    if verdict.image_nsfw == 0 {
        combos.push(NonHateCombo::OriginalImageGeneratedText);
    }
    if verdict.text_offensive == 0 {
        combos.push(NonHateCombo::GeneratedImageOriginalText);
    }
    combos
}

pub fn eligible_hate(verdict: &FilterVerdict) -> Vec<HateCombo> {
    let mut combos = vec![HateCombo::RetrievedBoth];
    if verdict.image_nsfw == 1 {
        combos.push(HateCombo::OriginalImageRetrievedText);
    }
    if verdict.text_offensive == 1 {
        combos.push(HateCombo::RetrievedImageOriginalText);
    }
    combos
}

/// Uniform draw over the eligible non-hateful combos; total because the
/// fully generated combo is always eligible.
pub fn assemble_nonhateful(verdict: &FilterVerdict, rng: &mut ChaCha12Rng) -> NonHateCombo {
    *eligible_nonhate(verdict)
        .choose(rng)
        .expect("eligible set is never empty")
}

pub fn assemble_hateful(verdict: &FilterVerdict, rng: &mut ChaCha12Rng) -> HateCombo {
    *eligible_hate(verdict)
        .choose(rng)
        .expect("eligible set is never empty")
}

// ---------------------------------------------------------------------------
// Manifest records
// ---------------------------------------------------------------------------

/// Where a pair's image path resolves from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathBase {
    /// Relative to the anchor corpus manifest's directory.
    Corpus,
    /// Relative to the triplet manifest's directory.
    Output,
    /// Relative to the reference corpus manifest's directory.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub image_path: String,
    pub image_base: PathBase,
    pub text: String,
    pub combo: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub anchor_id: String,
    pub anchor_image: String,
    pub anchor_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub verdict: FilterVerdict,
    pub nonhate: PairRef,
    pub hate: PairRef,
    pub retrieved_id: String,
    pub retrieved_distance: f64,
    pub provenance_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub count: usize,
    pub skipped: usize,
    pub seed: u64,
    pub config_digest: String,
    /// Corpus manifest path as given on the command line; anchor paths
    /// resolve against its directory.
    pub corpus_manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_manifest: Option<String>,
    pub backends: Vec<(String, String)>,
    pub encoder: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletManifest {
    pub header: ManifestHeader,
    pub records: Vec<TripletRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header(ManifestHeader),
    Triplet(TripletRecord),
}

impl TripletManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &ManifestLine::Header(self.header.clone()))?;
        buf.push(b'\n');
        for rec in &self.records {
            serde_json::to_writer(&mut buf, &ManifestLine::Triplet(rec.clone()))?;
            buf.push(b'\n');
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::MissingArtifact(format!("triplet manifest {}: {e}", path.display()))
        })?;
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidInput(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            match parsed {
                ManifestLine::Header(h) => header = Some(h),
                ManifestLine::Triplet(r) => records.push(r),
            }
        }
        let header = header
            .ok_or_else(|| Error::InvalidInput(format!("{} has no header line", path.display())))?;
        if header.count != records.len() {
            return Err(Error::InvalidInput(format!(
                "manifest header says {} records, found {}",
                header.count,
                records.len()
            )));
        }
        Ok(TripletManifest { header, records })
    }
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

pub struct TripletBuilder<'a> {
    pub backends: &'a GenerationBackends,
    pub text_filter: Arc<dyn TextFilter>,
    pub image_filter: Arc<dyn ImageFilter>,
    pub index: &'a ReferenceIndex,
    pub gateway: &'a dyn DualEncoder,
    pub seed: u64,
    pub config_digest: String,
    /// Path strings recorded in the header for later resolution.
    pub corpus_manifest: String,
    pub reference_manifest: Option<String>,
}

impl<'a> TripletBuilder<'a> {
    /// Runs the full per-meme pipeline over the corpus in id order and
    /// writes generated artifacts under `out_dir/generated/{id}/`.
    /// Per-meme failures are skipped and counted, never fabricated.
    pub fn build(&self, corpus: &Corpus, out_dir: &Path) -> Result<TripletManifest> {
        let seeder = Seeder::new(self.seed);
        let mut rows = corpus.rows.clone();
        rows.sort_by(|a, b| a.id.cmp(&b.id));

        let mut records = Vec::new();
        let mut skipped = 0usize;
        for row in &rows {
            match self.build_one(corpus, row, out_dir, &seeder) {
                Ok(record) => records.push(record),
                Err(err) => {
                    skipped += 1;
                    eprintln!("skipping meme {}: {err}", row.id);
                }
            }
        }
        let header = ManifestHeader {
            count: records.len(),
            skipped,
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            corpus_manifest: self.corpus_manifest.clone(),
            reference_manifest: self.reference_manifest.clone(),
            backends: self.backends.versions(),
            encoder: self.gateway.version(),
        };
        Ok(TripletManifest { header, records })
    }

    fn build_one(
        &self,
        corpus: &Corpus,
        row: &crate::data::CorpusRow,
        out_dir: &Path,
        seeder: &Seeder,
    ) -> Result<TripletRecord> {
        let (image, caption_mask) = corpus.load_pixels(row)?;
        let text = self.gateway.tokenize(&row.text)?;
        let meme = MemeRecord {
            id: row.id.clone(),
            image,
            text,
            caption_mask,
            label: row.label,
        };
        meme.validate()?;

        let purified = separate_modalities(&meme, self.backends)?;
        let positive = generate_positive(&meme.id, &purified, self.backends)?;
        let retrieval = retrieve_negative(&purified, self.index, self.gateway)?;
        let verdict = filter_meme(&meme, self.text_filter.as_ref(), self.image_filter.as_ref())?;

        // persist the generated pair with provenance
        let gen_dir = out_dir.join("generated").join(&meme.id);
        let positive_rel = format!("generated/{}/positive.png", meme.id);
        save_image(&positive.image, &out_dir.join(&positive_rel))?;
        std::fs::write(gen_dir.join("caption.txt"), &positive.caption)?;
        let provenance_json = serde_json::to_vec_pretty(&positive.provenance)?;
        std::fs::write(gen_dir.join("provenance.json"), &provenance_json)?;
        let mut hasher = Sha256::new();
        hasher.update(&provenance_json);
        let provenance_digest = hex_string(&hasher.finalize());

        let meme_seed = seeder.derive(&format!("triplet-combos/{}", meme.id));
        let mut rng = seeder.rng(&format!("triplet-combos/{}", meme.id));
        let nonhate_combo = assemble_nonhateful(&verdict, &mut rng);
        let hate_combo = assemble_hateful(&verdict, &mut rng);

        let ref_entry = &self.index.entries[retrieval.index];
        let nonhate = match nonhate_combo {
            NonHateCombo::GeneratedBoth => PairRef {
                image_path: positive_rel.clone(),
                image_base: PathBase::Output,
                text: positive.caption.clone(),
                combo: combo_tag(&nonhate_combo)?,
            },
            NonHateCombo::OriginalImageGeneratedText => PairRef {
                image_path: row.image_path.clone(),
                image_base: PathBase::Corpus,
                text: positive.caption.clone(),
                combo: combo_tag(&nonhate_combo)?,
            },
            NonHateCombo::GeneratedImageOriginalText => PairRef {
                image_path: positive_rel.clone(),
                image_base: PathBase::Output,
                text: row.text.clone(),
                combo: combo_tag(&nonhate_combo)?,
            },
        };
        let hate = match hate_combo {
            HateCombo::RetrievedBoth => PairRef {
                image_path: ref_entry.image_path.clone(),
                image_base: PathBase::Reference,
                text: ref_entry.text.clone(),
                combo: combo_tag(&hate_combo)?,
            },
            HateCombo::OriginalImageRetrievedText => PairRef {
                image_path: row.image_path.clone(),
                image_base: PathBase::Corpus,
                text: ref_entry.text.clone(),
                combo: combo_tag(&hate_combo)?,
            },
            HateCombo::RetrievedImageOriginalText => PairRef {
                image_path: ref_entry.image_path.clone(),
                image_base: PathBase::Reference,
                text: row.text.clone(),
                combo: combo_tag(&hate_combo)?,
            },
        };

        Ok(TripletRecord {
            anchor_id: meme.id.clone(),
            anchor_image: row.image_path.clone(),
            anchor_text: row.text.clone(),
            label: row.label,
            verdict,
            nonhate,
            hate,
            retrieved_id: retrieval.id,
            retrieved_distance: retrieval.distance,
            provenance_digest,
            seed: meme_seed,
        })
    }
}

fn combo_tag<T: Serialize>(combo: &T) -> Result<String> {
    let v = serde_json::to_value(combo)?;
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Serialization("combo tag must serialize to a string".into()))
}

// ---------------------------------------------------------------------------
// Manifest -> training items
// ---------------------------------------------------------------------------

/// Base directories for resolving the three path kinds in a manifest.
pub struct ManifestRoots {
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    pub reference_dir: Option<PathBuf>,
}

impl ManifestRoots {
    /// Derives roots from the manifest location and its header, resolving
    /// corpus/reference manifests relative to the current directory
    /// exactly as they were given on the command line.
    pub fn from_header(manifest_path: &Path, header: &ManifestHeader) -> Self {
        let output_dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let corpus_dir = Path::new(&header.corpus_manifest)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let reference_dir = header.reference_manifest.as_ref().map(|m| {
            Path::new(m)
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        });
        ManifestRoots {
            corpus_dir,
            output_dir,
            reference_dir,
        }
    }

    pub fn resolve(&self, pair_path: &str, base: PathBase) -> Result<PathBuf> {
        let p = Path::new(pair_path);
        if p.is_absolute() {
            return Ok(p.to_path_buf());
        }
        let root = match base {
            PathBase::Corpus => &self.corpus_dir,
            PathBase::Output => &self.output_dir,
            PathBase::Reference => self.reference_dir.as_ref().ok_or_else(|| {
                Error::InvalidInput(
                    "manifest references the reference corpus but no reference manifest is recorded"
                        .into(),
                )
            })?,
        };
        Ok(root.join(p))
    }
}

/// Loads and encodes every triplet. Anchors without labels cannot drive
/// role assignment and are skipped; the skip count is returned.
pub fn manifest_to_items(
    manifest: &TripletManifest,
    roots: &ManifestRoots,
    encoder: &dyn DualEncoder,
) -> Result<(Vec<TripletItem>, usize)> {
    let mut items = Vec::with_capacity(manifest.records.len());
    let mut unlabeled = 0usize;
    for rec in &manifest.records {
        let Some(label) = rec.label else {
            unlabeled += 1;
            continue;
        };
        let anchor_img = load_image(&roots.resolve(&rec.anchor_image, PathBase::Corpus)?)?;
        let anchor_text = encoder.tokenize(&rec.anchor_text)?;
        let anchor = encoder.encode(&anchor_img, &anchor_text)?;

        let mut encode_pair = |pair: &PairRef| -> Result<crate::backends::EmbeddingBundle> {
            let img = load_image(&roots.resolve(&pair.image_path, pair.image_base)?)?;
            let text = encoder.tokenize_lossy(&pair.text)?;
            encoder.encode(&img, &text)
        };
        let nonhate = encode_pair(&rec.nonhate)?;
        let hate = encode_pair(&rec.hate)?;
        items.push(TripletItem {
            id: rec.anchor_id.clone(),
            anchor,
            nonhate,
            hate,
            label,
        });
    }
    Ok((items, unlabeled))
}
