//! Versioned checkpoint archive (`.itackpt`): magic + format version +
//! JSON header (config, array manifest, optional extra metadata) + f64 LE
//! payload. Written as one buffer so identical models produce identical
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DecoderParams, HeadParams, ItaConfig, ItaModel, ItaParameters, LayerParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_EXTENSION: &str = "itackpt";

const MAGIC: &[u8; 8] = b"ITACKPT\0";
const FORMAT_VERSION: u32 = 1;

/// What a checkpoint carries beyond the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CheckpointKind {
    Model,
    /// Mid-run state: optimizer moments live in the extra arrays.
    TrainState,
}

#[derive(Debug, Clone, Default)]
pub struct CheckpointExtra {
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: CheckpointKind,
    config: ItaConfig,
    has_head: bool,
    arrays: Vec<ArrayEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

fn named_tensors(params: &ItaParameters) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let push2 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: String, a: &Array2<f64>| {
        out.push((name, vec![a.dim().0, a.dim().1], a.iter().copied().collect()));
    };
    let push1 = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: String, a: &Array1<f64>| {
        out.push((name, vec![a.len()], a.to_vec()));
    };
    push2(&mut out, "image_projection".into(), &params.image_projection);
    for (i, l) in params.layers.iter().enumerate() {
        push2(&mut out, format!("layer{i}/w_q"), &l.w_q);
        push2(&mut out, format!("layer{i}/w_k"), &l.w_k);
        push2(&mut out, format!("layer{i}/w_v"), &l.w_v);
        push2(&mut out, format!("layer{i}/w_o"), &l.w_o);
        push1(&mut out, format!("layer{i}/ln1_gain"), &l.ln1_gain);
        push1(&mut out, format!("layer{i}/ln1_bias"), &l.ln1_bias);
        push2(&mut out, format!("layer{i}/ffn_w1"), &l.ffn_w1);
        push1(&mut out, format!("layer{i}/ffn_b1"), &l.ffn_b1);
        push2(&mut out, format!("layer{i}/ffn_w2"), &l.ffn_w2);
        push1(&mut out, format!("layer{i}/ffn_b2"), &l.ffn_b2);
        push1(&mut out, format!("layer{i}/ln2_gain"), &l.ln2_gain);
        push1(&mut out, format!("layer{i}/ln2_bias"), &l.ln2_bias);
    }
    push2(&mut out, "decoder/w1".into(), &params.decoder.w1);
    push1(&mut out, "decoder/b1".into(), &params.decoder.b1);
    push2(&mut out, "decoder/w2".into(), &params.decoder.w2);
    push1(&mut out, "decoder/b2".into(), &params.decoder.b2);
    if let Some(head) = &params.head {
        push1(&mut out, "head/w".into(), &head.w);
        out.push(("head/b".into(), vec![1], vec![head.b]));
    }
    out
}

impl ItaParameters {
    /// All-zero parameters shaped per the config.
    pub fn zeros(cfg: &ItaConfig, with_head: bool) -> Self {
        let d = cfg.embed_dim;
        ItaParameters {
            image_projection: Array2::zeros((cfg.image_dim, d)),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams {
                    w_q: Array2::zeros((d, cfg.key_dim)),
                    w_k: Array2::zeros((d, cfg.key_dim)),
                    w_v: Array2::zeros((d, d)),
                    w_o: Array2::zeros((d, d)),
                    ln1_gain: Array1::zeros(d),
                    ln1_bias: Array1::zeros(d),
                    ffn_w1: Array2::zeros((d, d)),
                    ffn_b1: Array1::zeros(d),
                    ffn_w2: Array2::zeros((d, d)),
                    ffn_b2: Array1::zeros(d),
                    ln2_gain: Array1::zeros(d),
                    ln2_bias: Array1::zeros(d),
                })
                .collect(),
            decoder: DecoderParams {
                w1: Array2::zeros((2 * d, cfg.decoder_hidden)),
                b1: Array1::zeros(cfg.decoder_hidden),
                w2: Array2::zeros((cfg.decoder_hidden, cfg.output_dim)),
                b2: Array1::zeros(cfg.output_dim),
            },
            head: with_head.then(|| HeadParams {
                w: Array1::zeros(cfg.output_dim),
                b: 0.0,
            }),
        }
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &ItaModel,
    kind: CheckpointKind,
    extra: Option<&CheckpointExtra>,
) -> Result<()> {
    let mut tensors = named_tensors(&model.params);
    if let Some(extra) = extra {
        for (name, data) in &extra.arrays {
            tensors.push((format!("extra/{name}"), vec![data.len()], data.clone()));
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        config: model.config,
        has_head: model.params.head.is_some(),
        arrays: tensors
            .iter()
            .map(|(name, shape, _)| ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        meta: extra.map(|e| e.meta.clone()).unwrap_or(serde_json::Value::Null),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let payload_len: usize = tensors.iter().map(|(_, _, d)| d.len() * 8).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint. When `expected` is given and the stored config
/// differs, the error names both configs.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ItaConfig>,
) -> Result<(ItaModel, CheckpointKind, CheckpointExtra)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingArtifact(format!("checkpoint {}: {e}", path.display())))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(Error::CheckpointFormat("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
    header.config.validate()?;
    if let Some(expected) = expected {
        if *expected != header.config {
            return Err(Error::CheckpointMismatch(format!(
                "stored config {:?} does not match expected config {:?}",
                header.config, expected
            )));
        }
    }

    let mut params = ItaParameters::zeros(&header.config, header.has_head);
    let mut extra = CheckpointExtra {
        meta: header.meta.clone(),
        arrays: BTreeMap::new(),
    };
    let mut offset = header_end;
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let end = offset + count * 8;
        if bytes.len() < end {
            return Err(Error::CheckpointFormat(format!(
                "truncated payload at array {}",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset = end;
        if let Some(name) = entry.name.strip_prefix("extra/") {
            extra.arrays.insert(name.to_string(), data);
        } else {
            assign_named(&mut params, &entry.name, &entry.shape, data)?;
        }
    }
    if offset != bytes.len() {
        return Err(Error::CheckpointFormat("trailing bytes after payload".into()));
    }
    Ok((
        ItaModel {
            config: header.config,
            params,
        },
        header.kind,
        extra,
    ))
}

fn assign_named(
    params: &mut ItaParameters,
    name: &str,
    shape: &[usize],
    data: Vec<f64>,
) -> Result<()> {
    let as2 = |data: Vec<f64>| -> Result<Array2<f64>> {
        if shape.len() != 2 {
            return Err(Error::CheckpointFormat(format!(
                "{name}: expected rank-2 shape, got {shape:?}"
            )));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::CheckpointFormat(format!("{name}: {e}")))
    };
    let as1 = |data: Vec<f64>| -> Result<Array1<f64>> { Ok(Array1::from_vec(data)) };

    if name == "image_projection" {
        params.image_projection = as2(data)?;
        return Ok(());
    }
    if name == "decoder/w1" {
        params.decoder.w1 = as2(data)?;
        return Ok(());
    }
    if name == "decoder/b1" {
        params.decoder.b1 = as1(data)?;
        return Ok(());
    }
    if name == "decoder/w2" {
        params.decoder.w2 = as2(data)?;
        return Ok(());
    }
    if name == "decoder/b2" {
        params.decoder.b2 = as1(data)?;
        return Ok(());
    }
    if name == "head/w" {
        if let Some(head) = params.head.as_mut() {
            head.w = as1(data)?;
            return Ok(());
        }
        return Err(Error::CheckpointFormat("head array without has_head".into()));
    }
    if name == "head/b" {
        if let Some(head) = params.head.as_mut() {
            head.b = data.first().copied().unwrap_or(0.0);
            return Ok(());
        }
        return Err(Error::CheckpointFormat("head array without has_head".into()));
    }
    if let Some(rest) = name.strip_prefix("layer") {
        let (idx_str, field) = rest
            .split_once('/')
            .ok_or_else(|| Error::CheckpointFormat(format!("bad array name {name}")))?;
        let idx: usize = idx_str
            .parse()
            .map_err(|_| Error::CheckpointFormat(format!("bad layer index in {name}")))?;
        let layer = params
            .layers
            .get_mut(idx)
            .ok_or_else(|| Error::CheckpointFormat(format!("layer {idx} out of range")))?;
        match field {
            "w_q" => layer.w_q = as2(data)?,
            "w_k" => layer.w_k = as2(data)?,
            "w_v" => layer.w_v = as2(data)?,
            "w_o" => layer.w_o = as2(data)?,
            "ln1_gain" => layer.ln1_gain = as1(data)?,
            "ln1_bias" => layer.ln1_bias = as1(data)?,
            "ffn_w1" => layer.ffn_w1 = as2(data)?,
            "ffn_b1" => layer.ffn_b1 = as1(data)?,
            "ffn_w2" => layer.ffn_w2 = as2(data)?,
            "ffn_b2" => layer.ffn_b2 = as1(data)?,
            "ln2_gain" => layer.ln2_gain = as1(data)?,
            "ln2_bias" => layer.ln2_bias = as1(data)?,
            other => {
                return Err(Error::CheckpointFormat(format!(
                    "unknown layer field {other}"
                )))
            }
        }
        return Ok(());
    }
    Err(Error::CheckpointFormat(format!("unknown array {name}")))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::tiny_config;
    use super::super::TrainScope;
    use super::*;
    use crate::seeding::Seeder;

    #[test]
    fn roundtrip_preserves_every_parameter() {
        let seeder = Seeder::new(5);
        let mut model = ItaModel::new(tiny_config(), &seeder).unwrap();
        model.attach_head(&seeder);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.itackpt");
        save_checkpoint(&path, &model, CheckpointKind::Model, None).unwrap();
        let (loaded, kind, extra) = load_checkpoint(&path, Some(&model.config)).unwrap();
        assert_eq!(kind, CheckpointKind::Model);
        assert!(extra.arrays.is_empty());
        assert_eq!(model.flatten(TrainScope::Full), loaded.flatten(TrainScope::Full));
    }

    #[test]
    fn identical_models_produce_identical_bytes() {
        let seeder = Seeder::new(6);
        let model = ItaModel::new(tiny_config(), &seeder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.itackpt");
        let b = dir.path().join("b.itackpt");
        save_checkpoint(&a, &model, CheckpointKind::Model, None).unwrap();
        save_checkpoint(&b, &model, CheckpointKind::Model, None).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn config_mismatch_names_both_configs() {
        let seeder = Seeder::new(7);
        let model = ItaModel::new(tiny_config(), &seeder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.itackpt");
        save_checkpoint(&path, &model, CheckpointKind::Model, None).unwrap();
        let mut other = tiny_config();
        other.num_layers = 3;
        match load_checkpoint(&path, Some(&other)) {
            Err(Error::CheckpointMismatch(msg)) => {
                assert!(msg.contains("num_layers: 3") && msg.contains("num_layers: 2"));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn extra_arrays_roundtrip() {
        let seeder = Seeder::new(8);
        let model = ItaModel::new(tiny_config(), &seeder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.itackpt");
        let mut extra = CheckpointExtra::default();
        extra.meta = serde_json::json!({"epoch": 2, "step": 40});
        extra.arrays.insert("adam_m".into(), vec![1.0, 2.0, 3.0]);
        save_checkpoint(&path, &model, CheckpointKind::TrainState, Some(&extra)).unwrap();
        let (_, kind, loaded) = load_checkpoint(&path, None).unwrap();
        assert_eq!(kind, CheckpointKind::TrainState);
        assert_eq!(loaded.arrays["adam_m"], vec![1.0, 2.0, 3.0]);
        assert_eq!(loaded.meta["epoch"], 2);
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.itackpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(Error::CheckpointFormat(_))
        ));
    }
}
