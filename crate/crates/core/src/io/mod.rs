//! Serialization of models, learned transforms, fused exports, run
//! configurations and calibration data.

mod config;
mod container;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    CalibrationSource, MaskSection, ModelDims, OptimizerSection, PlacementSection, QuantizationSection, RunConfig,
};
pub use container::{
    decode_container, encode_container, load_container, save_container, tensors_by_name, DType, Entries,
    ManifestEntry, StoredTensor, TensorData, FORMAT_VERSION, MAGIC,
};

use crate::affine::{AffineTransform, MaskSchedule, Placement, TransformKind};
use crate::block::{BlockParams, ClipParams, Linear, TransformPlacementConfig, TransformSet};
use crate::error::{Error, Result};
use crate::fusion::FusedBlock;
use crate::linalg::random_normal;
use crate::optimizer::synthetic_batches;
use crate::quant::{QuantConfig, QuantParams, QuantizedTensor};
use crate::tensor::{Precision, Tensor};

fn block_prefix(i: usize) -> String {
    format!("block{i}.")
}

fn floats(tensors: Vec<(String, Tensor)>) -> Entries {
    tensors.into_iter().map(|(n, t)| (n, StoredTensor::from_tensor(&t))).collect()
}

fn take<'a>(entries: &'a BTreeMap<String, StoredTensor>, name: &str) -> Result<&'a StoredTensor> {
    entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

fn block_count(entries: &BTreeMap<String, StoredTensor>, suffix: &str) -> usize {
    (0..).take_while(|i| entries.contains_key(&format!("{}{suffix}", block_prefix(*i)))).count()
}

pub fn save_model(path: impl AsRef<Path>, blocks: &[BlockParams]) -> Result<()> {
    let entries: Entries = blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| floats(b.named_tensors(&block_prefix(i))))
        .collect();
    save_container(path, &entries)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Vec<BlockParams>> {
    let entries = load_container(path)?;
    let tensors = tensors_by_name(&entries);
    let n = (0..).take_while(|i| tensors.contains_key(&format!("{}n_heads", block_prefix(*i)))).count();
    if n == 0 {
        return Err(Error::MissingTensor("block0.n_heads".into()));
    }
    (0..n).map(|i| BlockParams::from_named(&tensors, &block_prefix(i))).collect()
}

#[derive(Serialize, Deserialize)]
struct TransformMeta {
    placement: Placement,
    kind: TransformKind,
    schedule: MaskSchedule,
    shift: bool,
}

#[derive(Serialize, Deserialize)]
struct TransformSetMeta {
    config: TransformPlacementConfig,
    transforms: Vec<TransformMeta>,
    clips: Vec<Linear>,
}

/// Raw matrices, final masks, shifts and raw clip scalars under `prefix`,
/// with the structural fields in a JSON `meta` buffer.
pub fn transform_set_entries(ts: &TransformSet, prefix: &str) -> Result<Entries> {
    let meta = TransformSetMeta {
        config: ts.config,
        transforms: ts
            .transforms
            .values()
            .map(|t| TransformMeta {
                placement: t.placement,
                kind: t.kind,
                schedule: t.schedule,
                shift: t.shift_delta.is_some(),
            })
            .collect(),
        clips: ts.clips.keys().copied().collect(),
    };
    let mut out = vec![(format!("{prefix}meta"), StoredTensor::json(&meta)?)];
    for (p, t) in &ts.transforms {
        out.push((format!("{prefix}a.{p}"), StoredTensor::from_tensor(&t.matrix_a)));
        out.push((format!("{prefix}mask.{p}"), StoredTensor::from_tensor(&t.mask)));
        if let Some(s) = &t.shift_delta {
            out.push((format!("{prefix}shift.{p}"), StoredTensor::from_tensor(s)));
        }
    }
    for (lin, c) in &ts.clips {
        out.push((format!("{prefix}clip_lo.{}", lin.name()), StoredTensor::from_tensor(&c.lo)));
        out.push((format!("{prefix}clip_hi.{}", lin.name()), StoredTensor::from_tensor(&c.hi)));
    }
    Ok(out)
}

pub fn transform_set_from_entries(entries: &BTreeMap<String, StoredTensor>, prefix: &str) -> Result<TransformSet> {
    let name = format!("{prefix}meta");
    let meta: TransformSetMeta = take(entries, &name)?.parse_json(&name)?;
    let get = |n: String| take(entries, &n).map(StoredTensor::to_tensor);
    let mut transforms = BTreeMap::new();
    for m in meta.transforms {
        let p = m.placement;
        let shift = m.shift.then(|| get(format!("{prefix}shift.{p}"))).transpose()?;
        let t = AffineTransform {
            placement: p,
            kind: m.kind,
            matrix_a: get(format!("{prefix}a.{p}"))?,
            shift_delta: shift,
            schedule: m.schedule,
            mask: get(format!("{prefix}mask.{p}"))?,
        };
        transforms.insert(p, t);
    }
    let mut clips = BTreeMap::new();
    for lin in meta.clips {
        let lo = get(format!("{prefix}clip_lo.{}", lin.name()))?;
        let hi = get(format!("{prefix}clip_hi.{}", lin.name()))?;
        clips.insert(lin, ClipParams { lo, hi });
    }
    Ok(TransformSet {
        config: meta.config,
        transforms,
        clips,
    })
}

pub fn save_transforms(path: impl AsRef<Path>, sets: &[TransformSet]) -> Result<()> {
    let mut entries = Vec::new();
    for (i, ts) in sets.iter().enumerate() {
        entries.extend(transform_set_entries(ts, &block_prefix(i))?);
    }
    save_container(path, &entries)
}

pub fn load_transforms(path: impl AsRef<Path>) -> Result<Vec<TransformSet>> {
    let entries: BTreeMap<_, _> = load_container(path)?.into_iter().collect();
    let n = block_count(&entries, "meta");
    (0..n).map(|i| transform_set_from_entries(&entries, &block_prefix(i))).collect()
}

#[derive(Serialize, Deserialize)]
struct FusedMeta {
    n_heads: usize,
    precision: Precision,
    act_quant: Option<QuantConfig>,
    quantized: Vec<(Linear, QuantConfig)>,
}

/// Integer codes for on-grid weights (`u8` up to 8 bits, `u16` above), with
/// step sizes, zero points and clip scalars alongside; everything else as
/// floats.
pub fn fused_entries(fused: &FusedBlock, prefix: &str) -> Result<Entries> {
    let params = &fused.params;
    let meta = FusedMeta {
        n_heads: params.n_heads,
        precision: params.precision(),
        act_quant: fused.act_quant,
        quantized: fused.qparams.iter().map(|(l, q)| (*l, q.config)).collect(),
    };
    let mut out = vec![(format!("{prefix}meta"), StoredTensor::json(&meta)?)];
    let quantized = fused.quantized_weights()?;
    for (n, t) in params.named_tensors(prefix) {
        if n == format!("{prefix}n_heads") {
            continue;
        }
        let on_grid = Linear::ALL
            .into_iter()
            .find(|l| n == format!("{prefix}w_{}", l.name()))
            .and_then(|l| quantized.get(&l));
        let Some(q) = on_grid else {
            out.push((n, StoredTensor::from_tensor(&t)));
            continue;
        };
        let codes = if q.qparams.bits() <= 8 {
            TensorData::U8(q.codes.iter().map(|&c| c as u8).collect())
        } else {
            TensorData::U16(q.codes.clone())
        };
        let groups = vec![q.qparams.delta.len()];
        out.push((format!("{n}.codes"), StoredTensor::new(q.shape.clone(), codes)?));
        out.push((format!("{n}.delta"), StoredTensor::new(groups.clone(), TensorData::F64(q.qparams.delta.clone()))?));
        let zp = q.qparams.zero_point.iter().map(|&z| z as u16).collect();
        out.push((format!("{n}.zero_point"), StoredTensor::new(groups.clone(), TensorData::U16(zp))?));
        out.push((format!("{n}.clip_lo"), StoredTensor::new(groups.clone(), TensorData::F64(q.qparams.clip_lo.clone()))?));
        out.push((format!("{n}.clip_hi"), StoredTensor::new(groups, TensorData::F64(q.qparams.clip_hi.clone()))?));
    }
    Ok(out)
}

fn u_values(t: &StoredTensor, name: &str) -> Result<Vec<u16>> {
    match &t.data {
        TensorData::U8(v) => Ok(v.iter().map(|&c| c as u16).collect()),
        TensorData::U16(v) => Ok(v.clone()),
        _ => Err(Error::Header(format!("`{name}` must be an integer buffer"))),
    }
}

fn f64_values(t: &StoredTensor, name: &str) -> Result<Vec<f64>> {
    match &t.data {
        TensorData::F64(v) => Ok(v.clone()),
        _ => Err(Error::Header(format!("`{name}` must be f64"))),
    }
}

pub fn fused_from_entries(entries: &BTreeMap<String, StoredTensor>, prefix: &str) -> Result<FusedBlock> {
    let name = format!("{prefix}meta");
    let meta: FusedMeta = take(entries, &name)?.parse_json(&name)?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (n, t) in entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
        if !n.contains(".codes") && !n.ends_with("meta") && !n.contains(".delta") && !n.contains(".zero_point") && !n.contains(".clip_") {
            tensors.insert(n.clone(), t.to_tensor());
        }
    }
    tensors.insert(format!("{prefix}n_heads"), Tensor::vector(vec![meta.n_heads as f64]));
    let mut qparams = BTreeMap::new();
    for (lin, config) in meta.quantized {
        let w = format!("{prefix}w_{}", lin.name());
        let field = |f: &str| format!("{w}.{f}");
        let codes_t = take(entries, &field("codes"))?;
        let shape = codes_t.shape.clone();
        if shape.len() != 2 {
            return Err(Error::Header(format!("`{w}.codes` must be a matrix")));
        }
        let qp = QuantParams {
            config,
            rows: shape[0],
            cols: shape[1],
            delta: f64_values(take(entries, &field("delta"))?, &field("delta"))?,
            zero_point: u_values(take(entries, &field("zero_point"))?, &field("zero_point"))?
                .into_iter()
                .map(u32::from)
                .collect(),
            clip_lo: f64_values(take(entries, &field("clip_lo"))?, &field("clip_lo"))?,
            clip_hi: f64_values(take(entries, &field("clip_hi"))?, &field("clip_hi"))?,
        };
        qp.validate()?;
        let q = QuantizedTensor {
            codes: u_values(codes_t, &field("codes"))?,
            qparams: qp.clone(),
            shape,
            precision: meta.precision,
        };
        tensors.insert(w, q.dequantize());
        qparams.insert(lin, qp);
    }
    Ok(FusedBlock {
        params: BlockParams::from_named(&tensors, prefix)?,
        act_quant: meta.act_quant,
        qparams,
    })
}

pub fn save_fused(path: impl AsRef<Path>, blocks: &[FusedBlock]) -> Result<()> {
    let mut entries = Vec::new();
    for (i, f) in blocks.iter().enumerate() {
        entries.extend(fused_entries(f, &block_prefix(i))?);
    }
    save_container(path, &entries)
}

pub fn load_fused(path: impl AsRef<Path>) -> Result<Vec<FusedBlock>> {
    let entries: BTreeMap<_, _> = load_container(path)?.into_iter().collect();
    let n = block_count(&entries, "meta");
    (0..n).map(|i| fused_from_entries(&entries, &block_prefix(i))).collect()
}

/// Saves token ids as a calibration file: one `u16` tensor `ids`.
pub fn save_token_ids(path: impl AsRef<Path>, ids: &[Vec<u16>]) -> Result<()> {
    let tokens = ids.first().map_or(0, Vec::len);
    if ids.iter().any(|b| b.len() != tokens) {
        return Err(Error::shape("every batch of ids needs the same length"));
    }
    let flat: Vec<u16> = ids.iter().flatten().copied().collect();
    let t = StoredTensor::new(vec![ids.len(), tokens], TensorData::U16(flat))?;
    save_container(path, &[("ids".into(), t)])
}

/// Embedding row of one token: a pure function of `(seed, id)`, so a vocab
/// of any size costs nothing until a token is used.
fn embedding_row(seed: u64, id: u16, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    random_normal(1, d, &mut rng).into_data()
}

/// Calibration batches of `tokens x hidden` activations in double precision.
pub fn load_calibration(src: &CalibrationSource, hidden: usize) -> Result<Vec<Tensor>> {
    match src {
        CalibrationSource::Synthetic { seed, batches, tokens } => {
            if *batches == 0 || *tokens == 0 {
                return Err(Error::Config("calibration: batches and tokens must be positive".into()));
            }
            Ok(synthetic_batches(*seed, *batches, *tokens, hidden))
        }
        CalibrationSource::File {
            path,
            embedding_seed,
            vocab,
        } => {
            let entries: BTreeMap<_, _> = load_container(path)?.into_iter().collect();
            let ids = take(&entries, "ids")?;
            let TensorData::U16(values) = &ids.data else {
                return Err(Error::Header("`ids` must be a u16 tensor".into()));
            };
            let (batches, tokens) = match ids.shape[..] {
                [t] => (1, t),
                [b, t] => (b, t),
                _ => return Err(Error::Header(format!("`ids` must have rank 1 or 2, got {:?}", ids.shape))),
            };
            if batches == 0 || tokens == 0 {
                return Err(Error::Config("calibration file holds no tokens".into()));
            }
            if let Some(&id) = values.iter().find(|&&id| id as usize >= *vocab) {
                return Err(Error::TokenOutOfRange {
                    id: id as usize,
                    vocab: *vocab,
                });
            }
            let mut cache: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
            values
                .chunks(tokens)
                .map(|batch| {
                    let mut data = Vec::with_capacity(tokens * hidden);
                    for &id in batch {
                        data.extend_from_slice(cache.entry(id).or_insert_with(|| embedding_row(*embedding_seed, id, hidden)));
                    }
                    Tensor::matrix(tokens, hidden, data)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::fuse_block;
    use crate::optimizer::{optimize_block, OptimizerConfig};

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.afqt");
        let blocks = vec![
            BlockParams::random(64, 4, 42).unwrap(),
            BlockParams::random(64, 4, 7).unwrap().to_precision(Precision::Single),
        ];
        save_model(&path, &blocks).unwrap();
        assert_eq!(load_model(&path).unwrap(), blocks);
    }

    #[test]
    fn optimized_artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = BlockParams::random(16, 2, 42).unwrap();
        let xs = synthetic_batches(42, 2, 8, 16);
        let opt = OptimizerConfig {
            epochs: 2,
            ..OptimizerConfig::default()
        };
        let r = optimize_block(0, &p, &xs, &TransformPlacementConfig::default(), &opt).unwrap();
        let tpath = dir.path().join("t.afqt");
        save_transforms(&tpath, std::slice::from_ref(&r.transforms)).unwrap();
        assert_eq!(load_transforms(&tpath).unwrap(), vec![r.transforms.clone()]);

        let fused = fuse_block(&p, &r.transforms).unwrap();
        let fpath = dir.path().join("f.afqt");
        save_fused(&fpath, std::slice::from_ref(&fused)).unwrap();
        let back = load_fused(&fpath).unwrap();
        assert_eq!(back, vec![fused.clone()]);
        let entries = load_container(&fpath).unwrap();
        let codes = entries.iter().find(|(n, _)| n == "block0.w_q.codes").unwrap();
        assert_eq!(codes.1.data.dtype(), DType::U8);
        assert!(entries.iter().any(|(n, _)| n == "block0.w_v"));
    }

    #[test]
    fn synthetic_calibration_is_reproducible() {
        let src = CalibrationSource::Synthetic {
            seed: 0,
            batches: 1,
            tokens: 4,
        };
        assert_eq!(load_calibration(&src, 8).unwrap(), load_calibration(&src, 8).unwrap());
    }

    #[test]
    fn synthetic_calibration_is_centered() {
        let src = CalibrationSource::default();
        let xs = load_calibration(&src, 64).unwrap();
        assert_eq!(xs.len(), 8);
        let n = (8 * 128 * 64) as f64;
        let mean = xs.iter().map(Tensor::sum).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 / n.sqrt(), "{mean}");
    }

    #[test]
    fn token_file_embeds_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ids.afqt");
        save_token_ids(&path, &[vec![0, 0, 0]]).unwrap();
        let src = CalibrationSource::File {
            path: path.clone(),
            embedding_seed: 3,
            vocab: 16,
        };
        let xs = load_calibration(&src, 8).unwrap();
        assert_eq!(xs.len(), 1);
        assert_eq!(xs[0].row(0), xs[0].row(1));
        assert_eq!(xs[0].row(1), xs[0].row(2));

        save_token_ids(&path, &[vec![1, 16]]).unwrap();
        assert!(matches!(load_calibration(&src, 8), Err(Error::TokenOutOfRange { id: 16, vocab: 16 })));
    }
}
