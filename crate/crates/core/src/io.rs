//! Tensor files, JSON manifests and the level-table config.
//!
//! Tensor layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `NTHP` |
//! | 1 | version, `1` |
//! | 1 | dtype: `0` = f32, `1` = u8 |
//! | 1 | rank |
//! | 4 x rank | dims as u32 |
//! | rest | row-major payload |
//!
//! Every write goes to a temporary file in the target directory that is then
//! renamed over the destination.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assign::{validate_levels, LevelSpec};
use crate::error::{Error, Result};
use crate::grouping::{ParsingResult, ScoredInstance};
use crate::mask::{BinaryMask, DenseMap, LabelMap};
use crate::pipeline::Candidates;
use crate::scalar::Real;
use crate::assign::{GridTargets, LevelId};
use crate::scene::{GroundTruthInstance, GroundTruthScene, InstanceKind};
use crate::synth::{LevelOutputs, OracleOutputs};
use crate::umpp::{CategoryGrid, CoefficientGrid, PrototypeBank};

pub const MAGIC: &[u8; 4] = b"NTHP";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }
}

/// Decoded tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl Tensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            Tensor::F32 { dims, .. } | Tensor::U8 { dims, .. } => dims,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary sibling file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn encode(dtype: Dtype, dims: &[usize], payload: &[u8]) -> Result<Vec<u8>> {
    let rank = u8::try_from(dims.len()).map_err(|_| Error::param("rank", format!("{} exceeds 255", dims.len())))?;
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), rank]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::param("dims", format!("{d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

/// Serialises an f32 tensor.
pub fn encode_f32(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(Dtype::F32, dims, &payload)
}

/// Serialises a u8 tensor.
pub fn encode_u8(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    encode(Dtype::U8, dims, data)
}

/// Parses a tensor file image. `path` is only used in error messages.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 7 {
        return Err(truncated(7));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version: bytes[4],
        });
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::U8,
        other => {
            return Err(Error::InvalidTensor {
                path: path.to_path_buf(),
                reason: format!("unknown dtype code {other}"),
            })
        }
    };
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::InvalidTensor {
            path: path.to_path_buf(),
            reason: "payload size overflows".into(),
        })?;
    let expected = header + count;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::InvalidTensor {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let payload = &bytes[header..];
    Ok(match dtype {
        Dtype::F32 => Tensor::F32 {
            dims,
            data: payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        },
        Dtype::U8 => Tensor::U8 {
            dims,
            data: payload.to_vec(),
        },
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(path, &bytes)
}

fn mismatch(path: &Path, expected: Dtype, found: &Tensor) -> Error {
    Error::DtypeMismatch {
        path: path.to_path_buf(),
        expected: expected.name(),
        found: match found {
            Tensor::F32 { .. } => "f32".into(),
            Tensor::U8 { .. } => "u8".into(),
        },
    }
}

fn invalid(path: &Path, e: Error) -> Error {
    Error::InvalidTensor {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes a dense map as f32.
pub fn write_dense<T: Real>(path: &Path, map: &DenseMap<T>) -> Result<()> {
    let data: Vec<f32> = map.data().iter().map(|v| v.as_f64() as f32).collect();
    write_atomic(path, &encode_f32(map.dims(), &data)?)
}

/// Reads an f32 tensor as a dense map; non-finite values are rejected.
pub fn read_dense<T: Real>(path: &Path) -> Result<DenseMap<T>> {
    match read_tensor(path)? {
        Tensor::F32 { dims, data } => {
            DenseMap::new(dims, data.into_iter().map(|v| T::lit(v as f64)).collect()).map_err(|e| invalid(path, e))
        }
        other => Err(mismatch(path, Dtype::F32, &other)),
    }
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_u8(&mask.dims(), mask.data())?)
}

/// Reads a rank-2 u8 tensor whose values are all 0 or 1.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    match read_tensor(path)? {
        Tensor::U8 { dims, data } => {
            if dims.len() != 2 {
                return Err(invalid(path, Error::dims(&[0, 0], &dims)));
            }
            BinaryMask::from_vec(dims[0], dims[1], data).map_err(|e| invalid(path, e))
        }
        other => Err(mismatch(path, Dtype::U8, &other)),
    }
}

/// Writes a label map as u8; every label must be at most 255.
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let data = labels
        .data()
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::InvalidValue(format!("label {v} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write_atomic(path, &encode_u8(&labels.dims(), &data)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_tensor(path)? {
        Tensor::U8 { dims, data } => {
            if dims.len() != 2 {
                return Err(invalid(path, Error::dims(&[0, 0], &dims)));
            }
            LabelMap::from_vec(dims[0], dims[1], data.into_iter().map(u32::from).collect()).map_err(|e| invalid(path, e))
        }
        other => Err(mismatch(path, Dtype::U8, &other)),
    }
}

/// Serialises `value` as pretty JSON with a trailing newline.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn resolve(manifest: &Path, file: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub kind: InstanceKind,
    pub category: u32,
    pub parent: Option<usize>,
    pub mask_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub image_size: [usize; 2],
    pub instances: Vec<ManifestInstance>,
}

/// Writes `scene.json` plus one mask file per instance into `dir`.
pub fn save_scene(dir: &Path, scene: &GroundTruthScene) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut instances = Vec::with_capacity(scene.instances.len());
    for (i, inst) in scene.instances.iter().enumerate() {
        let mask_file = format!("mask_{i:04}.nthp");
        write_mask(&dir.join(&mask_file), &inst.mask)?;
        instances.push(ManifestInstance {
            kind: inst.kind,
            category: inst.category,
            parent: inst.parent,
            mask_file,
        });
    }
    let path = dir.join("scene.json");
    write_json(
        &path,
        &SceneManifest {
            image_size: [scene.height, scene.width],
            instances,
        },
    )?;
    Ok(path)
}

/// Loads and validates a scene manifest and its mask files.
pub fn load_scene(path: &Path) -> Result<GroundTruthScene> {
    let manifest: SceneManifest = read_json(path)?;
    let [height, width] = manifest.image_size;
    let instances = manifest
        .instances
        .iter()
        .map(|m| {
            Ok(GroundTruthInstance {
                kind: m.kind,
                category: m.category,
                parent: m.parent,
                mask: read_mask(&resolve(path, &m.mask_file))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = GroundTruthScene {
        height,
        width,
        instances,
    };
    scene.validate(true).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub category: u32,
    pub score: f64,
    pub mask_file: String,
}

/// Scored part and human candidates of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateManifest {
    pub image_size: [usize; 2],
    pub parts: Vec<CandidateRecord>,
    pub humans: Vec<CandidateRecord>,
}

fn save_instances<T: Real>(dir: &Path, prefix: &str, items: &[ScoredInstance<T>]) -> Result<Vec<CandidateRecord>> {
    items
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mask_file = format!("{prefix}_{i:04}.nthp");
            write_mask(&dir.join(&mask_file), &c.mask)?;
            Ok(CandidateRecord {
                category: c.category,
                score: c.score.as_f64(),
                mask_file,
            })
        })
        .collect()
}

pub fn save_candidates<T: Real>(
    dir: &Path,
    image_size: [usize; 2],
    parts: &[ScoredInstance<T>],
    humans: &[ScoredInstance<T>],
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = CandidateManifest {
        image_size,
        parts: save_instances(dir, "part", parts)?,
        humans: save_instances(dir, "human", humans)?,
    };
    let path = dir.join("candidates.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_candidates<T: Real>(path: &Path) -> Result<Candidates<T>> {
    let manifest: CandidateManifest = read_json(path)?;
    let load = |records: &[CandidateRecord]| {
        records
            .iter()
            .map(|r| {
                let mask = read_mask(&resolve(path, &r.mask_file))?;
                if mask.dims() != manifest.image_size {
                    return Err(Error::dims(&manifest.image_size, &mask.dims()));
                }
                ScoredInstance::new(mask, r.category, T::lit(r.score))
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(Candidates {
        parts: load(&manifest.parts)?,
        humans: load(&manifest.humans)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub parsing_score: f64,
    /// u8 label map: 0 background, otherwise part class + 1.
    pub category_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub image_size: [usize; 2],
    pub results: Vec<ResultRecord>,
}

pub fn save_results<T: Real>(dir: &Path, image_size: [usize; 2], results: &[ParsingResult<T>]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let category_file = format!("result_{i:04}.nthp");
        write_labels(&dir.join(&category_file), &r.category_map)?;
        records.push(ResultRecord {
            parsing_score: r.parsing_score.as_f64(),
            category_file,
        });
    }
    let path = dir.join("results.json");
    write_json(&path, &ResultManifest { image_size, results: records })?;
    Ok(path)
}

/// Loads results; the human mask is rebuilt as the support of the label map.
pub fn load_results<T: Real>(path: &Path) -> Result<Vec<ParsingResult<T>>> {
    let manifest: ResultManifest = read_json(path)?;
    manifest
        .results
        .iter()
        .map(|r| {
            let labels = read_labels(&resolve(path, &r.category_file))?;
            if labels.dims() != manifest.image_size {
                return Err(Error::dims(&manifest.image_size, &labels.dims()));
            }
            let score = r.parsing_score;
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::InvalidValue(format!("parsing score {score} outside [0, 1]")));
            }
            let human_mask = labels.support();
            if human_mask.is_empty() {
                return Err(Error::EmptyMask);
            }
            Ok(ParsingResult {
                human_mask,
                category_map: labels,
                parsing_score: T::lit(score),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelOutputRecord {
    pub level: LevelId,
    pub kind: InstanceKind,
    /// `K x S x S` coefficients.
    pub coefficients: String,
    /// `C x S x S` class probabilities.
    pub categories: String,
}

/// Prototypes and per-level grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputsManifest {
    pub image_size: [usize; 2],
    /// Image pixels per prototype pixel.
    pub stride: usize,
    /// `K x H x W` prototype logits.
    pub prototypes: String,
    pub levels: Vec<LevelOutputRecord>,
}

pub fn save_outputs<T: Real>(dir: &Path, image_size: [usize; 2], outputs: &OracleOutputs<T>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let prototypes = "prototypes.nthp".to_string();
    write_dense(&dir.join(&prototypes), outputs.prototypes.map())?;
    let mut levels = Vec::with_capacity(outputs.levels.len());
    for l in &outputs.levels {
        let coefficients = format!("coefficients_{}.nthp", l.level);
        let categories = format!("categories_{}.nthp", l.level);
        write_dense(&dir.join(&coefficients), l.coefficients.map())?;
        write_dense(&dir.join(&categories), l.categories.map())?;
        levels.push(LevelOutputRecord {
            level: l.level,
            kind: l.kind,
            coefficients,
            categories,
        });
    }
    let path = dir.join("outputs.json");
    write_json(
        &path,
        &OutputsManifest {
            image_size,
            stride: outputs.stride,
            prototypes,
            levels,
        },
    )?;
    Ok(path)
}

/// Loads network outputs; prototype extent times stride must equal the image size.
pub fn load_outputs<T: Real>(path: &Path) -> Result<([usize; 2], OracleOutputs<T>)> {
    let manifest: OutputsManifest = read_json(path)?;
    let bad = |reason: String| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let prototypes = PrototypeBank::new(read_dense(&resolve(path, &manifest.prototypes))?)?;
    let (h, w) = prototypes.extent();
    if [h * manifest.stride, w * manifest.stride] != manifest.image_size {
        return Err(bad(format!(
            "{h}x{w} prototypes at stride {} do not cover {:?}",
            manifest.stride, manifest.image_size
        )));
    }
    let levels = manifest
        .levels
        .iter()
        .map(|l| {
            let coefficients = CoefficientGrid::new(read_dense(&resolve(path, &l.coefficients))?)?;
            let categories = CategoryGrid::new(read_dense(&resolve(path, &l.categories))?)?;
            if coefficients.grid() != categories.grid() {
                return Err(bad(format!("level {} grids differ", l.level)));
            }
            Ok(LevelOutputs {
                level: l.level,
                kind: l.kind,
                coefficients,
                categories,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        manifest.image_size,
        OracleOutputs {
            prototypes,
            levels,
            stride: manifest.stride,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTarget {
    pub cell: usize,
    pub instance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTargetRecord {
    pub level: LevelId,
    pub kind: InstanceKind,
    pub grid: usize,
    /// Row-major `S x S` labels: 0 background, otherwise class + 1.
    pub category_target: Vec<u32>,
    pub mask_targets: Vec<CellTarget>,
}

impl From<&GridTargets> for LevelTargetRecord {
    fn from(t: &GridTargets) -> Self {
        Self {
            level: t.level,
            kind: t.kind,
            grid: t.grid,
            category_target: t.category_target.clone(),
            mask_targets: t
                .mask_targets
                .iter()
                .map(|(&cell, m)| CellTarget {
                    cell,
                    instance: m.instance,
                })
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct LevelTable {
    levels: Vec<LevelSpec>,
}

/// Parses a TOML level table of `[[levels]]` entries.
pub fn parse_levels(path: &Path, text: &str) -> Result<Vec<LevelSpec>> {
    let table: LevelTable = toml::from_str(text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    validate_levels(&table.levels)?;
    Ok(table.levels)
}

pub fn load_levels(path: &Path) -> Result<Vec<LevelSpec>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_levels(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode_u8(&[2, 3], &[0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(&bytes[..7], b"NTHP\x01\x01\x02");
        assert_eq!(&bytes[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 15 + 6);
    }

    #[test]
    fn float_roundtrip_is_bit_exact() {
        let data = vec![0.1f32, -0.0, f32::MIN_POSITIVE, 1e30, 3.5, -2.25, 7.0, 0.0, 1.0, 2.0, 4.0, 8.0];
        let bytes = encode_f32(&[3, 4], &data).unwrap();
        match decode(Path::new("x"), &bytes).unwrap() {
            Tensor::F32 { dims, data: back } => {
                assert_eq!(dims, vec![3, 4]);
                let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = back.iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decode_errors_are_distinct() {
        let p = Path::new("x");
        let good = encode_f32(&[2], &[1.0, 2.0]).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(p, &bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(p, &bad), Err(Error::UnsupportedVersion { version: 2, .. })));
        assert!(matches!(decode(p, &good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(p, &good[..9]), Err(Error::Truncated { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(p, &long), Err(Error::InvalidTensor { .. })));
        assert!(matches!(decode(p, b"NT"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn level_table_parses() {
        let text = r#"
            [[levels]]
            level = "F1"
            grid = 8
            kind = "part"

            [[levels]]
            level = "F5"
            grid = 4
            kind = "human"
        "#;
        let levels = parse_levels(Path::new("levels.toml"), text).unwrap();
        assert_eq!(levels.len(), 2);
        assert_eq!(levels[0].grid, 8);
        assert!(parse_levels(Path::new("x"), "levels = 3").is_err());
    }
}
