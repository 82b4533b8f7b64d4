//! Checkpoint directories: a JSON manifest plus one binary blob per
//! parameter block, so single branches can be shipped and loaded alone.
//!
//! Blob layout (little-endian): magic `CDNG`, `u32` version, `u8` dtype
//! (0 = f32, 1 = bf16), `u8` rank, two reserved bytes, `rank` × `u64` dims,
//! then the values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use half::bf16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::continual::{ChunkSchedule, ModelRepo, Provenance, TrainConfig};
use crate::encoders::SpatialEncoder;
use crate::error::{Error, Result};
use crate::field::{table_blocks, Branch};
use crate::renderer::{OccupancyGrid, SceneBox};
use crate::scene::{read_json, sha256_hex, write_json};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const BLOB_MAGIC: [u8; 4] = *b"CDNG";
pub const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    Bf16,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::Bf16 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::Bf16 => 2,
        }
    }
}

/// A decoded blob.
#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    Bf16(Vec<bf16>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: BlobData,
}

fn header(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * shape.len());
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(shape.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    out
}

pub fn encode_f32(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = header(DType::F32, shape);
    out.reserve(4 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_bf16(shape: &[usize], data: &[bf16]) -> Vec<u8> {
    let mut out = header(DType::Bf16, shape);
    out.reserve(2 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<Blob> {
    let bad = |d: String| Error::format(path, d);
    if bytes.len() < HEADER_LEN || bytes[..4] != BLOB_MAGIC {
        return Err(bad("missing blob magic".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != BLOB_VERSION {
        return Err(bad(format!("unsupported blob version {version}")));
    }
    let dtype = match bytes[8] {
        0 => DType::F32,
        1 => DType::Bf16,
        c => return Err(bad(format!("unknown dtype code {c}"))),
    };
    let rank = bytes[9] as usize;
    let body = HEADER_LEN + 8 * rank;
    if bytes.len() < body {
        return Err(bad("truncated blob header".into()));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = HEADER_LEN + 8 * i;
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[o..o + 8]);
            u64::from_le_bytes(b) as usize
        })
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[body..];
    if payload.len() != n * dtype.width() {
        return Err(bad(format!(
            "expected {} payload bytes for shape {shape:?}, found {}",
            n * dtype.width(),
            payload.len()
        )));
    }
    let data = match dtype {
        DType::F32 => BlobData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::Bf16 => BlobData::Bf16(
            payload
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
    };
    Ok(Blob { shape, data })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub bytes: u64,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub schedule: ChunkSchedule,
    pub bounds: SceneBox,
    pub provenance: Provenance,
    /// Trained branch indices.
    pub branches: Vec<usize>,
    /// Relative path → record, for every blob.
    pub files: BTreeMap<String, FileRecord>,
}

pub fn base_file(i: usize) -> String {
    format!("base/{i}.bin")
}

pub fn branch_dir(k: usize) -> String {
    format!("branch-{k:04}")
}

pub fn branch_file(k: usize, block: &str) -> String {
    format!("{}/{block}.bin", branch_dir(k))
}

pub const GRID_FILE: &str = "grid.bin";

pub fn snapshot_file(k: usize) -> String {
    format!("grid-snapshots/{k:04}.bin")
}

struct BlobWriter<'a> {
    dir: &'a Path,
    previous: BTreeMap<String, FileRecord>,
    files: BTreeMap<String, FileRecord>,
}

impl BlobWriter<'_> {
    fn write(&mut self, rel: &str, bytes: Vec<u8>, dtype: DType, shape: Vec<usize>) -> Result<()> {
        let (dir, files) = (self.dir, &mut self.files);
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let sha = sha256_hex(&bytes);
        let unchanged = self.previous.get(rel).is_some_and(|r| r.sha256 == sha) && path.is_file();
        if !unchanged {
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
        files.insert(
            rel.to_string(),
            FileRecord {
                sha256: sha,
                bytes: bytes.len() as u64,
                dtype,
                shape,
            },
        );
        Ok(())
    }
}

fn grid_blob(g: &OccupancyGrid) -> (Vec<u8>, Vec<usize>) {
    let r = g.resolution();
    let shape = vec![r, r, r];
    (encode_bf16(&shape, g.density()), shape)
}

/// Writes (or refreshes) a checkpoint directory. Blobs whose content is
/// unchanged since the last save are not rewritten.
pub fn save_checkpoint(repo: &ModelRepo, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join("manifest.json");
    let previous = match mpath.is_file() {
        true => read_json::<CheckpointManifest>(&mpath)
            .map(|m| m.files)
            .unwrap_or_default(),
        false => BTreeMap::new(),
    };
    let mut w = BlobWriter {
        dir,
        previous,
        files: BTreeMap::new(),
    };
    for (i, b) in table_blocks("base", &repo.base).into_iter().enumerate() {
        w.write(
            &base_file(i),
            encode_f32(&b.shape, b.data),
            DType::F32,
            b.shape,
        )?;
    }
    for (k, branch) in &repo.branches {
        for b in branch.param_blocks() {
            w.write(
                &branch_file(*k, &b.name),
                encode_f32(&b.shape, b.data),
                DType::F32,
                b.shape,
            )?;
        }
    }
    let (bytes, shape) = grid_blob(&repo.grid);
    w.write(GRID_FILE, bytes, DType::Bf16, shape)?;
    for (k, g) in &repo.grid_snapshots {
        let (bytes, shape) = grid_blob(g);
        w.write(&snapshot_file(*k), bytes, DType::Bf16, shape)?;
    }
    let files = w.files;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: repo.config.clone(),
        schedule: repo.schedule.clone(),
        bounds: repo.bounds,
        provenance: repo.provenance.clone(),
        branches: repo.branches.keys().copied().collect(),
        files,
    };
    let tmp = dir.join("manifest.json.tmp");
    write_json(&tmp, &manifest)?;
    fs::rename(&tmp, &mpath).map_err(|e| Error::io(&mpath, e))
}

fn read_blob(dir: &Path, rel: &str, manifest: &CheckpointManifest) -> Result<Option<Blob>> {
    let path = dir.join(rel);
    let record = manifest.files.get(rel).ok_or_else(|| {
        Error::format(dir.join("manifest.json"), format!("no record for `{rel}`"))
    })?;
    if !path.is_file() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != record.sha256 {
        return Err(Error::format(&path, "content hash differs from manifest"));
    }
    let blob = decode_blob(&bytes, &path)?;
    if blob.shape != record.shape {
        return Err(Error::format(
            &path,
            format!(
                "shape {:?} differs from manifest {:?}",
                blob.shape, record.shape
            ),
        ));
    }
    Ok(Some(blob))
}

fn f32_data(blob: Blob, path: PathBuf, want: usize) -> Result<Vec<f32>> {
    match blob.data {
        BlobData::F32(v) if v.len() == want => Ok(v),
        BlobData::F32(v) => Err(Error::format(
            path,
            format!("expected {want} values, found {}", v.len()),
        )),
        BlobData::Bf16(_) => Err(Error::format(path, "expected f32 data")),
    }
}

fn load_grid(dir: &Path, rel: &str, m: &CheckpointManifest) -> Result<Option<OccupancyGrid>> {
    let Some(blob) = read_blob(dir, rel, m)? else {
        return Ok(None);
    };
    match blob.data {
        BlobData::Bf16(v) => Ok(Some(OccupancyGrid::from_density(
            m.config.occupancy,
            m.bounds,
            v,
        )?)),
        BlobData::F32(_) => Err(Error::format(dir.join(rel), "expected bf16 occupancy data")),
    }
}

/// Loads a checkpoint. Base tables and grid must be present; branches whose
/// files are absent are left out of the repo (see [`ModelRepo::missing_branches`]).
pub fn load_checkpoint(dir: &Path) -> Result<ModelRepo> {
    let mpath = dir.join("manifest.json");
    if !mpath.is_file() {
        return Err(Error::format(&mpath, "checkpoint manifest not found"));
    }
    let raw: serde_json::Value = read_json(&mpath)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::format(
            &mpath,
            format!("unsupported checkpoint format version {version:?}"),
        ));
    }
    let m: CheckpointManifest = serde_json::from_value(raw).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    m.config.validate()?;
    let fc = &m.config.field;
    let mut base = SpatialEncoder::<f32>::zeros(fc.layout, fc.spatial, m.config.p1)?;
    for (i, t) in base.tables_mut().into_iter().enumerate() {
        let rel = base_file(i);
        let blob = read_blob(dir, &rel, &m)?
            .ok_or_else(|| Error::format(dir.join(&rel), "base table file is missing"))?;
        let n = t.data().len();
        t.data_mut()
            .copy_from_slice(&f32_data(blob, dir.join(&rel), n)?);
    }
    let grid = load_grid(dir, GRID_FILE, &m)?
        .ok_or_else(|| Error::format(dir.join(GRID_FILE), "occupancy grid file is missing"))?;
    let mut branches = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    'branches: for &k in &m.branches {
        let mut branch = Branch::<f32>::init(k, fc, m.config.p2, &mut rng)?;
        let names: Vec<String> = branch.param_blocks().into_iter().map(|b| b.name).collect();
        let mut data = Vec::with_capacity(names.len());
        for name in &names {
            let rel = branch_file(k, name);
            match read_blob(dir, &rel, &m)? {
                Some(blob) => data.push((blob, dir.join(&rel))),
                None => continue 'branches,
            }
        }
        for (dst, (blob, path)) in branch.blocks_mut().into_iter().zip(data) {
            let n = dst.len();
            dst.copy_from_slice(&f32_data(blob, path, n)?);
        }
        branches.insert(k, branch);
    }
    let mut grid_snapshots = BTreeMap::new();
    for k in 0..m.schedule.n_chunks() {
        let rel = snapshot_file(k);
        if m.files.contains_key(&rel) {
            if let Some(g) = load_grid(dir, &rel, &m)? {
                grid_snapshots.insert(k, g);
            }
        }
    }
    Ok(ModelRepo {
        config: m.config,
        schedule: m.schedule,
        bounds: m.bounds,
        base,
        branches,
        grid,
        grid_snapshots,
        provenance: m.provenance,
    })
}

/// Total size in bytes of every blob file listed by the manifest.
pub fn blob_bytes_on_disk(dir: &Path) -> Result<u64> {
    let m: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let mut total = 0;
    for rel in m.files.keys() {
        let p = dir.join(rel);
        if let Ok(meta) = fs::metadata(&p) {
            total += meta.len();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let data = [1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e7, 7.0, 8.0];
        let bytes = encode_f32(&[2, 3], &data);
        assert_eq!(&bytes[..4], b"CDNG");
        let b = decode_blob(&bytes, Path::new("x")).unwrap();
        assert_eq!(b.shape, vec![2, 3]);
        match b.data {
            BlobData::F32(v) => {
                assert!(v.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()))
            }
            _ => panic!("wrong dtype"),
        }
        let g = [bf16::from_f32(0.5), bf16::from_f32(100.0)];
        let b = decode_blob(&encode_bf16(&[2], &g), Path::new("x")).unwrap();
        assert_eq!(b.data, BlobData::Bf16(g.to_vec()));
    }

    #[test]
    fn blob_rejects_corruption() {
        let mut bytes = encode_f32(&[2], &[1.0, 2.0]);
        assert!(decode_blob(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            decode_blob(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
        let mut bytes = encode_f32(&[2], &[1.0, 2.0]);
        bytes[4] = 9;
        assert!(decode_blob(&bytes, Path::new("x")).is_err());
    }
}
