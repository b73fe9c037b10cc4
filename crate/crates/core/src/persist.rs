//! Feature-cache files, run manifests and report rendering.
//!
//! Cache layout, all integers little-endian:
//!
//! ```text
//! offset  size   field
//! 0       4      magic "VLMD"
//! 4       4      format version (u32)
//! 8       8      rows N (u64)
//! 16      8      dim D (u64)
//! 24      1      kind (u8)
//! 25      4*N*D  payload, f32 row-major
//! ...     8      trailer length (u64)
//! ...     *      trailer, JSON
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix};

pub const MAGIC: &[u8; 4] = b"VLMD";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 25;
pub const SCHEMA_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Cache metadata besides the matrix itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheMeta {
    pub generator: String,
    /// One text per row for text caches; empty otherwise.
    pub texts: Vec<String>,
}

impl CacheMeta {
    pub fn new(generator: &str) -> Self {
        Self { generator: generator.to_string(), texts: Vec::new() }
    }
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    ids: Vec<String>,
    #[serde(default)]
    texts: Vec<String>,
    generator_id: String,
    checksum: u32,
}

pub fn encode_cache(m: &FeatureMatrix, meta: &CacheMeta) -> Result<Vec<u8>> {
    if !meta.texts.is_empty() && meta.texts.len() != m.rows() {
        return Err(Error::ShapeMismatch(format!("{} texts for {} rows", meta.texts.len(), m.rows())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u64).to_le_bytes());
    out.push(m.kind().code());
    for &x in m.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let trailer = Trailer {
        ids: m.ids().to_vec(),
        texts: meta.texts.clone(),
        generator_id: meta.generator.clone(),
        checksum: crc32fast::hash(&out[HEADER_LEN..]),
    };
    let json = serde_json::to_vec(&trailer)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CacheCorrupt(msg.into())
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| corrupt("truncated"))
}

pub fn decode_cache(bytes: &[u8]) -> Result<(FeatureMatrix, CacheMeta)> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let n = usize::try_from(read_u64(bytes, 8)?).map_err(|_| corrupt("row count overflow"))?;
    let d = usize::try_from(read_u64(bytes, 16)?).map_err(|_| corrupt("dim overflow"))?;
    let kind = FeatureKind::from_code(bytes[24]).ok_or_else(|| corrupt(format!("unknown kind {}", bytes[24])))?;
    let payload_len = n.checked_mul(d).and_then(|x| x.checked_mul(4)).ok_or_else(|| corrupt("size overflow"))?;
    let payload_end = HEADER_LEN.checked_add(payload_len).ok_or_else(|| corrupt("size overflow"))?;
    let trailer_len = read_u64(bytes, payload_end)?;
    let trailer_start = payload_end + 8;
    if (bytes.len() - trailer_start) as u64 != trailer_len {
        return Err(corrupt("length mismatch"));
    }
    let payload = &bytes[HEADER_LEN..payload_end];
    let trailer: Trailer =
        serde_json::from_slice(&bytes[trailer_start..]).map_err(|e| corrupt(format!("trailer: {e}")))?;
    if crc32fast::hash(payload) != trailer.checksum {
        return Err(corrupt("checksum mismatch"));
    }
    if trailer.ids.len() != n {
        return Err(corrupt(format!("{} ids for {n} rows", trailer.ids.len())));
    }
    let data = payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
    let m = FeatureMatrix::new(kind, trailer.ids, d, data).map_err(|e| corrupt(e.to_string()))?;
    Ok((m, CacheMeta { generator: trailer.generator_id, texts: trailer.texts }))
}

pub fn cache_write(path: &Path, m: &FeatureMatrix, meta: &CacheMeta) -> Result<()> {
    write_atomic(path, &encode_cache(m, meta)?)
}

pub fn cache_read(path: impl AsRef<Path>) -> Result<(FeatureMatrix, CacheMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|_| Error::InputMissing(path.to_path_buf()))?;
    decode_cache(&bytes)
}

/// Accuracies in percent for one trained configuration: in-distribution,
/// zero-shot OOD and few-shot OOD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub id_acc: f64,
    pub zero_shot_ood: f64,
    #[serde(default)]
    pub few_shot_ood: Option<f64>,
}

impl ResultRow {
    /// `x1/x2/x3` cell; a missing few-shot number renders as `-`.
    pub fn cell(&self) -> String {
        let few = self.few_shot_ood.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        format!("{:.1}/{:.1}/{few}", self.id_acc, self.zero_shot_ood)
    }
}

/// Everything needed to regenerate a run's report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub teacher_generator: String,
    #[serde(default)]
    pub epoch_logs: Vec<String>,
    pub results: Vec<ResultRow>,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config: serde_json::Value, seeds: Vec<u64>, teacher_generator: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            teacher_generator,
            epoch_logs: Vec::new(),
            results: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| Error::InputMissing(path.to_path_buf()))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::VersionUnsupported(m.schema_version));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path.as_ref(), &bytes)
    }
}

/// Plain-text comparison table; a pure function of the manifest.
pub fn render_report(m: &RunManifest) -> String {
    let name_w = m.results.iter().map(|r| r.name.len()).max().unwrap_or(0).max("method".len());
    let mut out = String::new();
    let _ = writeln!(out, "# teacher: {}", m.teacher_generator);
    let seeds: Vec<String> = m.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "# seeds: {}", seeds.join(","));
    let _ = writeln!(out, "{:<name_w$}  {:>6}  {:>6}  {:>6}  id/0-shot/few-shot", "method", "id", "0-shot", "few");
    for r in &m.results {
        let few = r.few_shot_ood.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        let _ =
            writeln!(out, "{:<name_w$}  {:>6.1}  {:>6.1}  {:>6}  {}", r.name, r.id_acc, r.zero_shot_ood, few, r.cell());
    }
    for (k, v) in &m.extra {
        let _ = writeln!(out, "# {k}: {v:.4}");
    }
    out
}
