//! File formats: rasters (`CVRT` + world file), trajectory and pair-manifest
//! CSV, model checkpoints (`CVSM`), embedding indexes (`CVIX`), localization
//! traces (CSV), particle clouds (`CVPC`), and canonical JSON reports.
//!
//! Binary numbers are little-endian. Every write goes to a temporary file in
//! the destination directory and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EncoderParams, ModelMeta, SiameseModel};
use crate::error::{Error, Result};
use crate::filter::{Particle, ParticleSet, TraceRow};
use crate::geo::{GeoRaster, GeoTransform, Pose2D};
use crate::matching::EmbeddingIndex;
use crate::sim::{derive_controls_from_poses, Control, TrajectoryStep};
use crate::embed::PairRecord;

pub const RASTER_MAGIC: &[u8; 4] = b"CVRT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVSM";
pub const INDEX_MAGIC: &[u8; 4] = b"CVIX";
pub const CLOUD_MAGIC: &[u8; 4] = b"CVPC";
pub const RASTER_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u16 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{format}: bad magic {found:?}")]
    BadMagic { format: &'static str, found: String },

    #[error("{format}: unsupported version {found}")]
    UnsupportedVersion { format: &'static str, found: u16 },

    #[error("{format}: truncated reading {field} at byte offset {offset}")]
    Truncated {
        format: &'static str,
        field: &'static str,
        offset: usize,
    },

    #[error("{format}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum {
        format: &'static str,
        stored: u32,
        computed: u32,
    },

    #[error("{format}: invalid {field}: {reason}")]
    Field {
        format: &'static str,
        field: &'static str,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn field(format: &'static str, field: &'static str, reason: impl Into<String>) -> Error {
    FormatError::Field {
        format,
        field,
        reason: reason.into(),
    }
    .into()
}

/// Write `bytes` to `path` atomically (temporary sibling + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Little-endian cursor that reports the byte offset of short reads.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                format: self.format,
                field,
                offset: self.pos,
            }
            .into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(FormatError::BadMagic {
                format: self.format,
                found: String::from_utf8_lossy(m).into_owned(),
            }
            .into());
        }
        Ok(())
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(field(self.format, "length", format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Split off and verify a CRC32 trailer over everything before it.
fn check_crc<'a>(bytes: &'a [u8], format: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            format,
            field: "crc",
            offset: bytes.len(),
        }
        .into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum {
            format,
            stored,
            computed,
        }
        .into());
    }
    Ok(body)
}

fn push_crc(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

fn usize_to_u32(v: usize, format: &'static str, name: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| field(format, name, format!("{v} exceeds u32")))
}

// ---------------------------------------------------------------- raster

pub fn encode_raster(raster: &GeoRaster) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(18 + raster.data().len() * 4 + 4);
    b.extend_from_slice(RASTER_MAGIC);
    b.extend_from_slice(&RASTER_VERSION.to_le_bytes());
    for (v, name) in [
        (raster.width(), "width"),
        (raster.height(), "height"),
        (raster.channels(), "channels"),
    ] {
        b.extend_from_slice(&usize_to_u32(v, "raster", name)?.to_le_bytes());
    }
    for v in raster.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    Ok(push_crc(b))
}

/// Decodes pixels; the transform comes from the companion world file.
pub fn decode_raster(bytes: &[u8], transform: GeoTransform) -> Result<GeoRaster> {
    let body = check_crc(bytes, "raster")?;
    let mut c = Cursor::new(body, "raster");
    c.magic(RASTER_MAGIC)?;
    let version = c.u16("version")?;
    if version != RASTER_VERSION {
        return Err(FormatError::UnsupportedVersion {
            format: "raster",
            found: version,
        }
        .into());
    }
    let w = c.u32("width")? as usize;
    let h = c.u32("height")? as usize;
    let ch = c.u32("channels")? as usize;
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(ch))
        .ok_or_else(|| field("raster", "dimensions", "overflow"))?;
    if c.remaining() != n * 4 {
        return Err(field(
            "raster",
            "payload",
            format!("{w}x{h}x{ch} needs {} bytes, found {}", n * 4, c.remaining()),
        ));
    }
    let data = (0..n).map(|_| c.f32("pixel")).collect::<Result<Vec<_>>>()?;
    GeoRaster::new(w, h, ch, data, transform)
}

/// Companion world-file path: same stem, `.wld` extension.
pub fn world_file_path(raster_path: &Path) -> PathBuf {
    raster_path.with_extension("wld")
}

pub fn save_raster(path: &Path, raster: &GeoRaster) -> Result<()> {
    write_atomic(path, &encode_raster(raster)?)?;
    write_atomic(&world_file_path(path), raster.transform().to_world_file().as_bytes())
}

pub fn load_raster(path: &Path) -> Result<GeoRaster> {
    let wld_path = world_file_path(path);
    let wld = fs::read_to_string(&wld_path).map_err(io_err(&wld_path))?;
    let transform = GeoTransform::from_world_file(&wld)?;
    decode_raster(&read_file(path)?, transform)
}

// ---------------------------------------------------------------- CSV helpers

fn csv_err(path: &Path, message: impl std::fmt::Display) -> Error {
    FormatError::Csv {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
    .into()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(path, e))?;
    write_atomic(path, &bytes)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let found = r.headers().map_err(|e| csv_err(path, e))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(csv_err(
            path,
            format!("expected header {:?}, found {:?}", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

// ---------------------------------------------------------------- trajectory

pub const TRAJECTORY_HEADER: [&str; 8] = ["t", "x", "y", "theta", "v", "omega", "v_noisy", "omega_noisy"];

#[derive(Debug, Serialize, Deserialize)]
struct TrajRow {
    t: f64,
    x: f64,
    y: f64,
    theta: f64,
    v: f64,
    omega: f64,
    v_noisy: f64,
    omega_noisy: f64,
}

pub fn save_trajectory(path: &Path, steps: &[TrajectoryStep]) -> Result<()> {
    let rows: Vec<TrajRow> = steps
        .iter()
        .map(|s| TrajRow {
            t: s.t,
            x: s.pose.x,
            y: s.pose.y,
            theta: s.pose.theta,
            v: s.control.v,
            omega: s.control.omega,
            v_noisy: s.noisy.v,
            omega_noisy: s.noisy.omega,
        })
        .collect();
    write_csv(path, &rows, &TRAJECTORY_HEADER)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryStep>> {
    let rows: Vec<TrajRow> = read_csv(path, &TRAJECTORY_HEADER)?;
    if rows.len() < 2 {
        return Err(Error::input(format!(
            "{}: >=2 poses required, found {}",
            path.display(),
            rows.len()
        )));
    }
    // timestamps must increase; reuse the control-derivation check
    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let poses: Vec<Pose2D> = rows.iter().map(|r| Pose2D::new(r.x, r.y, r.theta)).collect();
    derive_controls_from_poses(&times, &poses)?;
    Ok(rows
        .iter()
        .map(|r| TrajectoryStep {
            t: r.t,
            pose: Pose2D {
                x: r.x,
                y: r.y,
                theta: r.theta,
            },
            control: Control { v: r.v, omega: r.omega },
            noisy: Control {
                v: r.v_noisy,
                omega: r.omega_noisy,
            },
        })
        .collect())
}

// ---------------------------------------------------------------- pair manifest

pub const PAIRS_HEADER: [&str; 5] = ["ground", "sat_x", "sat_y", "sat_theta", "label"];

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    ground: usize,
    sat_x: f64,
    sat_y: f64,
    sat_theta: f64,
    label: u8,
}

pub fn save_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let rows: Vec<PairRow> = pairs
        .iter()
        .map(|p| PairRow {
            ground: p.ground,
            sat_x: p.sat_pose.x,
            sat_y: p.sat_pose.y,
            sat_theta: p.sat_pose.theta,
            label: u8::from(p.label),
        })
        .collect();
    write_csv(path, &rows, &PAIRS_HEADER)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let rows: Vec<PairRow> = read_csv(path, &PAIRS_HEADER)?;
    rows.into_iter()
        .map(|r| {
            if r.label > 1 {
                return Err(csv_err(path, format!("label must be 0 or 1, found {}", r.label)));
            }
            Ok(PairRecord {
                ground: r.ground,
                sat_pose: Pose2D {
                    x: r.sat_x,
                    y: r.sat_y,
                    theta: r.sat_theta,
                },
                label: r.label == 1,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- checkpoint

/// Serialized checkpoint; parameters are stored as f32.
pub fn encode_checkpoint(model: &SiameseModel) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&canonical(&model.meta())?)?;
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&usize_to_u32(meta.len(), "checkpoint", "config length")?.to_le_bytes());
    b.extend_from_slice(&meta);
    for params in [&model.ground, &model.sat] {
        for t in params.tensors() {
            for v in t {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(push_crc(b))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SiameseModel> {
    let body = check_crc(bytes, "checkpoint")?;
    let mut c = Cursor::new(body, "checkpoint");
    c.magic(CHECKPOINT_MAGIC)?;
    let version = c.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            format: "checkpoint",
            found: version,
        }
        .into());
    }
    let len = c.u32("config length")? as usize;
    let meta: ModelMeta = serde_json::from_slice(c.take(len, "config")?)
        .map_err(|e| field("checkpoint", "config", e.to_string()))?;
    let (mut ground, mut sat) = SiameseModel::zero_params(&meta.config)?;
    for params in [&mut ground, &mut sat] {
        fill_params(&mut c, params)?;
    }
    c.finish()?;
    SiameseModel::from_parts(meta, ground, sat)
}

fn fill_params(c: &mut Cursor<'_>, params: &mut EncoderParams) -> Result<()> {
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from(c.f32("parameters")?);
        }
    }
    Ok(())
}

/// Model fingerprint: the CRC32 trailer of its checkpoint encoding.
pub fn checkpoint_fingerprint(bytes: &[u8]) -> Result<u32> {
    check_crc(bytes, "checkpoint")?;
    Ok(u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes")))
}

pub fn model_fingerprint(model: &SiameseModel) -> Result<u32> {
    checkpoint_fingerprint(&encode_checkpoint(model)?)
}

pub fn save_checkpoint(path: &Path, model: &SiameseModel) -> Result<u32> {
    let bytes = encode_checkpoint(model)?;
    write_atomic(path, &bytes)?;
    checkpoint_fingerprint(&bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(SiameseModel, u32)> {
    let bytes = read_file(path)?;
    let model = decode_checkpoint(&bytes)?;
    Ok((model, checkpoint_fingerprint(&bytes)?))
}

// ---------------------------------------------------------------- index

/// `CVIX`, entry count, entries (pose as 3 f64 + d f32), model fingerprint.
/// The embedding length is implied by the file size.
pub fn encode_index(index: &EmbeddingIndex) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(12 + index.len() * (24 + 4 * index.dim()));
    b.extend_from_slice(INDEX_MAGIC);
    b.extend_from_slice(&usize_to_u32(index.len(), "index", "entry count")?.to_le_bytes());
    for i in 0..index.len() {
        let p = index.poses()[i];
        for v in [p.x, p.y, p.theta] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in index.embedding(i) {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b.extend_from_slice(&index.fingerprint().to_le_bytes());
    Ok(b)
}

pub fn decode_index(bytes: &[u8]) -> Result<EmbeddingIndex> {
    let mut c = Cursor::new(bytes, "index");
    c.magic(INDEX_MAGIC)?;
    let n = c.u32("entry count")? as usize;
    if n == 0 {
        return Err(field("index", "entry count", "index is empty"));
    }
    let payload = c.remaining().checked_sub(4).ok_or(FormatError::Truncated {
        format: "index",
        field: "fingerprint",
        offset: c.pos,
    })?;
    if payload % n != 0 || (payload / n) < 24 || !(payload / n - 24).is_multiple_of(4) || payload / n == 24 {
        return Err(field("index", "entries", format!("{payload} bytes do not split into {n} entries")));
    }
    let dim = (payload / n - 24) / 4;
    let mut poses = Vec::with_capacity(n);
    let mut emb = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let x = c.f64("pose")?;
        let y = c.f64("pose")?;
        let theta = c.f64("pose")?;
        poses.push(Pose2D { x, y, theta });
        for _ in 0..dim {
            emb.push(c.f32("embedding")?);
        }
    }
    let fp = c.u32("fingerprint")?;
    c.finish()?;
    EmbeddingIndex::new(poses, emb, dim, fp)
}

pub fn save_index(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    write_atomic(path, &encode_index(index)?)
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    decode_index(&read_file(path)?)
}

// ---------------------------------------------------------------- trace

pub const TRACE_HEADER: [&str; 11] = [
    "step",
    "mean_x",
    "mean_y",
    "mean_theta",
    "pos_std",
    "neff",
    "resampled",
    "converged",
    "truth_x",
    "truth_y",
    "err_m",
];

pub fn save_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_csv(path, rows, &TRACE_HEADER)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    read_csv(path, &TRACE_HEADER)
}

// ---------------------------------------------------------------- particle cloud

pub fn encode_cloud(set: &ParticleSet) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(8 + set.len() * 32);
    b.extend_from_slice(CLOUD_MAGIC);
    b.extend_from_slice(&usize_to_u32(set.len(), "cloud", "particle count")?.to_le_bytes());
    for p in set.particles() {
        for v in [p.pose.x, p.pose.y, p.pose.theta, p.weight] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(b)
}

/// Particles with their stored weights (not renormalized).
pub fn decode_cloud(bytes: &[u8]) -> Result<Vec<Particle>> {
    let mut c = Cursor::new(bytes, "cloud");
    c.magic(CLOUD_MAGIC)?;
    let n = c.u32("particle count")? as usize;
    let mut out = Vec::with_capacity(n.min(bytes.len() / 32));
    for _ in 0..n {
        let x = c.f64("particle")?;
        let y = c.f64("particle")?;
        let theta = c.f64("particle")?;
        let weight = c.f64("particle")?;
        out.push(Particle {
            pose: Pose2D { x, y, theta },
            weight,
        });
    }
    c.finish()?;
    Ok(out)
}

pub fn save_cloud(path: &Path, set: &ParticleSet) -> Result<()> {
    write_atomic(path, &encode_cloud(set)?)
}

pub fn load_cloud(path: &Path) -> Result<Vec<Particle>> {
    decode_cloud(&read_file(path)?)
}

// ---------------------------------------------------------------- reports

/// Serialize through `serde_json::Value`, whose object maps keep keys
/// sorted, giving one canonical key order.
pub fn canonical<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&canonical(value)?)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, canonical_json(value)?.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    Ok(serde_json::from_slice(&bytes).map_err(FormatError::from)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopXRow {
    pub x_percent: f64,
    pub fraction: f64,
}

/// Metrics of one evaluation run. Timing lives in a separate sidecar so
/// that reports stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub average_precision: Option<f64>,
    pub topx: Vec<TopXRow>,
    pub convergence_step: Option<usize>,
    pub final_mean_error_m: Option<f64>,
    pub final_std_m: Option<f64>,
    /// Additional named scalars (counts, alpha, and so on).
    pub extra: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            average_precision: None,
            topx: Vec::new(),
            convergence_step: None,
            final_mean_error_m: None,
            final_std_m: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut numbers: Vec<f64> = [self.average_precision, self.final_mean_error_m, self.final_std_m]
            .into_iter()
            .flatten()
            .collect();
        numbers.extend(self.topx.iter().flat_map(|r| [r.x_percent, r.fraction]));
        numbers.extend(self.extra.values());
        if numbers.iter().any(|v| !v.is_finite()) {
            return Err(field("report", "metrics", "all reported numbers must be finite"));
        }
        Ok(())
    }
}

pub fn save_report(path: &Path, report: &MetricsReport) -> Result<()> {
    report.validate()?;
    save_json(path, report)
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let r: MetricsReport = load_json(path)?;
    if r.schema_version != REPORT_SCHEMA_VERSION {
        return Err(field("report", "schema_version", format!("unsupported {}", r.schema_version)));
    }
    r.validate()?;
    Ok(r)
}
