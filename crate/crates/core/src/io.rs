//! File formats: binary event streams, gzip CSV ground truth, provenance-
//! stamped CSV and JSON exports, and binary correlation matrices.
//!
//! Event file layout (little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 8 | magic `HYPEVT01` |
//! | 8 | 4 | format version (`u32`) |
//! | 12 | 4 | record count (`u32`, 0 = read to end of file) |
//! | 16 | 64 | config hash, ASCII hex |
//! | 80 | 16·n | records: `u16 x`, `u16 y`, `u32 tot`, `u64 toa_ns` |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{CentroidedPhoton, CoincidencePair};
use crate::spatial::{CorrelationMatrix, SpatialBasis};
use crate::synth::{Arm, ArmAssignment, DetectionOutcome, PhotonEvent, TruthRecord};

pub const EVENT_MAGIC: &[u8; 8] = b"HYPEVT01";
pub const EVENT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 80;
pub const RECORD_LEN: usize = 16;
const MATRIX_MAGIC: &[u8; 8] = b"HYPCOR01";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventHeader {
    pub version: u32,
    /// Record count from the header; 0 for streamed files.
    pub count: u32,
    pub config_hash: String,
}

pub fn write_events<W: Write>(mut w: W, events: &[PhotonEvent], config_hash: &str) -> Result<()> {
    let hash = config_hash.as_bytes();
    if hash.len() != 64 || !hash.iter().all(u8::is_ascii_hexdigit) {
        return Err(Error::Format("config hash must be 64 hex characters".into()));
    }
    // Streams longer than u32::MAX records are marked as streamed.
    let count = u32::try_from(events.len()).unwrap_or(0);
    w.write_all(EVENT_MAGIC)?;
    w.write_all(&EVENT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(hash)?;
    let mut buf = Vec::with_capacity(RECORD_LEN * 4096);
    for chunk in events.chunks(4096) {
        buf.clear();
        for e in chunk {
            buf.extend_from_slice(&e.x.to_le_bytes());
            buf.extend_from_slice(&e.y.to_le_bytes());
            buf.extend_from_slice(&e.tot.to_le_bytes());
            buf.extend_from_slice(&e.toa.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events<R: Read>(mut r: R) -> Result<(EventHeader, Vec<PhotonEvent>)> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("event file shorter than its header".into()))?;
    if &head[..8] != EVENT_MAGIC {
        return Err(Error::Format("not an event file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != EVENT_VERSION {
        return Err(Error::Format(format!("unsupported event format version {version}")));
    }
    let count = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes"));
    let config_hash = std::str::from_utf8(&head[16..80])
        .map_err(|_| Error::Format("config hash is not ASCII".into()))?
        .to_string();

    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % RECORD_LEN != 0 {
        return Err(Error::Format(format!("truncated record at byte {}", HEADER_LEN + body.len() / RECORD_LEN * RECORD_LEN)));
    }
    let n = body.len() / RECORD_LEN;
    if count != 0 && count as usize != n {
        return Err(Error::Format(format!("header declares {count} records, file holds {n}")));
    }
    let events = body
        .chunks_exact(RECORD_LEN)
        .map(|c| PhotonEvent {
            x: u16::from_le_bytes([c[0], c[1]]),
            y: u16::from_le_bytes([c[2], c[3]]),
            tot: u32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            toa: u64::from_le_bytes(c[8..16].try_into().expect("8 bytes")),
        })
        .collect();
    Ok((
        EventHeader {
            version,
            count,
            config_hash,
        },
        events,
    ))
}

pub fn write_events_file(path: &Path, events: &[PhotonEvent], config_hash: &str) -> Result<()> {
    write_events(BufWriter::new(File::create(path)?), events, config_hash)
}

pub fn read_events_file(path: &Path) -> Result<(EventHeader, Vec<PhotonEvent>)> {
    read_events(BufReader::new(File::open(path)?))
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    birth_ns: f64,
    assignment: ArmAssignment,
    ps_x: f64,
    ps_y: f64,
    pi_x: f64,
    pi_y: f64,
    outcome: DetectionOutcome,
    signal_x: Option<u16>,
    signal_y: Option<u16>,
    idler_x: Option<u16>,
    idler_y: Option<u16>,
}

fn split(p: Option<(u16, u16)>) -> (Option<u16>, Option<u16>) {
    (p.map(|v| v.0), p.map(|v| v.1))
}

fn join(x: Option<u16>, y: Option<u16>) -> Option<(u16, u16)> {
    x.zip(y)
}

/// Gzip-compressed CSV of per-pair ground truth.
pub fn write_truth_gz(path: &Path, truth: &[TruthRecord], prov: &Provenance) -> Result<()> {
    let gz = GzEncoder::new(BufWriter::new(File::create(path)?), Compression::default());
    let mut w = provenance_csv_writer(gz, prov)?;
    for t in truth {
        let (signal_x, signal_y) = split(t.signal_pixel);
        let (idler_x, idler_y) = split(t.idler_pixel);
        w.serialize(TruthRow {
            birth_ns: t.birth_ns,
            assignment: t.assignment,
            ps_x: t.ps_x,
            ps_y: t.ps_y,
            pi_x: t.pi_x,
            pi_y: t.pi_y,
            outcome: t.outcome,
            signal_x,
            signal_y,
            idler_x,
            idler_y,
        })?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .finish()?
        .flush()?;
    Ok(())
}

pub fn read_truth_gz(path: &Path) -> Result<Vec<TruthRecord>> {
    let rows: Vec<TruthRow> = read_csv(BufReader::new(GzDecoder::new(File::open(path)?)))?;
    Ok(rows
        .into_iter()
        .map(|r| TruthRecord {
            birth_ns: r.birth_ns,
            assignment: r.assignment,
            ps_x: r.ps_x,
            ps_y: r.ps_y,
            pi_x: r.pi_x,
            pi_y: r.pi_y,
            outcome: r.outcome,
            signal_pixel: join(r.signal_x, r.signal_y),
            idler_pixel: join(r.idler_x, r.idler_y),
        })
        .collect())
}

/// CSV writer whose output starts with a `#` provenance comment line.
pub fn provenance_csv_writer<W: Write>(mut w: W, prov: &Provenance) -> Result<csv::Writer<W>> {
    writeln!(w, "# config_hash={} tool_version={}", prov.config_hash, prov.tool_version)?;
    Ok(csv::Writer::from_writer(w))
}

pub fn write_csv<T: Serialize>(path: &Path, prov: &Provenance, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = provenance_csv_writer(BufWriter::new(File::create(path)?), prov)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headed CSV, skipping `#` comment lines.
pub fn read_csv<T: DeserializeOwned, R: Read>(r: R) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_csv_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_csv(BufReader::new(File::open(path)?))
}

/// Provenance of a CSV file, from its leading comment line.
pub fn read_csv_provenance(path: &Path) -> Result<Provenance> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    let field = |key: &str| {
        line.split_whitespace()
            .find_map(|t| t.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .map(str::to_string)
    };
    match (field("config_hash"), field("tool_version")) {
        (Some(config_hash), Some(tool_version)) if line.starts_with('#') => Ok(Provenance {
            config_hash,
            tool_version,
        }),
        _ => Err(Error::Format(format!("{} has no provenance line", path.display()))),
    }
}

/// JSON document with a `provenance` member next to the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    pub data: T,
}

pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, data: &T) -> Result<()> {
    let doc = Stamped {
        provenance: prov.clone(),
        data,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Flat CSV row for a centroided photon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotonRow {
    pub cx: f64,
    pub cy: f64,
    pub toa_corr: u64,
    pub cluster_size: u32,
    pub total_tot: u64,
    pub arm: Arm,
}

impl From<&CentroidedPhoton> for PhotonRow {
    fn from(p: &CentroidedPhoton) -> Self {
        Self {
            cx: p.cx,
            cy: p.cy,
            toa_corr: p.toa_corr,
            cluster_size: p.cluster_size,
            total_tot: p.total_tot,
            arm: p.arm,
        }
    }
}

impl From<PhotonRow> for CentroidedPhoton {
    fn from(r: PhotonRow) -> Self {
        Self {
            cx: r.cx,
            cy: r.cy,
            toa_corr: r.toa_corr,
            cluster_size: r.cluster_size,
            total_tot: r.total_tot,
            arm: r.arm,
        }
    }
}

/// Flat CSV row for a coincidence pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub signal_cx: f64,
    pub signal_cy: f64,
    pub signal_toa: u64,
    pub signal_size: u32,
    pub signal_tot: u64,
    pub idler_cx: f64,
    pub idler_cy: f64,
    pub idler_toa: u64,
    pub idler_size: u32,
    pub idler_tot: u64,
    pub dt: i64,
}

impl From<&CoincidencePair> for PairRow {
    fn from(p: &CoincidencePair) -> Self {
        Self {
            signal_cx: p.signal.cx,
            signal_cy: p.signal.cy,
            signal_toa: p.signal.toa_corr,
            signal_size: p.signal.cluster_size,
            signal_tot: p.signal.total_tot,
            idler_cx: p.idler.cx,
            idler_cy: p.idler.cy,
            idler_toa: p.idler.toa_corr,
            idler_size: p.idler.cluster_size,
            idler_tot: p.idler.total_tot,
            dt: p.dt,
        }
    }
}

impl From<PairRow> for CoincidencePair {
    fn from(r: PairRow) -> Self {
        let photon = |cx, cy, toa_corr, cluster_size, total_tot, arm| CentroidedPhoton {
            cx,
            cy,
            toa_corr,
            cluster_size,
            total_tot,
            arm,
        };
        Self {
            signal: photon(r.signal_cx, r.signal_cy, r.signal_toa, r.signal_size, r.signal_tot, Arm::Signal),
            idler: photon(r.idler_cx, r.idler_cy, r.idler_toa, r.idler_size, r.idler_tot, Arm::Idler),
            dt: r.dt,
        }
    }
}

/// Dense CSV: one row per signal mode, one column per idler mode.
pub fn write_matrix_csv(path: &Path, prov: &Provenance, m: &CorrelationMatrix) -> Result<()> {
    let mut w = provenance_csv_writer(BufWriter::new(File::create(path)?), prov)?;
    let mut header = vec!["signal_mode".to_string()];
    header.extend((0..m.d).map(|n| n.to_string()));
    w.write_record(&header)?;
    for r in 0..m.d {
        let mut row = vec![r.to_string()];
        row.extend((0..m.d).map(|n| m.get(r, n).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv<R: Read>(r: R, basis: SpatialBasis) -> Result<CorrelationMatrix> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let d = rdr.headers()?.len().saturating_sub(1);
    let mut counts = Vec::with_capacity(d * d);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 1 || rec[0].trim().parse::<usize>().ok() != Some(row) {
            return Err(Error::Format(format!("matrix row {row} is malformed")));
        }
        for v in rec.iter().skip(1) {
            counts.push(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Format(format!("matrix row {row}: {v:?} is not a count")))?,
            );
        }
    }
    CorrelationMatrix::from_counts(d, basis, counts)
}

pub fn read_matrix_csv_file(path: &Path, basis: SpatialBasis) -> Result<CorrelationMatrix> {
    read_matrix_csv(BufReader::new(File::open(path)?), basis)
}

/// Compact binary: magic `HYPCOR01`, `u32 d`, `u8` basis (0 momentum,
/// 1 position), then `d²` little-endian `u64` counts, row-major.
pub fn write_matrix_bin<W: Write>(mut w: W, m: &CorrelationMatrix) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.d as u32).to_le_bytes())?;
    w.write_all(&[match m.basis {
        SpatialBasis::Momentum => 0,
        SpatialBasis::Position => 1,
    }])?;
    for c in &m.counts {
        w.write_all(&c.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_bin<R: Read>(mut r: R) -> Result<CorrelationMatrix> {
    let mut head = [0u8; 13];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("matrix file shorter than its header".into()))?;
    if &head[..8] != MATRIX_MAGIC {
        return Err(Error::Format("not a correlation matrix file (bad magic)".into()));
    }
    let d = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let basis = match head[12] {
        0 => SpatialBasis::Momentum,
        1 => SpatialBasis::Position,
        b => return Err(Error::Format(format!("unknown basis tag {b}"))),
    };
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != d * d * 8 {
        return Err(Error::Format(format!("expected {} count bytes, found {}", d * d * 8, body.len())));
    }
    let counts = body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    CorrelationMatrix::from_counts(d, basis, counts)
}
