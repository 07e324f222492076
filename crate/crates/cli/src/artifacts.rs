//! On-disk formats: snapshot and crash CSVs, the binary window files and
//! the JSON documents, each stamped with the config hash.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{DateTime, NaiveDateTime};
use sha2::{Digest, Sha256};

use intformer::datamodel::{
    approach_feature_names, flatten_features, unflatten_features, CrashEvent, Direction,
    IntersectionId, IntersectionSnapshot, LabeledWindow, WindowOrigin, Zone, APPROACH_ROW_WIDTH,
};
use intformer::numcore::Tensor;

use crate::config::Seeds;
use crate::error::{CliError, CliResult};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const WINDOWS_MAGIC: &[u8; 4] = b"ITFW";
pub const WINDOWS_VERSION: u32 = 1;

/// File names inside an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn snapshots(&self) -> PathBuf {
        self.dir.join("snapshots.csv")
    }
    pub fn crashes(&self) -> PathBuf {
        self.dir.join("crashes.csv")
    }
    pub fn windows_train(&self) -> PathBuf {
        self.dir.join("windows-train.bin")
    }
    pub fn windows_test(&self) -> PathBuf {
        self.dir.join("windows-test.bin")
    }
    pub fn selection(&self) -> PathBuf {
        self.dir.join("selection.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn losses(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }
    pub fn attributions(&self) -> PathBuf {
        self.dir.join("attributions.csv")
    }
    pub fn attribution_summary(&self) -> PathBuf {
        self.dir.join("attribution-summary.csv")
    }
    pub fn benchmark_json(&self) -> PathBuf {
        self.dir.join("benchmark.json")
    }
    pub fn benchmark_csv(&self) -> PathBuf {
        self.dir.join("benchmark.csv")
    }
}

/// Run identity recorded in every artifact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seeds: Seeds,
}

impl Stamp {
    pub fn seeds_json(&self) -> String {
        serde_json::to_string(&self.seeds).expect("seeds serialize")
    }

    /// Comment lines that open every CSV artifact.
    pub fn csv_preamble(&self) -> String {
        format!("# config_hash={}\n# seeds={}\n", self.config_hash, self.seeds_json())
    }

    /// Prepends the preamble to CSV text produced elsewhere.
    pub fn stamp_csv(&self, body: &str) -> Vec<u8> {
        let mut out = self.csv_preamble().into_bytes();
        out.extend_from_slice(body.as_bytes());
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads an upstream artifact, naming the subcommand that produces it when absent.
pub fn read_required(path: &Path, command: &'static str) -> CliResult<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::Dependency {
            path: path.to_path_buf(),
            command,
        });
    }
    fs::read(path).map_err(io_err(path))
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

fn parse_timestamp(path: &Path, s: &str) -> CliResult<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).map_err(|e| format_err(path, format!("timestamp `{s}`: {e}")))
}

fn parse_intersection(path: &Path, s: &str) -> CliResult<IntersectionId> {
    s.strip_prefix('I')
        .and_then(|n| n.parse().ok())
        .map(IntersectionId)
        .ok_or_else(|| format_err(path, format!("intersection `{s}`")))
}

fn parse_direction(path: &Path, s: &str) -> CliResult<Direction> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Direction::from_code(c).map_err(|e| format_err(path, e.to_string())),
        _ => Err(format_err(path, format!("approach `{s}`"))),
    }
}

fn csv_stamped(stamp: &Stamp, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut buf = stamp.csv_preamble().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| CliError::Csv(e.into()))?;
    }
    Ok(buf)
}

fn csv_reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes)
}

/// The hash recorded on a CSV artifact's first line.
pub fn csv_config_hash(bytes: &[u8]) -> Option<String> {
    let first = bytes.split(|&b| b == b'\n').next()?;
    std::str::from_utf8(first).ok()?.strip_prefix("# config_hash=").map(str::to_string)
}

pub fn snapshots_csv(stamp: &Stamp, snapshots: &[IntersectionSnapshot]) -> CliResult<Vec<u8>> {
    let mut header = vec!["intersection".to_string(), "approach".into(), "timestamp".into()];
    header.extend(approach_feature_names());
    let rows = snapshots.iter().map(|s| {
        let mut row = vec![
            s.intersection.to_string(),
            s.approach.code().to_string(),
            format_timestamp(&s.timestamp),
        ];
        row.extend(flatten_features(s).iter().map(|v| v.to_string()));
        row
    });
    csv_stamped(stamp, &header, rows)
}

pub fn parse_snapshots(path: &Path, bytes: &[u8]) -> CliResult<Vec<IntersectionSnapshot>> {
    let mut r = csv_reader(bytes);
    let expected = 3 + APPROACH_ROW_WIDTH;
    if r.headers()?.len() != expected {
        return Err(format_err(path, format!("expected {expected} columns")));
    }
    let mut out = Vec::new();
    let mut values = Vec::with_capacity(APPROACH_ROW_WIDTH);
    for rec in r.records() {
        let rec = rec?;
        values.clear();
        for field in rec.iter().skip(3) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| format_err(path, format!("value `{field}`")))?,
            );
        }
        out.push(unflatten_features(
            parse_intersection(path, &rec[0])?,
            parse_timestamp(path, &rec[2])?,
            parse_direction(path, &rec[1])?,
            &values,
        )?);
    }
    Ok(out)
}

pub fn crashes_csv(stamp: &Stamp, crashes: &[CrashEvent]) -> CliResult<Vec<u8>> {
    let header: Vec<String> = ["intersection", "zone", "approach", "timestamp"].map(String::from).to_vec();
    let rows = crashes.iter().map(|c| {
        vec![
            c.intersection.to_string(),
            c.zone.to_string(),
            c.approach.map(|a| a.code().to_string()).unwrap_or_default(),
            format_timestamp(&c.timestamp),
        ]
    });
    csv_stamped(stamp, &header, rows)
}

pub fn parse_crashes(path: &Path, bytes: &[u8]) -> CliResult<Vec<CrashEvent>> {
    let mut r = csv_reader(bytes);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(format_err(path, "expected 4 columns"));
        }
        let zone = match &rec[1] {
            "within_intersection" => Zone::WithinIntersection,
            "approach" => Zone::Approach,
            other => return Err(format_err(path, format!("zone `{other}`"))),
        };
        let approach = match &rec[2] {
            "" => None,
            a => Some(parse_direction(path, a)?),
        };
        out.push(CrashEvent::new(
            parse_intersection(path, &rec[0])?,
            approach,
            zone,
            parse_timestamp(path, &rec[3])?,
        )?);
    }
    Ok(out)
}

/// Binary window file:
/// `ITFW | version u32 | config hash (64 ASCII bytes) | seeds JSON length u32 |
/// seeds JSON | T u32 | F u32 | count u64`,
/// then per window `label u8 | synthetic u8 | intersection u16 | approach u8 |
/// end (unix seconds) i64 | T·F f64`, all little-endian.
pub fn windows_bin(stamp: &Stamp, timesteps: usize, width: usize, windows: &[LabeledWindow]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::with_capacity(84 + windows.len() * (13 + 8 * timesteps * width));
    let io = |e: std::io::Error| CliError::Integrity(format!("encoding windows: {e}"));
    buf.write_all(WINDOWS_MAGIC).map_err(io)?;
    buf.write_u32::<LittleEndian>(WINDOWS_VERSION).map_err(io)?;
    let mut h = [b'0'; 64];
    let src = stamp.config_hash.as_bytes();
    h[..src.len().min(64)].copy_from_slice(&src[..src.len().min(64)]);
    buf.write_all(&h).map_err(io)?;
    let seeds = stamp.seeds_json();
    buf.write_u32::<LittleEndian>(seeds.len() as u32).map_err(io)?;
    buf.write_all(seeds.as_bytes()).map_err(io)?;
    buf.write_u32::<LittleEndian>(timesteps as u32).map_err(io)?;
    buf.write_u32::<LittleEndian>(width as u32).map_err(io)?;
    buf.write_u64::<LittleEndian>(windows.len() as u64).map_err(io)?;
    for w in windows {
        if w.features.shape() != [timesteps, width] {
            return Err(CliError::Integrity(format!("window of shape {:?}", w.features.shape())));
        }
        buf.write_u8(w.label).map_err(io)?;
        buf.write_u8(u8::from(w.origin.synthetic)).map_err(io)?;
        buf.write_u16::<LittleEndian>(w.origin.intersection.0).map_err(io)?;
        buf.write_u8(w.origin.approach.code() as u8).map_err(io)?;
        buf.write_i64::<LittleEndian>(w.origin.end.and_utc().timestamp()).map_err(io)?;
        for v in w.features.data() {
            buf.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
    }
    Ok(buf)
}

#[derive(Clone, Debug)]
pub struct WindowFile {
    pub stamp: Stamp,
    pub timesteps: usize,
    pub width: usize,
    pub windows: Vec<LabeledWindow>,
}

pub fn parse_windows(path: &Path, bytes: &[u8]) -> CliResult<WindowFile> {
    let bad = |r: &str| format_err(path, r.to_string());
    let io = |_| bad("truncated window file");
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    c.read_exact(&mut magic).map_err(io)?;
    if &magic != WINDOWS_MAGIC {
        return Err(bad("not a window file"));
    }
    if c.read_u32::<LittleEndian>().map_err(io)? != WINDOWS_VERSION {
        return Err(bad("unsupported window file version"));
    }
    let mut h = [0u8; 64];
    c.read_exact(&mut h).map_err(io)?;
    let config_hash = String::from_utf8(h.to_vec()).map_err(|_| bad("config hash is not ASCII"))?;
    let seeds_len = c.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut seeds = vec![0u8; seeds_len.min(bytes.len())];
    c.read_exact(&mut seeds).map_err(io)?;
    let seeds: Seeds = serde_json::from_slice(&seeds).map_err(|e| bad(&format!("seeds: {e}")))?;
    let timesteps = c.read_u32::<LittleEndian>().map_err(io)? as usize;
    let width = c.read_u32::<LittleEndian>().map_err(io)? as usize;
    let count = c.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut windows = Vec::with_capacity(count.min(bytes.len()));
    for _ in 0..count {
        let label = c.read_u8().map_err(io)?;
        let synthetic = c.read_u8().map_err(io)? != 0;
        let intersection = IntersectionId(c.read_u16::<LittleEndian>().map_err(io)?);
        let approach = Direction::from_code(c.read_u8().map_err(io)? as char).map_err(|e| bad(&e.to_string()))?;
        let secs = c.read_i64::<LittleEndian>().map_err(io)?;
        let end = DateTime::from_timestamp(secs, 0).ok_or_else(|| bad("timestamp out of range"))?.naive_utc();
        let mut data = vec![0.0; timesteps * width];
        c.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        windows.push(LabeledWindow {
            features: Tensor::new(vec![timesteps, width], data)?,
            label,
            origin: WindowOrigin {
                intersection,
                approach,
                end,
                synthetic,
            },
        });
    }
    if (c.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes after the last window"));
    }
    Ok(WindowFile {
        stamp: Stamp { config_hash, seeds },
        timesteps,
        width,
        windows,
    })
}
