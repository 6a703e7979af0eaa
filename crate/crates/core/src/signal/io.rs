use std::path::{Path, PathBuf};

use super::{GroundTruthStream, SensorSession, SessionMeta, CODE_MAX};
use crate::error::{Error, Result};
use crate::rotations::Vec3;

const GT_JOINTS: [&str; 4] = ["lhip", "rhip", "lknee", "rknee"];

pub fn read_meta(path: &Path) -> Result<SessionMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
}

pub fn write_meta(path: &Path, meta: &SessionMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path.display().to_string(), e)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

/// Reads `sensor.csv`; `meta` supplies the channel map.
pub fn read_sensor_csv(path: &Path, meta: SessionMeta) -> Result<SensorSession> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 3 || &header[0] != "timestamp_us" || &header[1] != "seq" {
        return Err(csv_err(path, "header must start with timestamp_us,seq"));
    }
    let n_channels = header.len() - 2;
    for (i, h) in header.iter().skip(2).enumerate() {
        if h != format!("ch{i:02}") {
            return Err(csv_err(path, format!("unexpected column {h:?}")));
        }
    }
    if n_channels % 2 != 0 {
        return Err(csv_err(path, "channel count must be even (two legs)"));
    }
    let mut timestamps = Vec::new();
    let mut seq = Vec::new();
    let mut codes = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| csv_err(path, format!("row {}: bad {what}", line + 2));
        let ts: i64 = rec[0].parse().map_err(|_| bad("timestamp"))?;
        if timestamps.last().is_some_and(|&prev| ts <= prev) {
            return Err(bad("timestamp order"));
        }
        timestamps.push(ts);
        seq.push(rec[1].parse().map_err(|_| bad("seq"))?);
        for f in rec.iter().skip(2) {
            let c: u32 = f.parse().map_err(|_| bad("code"))?;
            if c > CODE_MAX {
                return Err(bad("code range"));
            }
            codes.push(c);
        }
    }
    Ok(SensorSession {
        meta,
        timestamps,
        seq,
        codes,
        n_channels,
    })
}

pub fn write_sensor_csv(path: &Path, s: &SensorSession) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["timestamp_us".to_string(), "seq".to_string()];
    header.extend((0..s.n_channels).map(|i| format!("ch{i:02}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut row = Vec::with_capacity(s.n_channels + 2);
    for t in 0..s.len() {
        row.clear();
        row.push(s.timestamps[t].to_string());
        row.push(s.seq[t].to_string());
        row.extend(s.frame(t).iter().map(|c| c.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gt_csv(path: &Path) -> Result<GroundTruthStream> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = gt_header();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(csv_err(path, "unexpected ground-truth header"));
    }
    let mut timestamps = Vec::new();
    let mut poses = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| csv_err(path, format!("row {}: bad {what}", line + 2));
        let ts: i64 = rec[0].parse().map_err(|_| bad("timestamp"))?;
        if timestamps.last().is_some_and(|&prev| ts <= prev) {
            return Err(bad("timestamp order"));
        }
        let mut v = [0.0f64; 12];
        for (d, f) in v.iter_mut().zip(rec.iter().skip(1)) {
            *d = f.parse().map_err(|_| bad("angle"))?;
            if !d.is_finite() {
                return Err(bad("angle"));
            }
        }
        timestamps.push(ts);
        poses.push(std::array::from_fn(|j| Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])));
    }
    Ok(GroundTruthStream { timestamps, poses })
}

fn gt_header() -> Vec<String> {
    let mut h = vec!["timestamp_us".to_string()];
    for j in GT_JOINTS {
        for a in ["x", "y", "z"] {
            h.push(format!("{j}_{a}"));
        }
    }
    h
}

pub fn write_gt_csv(path: &Path, gt: &GroundTruthStream) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(gt_header()).map_err(|e| csv_err(path, e))?;
    let mut row = Vec::with_capacity(13);
    for (ts, pose) in gt.timestamps.iter().zip(&gt.poses) {
        row.clear();
        row.push(ts.to_string());
        for v in pose {
            row.extend([v.x, v.y, v.z].iter().map(|x| x.to_string()));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct LoadedSession {
    pub dir: PathBuf,
    pub sensor: SensorSession,
    pub gt: Option<GroundTruthStream>,
}

/// Reads `meta.json`, `sensor.csv` and (if present) `gt.csv` from `dir`.
pub fn read_session(dir: &Path) -> Result<LoadedSession> {
    let meta = read_meta(&dir.join("meta.json"))?;
    let sensor = read_sensor_csv(&dir.join("sensor.csv"), meta)?;
    let gt_path = dir.join("gt.csv");
    let gt = if gt_path.exists() {
        Some(read_gt_csv(&gt_path)?)
    } else {
        None
    };
    Ok(LoadedSession {
        dir: dir.to_path_buf(),
        sensor,
        gt,
    })
}

pub fn write_session(dir: &Path, sensor: &SensorSession, gt: &GroundTruthStream) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_meta(&dir.join("meta.json"), &sensor.meta)?;
    write_sensor_csv(&dir.join("sensor.csv"), sensor)?;
    write_gt_csv(&dir.join("gt.csv"), gt)
}

/// Session directories (those holding a `meta.json`) under `root`, sorted by name.
pub fn list_sessions(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no session directories under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<LoadedSession>> {
    list_sessions(root)?.iter().map(|d| read_session(d)).collect()
}
