//! JSONL dataset files: `<name>.frames.jsonl` holds one [`SceneFrame`] per
//! line, `<name>.reflabels.jsonl` one [`FrameLabels`] per line. Point clouds
//! are written as flat `[x, y, z, x, y, z, ...]` arrays.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{LabeledBox, SceneFrame};

pub(crate) mod flat_points {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geom::Point3;

    pub fn serialize<S: Serializer>(pts: &[Point3], s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<f64> = pts.iter().flat_map(|p| p.iter().copied()).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point3>, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        if flat.len() % 3 != 0 {
            return Err(serde::de::Error::custom(
                "point array length not a multiple of 3",
            ));
        }
        Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame_id: u64,
    pub labels: Vec<LabeledBox>,
}

pub fn frames_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.frames.jsonl"))
}

pub fn reflabels_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.reflabels.jsonl"))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for item in items {
            serde_json::to_writer(&mut w, item).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_frames(path: &Path, frames: &[SceneFrame]) -> Result<()> {
    write_jsonl(path, frames)
}

pub fn read_frames(path: &Path) -> Result<Vec<SceneFrame>> {
    read_jsonl(path)
}

pub fn write_labels(path: &Path, frames: &[SceneFrame], labels: &[Vec<LabeledBox>]) -> Result<()> {
    if frames.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "frames/labels",
            left: frames.len(),
            right: labels.len(),
        });
    }
    let rows: Vec<FrameLabels> = frames
        .iter()
        .zip(labels)
        .map(|(f, l)| FrameLabels {
            frame_id: f.frame_id,
            labels: l.clone(),
        })
        .collect();
    write_jsonl(path, &rows)
}

/// Reads a label file and aligns it with `frames` by frame id; frames
/// without a row get no labels.
pub fn read_labels(path: &Path, frames: &[SceneFrame]) -> Result<Vec<Vec<LabeledBox>>> {
    let rows: Vec<FrameLabels> = read_jsonl(path)?;
    let mut by_id = std::collections::HashMap::new();
    for r in rows {
        if by_id.insert(r.frame_id, r.labels).is_some() {
            return Err(Error::corrupt(
                path,
                format!("duplicate frame_id {}", r.frame_id),
            ));
        }
    }
    Ok(frames
        .iter()
        .map(|f| by_id.remove(&f.frame_id).unwrap_or_default())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{generate_sequence, make_reference_predictions, NoiseModel, WorldConfig};

    #[test]
    fn dataset_round_trip() {
        let cfg = WorldConfig {
            n_frames: 3,
            n_vehicles: 6,
            ..WorldConfig::default()
        };
        let frames = generate_sequence(&cfg, 4).unwrap();
        let labels = make_reference_predictions(&frames, &NoiseModel::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let fp = frames_path(dir.path(), "toy");
        let lp = reflabels_path(dir.path(), "toy");
        write_frames(&fp, &frames).unwrap();
        write_labels(&lp, &frames, &labels).unwrap();
        let back = read_frames(&fp).unwrap();
        assert!(back == frames, "frames differ after round trip");
        assert_eq!(read_labels(&lp, &back).unwrap(), labels);
        let text = std::fs::read_to_string(&fp).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn corrupt_line_reports_path_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.frames.jsonl");
        std::fs::write(&p, "{\"frame_id\": 1}\n").unwrap();
        let err = read_frames(&p).unwrap_err().to_string();
        assert!(
            err.contains("bad.frames.jsonl") && err.contains("line 1"),
            "{err}"
        );
    }
}
