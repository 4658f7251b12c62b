//! CSV and manifest serialization of experiment data.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{label_names, DerivativeDataset, ExperimentConfig, ExperimentData, ModelKind, SequenceDataset};
use crate::error::{MechError, Result};
use crate::integrators::Trajectory;
use crate::systems::Convention;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "mechbench-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub file: String,
    pub trajectories: usize,
    pub rows: usize,
    /// Rows per trajectory, in file order.
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// `derivative` or `sequence`.
    pub kind: String,
    pub convention: Convention,
    pub seed: u64,
    pub state_names: Vec<String>,
    pub label_names: Vec<String>,
    pub train: SplitManifest,
    pub test: SplitManifest,
    pub config: ExperimentConfig,
}

/// Writes `train.csv`, `test.csv` and the manifest into `dir`.
pub fn write_dataset(dir: &Path, data: &ExperimentData) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| MechError::io(dir, e))?;
    let cfg = data.config();
    let state_names = cfg.system.state_names(cfg.convention(), cfg.dof());
    let (kind, labels, train, test) = match data {
        ExperimentData::Derivative { train, test } => (
            "derivative",
            label_names(cfg),
            write_derivative(&dir.join("train.csv"), train)?,
            write_derivative(&dir.join("test.csv"), test)?,
        ),
        ExperimentData::Sequence { train, test } => (
            "sequence",
            Vec::new(),
            write_sequence(&dir.join("train.csv"), train)?,
            write_sequence(&dir.join("test.csv"), test)?,
        ),
    };
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        kind: kind.into(),
        convention: cfg.convention(),
        seed: cfg.seed,
        state_names,
        label_names: labels,
        train,
        test,
        config: cfg.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| MechError::malformed(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| MechError::io(&path, e))?;
    Ok(manifest)
}

fn header(names: &[String], labels: &[String]) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain(names.iter().cloned())
        .chain(labels.iter().cloned())
        .collect()
}

fn write_rows<'a>(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>> + 'a) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| MechError::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_derivative(path: &Path, d: &DerivativeDataset) -> Result<SplitManifest> {
    let head = header(&d.state_names(), &d.label_names());
    let rows = (0..d.len()).map(|r| {
        let mut row = vec![d.times()[r]];
        row.extend(d.inputs().row(r).iter());
        row.extend(d.labels().row(r).iter());
        row
    });
    write_rows(path, &head, rows)?;
    Ok(SplitManifest {
        file: file_name(path),
        trajectories: d.n_trajectories(),
        rows: d.len(),
        lengths: d.lengths().to_vec(),
    })
}

fn write_sequence(path: &Path, d: &SequenceDataset) -> Result<SplitManifest> {
    let head = header(&d.state_names(), &[]);
    let rows = d.trajectories().iter().flat_map(|t| {
        (0..t.len()).map(move |r| {
            let mut row = vec![t.times()[r]];
            row.extend_from_slice(t.state(r));
            row
        })
    });
    write_rows(path, &head, rows)?;
    let lengths: Vec<usize> = d.trajectories().iter().map(Trajectory::len).collect();
    Ok(SplitManifest {
        file: file_name(path),
        trajectories: lengths.len(),
        rows: lengths.iter().sum(),
        lengths,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> MechError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => MechError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        MechError::malformed(path, e)
    }
}

fn read_table(path: &Path, expected_header: &[String], rows: usize) -> Result<(Vec<f64>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let head: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    if head != expected_header {
        return Err(MechError::malformed(path, format!("header {head:?} does not match {expected_header:?}")));
    }
    let width = expected_header.len() - 1;
    let mut times = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(rows * width);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| MechError::malformed(path, format!("row {}: `{field}` is not a number", i + 2)))?;
            if j == 0 {
                times.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if times.len() != rows {
        return Err(MechError::malformed(path, format!("expected {rows} rows, found {}", times.len())));
    }
    let table = Array2::from_shape_vec((rows, width), values).map_err(|e| MechError::malformed(path, e))?;
    Ok((times, table))
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<ExperimentData> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| MechError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| MechError::malformed(&path, e))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(MechError::malformed(&path, format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(MechError::VersionMismatch {
            expected: MANIFEST_VERSION,
            found: manifest.version,
        });
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let sequence = cfg.model == ModelKind::Srnn;
    if (manifest.kind == "sequence") != sequence {
        return Err(MechError::malformed(
            &path,
            format!("kind `{}` does not match model {}", manifest.kind, cfg.model),
        ));
    }
    let head = header(&manifest.state_names, &manifest.label_names);
    let load = |split: &SplitManifest| -> Result<(PathBuf, Vec<f64>, Array2<f64>)> {
        let file = dir.join(&split.file);
        if split.lengths.iter().sum::<usize>() != split.rows {
            return Err(MechError::malformed(&path, "trajectory lengths do not add up to the row count"));
        }
        let (t, v) = read_table(&file, &head, split.rows)?;
        Ok((file, t, v))
    };
    let width = 2 * cfg.dof();
    if sequence {
        let seq = |split: &SplitManifest| -> Result<SequenceDataset> {
            let (file, times, values) = load(split)?;
            let mut start = 0;
            let mut trajectories = Vec::new();
            for &n in &split.lengths {
                let t = Trajectory::new(times[start..start + n].to_vec(), values.slice(ndarray::s![start..start + n, ..]).to_owned())
                    .map_err(|e| MechError::malformed(&file, e))?;
                trajectories.push(t);
                start += n;
            }
            SequenceDataset::new(cfg.clone(), cfg.dt, trajectories)
        };
        Ok(ExperimentData::Sequence {
            train: seq(&manifest.train)?,
            test: seq(&manifest.test)?,
        })
    } else {
        let der = |split: &SplitManifest| -> Result<DerivativeDataset> {
            let (_, times, values) = load(split)?;
            let inputs = values.slice(ndarray::s![.., ..width]).to_owned();
            let labels = values.slice(ndarray::s![.., width..]).to_owned();
            DerivativeDataset::new(cfg.clone(), times, inputs, labels, split.lengths.clone())
        };
        Ok(ExperimentData::Derivative {
            train: der(&manifest.train)?,
            test: der(&manifest.test)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, preset, Scale};

    #[test]
    fn derivative_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset("double-pendulum/lnn", Scale::Paper).unwrap();
        cfg.n_trajectories = 3;
        cfg.samples_per_trajectory = 50;
        let data = generate(&cfg).unwrap();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(manifest.label_names, ["theta1_ddot", "theta2_ddot"]);
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
        let head = fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(head.starts_with("t,theta1,theta2,theta1_dot,theta2_dot,theta1_ddot,theta2_ddot\n"));
    }

    #[test]
    fn sequence_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset("bouncing-ball/srnn", Scale::Paper).unwrap();
        cfg.n_trajectories = 3;
        cfg.test_trajectories = 2;
        cfg.test_t_end = 3.0;
        let data = generate(&cfg).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn truncated_csv_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset("mass-spring/hnn", Scale::Paper).unwrap();
        cfg.n_trajectories = 4;
        write_dataset(dir.path(), &generate(&cfg).unwrap()).unwrap();
        let p = dir.path().join("test.csv");
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(MechError::Malformed { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset("mass-spring/hnn", Scale::Paper).unwrap();
        cfg.n_trajectories = 2;
        write_dataset(dir.path(), &generate(&cfg).unwrap()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(MechError::VersionMismatch { found: 9, .. })));
    }
}
