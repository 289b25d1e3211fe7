use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of `metrics.csv`: a run's state after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub model: String,
    pub k: usize,
    pub param_count: usize,
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub train_l1: f64,
    /// Mean L1 over the held-out test split.
    pub test_l1: f64,
    pub zero_pad_l2: f64,
    /// Blank unless the MMD term is active.
    pub mmd: Option<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
    pub seed: u64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Format {
            path: path.to_path_buf(),
            offset,
            msg: format!("{kind:?}"),
        },
    }
}

/// Writes rows with a header line, replacing any existing file.
pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const HEADER: [&str; 12] = [
    "dataset",
    "model",
    "k",
    "param_count",
    "epoch",
    "train_l1",
    "test_l1",
    "zero_pad_l2",
    "mmd",
    "lr",
    "wall_seconds",
    "seed",
];

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, mmd: Option<f64>) -> MetricsRow {
        MetricsRow {
            dataset: "mnist".into(),
            model: "inn".into(),
            k: 12,
            param_count: 611_192,
            epoch,
            train_l1: 0.25,
            test_l1: 0.125,
            zero_pad_l2: 1e-3,
            mmd,
            lr: 1e-3,
            wall_seconds: 1.5,
            seed: 7,
        }
    }

    #[test]
    fn header_and_blank_mmd() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![row(1, None), row(2, Some(0.5))];
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HEADER.join(","));
        assert_eq!(lines[1], "mnist,inn,12,611192,1,0.25,0.125,0.001,,0.001,1.5,7");
        assert_eq!(lines.len(), 3);
        assert_eq!(read_csv(&path).unwrap(), rows);

        write_csv(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim(), HEADER.join(","));
    }
}
