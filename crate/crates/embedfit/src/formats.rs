//! On-disk formats: JSON Lines datasets, JSON checkpoints and CSV reports.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use embedfit_core::datagen::Sample;
use embedfit_core::inference::SampleMetrics;
use embedfit_core::linalg::Matrix;
use embedfit_core::net::Embedding;
use embedfit_core::trainer::EpochRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {msg}", path.display())]
    Invalid { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> FormatError + '_ {
    move |e| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        FormatError::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn open(path: &Path) -> Result<File, FormatError> {
    File::open(path).map_err(io_err(path))
}

/// Reads one sample per non-blank line. `path` only labels errors.
pub fn read_samples<R: Read>(reader: R, path: &Path) -> Result<Vec<Sample>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| FormatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let sample: Sample = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        sample.validate().map_err(parse)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>, FormatError> {
    read_samples(open(path)?, path)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<(), FormatError> {
    let mut w = create(path)?;
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| FormatError::Invalid {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes through a sibling temp file so a crash never leaves half a file.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let tmp = path.with_extension("json.tmp");
    let mut w = create(&tmp)?;
    serde_json::to_writer(&mut w, value).map_err(|e| FormatError::Invalid {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| FormatError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn opt(v: Option<impl ToString>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["epoch", "train_loss", "val_error", "val_nmi"])
        .map_err(csv_err(path))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            opt(r.val_error),
            opt(r.val_nmi),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Metrics report; residual columns `r_K` cover `k_range` inclusive.
pub fn write_metrics(path: &Path, rows: &[SampleMetrics], k_range: (usize, usize)) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = ["sample_id", "K_true", "K_est_sod", "K_est_silh", "error_rate", "nmi"]
        .map(String::from)
        .to_vec();
    header.extend((k_range.0..=k_range.1).map(|k| format!("r_{k}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for r in rows {
        let mut rec = vec![
            r.sample_id.clone(),
            r.k_true.to_string(),
            opt(r.k_est_sod),
            opt(r.k_est_silh),
            r.error_rate.to_string(),
            r.nmi.to_string(),
        ];
        for i in 0..=(k_range.1 - k_range.0) {
            rec.push(opt(r.residuals.get(i)));
        }
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// One embedded sample as read back from an embeddings CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    pub sample_id: String,
    pub embedding: Embedding,
    pub labels: Vec<usize>,
}

/// Columns `sample_id, point, z1..zd, label`, one row per point.
pub fn write_embeddings(path: &Path, samples: &[Sample], embeddings: &[Embedding]) -> Result<(), FormatError> {
    let d = embeddings.first().map_or(0, |e| e.dim());
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec![String::from("sample_id"), String::from("point")];
    header.extend((1..=d).map(|j| format!("z{j}")));
    header.push(String::from("label"));
    w.write_record(&header).map_err(csv_err(path))?;
    for (s, z) in samples.iter().zip(embeddings) {
        for (i, row) in z.row_iter().enumerate() {
            let mut rec = vec![s.id.clone(), i.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            rec.push(s.labels[i].to_string());
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddedSample>, FormatError> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header = r.headers().map_err(csv_err(path))?.clone();
    let d = header.len().checked_sub(3).ok_or_else(|| FormatError::Invalid {
        path: path.to_path_buf(),
        msg: String::from("expected sample_id, point, z1..zd, label columns"),
    })?;
    let mut groups: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let parse = |msg: String| FormatError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let id = &rec[0];
        if groups.last().map_or(true, |g| g.0 != id) {
            groups.push((id.to_string(), Vec::new(), Vec::new()));
        }
        let g = groups.last_mut().expect("group pushed above");
        for j in 0..d {
            g.1.push(rec[2 + j].parse::<f64>().map_err(|e| parse(e.to_string()))?);
        }
        g.2.push(rec[2 + d].parse::<usize>().map_err(|e| parse(e.to_string()))?);
    }
    groups
        .into_iter()
        .map(|(sample_id, data, labels)| {
            let m = Matrix::from_vec(labels.len(), d, data);
            let embedding = Embedding::new(m).ok_or_else(|| FormatError::Invalid {
                path: path.to_path_buf(),
                msg: format!("sample {sample_id}: rows are not unit norm"),
            })?;
            Ok(EmbeddedSample {
                sample_id,
                embedding,
                labels,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use embedfit_core::datagen::{generate, DatasetSpec};

    #[test]
    fn empty_file_is_empty_dataset() {
        let v = read_samples(&b""[..], Path::new("x.jsonl")).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn bad_line_reports_line_number() {
        let data = generate(&DatasetSpec {
            n_samples: 1,
            ..DatasetSpec::default()
        })
        .unwrap();
        let good = serde_json::to_string(&data[0]).unwrap();
        let text = format!("{good}\n\n{{\"id\": 3}}\n");
        match read_samples(text.as_bytes(), Path::new("d.jsonl")) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_sample_is_rejected() {
        let data = generate(&DatasetSpec {
            n_samples: 1,
            ..DatasetSpec::default()
        })
        .unwrap();
        let mut s = data[0].clone();
        s.labels.pop();
        let text = serde_json::to_string(&s).unwrap();
        assert!(matches!(
            read_samples(text.as_bytes(), Path::new("d.jsonl")),
            Err(FormatError::Parse { line: 1, .. })
        ));
    }
}
