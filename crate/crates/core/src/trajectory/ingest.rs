use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{validate_trajectory, TrajectoryRecord, ValidationReport};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed trajectory record: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{root}: expected exactly one .jsonl manifest, found {count}")]
    ManifestCount { root: PathBuf, count: usize },
    #[error("trajectory {id}: missing image {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("trajectory {id}: cannot decode image header of {path}: {reason}")]
    ImageHeader {
        id: String,
        path: PathBuf,
        reason: String,
    },
    #[error("trajectory {id} step {index}: image {path} is {actual_width}x{actual_height}, manifest says {width}x{height}")]
    ImageSize {
        id: String,
        index: u32,
        path: PathBuf,
        width: u32,
        height: u32,
        actual_width: u32,
        actual_height: u32,
    },
    #[error("trajectory {id}: {report}")]
    Validation { id: String, report: ValidationReport },
    #[error("trajectory {id}: source is '{found}', expected '{expected}'")]
    SourceMismatch {
        id: String,
        found: String,
        expected: String,
    },
    #[error("duplicate trajectory id {0}")]
    DuplicateId(String),
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses a JSONL manifest without touching images. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<TrajectoryRecord>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| IngestError::Json {
            path: path.to_path_buf(),
            line: n + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes records in canonical form: one compact JSON object per line.
pub fn write_manifest(path: &Path, records: &[TrajectoryRecord]) -> Result<(), IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("trajectory records always serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn find_manifest(root: &Path) -> Result<Option<PathBuf>, IngestError> {
    let entries = fs::read_dir(root).map_err(|source| IngestError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut manifests: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    match manifests.len() {
        0 => Ok(None),
        1 => Ok(manifests.pop()),
        count => Err(IngestError::ManifestCount {
            root: root.to_path_buf(),
            count,
        }),
    }
}

/// Loads, validates and hashes one source's corpus.
///
/// `root` holds a single `*.jsonl` manifest; screenshot paths are resolved
/// relative to `root`. Every record must carry `source`. The result is sorted
/// by trajectory id and each state's `content_hash` is filled in.
pub fn ingest_corpus(root: &Path, source: &str) -> Result<Vec<TrajectoryRecord>, IngestError> {
    let Some(manifest) = find_manifest(root)? else {
        log::warn!("{}: no trajectory manifest found, corpus is empty", root.display());
        return Ok(Vec::new());
    };
    let mut records = read_manifest(&manifest)?;
    if records.is_empty() {
        log::warn!("{}: manifest is empty", manifest.display());
    }

    for r in &records {
        if r.source != source {
            return Err(IngestError::SourceMismatch {
                id: r.id.clone(),
                found: r.source.clone(),
                expected: source.to_string(),
            });
        }
        let report = validate_trajectory(r);
        if !report.is_pass() {
            return Err(IngestError::Validation {
                id: r.id.clone(),
                report,
            });
        }
    }

    records.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(IngestError::DuplicateId(w[0].id.clone()));
    }

    records
        .par_iter_mut()
        .try_for_each(|r| hash_screenshots(root, r))?;
    Ok(records)
}

fn hash_screenshots(root: &Path, record: &mut TrajectoryRecord) -> Result<(), IngestError> {
    for step in &mut record.steps {
        let state = &mut step.state;
        let path = root.join(&state.screenshot.path);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(IngestError::MissingImage {
                    id: record.id.clone(),
                    path,
                })
            }
            Err(source) => return Err(IngestError::Io { path, source }),
        };
        let header_err = |reason: String| IngestError::ImageHeader {
            id: record.id.clone(),
            path: path.clone(),
            reason,
        };
        let (w, h) = image::ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| header_err(e.to_string()))?
            .into_dimensions()
            .map_err(|e| header_err(e.to_string()))?;
        if (w, h) != (state.screenshot.width, state.screenshot.height) {
            return Err(IngestError::ImageSize {
                id: record.id.clone(),
                index: state.index,
                path,
                width: state.screenshot.width,
                height: state.screenshot.height,
                actual_width: w,
                actual_height: h,
            });
        }
        state.content_hash = content_hash(&bytes);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::mind2web_record;

    fn write_png(path: &Path, w: u32, h: u32, rgb: [u8; 3]) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(w, h, image::Rgb(rgb))
            .save(path)
            .unwrap();
    }

    fn fixture(dir: &Path, lens: &[u32]) -> Vec<TrajectoryRecord> {
        let mut records = Vec::new();
        for (k, &n) in lens.iter().enumerate() {
            let mut t = mind2web_record(n);
            t.id = format!("traj-{k}");
            for s in &mut t.steps {
                s.state.screenshot.path = format!("img/{k}_{}.png", s.state.index);
                write_png(
                    &dir.join(&s.state.screenshot.path),
                    64,
                    48,
                    [k as u8, s.state.index as u8, 0],
                );
            }
            records.push(t);
        }
        records
    }

    #[test]
    fn ingests_and_sorts_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = fixture(dir.path(), &[3, 1, 2]);
        records.reverse();
        write_manifest(&dir.path().join("m.jsonl"), &records).unwrap();

        let out = ingest_corpus(dir.path(), "mind2web").unwrap();
        assert_eq!(out.len(), 3);
        let ids: Vec<_> = out.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["traj-0", "traj-1", "traj-2"]);
        let total: usize = out.iter().map(|r| r.len()).sum();
        assert_eq!(total, 6);
        assert!(out
            .iter()
            .flat_map(|r| &r.steps)
            .all(|s| s.state.content_hash.len() == 64));
    }

    #[test]
    fn empty_directory_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_corpus(dir.path(), "mind2web").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path(), &[1]);
        let mut text = serde_json::to_string(&records[0]).unwrap();
        text.push_str("\n{not json\n");
        fs::write(dir.path().join("m.jsonl"), text).unwrap();
        let err = ingest_corpus(dir.path(), "mind2web").unwrap_err();
        assert!(matches!(err, IngestError::Json { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path(), &[2]);
        fs::remove_file(dir.path().join("img/0_2.png")).unwrap();
        write_manifest(&dir.path().join("m.jsonl"), &records).unwrap();
        let err = ingest_corpus(dir.path(), "mind2web").unwrap_err();
        assert!(err.to_string().contains("img/0_2.png"), "{err}");
    }

    #[test]
    fn unknown_operation_cites_id_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = fixture(dir.path(), &[2]);
        records[0].steps[1].action.operation = "swipe".into();
        write_manifest(&dir.path().join("m.jsonl"), &records).unwrap();
        let msg = ingest_corpus(dir.path(), "mind2web").unwrap_err().to_string();
        assert!(msg.contains("traj-0") && msg.contains("step 2") && msg.contains("swipe"), "{msg}");
    }

    #[test]
    fn wrong_dimensions_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = fixture(dir.path(), &[1]);
        records[0].steps[0].state.screenshot.width = 65;
        write_manifest(&dir.path().join("m.jsonl"), &records).unwrap();
        assert!(matches!(
            ingest_corpus(dir.path(), "mind2web").unwrap_err(),
            IngestError::ImageSize { .. }
        ));

        records[0].steps[0].state.screenshot.width = 64;
        write_manifest(&dir.path().join("m.jsonl"), &records).unwrap();
        fs::write(dir.path().join("img/0_1.png"), b"not a png").unwrap();
        assert!(matches!(
            ingest_corpus(dir.path(), "mind2web").unwrap_err(),
            IngestError::ImageHeader { .. }
        ));
    }

    #[test]
    fn source_mismatch_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let records = fixture(dir.path(), &[1, 1]);
        write_manifest(&dir.path().join("m.jsonl"), &records).unwrap();
        assert!(matches!(
            ingest_corpus(dir.path(), "weblinx").unwrap_err(),
            IngestError::SourceMismatch { .. }
        ));
        let dup = vec![records[0].clone(), records[0].clone()];
        write_manifest(&dir.path().join("m.jsonl"), &dup).unwrap();
        assert!(matches!(
            ingest_corpus(dir.path(), "mind2web").unwrap_err(),
            IngestError::DuplicateId(_)
        ));
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = fixture(dir.path(), &[2, 3]);
        records[0].steps[0].action.value = Some(crate::trajectory::ActionValue::List(vec![
            crate::trajectory::Scalar::Float(0.25),
            crate::trajectory::Scalar::Int(3),
        ]));
        records[1].steps[1].action.target = Some(crate::trajectory::BBox {
            x: 0.5704,
            y: 0.2142,
            width: 0.3678,
            height: 0.0663,
        });
        let first = dir.path().join("m.jsonl");
        write_manifest(&first, &records).unwrap();
        let ingested = ingest_corpus(dir.path(), "mind2web").unwrap();
        let out = tempfile::tempdir().unwrap();
        let second = out.path().join("m.jsonl");
        write_manifest(&second, &ingested).unwrap();
        assert_eq!(fs::read(first).unwrap(), fs::read(second).unwrap());
    }
}
