//! Text checkpoints.
//!
//! A matrix file starts with a `rows cols` line followed by one
//! whitespace-separated row per line. Values use shortest round-trip
//! formatting, so loading reproduces the saved bits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::export::read_key_values;
use crate::model::adam::AdamState;
use crate::model::embedding::{EmbeddingRole, EmbeddingTable};
use crate::model::train::{EarlyStopper, EpochRecord, TrainState};

const FORMAT: &str = "cdr-embeddings-v1";
const STATE_FORMAT: &str = "cdr-train-state-v1";

pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    write_matrix_stamped(path, m, &Manifest::new())
}

/// Like [`write_matrix`], with one leading `# key=value` comment per stamp.
pub fn write_matrix_stamped(path: &Path, m: ArrayView2<'_, f64>, stamps: &Manifest) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (k, v) in stamps {
        writeln!(w, "# {k}={v}").map_err(io)?;
    }
    writeln!(w, "{} {}", m.nrows(), m.ncols()).map_err(io)?;
    let mut line = String::new();
    for row in m.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a matrix file; blank lines and `#` comments are skipped.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut shape: Option<(usize, usize)> = None;
    let mut data = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((_, cols)) = shape else {
            let dims: Vec<usize> = trimmed
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| parse_err(lineno, format!("bad shape field {s:?}"))))
                .collect::<Result<_>>()?;
            let [rows, cols] = dims[..] else {
                return Err(parse_err(lineno, "shape line must hold two integers".into()));
            };
            shape = Some((rows, cols));
            data.reserve(rows * cols);
            continue;
        };
        let before = data.len();
        for tok in trimmed.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad value {tok:?}")))?);
        }
        if data.len() - before != cols {
            return Err(parse_err(lineno, format!("expected {cols} values, found {}", data.len() - before)));
        }
    }
    let (rows, cols) = shape.ok_or_else(|| parse_err(1, "missing shape line".into()))?;
    if data.len() != rows * cols {
        return Err(Error::format(path, format!("expected {rows} rows, found {}", data.len() / cols.max(1))));
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

/// Free-form `key=value` pairs stored next to a checkpoint (seed, config
/// hash and the like).
pub type Manifest = BTreeMap<String, String>;

fn write_manifest(path: &Path, entries: &Manifest) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `embeddings.txt` and `manifest.txt` into `dir`. The `extra`
/// entries go into the manifest and, as comments, atop the matrix file.
pub fn save_embeddings(e: &EmbeddingTable, dir: &Path, extra: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    write_matrix_stamped(&dir.join("embeddings.txt"), e.data(), extra)?;
    let mut m = extra.clone();
    m.insert("format".into(), FORMAT.into());
    m.insert("role".into(), e.role().name().into());
    m.insert("rows".into(), e.rows().to_string());
    m.insert("dim".into(), e.dim().to_string());
    m.insert("trainable".into(), e.trainable_dim().to_string());
    write_manifest(&dir.join("manifest.txt"), &m)
}

pub fn load_embeddings(dir: &Path) -> Result<(EmbeddingTable, Manifest)> {
    let manifest_path = dir.join("manifest.txt");
    let m = read_key_values(&manifest_path)?;
    let get = |k: &str| m.get(k).ok_or_else(|| Error::format(&manifest_path, format!("missing key {k}")));
    if get("format")? != FORMAT {
        return Err(Error::format(&manifest_path, "unknown checkpoint format"));
    }
    let role = EmbeddingRole::parse(get("role")?).ok_or_else(|| Error::format(&manifest_path, "unknown role"))?;
    let trainable: usize = get("trainable")?.parse().map_err(|_| Error::format(&manifest_path, "bad trainable"))?;
    let dim: usize = get("dim")?.parse().map_err(|_| Error::format(&manifest_path, "bad dim"))?;
    let data = read_matrix(&dir.join("embeddings.txt"))?;
    if data.ncols() != dim {
        return Err(Error::format(&manifest_path, format!("manifest dim {dim} but matrix has {} columns", data.ncols())));
    }
    Ok((EmbeddingTable::new(data, role, trainable)?, m))
}

#[derive(Serialize, Deserialize)]
struct StateScalars {
    format: String,
    epoch: usize,
    adam_step: u64,
    finished: bool,
    stopper: EarlyStopper,
    log: Vec<EpochRecord>,
    /// Caller stamps (config hash and the like); not part of the state.
    #[serde(default)]
    stamps: Manifest,
}

/// Saves a resumable training state into `dir`.
pub fn save_state(state: &TrainState, dir: &Path, extra: &Manifest) -> Result<()> {
    save_embeddings(&state.current, &dir.join("current"), extra)?;
    save_embeddings(&state.best, &dir.join("best"), extra)?;
    write_matrix_stamped(&dir.join("adam_m.txt"), state.adam.m.view(), extra)?;
    write_matrix_stamped(&dir.join("adam_v.txt"), state.adam.v.view(), extra)?;
    let scalars = StateScalars {
        format: STATE_FORMAT.into(),
        epoch: state.epoch,
        adam_step: state.adam.step,
        finished: state.finished,
        stopper: state.stopper.clone(),
        log: state.log.clone(),
        stamps: extra.clone(),
    };
    let path = dir.join("state.json");
    let text = serde_json::to_string_pretty(&scalars).expect("plain data");
    // write-then-rename so an interrupted save never leaves a torn state
    let tmp = dir.join("state.json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let s: StateScalars = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if s.format != STATE_FORMAT {
        return Err(Error::format(&path, "unknown state format"));
    }
    let (current, _) = load_embeddings(&dir.join("current"))?;
    let (best, _) = load_embeddings(&dir.join("best"))?;
    let adam = AdamState {
        m: read_matrix(&dir.join("adam_m.txt"))?,
        v: read_matrix(&dir.join("adam_v.txt"))?,
        step: s.adam_step,
    };
    Ok(TrainState {
        current,
        best,
        adam,
        epoch: s.epoch,
        stopper: s.stopper,
        log: s.log,
        finished: s.finished,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::embedding::init_embeddings;

    #[test]
    fn embeddings_round_trip_exactly() {
        let f = init_embeddings(7, 5, 3).unwrap();
        let p = init_embeddings(7, 4, 4).unwrap();
        let e = EmbeddingTable::concatenate(&f, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut extra = Manifest::new();
        extra.insert("seed".into(), "3".into());
        save_embeddings(&e, dir.path(), &extra).unwrap();
        let (back, m) = load_embeddings(dir.path()).unwrap();
        assert_eq!(back, e);
        assert_eq!(m["seed"], "3");
        assert_eq!(m["dim"], "9");
        let text = fs::read_to_string(dir.path().join("embeddings.txt")).unwrap();
        assert!(text.starts_with("# seed=3\n7 9\n"));
    }

    #[test]
    fn awkward_floats_survive() {
        let vals = [0.1, -1e-300, 1.0 / 3.0, f64::MIN_POSITIVE, 123456789.123456789, -0.0];
        let m = Array2::from_shape_vec((2, 3), vals.to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        write_matrix(&path, m.view()).unwrap();
        let back = read_matrix(&path).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ragged_matrix_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "# note\n2 2\n1 2\n3\n").unwrap();
        let err = read_matrix(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn train_state_round_trips() {
        let e = init_embeddings(4, 3, 0).unwrap();
        let mut st = TrainState::fresh(e, 10);
        st.epoch = 3;
        st.adam.step = 12;
        st.adam.m.fill(0.1);
        st.stopper.observe(1, 0.123456789012345678, 0.0);
        st.log.push(EpochRecord {
            stage: "pretrain".into(),
            epoch: 1,
            loss: 2.0 / 3.0,
            valid_ndcg: Some(0.1 + 0.2),
            improved: true,
            patience_counter: 0,
            skipped_pairs: 0,
        });
        let dir = tempfile::tempdir().unwrap();
        save_state(&st, dir.path(), &Manifest::new()).unwrap();
        assert_eq!(load_state(dir.path()).unwrap(), st);
    }
}
