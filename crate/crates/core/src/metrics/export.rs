//! Coordinate-format metric export.
//!
//! A metric set is written to a directory holding three files:
//!
//! * `manifest.txt` — `key=value` lines: format, stage, index-space sizes,
//!   block list and entry count.
//! * `entries.tsv` — one line per stored consistency value:
//!   `block row col c_value S_or_delta_value`, where the last field is the
//!   column sum `S(col)` for two-hop blocks and `δ(row, col)` for one-hop
//!   blocks. Rows and columns are per-kind indices given by the block label.
//! * `vectors.tsv` — `block vector index value` lines carrying the full
//!   column-sum vector (`S`) of two-hop blocks and the factor vectors
//!   (`a`, `b`) of one-hop blocks, so the discrepancy of pairs without a
//!   consistency entry is recoverable.
//!
//! Floats are printed in shortest round-trip form, so import is bit-exact.
//! Lines starting with `#` are comments; stamps passed to
//! [`export_metrics_stamped`] are written as `# key=value` comments atop
//! both data files and as extra manifest keys.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NodeKind;
use crate::metrics::{Discrepancy, MetricBlock, MetricSet, Schema, SparseMatrix, Stage};

const FORMAT: &str = "cdr-metrics-v1";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn export_metrics(set: &MetricSet, dir: &Path) -> Result<()> {
    export_metrics_stamped(set, dir, &BTreeMap::new())
}

pub fn export_metrics_stamped(set: &MetricSet, dir: &Path, stamps: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries_path = dir.join("entries.tsv");
    let vectors_path = dir.join("vectors.tsv");

    let mut entries = create(&entries_path)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::io(p.clone(), e)
    };
    for (k, v) in stamps {
        writeln!(entries, "# {k}={v}").map_err(io(&entries_path))?;
    }
    let mut n_entries = 0usize;
    for block in &set.blocks {
        let label = block.schema.label();
        for (r, c, v) in block.consistency.iter() {
            let aux = match &block.discrepancy {
                Discrepancy::Colsum(s) => s[c],
                Discrepancy::RankOne { source, target } => source[r] * target[c],
            };
            writeln!(entries, "{label}\t{r}\t{c}\t{v}\t{aux}").map_err(io(&entries_path))?;
            n_entries += 1;
        }
    }
    entries.flush().map_err(io(&entries_path))?;

    let mut vectors = create(&vectors_path)?;
    for (k, v) in stamps {
        writeln!(vectors, "# {k}={v}").map_err(io(&vectors_path))?;
    }
    for block in &set.blocks {
        let label = block.schema.label();
        let named: Vec<(&str, &[f64])> = match &block.discrepancy {
            Discrepancy::Colsum(s) => vec![("S", s)],
            Discrepancy::RankOne { source, target } => vec![("a", source), ("b", target)],
        };
        for (name, values) in named {
            for (i, v) in values.iter().enumerate() {
                writeln!(vectors, "{label}\t{name}\t{i}\t{v}").map_err(io(&vectors_path))?;
            }
        }
    }
    vectors.flush().map_err(io(&vectors_path))?;

    let manifest_path = dir.join("manifest.txt");
    let mut manifest = create(&manifest_path)?;
    let blocks: Vec<&str> = set.blocks.iter().map(|b| b.schema.label()).collect();
    let lines = [
        format!("format={FORMAT}"),
        format!("stage={}", set.stage.name()),
        format!("tuples={}", set.n_tuples),
        format!("objects={}", set.n_objects),
        format!("blocks={}", blocks.join(",")),
        format!("entries={n_entries}"),
        "index_space=per-kind indices; block label gives row kind (first letter) and column kind (last letter)".to_string(),
    ];
    for line in lines.into_iter().chain(stamps.iter().map(|(k, v)| format!("{k}={v}"))) {
        writeln!(manifest, "{line}").map_err(io(&manifest_path))?;
    }
    manifest.flush().map_err(io(&manifest_path))
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn count_of(kind: NodeKind, n_tuples: usize, n_objects: usize) -> usize {
    if kind == NodeKind::Tuple {
        n_tuples
    } else {
        n_objects
    }
}

pub fn import_metrics(dir: &Path) -> Result<MetricSet> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = read_key_values(&manifest_path)?;
    let get = |k: &str| {
        manifest
            .get(k)
            .ok_or_else(|| Error::format(&manifest_path, format!("missing key {k}")))
    };
    if get("format")? != FORMAT {
        return Err(Error::format(&manifest_path, "unknown format"));
    }
    let stage = match get("stage")?.as_str() {
        "pretrain" => Stage::Pretrain,
        "finetune" => Stage::Finetune,
        other => return Err(Error::format(&manifest_path, format!("unknown stage {other}"))),
    };
    let parse_count = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(&manifest_path, format!("bad {k}")))
    };
    let n_tuples = parse_count("tuples")?;
    let n_objects = parse_count("objects")?;

    let mut triples: BTreeMap<Schema, Vec<(usize, usize, f64)>> = BTreeMap::new();
    let mut vectors: BTreeMap<(Schema, String), Vec<f64>> = BTreeMap::new();

    let entries_path = dir.join("entries.tsv");
    for_each_record(&entries_path, 5, |f| {
        let schema = Schema::from_label(f[0]).ok_or("unknown block")?;
        let r = f[1].parse::<usize>().map_err(|_| "bad row")?;
        let c = f[2].parse::<usize>().map_err(|_| "bad col")?;
        let v = f[3].parse::<f64>().map_err(|_| "bad value")?;
        triples.entry(schema).or_default().push((r, c, v));
        Ok(())
    })?;

    let vectors_path = dir.join("vectors.tsv");
    for_each_record(&vectors_path, 4, |f| {
        let schema = Schema::from_label(f[0]).ok_or("unknown block")?;
        let i = f[2].parse::<usize>().map_err(|_| "bad index")?;
        let v = f[3].parse::<f64>().map_err(|_| "bad value")?;
        let vec = vectors.entry((schema, f[1].to_string())).or_default();
        if vec.len() != i {
            return Err("vector indices must be contiguous");
        }
        vec.push(v);
        Ok(())
    })?;

    let schemas = stage.schemas();
    let mut blocks = Vec::with_capacity(4);
    for schema in schemas {
        let rows = count_of(schema.src_kind(), n_tuples, n_objects);
        let cols = count_of(schema.dst_kind(), n_tuples, n_objects);
        let mut t = triples.remove(&schema).unwrap_or_default();
        t.sort_by_key(|&(r, c, _)| (r, c));
        if t.iter().any(|&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::format(&entries_path, format!("{schema} entry out of range")));
        }
        let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = vectors.remove(&(schema, name.to_string())).unwrap_or_default();
            if v.len() != len {
                return Err(Error::format(
                    &vectors_path,
                    format!("{schema} vector {name} has {} values, expected {len}", v.len()),
                ));
            }
            Ok(v)
        };
        let discrepancy = if schema.is_one_hop() {
            Discrepancy::RankOne {
                source: take("a", rows)?,
                target: take("b", cols)?,
            }
        } else {
            Discrepancy::Colsum(take("S", cols)?)
        };
        blocks.push(MetricBlock {
            schema,
            consistency: SparseMatrix::from_sorted_triples(rows, cols, &t),
            discrepancy,
        });
    }
    if let Some(schema) = triples.keys().next() {
        return Err(Error::format(&entries_path, format!("block {schema} does not belong to stage {}", stage.name())));
    }
    let blocks: [MetricBlock; 4] = blocks.try_into().expect("four blocks per stage");
    Ok(MetricSet {
        stage,
        n_tuples,
        n_objects,
        blocks,
    })
}

fn for_each_record<F>(path: &Path, fields: usize, mut f: F) -> Result<()>
where
    F: FnMut(&[&str]) -> std::result::Result<(), &'static str>,
{
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != fields {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected {fields} fields, found {}", parts.len()),
            });
        }
        f(&parts).map_err(|m| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m.to_string(),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Relation};
    use crate::metrics::{build_member_metrics, build_tuple_metrics};

    fn toy() -> crate::graph::TripartiteGraph {
        let z = Relation::from_edges(NodeKind::Tuple, NodeKind::Member, 2, 4, [(0, 0), (0, 1), (1, 1), (1, 2)]).unwrap();
        let x = Relation::from_edges(NodeKind::Member, NodeKind::Object, 4, 2, [(3, 0), (2, 1)]).unwrap();
        let y = Relation::from_edges(NodeKind::Tuple, NodeKind::Object, 2, 2, [(0, 0), (1, 0), (1, 1)]).unwrap();
        build_graph(Some(y), x, z).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let g = toy();
        for set in [build_member_metrics(&g).unwrap(), build_tuple_metrics(g.y()).unwrap()] {
            let dir = tempfile::tempdir().unwrap();
            export_metrics(&set, dir.path()).unwrap();
            let back = import_metrics(dir.path()).unwrap();
            assert_eq!(back, set);
        }
    }

    #[test]
    fn stamped_export_still_imports() {
        let set = build_tuple_metrics(toy().y()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stamps = BTreeMap::from([("config_hash".to_string(), "abc".to_string())]);
        export_metrics_stamped(&set, dir.path(), &stamps).unwrap();
        for file in ["entries.tsv", "vectors.tsv"] {
            let text = fs::read_to_string(dir.path().join(file)).unwrap();
            assert!(text.starts_with("# config_hash=abc\n"));
        }
        assert_eq!(read_key_values(&dir.path().join("manifest.txt")).unwrap()["config_hash"], "abc");
        assert_eq!(import_metrics(dir.path()).unwrap(), set);
    }

    #[test]
    fn toy_export_line_carries_consistency() {
        let g = toy();
        let set = build_member_metrics(&g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_metrics(&set, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("entries.tsv")).unwrap();
        let line = text.lines().find(|l| l.starts_with("TMT\t0\t1\t")).unwrap();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[3], "0.5");
    }

    #[test]
    fn empty_blocks_still_write_manifest() {
        // members linked to tuples never reach an object
        let z = Relation::from_edges(NodeKind::Tuple, NodeKind::Member, 1, 2, [(0, 0)]).unwrap();
        let x = Relation::from_edges(NodeKind::Member, NodeKind::Object, 2, 1, [(1, 0)]).unwrap();
        let g = build_graph(None, x, z).unwrap();
        let set = build_member_metrics(&g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_metrics(&set, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("entries.tsv")).unwrap();
        assert!(!text.lines().any(|l| l.starts_with("TMO") || l.starts_with("OMT")));
        let manifest = read_key_values(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest["blocks"], "TMT,TMO,OMT,OMO");
        assert_eq!(import_metrics(dir.path()).unwrap(), set);
    }
}
