//! TU benchmark text format (1-indexed).
//!
//! | file | content |
//! |---|---|
//! | `<name>_A.txt` | `i, j` per line, one directed half-edge |
//! | `<name>_graph_indicator.txt` | line `n` = graph id of node `n` |
//! | `<name>_graph_labels.txt` | one integer per graph |
//! | `<name>_node_labels.txt` | optional, one integer per node |
//! | `<name>_node_attributes.txt` | optional, comma-separated decimals per node |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Graph, GraphCollection};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

struct Lines {
    file: String,
    /// `(1-based line number, trimmed content)` of non-blank lines.
    lines: Vec<(usize, String)>,
}

impl Lines {
    fn read(path: &Path, required: bool) -> Result<Option<Self>> {
        if !path.exists() {
            return if required {
                Err(Error::MissingFile { path: path.to_owned() })
            } else {
                Ok(None)
            };
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim().to_owned()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Ok(Some(Self {
            file: path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
            lines,
        }))
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.clone(),
            line,
            message: message.into(),
        }
    }

    fn ints(&self) -> Result<Vec<i64>> {
        self.lines
            .iter()
            .map(|(n, l)| l.parse::<i64>().map_err(|_| self.err(*n, format!("expected integer, found {l:?}"))))
            .collect()
    }
}

fn file(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

/// Maps arbitrary integer labels to contiguous ids in ascending order.
fn remap(values: &[i64]) -> Vec<usize> {
    let uniq: BTreeMap<i64, usize> = values
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    values.iter().map(|v| uniq[v]).collect()
}

/// Loads `<directory>/<name>_*.txt` into a collection.
///
/// Node features are the attribute rows when present, otherwise a one-hot of
/// the node label, otherwise a constant `1.0`. Labels are remapped to
/// contiguous 0-based ids.
pub fn load_tu_dataset(directory: impl AsRef<Path>, name: &str) -> Result<GraphCollection> {
    let dir = directory.as_ref();
    let a = Lines::read(&file(dir, name, "A"), true)?.unwrap();
    let ind = Lines::read(&file(dir, name, "graph_indicator"), true)?.unwrap();
    let glab = Lines::read(&file(dir, name, "graph_labels"), true)?.unwrap();
    let nlab = Lines::read(&file(dir, name, "node_labels"), false)?;
    let nattr = Lines::read(&file(dir, name, "node_attributes"), false)?;

    let indicator = ind.ints()?;
    let n = indicator.len();
    let graph_ids: Vec<i64> = indicator.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let graph_index: BTreeMap<i64, usize> = graph_ids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let num_graphs = graph_ids.len();

    // node → (graph, local index)
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    let mut local = vec![(0usize, 0usize); n];
    for (node, gid) in indicator.iter().enumerate() {
        let g = graph_index[gid];
        local[node] = (g, members[g].len());
        members[g].push(node);
    }

    let labels = glab.ints()?;
    if labels.len() != num_graphs {
        let line = glab.lines.last().map_or(1, |l| l.0);
        return Err(glab.err(
            line,
            format!("{} graph labels for {num_graphs} graphs", labels.len()),
        ));
    }
    let graph_labels = remap(&labels);

    let node_labels = match &nlab {
        Some(l) => {
            let v = l.ints()?;
            if v.len() != n {
                let line = l.lines.last().map_or(1, |x| x.0);
                return Err(l.err(line, format!("{} node labels for {n} nodes", v.len())));
            }
            Some(remap(&v))
        }
        None => None,
    };

    let features: Tensor<f32> = if let Some(attr) = &nattr {
        if attr.lines.len() != n {
            let line = attr.lines.last().map_or(1, |x| x.0);
            return Err(attr.err(line, format!("{} attribute rows for {n} nodes", attr.lines.len())));
        }
        let mut rows = Vec::with_capacity(n);
        for (ln, l) in &attr.lines {
            let row = l
                .split(',')
                .map(|t| {
                    let t = t.trim();
                    t.parse::<f32>().map_err(|_| attr.err(*ln, format!("bad decimal {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Tensor::from_rows(&rows).map_err(|_| attr.err(attr.lines[0].0, "attribute rows differ in length"))?
    } else if let Some(labels) = &node_labels {
        let classes = labels.iter().max().map_or(1, |m| m + 1);
        let mut data = vec![0.0f32; n * classes];
        for (i, &c) in labels.iter().enumerate() {
            data[i * classes + c] = 1.0;
        }
        Tensor::matrix(n, classes, data)
    } else {
        Tensor::filled(&[n, 1], 1.0)
    };
    let dim = features.cols();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (ln, l) in &a.lines {
        let mut parts = l.split(',').map(str::trim);
        let (Some(s), Some(t), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(a.err(*ln, format!("expected \"i, j\", found {l:?}")));
        };
        let parse = |s: &str| -> Result<usize> {
            let v: usize = s.parse().map_err(|_| a.err(*ln, format!("bad node index {s:?}")))?;
            if v == 0 || v > n {
                return Err(a.err(*ln, format!("edge references node {v}, but only {n} nodes exist")));
            }
            Ok(v - 1)
        };
        let (u, v) = (parse(s)?, parse(t)?);
        let ((gu, lu), (gv, lv)) = (local[u], local[v]);
        if gu != gv {
            return Err(a.err(
                *ln,
                format!(
                    "edge ({}, {}) joins graph {} and graph {}; a node cannot belong to two graphs",
                    u + 1,
                    v + 1,
                    graph_ids[gu],
                    graph_ids[gv]
                ),
            ));
        }
        edges[gu].push((lu, lv));
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, nodes) in members.iter().enumerate() {
        let feats = features.gather_rows(nodes);
        let labels = node_labels.as_ref().map(|l| nodes.iter().map(|&i| l[i]).collect());
        graphs.push(Graph::new(
            nodes.len(),
            std::mem::take(&mut edges[g]),
            feats,
            labels,
            Some(graph_labels[g]),
        )?);
    }
    let c = GraphCollection::new(name, graphs)?;
    debug_assert_eq!(c.feature_dim(), dim);
    Ok(c)
}

/// Writes a collection in TU format. Features are always written as node
/// attributes so that reloading reproduces them exactly. Graphs without a
/// label are written with label 0.
pub fn write_tu_dataset(collection: &GraphCollection, directory: impl AsRef<Path>, name: &str) -> Result<()> {
    let dir = directory.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut a, mut ind, mut glab, mut nlab, mut attr) =
        (String::new(), String::new(), String::new(), String::new(), String::new());
    let has_node_labels = collection.graphs().iter().all(|g| g.node_labels().is_some());
    let mut base = 0;
    for (gi, g) in collection.graphs().iter().enumerate() {
        for v in 0..g.num_nodes() {
            writeln!(ind, "{}", gi + 1).unwrap();
            for &u in g.neighbors(v) {
                writeln!(a, "{}, {}", base + v + 1, base + u + 1).unwrap();
            }
            let row: Vec<String> = g.features().row(v).iter().map(|x| x.to_string()).collect();
            writeln!(attr, "{}", row.join(", ")).unwrap();
            if has_node_labels {
                writeln!(nlab, "{}", g.node_labels().unwrap()[v]).unwrap();
            }
        }
        writeln!(glab, "{}", g.graph_label().unwrap_or(0)).unwrap();
        base += g.num_nodes();
    }
    let put = |suffix: &str, body: &str| {
        let p = file(dir, name, suffix);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    put("A", &a)?;
    put("graph_indicator", &ind)?;
    put("graph_labels", &glab)?;
    put("node_attributes", &attr)?;
    if has_node_labels {
        put("node_labels", &nlab)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, suffix: &str, body: &str) {
        fs::write(file(dir, "T", suffix), body).unwrap();
    }

    /// Triangle (graph 1) and a 2-path (graph 2), with self-loop and duplicate noise.
    fn minimal(dir: &Path) {
        write(dir, "A", "1, 2\n2, 1\n2,3\n3, 2\n1 ,3\n3,1\n1,1\n4, 5\n5, 4\n4, 5\n");
        write(dir, "graph_indicator", "1\n1\n1\n2\n2\n");
        write(dir, "graph_labels", "-1\n1\n");
    }

    #[test]
    fn minimal_two_graph_fixture() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        let c = load_tu_dataset(d.path(), "T").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.graphs()[0].num_nodes(), 3);
        assert_eq!(c.graphs()[1].num_nodes(), 2);
        assert_eq!(c.graphs()[0].num_edges(), 3);
        assert_eq!(c.graphs()[1].num_edges(), 1);
        assert_eq!(c.graphs()[0].graph_label(), Some(0));
        assert_eq!(c.graphs()[1].graph_label(), Some(1));
        assert_eq!(c.feature_dim(), 1);
        assert_eq!(c.graphs()[0].features().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn node_labels_become_one_hot() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(d.path(), "node_labels", "5\n7\n5\n9\n7\n");
        let c = load_tu_dataset(d.path(), "T").unwrap();
        assert_eq!(c.feature_dim(), 3);
        assert_eq!(c.node_class_count(), Some(3));
        assert_eq!(c.graphs()[1].features().row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(c.graphs()[1].node_labels().unwrap(), &[2, 1]);
    }

    #[test]
    fn attributes_take_precedence() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(d.path(), "node_labels", "0\n1\n0\n1\n0\n");
        write(d.path(), "node_attributes", "1.5, 2\n0,0\n-1 , 3.25\n4,4\n5,5\n");
        let c = load_tu_dataset(d.path(), "T").unwrap();
        assert_eq!(c.feature_dim(), 2);
        assert_eq!(c.graphs()[0].features().row(2), &[-1.0, 3.25]);
    }

    #[test]
    fn missing_file_is_named() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        fs::remove_file(file(d.path(), "T", "graph_indicator")).unwrap();
        let err = load_tu_dataset(d.path(), "T").unwrap_err();
        assert!(err.to_string().contains("T_graph_indicator.txt"), "{err}");
    }

    #[test]
    fn dangling_edge_reports_line() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(d.path(), "A", "1, 2\n2, 9\n");
        match load_tu_dataset(d.path(), "T").unwrap_err() {
            Error::Format { line, file, .. } => {
                assert_eq!(line, 2);
                assert_eq!(file, "T_A.txt");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn cross_graph_edge_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(d.path(), "A", "1, 2\n3, 4\n");
        let err = load_tu_dataset(d.path(), "T").unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn label_count_must_match_graphs() {
        let d = tempfile::tempdir().unwrap();
        minimal(d.path());
        write(d.path(), "graph_labels", "1\n");
        assert!(matches!(load_tu_dataset(d.path(), "T"), Err(Error::Format { .. })));
    }
}
