//! JSON Lines graph files and the dataset metadata sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, Graph};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    id: String,
    num_nodes: usize,
    node_features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    targets: Vec<f64>,
}

impl From<&Graph> for GraphRecord {
    fn from(g: &Graph) -> Self {
        GraphRecord {
            id: g.id().to_string(),
            num_nodes: g.num_nodes(),
            node_features: g.node_features(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            targets: g.targets().to_vec(),
        }
    }
}

impl TryFrom<GraphRecord> for Graph {
    type Error = Error;

    fn try_from(r: GraphRecord) -> Result<Graph> {
        if r.num_nodes != r.node_features.len() {
            return Err(Error::Graph(format!(
                "num_nodes is {} but {} feature rows were given",
                r.num_nodes,
                r.node_features.len()
            )));
        }
        Graph::new(
            r.id,
            r.node_features,
            r.edges.into_iter().map(|[u, v]| (u, v)).collect(),
            r.targets,
        )
    }
}

/// Reads one graph per non-empty line. Errors carry the 1-based line number.
pub fn read_graphs(path: impl AsRef<Path>) -> Result<Vec<Graph>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut graphs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: GraphRecord =
            serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        graphs.push(Graph::try_from(rec).map_err(|e| record_err(e.to_string()))?);
    }
    Ok(graphs)
}

pub fn write_graphs(path: impl AsRef<Path>, graphs: &[Graph]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for g in graphs {
        serde_json::to_writer(&mut w, &GraphRecord::from(g))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<DatasetMeta> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_meta(path: impl AsRef<Path>, meta: &DatasetMeta) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_graphs(&p).unwrap().is_empty());
    }

    #[test]
    fn bad_endpoint_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = r#"{"id":"a","num_nodes":2,"node_features":[[1.0],[2.0]],"edges":[[0,1]],"targets":[0.5]}"#;
        let bad = r#"{"id":"b","num_nodes":2,"node_features":[[1.0],[2.0]],"edges":[[0,2]],"targets":[0.5]}"#;
        std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match read_graphs(&p) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn reversed_duplicate_edge_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dup.jsonl");
        let rec = r#"{"id":"a","num_nodes":2,"node_features":[[1.0],[2.0]],"edges":[[0,1],[1,0]],"targets":[]}"#;
        std::fs::write(&p, format!("{rec}\n")).unwrap();
        assert!(matches!(
            read_graphs(&p),
            Err(Error::Record { line: 1, .. })
        ));
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "\n{not json}\n").unwrap();
        assert!(matches!(
            read_graphs(&p),
            Err(Error::Record { line: 2, .. })
        ));
    }
}
