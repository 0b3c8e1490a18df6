use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::MetricsRecord;

/// Euclidean distances of the probe embedding over training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub graph_id: String,
    /// Distance from the epoch-1 embedding to every epoch, starting at 0.
    pub from_initial: Vec<f64>,
    /// Distance between consecutive epochs; one shorter than the run.
    pub consecutive: Vec<f64>,
}

impl Trajectory {
    /// Distance between the first and last snapshot.
    pub fn displacement(&self) -> f64 {
        self.from_initial.last().copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,from_initial,consecutive\n");
        for (i, d) in self.from_initial.iter().enumerate() {
            let c = if i == 0 {
                "NA".to_string()
            } else {
                format!("{:.9e}", self.consecutive[i - 1])
            };
            writeln!(s, "{},{d:.9e},{c}", i + 1).unwrap();
        }
        s
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn embedding_trajectory(record: &MetricsRecord) -> Result<Trajectory> {
    let probe = record
        .probe
        .as_ref()
        .ok_or_else(|| Error::Missing("run record has no probe embeddings".into()))?;
    let snaps = &probe.embeddings;
    let first = snaps
        .first()
        .ok_or_else(|| Error::Missing(format!("probe {} has no snapshots", probe.graph_id)))?;
    if snaps.iter().any(|s| s.len() != first.len()) {
        return Err(Error::InvalidArgument(
            "probe snapshots differ in width".into(),
        ));
    }
    Ok(Trajectory {
        graph_id: probe.graph_id.clone(),
        from_initial: snaps.iter().map(|s| distance(first, s)).collect(),
        consecutive: snaps.windows(2).map(|w| distance(&w[0], &w[1])).collect(),
    })
}
