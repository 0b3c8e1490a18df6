use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, Permutation, TaskKind};
use crate::training::TrainedModel;

/// How node orderings are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationMode {
    /// Uniform over all orderings.
    #[default]
    Random,
    /// Compositions of at most three random transpositions; small edits of
    /// the stored order.
    Structured,
    /// The stored order only.
    Identity,
}

pub const STRUCTURED_MAX_SWAPS: usize = 3;

fn default_count() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessConfig {
    #[serde(default = "default_count")]
    pub n_graphs: usize,
    #[serde(default = "default_count")]
    pub n_perms: usize,
    #[serde(default)]
    pub mode: PermutationMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            n_graphs: default_count(),
            n_perms: default_count(),
            mode: PermutationMode::Random,
            seed: 0,
        }
    }
}

/// Five-number summary with linear interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Quartiles> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Quartiles {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }

    /// Values outside the 1.5 IQR fences.
    pub fn outliers(&self, values: &[f64]) -> usize {
        let iqr = self.q3 - self.q1;
        let (lo, hi) = (self.q1 - 1.5 * iqr, self.q3 + 1.5 * iqr);
        values.iter().filter(|&&v| v < lo || v > hi).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphErrors {
    pub graph_id: String,
    /// Absolute error under each permutation, averaged over targets.
    pub errors: Vec<f64>,
    /// `max - min` of `errors`.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutRobustness {
    pub name: String,
    pub quartiles: Quartiles,
    pub outliers: usize,
    pub max_spread: f64,
    pub graphs: Vec<GraphErrors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub config: RobustnessConfig,
    pub readouts: Vec<ReadoutRobustness>,
}

impl RobustnessReport {
    /// Summary table, one row per model.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,min,q1,median,q3,max,outliers,max_spread\n");
        for r in &self.readouts {
            let q = r.quartiles;
            writeln!(
                s,
                "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e}",
                r.name, q.min, q.q1, q.median, q.q3, q.max, r.outliers, r.max_spread
            )
            .unwrap();
        }
        s
    }

    /// Raw samples: one row per (model, graph, permutation).
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("model,graph,permutation,error\n");
        for r in &self.readouts {
            for g in &r.graphs {
                for (p, e) in g.errors.iter().enumerate() {
                    writeln!(s, "{},{},{p},{e:.9e}", r.name, g.graph_id).unwrap();
                }
            }
        }
        s
    }
}

fn draw(mode: PermutationMode, n: usize, rng: &mut ChaCha8Rng) -> Permutation {
    match mode {
        PermutationMode::Random => Permutation::random(n, rng),
        PermutationMode::Structured => {
            Permutation::random_transpositions(n, STRUCTURED_MAX_SWAPS, rng)
        }
        PermutationMode::Identity => Permutation::identity(n),
    }
}

/// Prediction error of each model on randomly reordered copies of
/// `n_graphs` graphs drawn from `ds`. Every model sees the same graphs and
/// the same orderings.
pub fn permutation_robustness(
    models: &[(String, &TrainedModel)],
    ds: &Dataset,
    cfg: &RobustnessConfig,
) -> Result<RobustnessReport> {
    if ds.meta.task != TaskKind::Regression {
        return Err(Error::InvalidArgument(
            "permutation robustness needs a regression dataset".into(),
        ));
    }
    if cfg.n_graphs == 0 || cfg.n_perms == 0 {
        return Err(Error::InvalidArgument(
            "n_graphs and n_perms must be positive".into(),
        ));
    }
    for (name, m) in models {
        let meta = &m.model.meta;
        if meta.feature_dim != ds.meta.feature_dim || meta.num_tasks != ds.meta.num_tasks {
            return Err(Error::InvalidArgument(format!(
                "model {name} was trained on a different feature or target layout"
            )));
        }
        if ds.meta.max_nodes > meta.max_nodes {
            return Err(Error::TooManyNodes {
                nodes: ds.meta.max_nodes,
                max_nodes: meta.max_nodes,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked = sample(&mut rng, ds.len(), cfg.n_graphs.min(ds.len())).into_vec();
    let mut permuted: Vec<(&Graph, Vec<Graph>)> = Vec::with_capacity(picked.len());
    for i in picked {
        let g = &ds.graphs[i];
        let copies = (0..cfg.n_perms)
            .map(|_| draw(cfg.mode, g.num_nodes(), &mut rng).apply(g))
            .collect::<Result<Vec<_>>>()?;
        permuted.push((g, copies));
    }

    let mut readouts = Vec::with_capacity(models.len());
    for (name, m) in models {
        let mut graphs = Vec::with_capacity(permuted.len());
        for (g, copies) in &permuted {
            let refs: Vec<&Graph> = copies.iter().collect();
            let (pred, _) = m.predict(&refs)?;
            let t = g.targets();
            let errors: Vec<f64> = (0..copies.len())
                .map(|p| {
                    let row = pred.row_slice(p);
                    row.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64
                })
                .collect();
            let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            graphs.push(GraphErrors {
                graph_id: g.id().to_string(),
                errors,
                spread: hi - lo,
            });
        }
        let all: Vec<f64> = graphs
            .iter()
            .flat_map(|g| g.errors.iter().copied())
            .collect();
        let quartiles = Quartiles::of(&all).expect("at least one sample");
        readouts.push(ReadoutRobustness {
            name: name.clone(),
            outliers: quartiles.outliers(&all),
            quartiles,
            max_spread: graphs.iter().map(|g| g.spread).fold(0.0, f64::max),
            graphs,
        });
    }
    Ok(RobustnessReport {
        config: cfg.clone(),
        readouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synthetic::{generate_localized_task, SyntheticConfig};
    use crate::message_passing::ConvKind;
    use crate::model::{GraphModel, ModelSpec};
    use crate::readouts::ReadoutKind;
    use crate::tensor::Precision;

    fn untrained(kind: ReadoutKind, ds: &Dataset) -> TrainedModel {
        let (model, params) =
            GraphModel::build(&ModelSpec::new(ConvKind::Gcn, kind), &ds.meta, 2).unwrap();
        TrainedModel {
            model,
            params,
            scale: None,
            loss: crate::training::LossKind::Mse,
            precision: Precision::F64,
        }
    }

    #[test]
    fn quartiles_reference() {
        let q = Quartiles::of(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(
            (q.min, q.q1, q.median, q.q3, q.max),
            (1.0, 2.0, 3.0, 4.0, 100.0)
        );
        assert_eq!(q.outliers(&[1.0, 2.0, 3.0, 4.0, 100.0]), 1);
        let q = Quartiles::of(&[0.0, 1.0]).unwrap();
        assert_eq!((q.q1, q.median), (0.25, 0.5));
        assert!(Quartiles::of(&[]).is_none());
    }

    #[test]
    fn invariant_readouts_have_no_spread_and_mlp_does() {
        let ds = generate_localized_task(&SyntheticConfig::new(20, 4, 8, 4, 0)).unwrap();
        let kinds = [
            ReadoutKind::Sum,
            ReadoutKind::Mean,
            ReadoutKind::Max,
            ReadoutKind::StDefault,
            ReadoutKind::Mlp,
        ];
        let trained: Vec<TrainedModel> = kinds.iter().map(|&k| untrained(k, &ds)).collect();
        let models: Vec<(String, &TrainedModel)> = kinds
            .iter()
            .zip(&trained)
            .map(|(k, m)| (k.to_string(), m))
            .collect();
        let cfg = RobustnessConfig {
            n_graphs: 10,
            n_perms: 10,
            ..RobustnessConfig::default()
        };
        let rep = permutation_robustness(&models, &ds, &cfg).unwrap();
        for r in &rep.readouts[..4] {
            assert!(r.graphs.iter().all(|g| g.spread <= 1e-9), "{}", r.name);
        }
        assert!(rep.readouts[4].max_spread > 1e-8);
        assert_eq!(rep.samples_csv().lines().count(), 1 + 5 * 10 * 10);
    }

    #[test]
    fn identity_permutations_give_zero_spread() {
        let ds = generate_localized_task(&SyntheticConfig::new(8, 4, 8, 4, 1)).unwrap();
        let m = untrained(ReadoutKind::Gru, &ds);
        let cfg = RobustnessConfig {
            n_graphs: 8,
            n_perms: 5,
            mode: PermutationMode::Identity,
            seed: 3,
        };
        let rep = permutation_robustness(&[("gru".into(), &m)], &ds, &cfg).unwrap();
        assert!(rep.readouts[0].graphs.iter().all(|g| g.spread == 0.0));
    }

    #[test]
    fn structured_orderings_move_few_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = draw(PermutationMode::Structured, 10, &mut rng);
            let moved = (0..10).filter(|&i| p.map(i) != i).count();
            assert!(moved <= 2 * STRUCTURED_MAX_SWAPS);
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let small = generate_localized_task(&SyntheticConfig::new(8, 3, 5, 4, 1)).unwrap();
        let big = generate_localized_task(&SyntheticConfig::new(8, 9, 12, 4, 1)).unwrap();
        let m = untrained(ReadoutKind::Mlp, &small);
        let cfg = RobustnessConfig::default();
        assert!(permutation_robustness(&[("mlp".into(), &m)], &big, &cfg).is_err());
    }
}
