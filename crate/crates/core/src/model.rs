//! Full graph model: message-passing trunk, optional variational layer,
//! readout and prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetMeta, Graph, GraphBatch};
use crate::message_passing::{ConvKind, GnnStack, NODE_DIM};
use crate::nn::{Activation, Ctx, Mode, Params};
use crate::readouts::{PredictionHead, Readout, ReadoutKind, ReadoutParams};
use crate::tensor::{Precision, Tensor, Var};
use crate::vgae::{VariationalLayer, VgaeConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    #[default]
    Gnn,
    Vgae,
}

fn default_depth() -> usize {
    2
}

fn default_hidden() -> usize {
    NODE_DIM
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub conv: ConvKind,
    pub readout: ReadoutKind,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Width of every message-passing layer.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_true")]
    pub conv_bias: bool,
    #[serde(default)]
    pub readout_params: ReadoutParams,
    #[serde(default)]
    pub family: ModelFamily,
    #[serde(default)]
    pub vgae: VgaeConfig,
}

impl ModelSpec {
    pub fn new(conv: ConvKind, readout: ReadoutKind) -> Self {
        ModelSpec {
            conv,
            readout,
            depth: default_depth(),
            hidden: default_hidden(),
            conv_bias: true,
            readout_params: ReadoutParams::default(),
            family: ModelFamily::Gnn,
            vgae: VgaeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphModel {
    pub spec: ModelSpec,
    pub meta: DatasetMeta,
    pub trunk: GnnStack,
    pub latent: Option<VariationalLayer>,
    pub readout: Readout,
    pub head: PredictionHead,
}

/// Variables produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub nodes: Var,
    pub embedding: Var,
    pub output: Var,
    /// Reconstruction and KL terms of the variational model.
    pub aux_loss: Option<Var>,
}

impl GraphModel {
    /// Builds the model and its freshly initialised parameters.
    pub fn build(spec: &ModelSpec, meta: &DatasetMeta, seed: u64) -> Result<(GraphModel, Params)> {
        if spec.depth == 0 {
            return Err(Error::InvalidArgument("depth must be at least 1".into()));
        }
        if meta.max_nodes == 0 || meta.output_dim() == 0 {
            return Err(Error::InvalidArgument(
                "dataset metadata has no nodes or no targets".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let dims = vec![spec.hidden; spec.depth];
        let trunk = GnnStack::new(
            &mut params,
            &mut rng,
            spec.conv,
            meta.feature_dim,
            &dims,
            spec.conv_bias,
            Activation::Relu,
        )?;
        let latent = match spec.family {
            ModelFamily::Gnn => None,
            ModelFamily::Vgae => Some(VariationalLayer::new(
                &mut params,
                &mut rng,
                spec.conv,
                spec.hidden,
                spec.hidden,
                spec.conv_bias,
                spec.vgae.clone(),
            )),
        };
        let readout = Readout::new(
            spec.readout,
            &mut params,
            &mut rng,
            spec.hidden,
            meta.max_nodes,
            &spec.readout_params,
        )?;
        let head = PredictionHead::new(&mut params, &mut rng, readout.out_dim(), meta.output_dim());
        let model = GraphModel {
            spec: spec.clone(),
            meta: meta.clone(),
            trunk,
            latent,
            readout,
            head,
        };
        Ok((model, params))
    }

    pub fn batch(&self, graphs: &[&Graph]) -> Result<GraphBatch> {
        if let Some(g) = graphs
            .iter()
            .find(|g| g.feature_dim() != self.meta.feature_dim)
        {
            return Err(Error::Graph(format!(
                "graph {} has feature width {}, model expects {}",
                g.id(),
                g.feature_dim(),
                self.meta.feature_dim
            )));
        }
        GraphBatch::new(graphs, self.meta.max_nodes)
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &GraphBatch) -> Result<ForwardOutput> {
        let mut nodes = self.trunk.forward(ctx, batch)?;
        let mut aux_loss = None;
        if let Some(latent) = &self.latent {
            let lat = latent.forward(ctx, nodes, batch)?;
            aux_loss = Some(latent.loss(ctx, &lat, batch)?);
            nodes = lat.z;
        }
        let embedding = self.readout.forward(ctx, nodes, batch)?;
        let output = self.head.forward(ctx, embedding)?;
        Ok(ForwardOutput {
            nodes,
            embedding,
            output,
            aux_loss,
        })
    }

    /// Eval-mode predictions and embeddings for `graphs`.
    pub fn predict(
        &self,
        params: &Params,
        graphs: &[&Graph],
        precision: Precision,
    ) -> Result<(Tensor, Tensor)> {
        let batch = self.batch(graphs)?;
        let mut ctx = Ctx::new(params, Mode::Eval, 0, precision);
        let out = self.forward(&mut ctx, &batch)?;
        Ok((
            ctx.tape.value(out.output).clone(),
            ctx.tape.value(out.embedding).clone(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synthetic::{generate_localized_task, SyntheticConfig};

    #[test]
    fn build_and_predict_every_readout() {
        let ds = generate_localized_task(&SyntheticConfig::new(6, 3, 7, 5, 0)).unwrap();
        let refs: Vec<&Graph> = ds.graphs.iter().collect();
        for kind in ReadoutKind::ALL {
            for conv in [ConvKind::Gcn, ConvKind::Gin] {
                let spec = ModelSpec::new(conv, kind);
                let (m, p) = GraphModel::build(&spec, &ds.meta, 1).unwrap();
                let (y, e) = m.predict(&p, &refs, Precision::F64).unwrap();
                assert_eq!(y.shape(), &[6, 1]);
                assert_eq!(e.shape(), &[6, m.readout.out_dim()]);
                assert!(y.is_finite());
            }
        }
    }

    #[test]
    fn build_is_seeded() {
        let ds = generate_localized_task(&SyntheticConfig::new(4, 3, 5, 4, 0)).unwrap();
        let mut spec = ModelSpec::new(ConvKind::Gcn, ReadoutKind::StDefault);
        spec.family = ModelFamily::Vgae;
        let (a, pa) = GraphModel::build(&spec, &ds.meta, 3).unwrap();
        let (b, pb) = GraphModel::build(&spec, &ds.meta, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (_, pc) = GraphModel::build(&spec, &ds.meta, 4).unwrap();
        assert_ne!(pb, pc);
    }

    #[test]
    fn spec_json_defaults() {
        let spec: ModelSpec =
            serde_json::from_str(r#"{"conv": "gin", "readout": "janossy_gru"}"#).unwrap();
        assert_eq!(spec, ModelSpec::new(ConvKind::Gin, ReadoutKind::JanossyGru));
        assert!(serde_json::from_str::<ModelSpec>(r#"{"conv": "gat", "readout": "sum"}"#).is_err());
    }
}
