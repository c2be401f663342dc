use crate::attention::{distill_graph, AttentionParams};
use crate::error::Result;
use crate::heads::{mlp, MlpParams};
use crate::jfe::{jfe_encode, JfeParams};
use crate::skeleton::AdjacencyGraph;
use crate::tensor::{Graph, SeededRng, Tensor, Var};

use super::RunConfig;

/// All trainable tensors of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub jfe: JfeParams<T>,
    pub attention: AttentionParams<T>,
    pub mlp: MlpParams<T>,
}

impl ModelParams {
    pub fn init(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        let jfe = JfeParams::init(&cfg.jfe(), rng);
        let c = cfg.channels[3];
        let attention = AttentionParams::init(cfg.mode, c, rng);
        let mlp = MlpParams::init(cfg.distill().vfd.output_len(c), cfg.mlp_hidden, rng);
        ModelParams { jfe, attention, mlp }
    }
}

impl<T: Clone> ModelParams<T> {
    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, T)> {
        let mut out = Vec::new();
        self.map(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            jfe: self.jfe.map(f),
            attention: self.attention.map(f),
            mlp: self.mlp.map(f),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out: Vec<(String, &mut T)> = self
            .jfe
            .named_mut()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        out.extend(self.attention.named_mut());
        out.extend(self.mlp.named_mut().into_iter().map(|(n, t)| (n.to_string(), t)));
        out
    }
}

/// Full pipeline on `clips[7 × T × 25 × C_in]`: returns `(score, logits)`.
pub fn forward(
    g: &mut Graph,
    clips: Var,
    adjacency: &AdjacencyGraph,
    p: &ModelParams<Var>,
    cfg: &RunConfig,
) -> Result<(Var, Var)> {
    let t = g.shape(clips)[1];
    let feats = jfe_encode(g, clips, adjacency, &p.jfe)?;
    let layout = cfg.jfe().out_layout(t);
    let sparse = distill_graph(g, feats, layout, &p.attention, &cfg.distill())?;
    mlp(g, sparse, &p.mlp)
}
