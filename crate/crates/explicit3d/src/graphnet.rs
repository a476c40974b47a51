//! Message passing over the sparse scene graph.
//!
//! Nodes are object embeddings, edges carry pair embeddings. Each
//! iteration computes a message per retained edge, folds a node's
//! incoming messages through a GRU (weakest relation first, so the
//! strongest has the last word on the state), and applies a synchronous
//! node update.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    bind_gru, register_gru, DiffValue, GruWeights, MlpBound, MlpDef, ParamStore, Tape,
};
use crate::error::{invalid, Result};
use crate::relatedness::SparseSceneGraph;

/// Layer sizes of the graph network; `dim` must be even (messages are a
/// half-and-half concatenation).
#[derive(Debug, Clone)]
pub struct GraphNetConfig {
    pub feature_dim: usize,
    pub pair_feature_dim: usize,
    pub dim: usize,
    pub t_iter: usize,
}

impl GraphNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(invalid("graph embedding dim must be positive and even"));
        }
        if self.feature_dim == 0 || self.pair_feature_dim == 0 {
            return Err(invalid("feature dims must be positive"));
        }
        Ok(())
    }

    fn defs(&self) -> [MlpDef; 5] {
        let d = self.dim;
        [
            MlpDef::new("graph.obj_enc", &[self.feature_dim, d, d, d]),
            MlpDef::new("graph.rel_enc", &[self.pair_feature_dim, d, d, d]),
            MlpDef::new("graph.msg_src", &[d, d, d / 2]),
            MlpDef::new("graph.msg_dst", &[d, d, d / 2]),
            MlpDef::new("graph.update", &[2 * d, d, d]),
        ]
    }
}

pub fn register_graphnet(
    cfg: &GraphNetConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    for def in cfg.defs() {
        def.register(store, rng)?;
    }
    store.insert_gaussian("graph.msg_pair", cfg.dim, cfg.dim, rng)?;
    register_gru("graph.gru", cfg.dim, store, rng)
}

/// Tape-bound graph network weights for one forward pass.
pub struct GraphNet {
    pub dim: usize,
    pub t_iter: usize,
    obj_enc: MlpBound,
    rel_enc: MlpBound,
    msg_src: MlpBound,
    msg_dst: MlpBound,
    msg_pair: DiffValue,
    update: MlpBound,
    gru: GruWeights,
}

impl GraphNet {
    pub fn bind(cfg: &GraphNetConfig, tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let [obj, rel, src, dst, upd] = cfg.defs();
        Ok(Self {
            dim: cfg.dim,
            t_iter: cfg.t_iter,
            obj_enc: obj.bind(tape, store)?,
            rel_enc: rel.bind(tape, store)?,
            msg_src: src.bind(tape, store)?,
            msg_dst: dst.bind(tape, store)?,
            msg_pair: tape.param(store, "graph.msg_pair")?,
            update: upd.bind(tape, store)?,
            gru: bind_gru("graph.gru", tape, store)?,
        })
    }

    /// Encode per-object detection features into node embeddings.
    pub fn init_nodes(&self, tape: &mut Tape, features: &[Vec<f64>]) -> Result<Vec<DiffValue>> {
        features
            .iter()
            .map(|f| {
                let x = tape.constant_vec(f.clone());
                self.obj_enc.forward(tape, x)
            })
            .collect()
    }

    /// Encode pair features into edge embeddings, keyed by (source, target).
    pub fn init_pairs(
        &self,
        tape: &mut Tape,
        pair_features: &BTreeMap<(usize, usize), Vec<f64>>,
    ) -> Result<BTreeMap<(usize, usize), DiffValue>> {
        pair_features
            .iter()
            .map(|(&key, f)| {
                let x = tape.constant_vec(f.clone());
                Ok((key, self.rel_enc.forward(tape, x)?))
            })
            .collect()
    }

    /// Message along edge `i -> j`: half from each endpoint embedding plus a
    /// linear image of the pair embedding.
    pub fn message(
        &self,
        tape: &mut Tape,
        o_src: DiffValue,
        o_dst: DiffValue,
        p: DiffValue,
    ) -> Result<DiffValue> {
        let a = self.msg_src.forward(tape, o_src)?;
        let b = self.msg_dst.forward(tape, o_dst)?;
        let joint = tape.concat(&[a, b]);
        let pair = tape.matvec(self.msg_pair, p)?;
        tape.add(joint, pair)
    }

    /// Fold messages (given in descending relation score) through the GRU,
    /// weakest first from a zero state. No messages: zero state.
    pub fn aggregate(&self, tape: &mut Tape, messages_desc: &[DiffValue]) -> Result<DiffValue> {
        let mut h = tape.constant_vec(vec![0.0; self.dim]);
        for &m in messages_desc.iter().rev() {
            h = tape.gru_step(h, m, &self.gru)?;
        }
        Ok(h)
    }

    pub fn update_node(
        &self,
        tape: &mut Tape,
        o: DiffValue,
        h: DiffValue,
    ) -> Result<DiffValue> {
        let x = tape.concat(&[o, h]);
        self.update.forward(tape, x)
    }

    /// Run `t_iter` synchronous rounds. Returns the final node embeddings and
    /// the last round's edge messages (computed from the embeddings *before*
    /// the final update, i.e. the ones the final update consumed).
    pub fn run_iterations(
        &self,
        tape: &mut Tape,
        graph: &SparseSceneGraph,
        nodes: &[DiffValue],
        pairs: &BTreeMap<(usize, usize), DiffValue>,
    ) -> Result<(Vec<DiffValue>, BTreeMap<(usize, usize), DiffValue>)> {
        if graph.n_nodes != nodes.len() {
            return Err(invalid("graph/node count mismatch"));
        }
        for e in &graph.edges {
            if !pairs.contains_key(&(e.source, e.target)) {
                return Err(invalid("missing pair embedding for retained edge"));
            }
        }
        let mut current = nodes.to_vec();
        let mut last_messages = BTreeMap::new();
        for _ in 0..self.t_iter {
            let mut messages = BTreeMap::new();
            for e in &graph.edges {
                let key = (e.source, e.target);
                let m = self.message(tape, current[e.source], current[e.target], pairs[&key])?;
                messages.insert(key, m);
            }
            let mut next = Vec::with_capacity(current.len());
            for j in 0..current.len() {
                let incoming: Vec<DiffValue> = graph
                    .incoming(j)
                    .iter()
                    .map(|e| messages[&(e.source, e.target)])
                    .collect();
                let h = self.aggregate(tape, &incoming)?;
                next.push(self.update_node(tape, current[j], h)?);
            }
            current = next;
            last_messages = messages;
        }
        Ok((current, last_messages))
    }
}
