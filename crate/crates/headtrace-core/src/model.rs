//! Decoder-only toy transformer decomposed into residual-stream nodes.
//!
//! The forward pass is organized around the circuit DAG: an input node
//! (token + learned absolute positional embeddings), per-layer per-head
//! attention nodes, per-layer MLP nodes, and an output node (final norm +
//! unembedding). Every node reads its input as an explicit sum over incoming
//! edge contributions, which is what makes per-edge patching well defined,
//! and writes its output into the shared residual stream.
//!
//! Normalization is parameter-free and internal to each consumer node, so
//! node inputs are raw (pre-norm) residual sums and edge sums stay exactly
//! linear. The output node carries the learned final-norm gain/bias.
//!
//! Interventions are declarative ([`InterventionSpec`]) and applied per node
//! in a fixed order: scale, then ablation, then node patch. Ablation is
//! implemented as scaling by 0.0 so the two are bit-identical by
//! construction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, TensorId};
use crate::tensor::Tensor;
use crate::Result;

/// Positional-encoding kind. Only learned absolute embeddings exist; the
/// enum keeps checkpoint manifests explicit about it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalKind {
    LearnedAbsolute,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pos_kind: PositionalKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::Invalid {
                detail: "all model dimensions must be positive".into(),
            });
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(CoreError::Invalid {
                detail: format!(
                    "d_model {} != n_heads {} * d_head {}",
                    self.d_model, self.n_heads, self.d_head
                ),
            });
        }
        Ok(())
    }

    /// All nodes in topological order.
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut out = vec![NodeId::Input];
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                out.push(NodeId::AttnHead { layer: l, head: h });
            }
            out.push(NodeId::Mlp { layer: l });
        }
        out.push(NodeId::Output);
        out
    }

    /// Upstream nodes feeding `dst`, in topological order.
    pub fn upstream_nodes(&self, dst: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let cutoff = match dst {
            NodeId::Input => return out,
            // Heads read the residual stream before their own layer.
            NodeId::AttnHead { layer, .. } => (layer, 0),
            // The MLP also sees its own layer's head outputs.
            NodeId::Mlp { layer } => (layer, 1),
            NodeId::Output => (self.n_layers, 0),
        };
        out.push(NodeId::Input);
        for l in 0..self.n_layers {
            if l < cutoff.0 || (l == cutoff.0 && cutoff.1 == 1) {
                for h in 0..self.n_heads {
                    out.push(NodeId::AttnHead { layer: l, head: h });
                }
            }
            if l < cutoff.0 {
                out.push(NodeId::Mlp { layer: l });
            }
        }
        out
    }

    /// Destination slots for a node.
    pub fn slots_of(&self, dst: NodeId) -> &'static [Slot] {
        match dst {
            NodeId::Input => &[],
            NodeId::AttnHead { .. } => &[Slot::Query, Slot::Key, Slot::Value],
            NodeId::Mlp { .. } | NodeId::Output => &[Slot::Single],
        }
    }

    /// Every edge of the graph, sorted by [`EdgeId`] order.
    pub fn edges(&self) -> Vec<EdgeId> {
        let mut out = Vec::new();
        for dst in self.nodes() {
            for &slot in self.slots_of(dst) {
                for src in self.upstream_nodes(dst) {
                    out.push(EdgeId { src, dst, slot });
                }
            }
        }
        out.sort();
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    fn node_in_range(&self, node: NodeId) -> bool {
        match node {
            NodeId::Input | NodeId::Output => true,
            NodeId::AttnHead { layer, head } => layer < self.n_layers && head < self.n_heads,
            NodeId::Mlp { layer } => layer < self.n_layers,
        }
    }

    /// Validate an edge (endpoint ranges, topological precedence, slot kind).
    pub fn check_edge(&self, edge: &EdgeId) -> Result<()> {
        let bad = |detail: String| Err(CoreError::InvalidEdge { detail });
        if !self.node_in_range(edge.src) || !self.node_in_range(edge.dst) {
            return bad(format!("{edge:?} endpoint out of range"));
        }
        let slot_ok = match edge.dst {
            NodeId::AttnHead { .. } => edge.slot != Slot::Single,
            NodeId::Mlp { .. } | NodeId::Output => edge.slot == Slot::Single,
            NodeId::Input => false,
        };
        if !slot_ok {
            return bad(format!("{edge:?} has wrong slot for destination"));
        }
        if !self
            .upstream_nodes(edge.dst)
            .iter()
            .any(|&u| u == edge.src)
        {
            return bad(format!("{edge:?} source does not precede destination"));
        }
        Ok(())
    }
}

/// Address of a circuit node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeId {
    Input,
    AttnHead { layer: usize, head: usize },
    Mlp { layer: usize },
    Output,
}

impl NodeId {
    /// Topological sort key: Input < layer-0 heads < layer-0 MLP < ... < Output.
    fn topo_key(&self) -> (usize, usize) {
        match *self {
            NodeId::Input => (0, 0),
            NodeId::AttnHead { layer, head } => (1 + 2 * layer, head),
            NodeId::Mlp { layer } => (2 + 2 * layer, 0),
            NodeId::Output => (usize::MAX, 0),
        }
    }

    /// Compact text form: `I`, `A.l.h`, `M.l`, `O`.
    pub fn name(&self) -> String {
        match *self {
            NodeId::Input => "I".to_string(),
            NodeId::AttnHead { layer, head } => format!("A.{layer}.{head}"),
            NodeId::Mlp { layer } => format!("M.{layer}"),
            NodeId::Output => "O".to_string(),
        }
    }

    /// Parse the `name()` form.
    pub fn parse(s: &str) -> Option<NodeId> {
        match s {
            "I" => return Some(NodeId::Input),
            "O" => return Some(NodeId::Output),
            _ => {}
        }
        let mut it = s.split('.');
        let kind = it.next()?;
        match kind {
            "A" => {
                let layer = it.next()?.parse().ok()?;
                let head = it.next()?.parse().ok()?;
                if it.next().is_some() {
                    return None;
                }
                Some(NodeId::AttnHead { layer, head })
            }
            "M" => {
                let layer = it.next()?.parse().ok()?;
                if it.next().is_some() {
                    return None;
                }
                Some(NodeId::Mlp { layer })
            }
            _ => None,
        }
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.topo_key().cmp(&other.topo_key())
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Destination slot of an edge. Attention heads expose separate query/key/
/// value paths; MLP and output destinations have a single input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Query,
    Key,
    Value,
    Single,
}

impl Slot {
    fn rank(&self) -> usize {
        match self {
            Slot::Query => 0,
            Slot::Key => 1,
            Slot::Value => 2,
            Slot::Single => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Slot::Query => "q",
            Slot::Key => "k",
            Slot::Value => "v",
            Slot::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Option<Slot> {
        match s {
            "q" => Some(Slot::Query),
            "k" => Some(Slot::Key),
            "v" => Some(Slot::Value),
            "single" => Some(Slot::Single),
            _ => None,
        }
    }
}

impl Ord for Slot {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl PartialOrd for Slot {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Directed edge of the circuit DAG.
///
/// Ordering is (destination, slot, source), which is also the deterministic
/// tie-break used by top-n selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EdgeId {
    pub src: NodeId,
    pub dst: NodeId,
    pub slot: Slot,
}

impl Ord for EdgeId {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.dst, self.slot, self.src).cmp(&(other.dst, other.slot, other.src))
    }
}

impl PartialOrd for EdgeId {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Declarative interventions applied during a forward pass.
///
/// Per node the order is: raw output, scale, ablate (scale by zero), node
/// patch. Edge patches replace a single source contribution in the
/// destination's input sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionSpec {
    pub ablate_heads: BTreeSet<(usize, usize)>,
    pub scale_heads: BTreeMap<(usize, usize), f64>,
    pub patch_nodes: BTreeMap<NodeId, Tensor>,
    pub patch_edges: BTreeMap<EdgeId, Tensor>,
}

impl InterventionSpec {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.ablate_heads.is_empty()
            && self.scale_heads.is_empty()
            && self.patch_nodes.is_empty()
            && self.patch_edges.is_empty()
    }

    /// Ablate a set of heads.
    pub fn ablate(heads: impl IntoIterator<Item = (usize, usize)>) -> Self {
        InterventionSpec { ablate_heads: heads.into_iter().collect(), ..Self::default() }
    }

    /// Scale a set of heads by one factor.
    pub fn scale(heads: impl IntoIterator<Item = (usize, usize)>, factor: f64) -> Self {
        InterventionSpec {
            scale_heads: heads.into_iter().map(|h| (h, factor)).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let bad = |detail: String| Err(CoreError::InvalidIntervention { detail });
        for &(l, h) in self.ablate_heads.iter().chain(self.scale_heads.keys()) {
            if l >= config.n_layers || h >= config.n_heads {
                return bad(format!("head ({l},{h}) out of range"));
            }
        }
        if let Some(&(l, h)) = self
            .ablate_heads
            .iter()
            .find(|k| self.scale_heads.contains_key(*k))
        {
            return bad(format!("head ({l},{h}) both ablated and scaled"));
        }
        for (&(l, h), &f) in &self.scale_heads {
            if !f.is_finite() || f < 0.0 {
                return bad(format!("scale factor {f} for head ({l},{h}) must be >= 0"));
            }
        }
        for (node, t) in &self.patch_nodes {
            if matches!(node, NodeId::Output) {
                return bad("cannot patch the output node's output".into());
            }
            if !config.node_in_range(*node) {
                return bad(format!("patched node {} out of range", node.name()));
            }
            if t.shape() != [seq_len, config.d_model] {
                return bad(format!(
                    "patch for {} has shape {:?}, expected [{seq_len}, {}]",
                    node.name(),
                    t.shape(),
                    config.d_model
                ));
            }
        }
        for (edge, t) in &self.patch_edges {
            config.check_edge(edge)?;
            if t.shape() != [seq_len, config.d_model] {
                return bad(format!(
                    "edge patch {edge:?} has shape {:?}, expected [{seq_len}, {}]",
                    t.shape(),
                    config.d_model
                ));
            }
        }
        Ok(())
    }
}

/// Sampling parameters. Temperature is applied first, then top-p, then
/// top-k if set; temperatures below 1e-6 fall back to greedy argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.6,
            top_p: 0.95,
            top_k: None,
            max_new_tokens: 16,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(CoreError::Invalid {
                detail: format!("temperature {} must be >= 0", self.temperature),
            });
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoreError::Invalid {
                detail: format!("top_p {} must be in (0, 1]", self.top_p),
            });
        }
        if self.top_k == Some(0) {
            return Err(CoreError::Invalid { detail: "top_k must be >= 1".into() });
        }
        Ok(())
    }
}

// ---- parameters ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor, // [d_model, d_head]
    pub w_k: Tensor, // [d_model, d_head]
    pub w_v: Tensor, // [d_model, d_head]
    pub w_o: Tensor, // [d_head, d_model]
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w_in: Tensor,  // [d_model, d_mlp]
    pub b_in: Tensor,  // [d_mlp]
    pub w_out: Tensor, // [d_mlp, d_model]
    pub b_out: Tensor, // [d_model]
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub mlp: MlpParams,
}

/// All learnable parameters plus the configuration they are shaped by.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_embed: Tensor,  // [vocab_size, d_model]
    pub pos_embed: Tensor,  // [max_seq_len, d_model]
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor, // [d_model]
    pub final_bias: Tensor, // [d_model]
    pub unembed: Tensor,    // [d_model, vocab_size]
}

impl ModelParams {
    /// Random initialization with fan-in scaled uniform weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let dh = config.d_head;
        let dm = config.d_mlp;
        let v = config.vocab_size;
        let mat = |rows: usize, cols: usize, scale: f64, rng: &mut Rng| {
            let mut data = vec![0.0; rows * cols];
            rng.fill_uniform(&mut data, scale);
            Tensor::matrix(rows, cols, data)
        };
        let inv = |n: usize| 1.0 / libm::sqrt(n as f64);

        let tok_embed = mat(v, d, inv(d), &mut rng)?;
        let pos_embed = mat(config.max_seq_len, d, inv(d), &mut rng)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadParams {
                    w_q: mat(d, dh, inv(d), &mut rng)?,
                    w_k: mat(d, dh, inv(d), &mut rng)?,
                    w_v: mat(d, dh, inv(d), &mut rng)?,
                    w_o: mat(dh, d, inv(dh), &mut rng)?,
                });
            }
            let mlp = MlpParams {
                w_in: mat(d, dm, inv(d), &mut rng)?,
                b_in: Tensor::new(vec![dm], vec![0.0; dm])?,
                w_out: mat(dm, d, inv(dm), &mut rng)?,
                b_out: Tensor::new(vec![d], vec![0.0; d])?,
            };
            layers.push(LayerParams { heads, mlp });
        }
        let final_gain = Tensor::new(vec![d], vec![1.0; d])?;
        let final_bias = Tensor::new(vec![d], vec![0.0; d])?;
        let unembed = mat(d, v, inv(d), &mut rng)?;
        Ok(ModelParams {
            config,
            tok_embed,
            pos_embed,
            layers,
            final_gain,
            final_bias,
            unembed,
        })
    }

    /// Named parameter tensors in canonical (checkpoint) order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_embed".to_string(), &self.tok_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.w_q"), &head.w_q));
                out.push((format!("layers.{l}.heads.{h}.w_k"), &head.w_k));
                out.push((format!("layers.{l}.heads.{h}.w_v"), &head.w_v));
                out.push((format!("layers.{l}.heads.{h}.w_o"), &head.w_o));
            }
            out.push((format!("layers.{l}.mlp.w_in"), &layer.mlp.w_in));
            out.push((format!("layers.{l}.mlp.b_in"), &layer.mlp.b_in));
            out.push((format!("layers.{l}.mlp.w_out"), &layer.mlp.w_out));
            out.push((format!("layers.{l}.mlp.b_out"), &layer.mlp.b_out));
        }
        out.push(("final_norm.gain".to_string(), &self.final_gain));
        out.push(("final_norm.bias".to_string(), &self.final_bias));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Expected (name, shape) list for a configuration, in canonical order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![
            ("tok_embed".to_string(), vec![config.vocab_size, d]),
            ("pos_embed".to_string(), vec![config.max_seq_len, d]),
        ];
        for l in 0..config.n_layers {
            for h in 0..config.n_heads {
                out.push((format!("layers.{l}.heads.{h}.w_q"), vec![d, config.d_head]));
                out.push((format!("layers.{l}.heads.{h}.w_k"), vec![d, config.d_head]));
                out.push((format!("layers.{l}.heads.{h}.w_v"), vec![d, config.d_head]));
                out.push((format!("layers.{l}.heads.{h}.w_o"), vec![config.d_head, d]));
            }
            out.push((format!("layers.{l}.mlp.w_in"), vec![d, config.d_mlp]));
            out.push((format!("layers.{l}.mlp.b_in"), vec![config.d_mlp]));
            out.push((format!("layers.{l}.mlp.w_out"), vec![config.d_mlp, d]));
            out.push((format!("layers.{l}.mlp.b_out"), vec![d]));
        }
        out.push(("final_norm.gain".to_string(), vec![d]));
        out.push(("final_norm.bias".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, config.vocab_size]));
        out
    }

    /// Rebuild params from named tensors (checkpoint load).
    pub fn from_named(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors.remove(name).ok_or_else(|| CoreError::ConfigMismatch {
                detail: format!("missing parameter {name}"),
            })?;
            if t.shape() != shape {
                return Err(CoreError::ConfigMismatch {
                    detail: format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    ),
                });
            }
            Ok(t)
        };
        let mut fetched: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, shape) in &expected {
            fetched.insert(name.clone(), take(name, shape)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(CoreError::ConfigMismatch {
                detail: format!("unexpected parameter {extra}"),
            });
        }
        let mut get = |name: String| fetched.remove(&name).unwrap();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                heads.push(HeadParams {
                    w_q: get(format!("layers.{l}.heads.{h}.w_q")),
                    w_k: get(format!("layers.{l}.heads.{h}.w_k")),
                    w_v: get(format!("layers.{l}.heads.{h}.w_v")),
                    w_o: get(format!("layers.{l}.heads.{h}.w_o")),
                });
            }
            let mlp = MlpParams {
                w_in: get(format!("layers.{l}.mlp.w_in")),
                b_in: get(format!("layers.{l}.mlp.b_in")),
                w_out: get(format!("layers.{l}.mlp.w_out")),
                b_out: get(format!("layers.{l}.mlp.b_out")),
            };
            layers.push(LayerParams { heads, mlp });
        }
        Ok(ModelParams {
            tok_embed: get("tok_embed".to_string()),
            pos_embed: get("pos_embed".to_string()),
            layers,
            final_gain: get("final_norm.gain".to_string()),
            final_bias: get("final_norm.bias".to_string()),
            unembed: get("unembed".to_string()),
            config,
        })
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                out.push(&mut head.w_v);
                out.push(&mut head.w_o);
            }
            out.push(&mut layer.mlp.w_in);
            out.push(&mut layer.mlp.b_in);
            out.push(&mut layer.mlp.w_out);
            out.push(&mut layer.mlp.b_out);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.unembed);
        out
    }

    /// Register every parameter tensor on a tape.
    pub(crate) fn register(&self, tape: &mut Tape) -> ParamIds {
        let mut layers = Vec::with_capacity(self.layers.len());
        let tok_embed = tape.input(self.tok_embed.clone());
        let pos_embed = tape.input(self.pos_embed.clone());
        for layer in &self.layers {
            let heads = layer
                .heads
                .iter()
                .map(|h| HeadIds {
                    w_q: tape.input(h.w_q.clone()),
                    w_k: tape.input(h.w_k.clone()),
                    w_v: tape.input(h.w_v.clone()),
                    w_o: tape.input(h.w_o.clone()),
                })
                .collect();
            layers.push(LayerIds {
                heads,
                w_in: tape.input(layer.mlp.w_in.clone()),
                b_in: tape.input(layer.mlp.b_in.clone()),
                w_out: tape.input(layer.mlp.w_out.clone()),
                b_out: tape.input(layer.mlp.b_out.clone()),
            });
        }
        ParamIds {
            tok_embed,
            pos_embed,
            layers,
            final_gain: tape.input(self.final_gain.clone()),
            final_bias: tape.input(self.final_bias.clone()),
            unembed: tape.input(self.unembed.clone()),
        }
    }

    /// Gradient step: `param += sign * lr * grad` for every parameter.
    pub(crate) fn apply_step(
        &mut self,
        ids: &ParamIds,
        grads: &Gradients,
        lr: f64,
        sign: f64,
    ) -> Result<()> {
        let id_list = ids.list();
        let mut finite = true;
        for (tensor, id) in self.tensors_mut().into_iter().zip(id_list) {
            if let Some(g) = grads.get(id) {
                let gd = g.data().to_vec();
                let data = tensor.data_mut();
                for (p, gv) in data.iter_mut().zip(&gd) {
                    *p += sign * lr * gv;
                }
                finite &= data.iter().all(|v| v.is_finite());
            }
        }
        if finite {
            Ok(())
        } else {
            Err(CoreError::NonFinite { op: "parameter update" })
        }
    }
}

pub(crate) struct HeadIds {
    w_q: TensorId,
    w_k: TensorId,
    w_v: TensorId,
    w_o: TensorId,
}

pub(crate) struct LayerIds {
    heads: Vec<HeadIds>,
    w_in: TensorId,
    b_in: TensorId,
    w_out: TensorId,
    b_out: TensorId,
}

/// Tape ids of registered parameters.
pub(crate) struct ParamIds {
    tok_embed: TensorId,
    pos_embed: TensorId,
    layers: Vec<LayerIds>,
    final_gain: TensorId,
    final_bias: TensorId,
    unembed: TensorId,
}

impl ParamIds {
    /// Ids in canonical (checkpoint) order, matching `tensors_mut`.
    pub(crate) fn list(&self) -> Vec<TensorId> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for layer in &self.layers {
            for h in &layer.heads {
                out.extend_from_slice(&[h.w_q, h.w_k, h.w_v, h.w_o]);
            }
            out.extend_from_slice(&[layer.w_in, layer.b_in, layer.w_out, layer.b_out]);
        }
        out.extend_from_slice(&[self.final_gain, self.final_bias, self.unembed]);
        out
    }
}

// ---- forward pass ---------------------------------------------------------

/// Tape handles produced by one traced forward pass.
pub(crate) struct ForwardHandles {
    pub node_out: BTreeMap<NodeId, TensorId>,
    pub slot_in: BTreeMap<(NodeId, Slot), TensorId>,
    pub attn: BTreeMap<(usize, usize), TensorId>,
    pub logits: TensorId,
    pub log_probs: TensorId,
    pub final_logp: TensorId,
}

/// Per-node activations (and, after a traced backward, per-slot input
/// gradients) for one forward pass.
///
/// Outputs are residual-space `[seq_len, d_model]` tensors; head outputs are
/// post output-projection. The cache also keeps the intervention spec it was
/// produced under so edge contributions have a single definition.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub config: ModelConfig,
    pub seq_len: usize,
    pub spec: InterventionSpec,
    outputs: BTreeMap<NodeId, Tensor>,
    attn: BTreeMap<(usize, usize), Tensor>,
    logits: Tensor,
    log_probs: Tensor,
    input_grads: BTreeMap<(NodeId, Slot), Tensor>,
}

impl ActivationCache {
    /// Residual-space output of a node (Input, AttnHead, or Mlp).
    pub fn output(&self, node: NodeId) -> Option<&Tensor> {
        self.outputs.get(&node)
    }

    /// Attention probabilities `[seq, seq]` of one head.
    pub fn attention(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.attn.get(&(layer, head))
    }

    /// Logits over the vocabulary, all positions.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Log-probabilities over the vocabulary, all positions.
    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    /// Final-position log-probabilities.
    pub fn final_log_probs(&self) -> Tensor {
        let (_, v) = self.log_probs.dims2().expect("log_probs rank");
        let start = (self.seq_len - 1) * v;
        Tensor::new(vec![v], self.log_probs.data()[start..start + v].to_vec())
            .expect("final log probs")
    }

    /// Gradient of the attached loss w.r.t. a node's per-slot input.
    /// Present only for caches produced by a traced backward.
    pub fn input_grad(&self, node: NodeId, slot: Slot) -> Option<&Tensor> {
        self.input_grads.get(&(node, slot))
    }

    /// The contribution of `edge.src` as seen by `edge.dst`: the edge patch
    /// if one was applied, otherwise the source node's output.
    pub fn edge_contribution(&self, edge: &EdgeId) -> Result<Tensor> {
        self.config.check_edge(edge)?;
        if let Some(t) = self.spec.patch_edges.get(edge) {
            return Ok(t.clone());
        }
        self.outputs
            .get(&edge.src)
            .cloned()
            .ok_or(CoreError::InvalidEdge { detail: format!("{edge:?} source missing") })
    }

    /// Reassemble a node's per-slot input from its incoming edges.
    pub fn node_input(&self, node: NodeId, slot: Slot) -> Result<Tensor> {
        if !self.config.slots_of(node).contains(&slot) {
            return Err(CoreError::InvalidEdge {
                detail: format!("{} has no {} slot", node.name(), slot.name()),
            });
        }
        let mut acc = vec![0.0; self.seq_len * self.config.d_model];
        for src in self.config.upstream_nodes(node) {
            let contrib = self.edge_contribution(&EdgeId { src, dst: node, slot })?;
            for (a, c) in acc.iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        Tensor::matrix(self.seq_len, self.config.d_model, acc)
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(CoreError::Invalid { detail: "empty token sequence".into() });
    }
    if tokens.len() > config.max_seq_len {
        return Err(CoreError::SequenceTooLong { len: tokens.len(), max: config.max_seq_len });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= config.vocab_size) {
        return Err(CoreError::TokenOutOfVocab { token: bad, vocab_size: config.vocab_size });
    }
    Ok(())
}

/// Run the decomposed forward pass on an existing tape.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    ids: &ParamIds,
    tokens: &[u32],
    spec: &InterventionSpec,
) -> Result<ForwardHandles> {
    let config = &params.config;
    check_tokens(config, tokens)?;
    let seq = tokens.len();
    spec.validate(config, seq)?;

    let mut node_out: BTreeMap<NodeId, TensorId> = BTreeMap::new();
    let mut slot_in: BTreeMap<(NodeId, Slot), TensorId> = BTreeMap::new();
    let mut attn: BTreeMap<(usize, usize), TensorId> = BTreeMap::new();

    // Input node: token embedding + learned absolute positions.
    let tok_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pos_idx: Vec<usize> = (0..seq).collect();
    let emb = tape.embed_rows(ids.tok_embed, &tok_idx)?;
    let pos = tape.embed_rows(ids.pos_embed, &pos_idx)?;
    let raw_input = tape.add(emb, pos)?;
    let input_out = match spec.patch_nodes.get(&NodeId::Input) {
        Some(t) => tape.input(t.clone()),
        None => raw_input,
    };
    node_out.insert(NodeId::Input, input_out);

    let assemble = |tape: &mut Tape,
                    node_out: &BTreeMap<NodeId, TensorId>,
                    dst: NodeId,
                    slot: Slot|
     -> Result<TensorId> {
        let mut parts = Vec::new();
        for src in config.upstream_nodes(dst) {
            let edge = EdgeId { src, dst, slot };
            match spec.patch_edges.get(&edge) {
                Some(t) => parts.push(tape.input(t.clone())),
                None => parts.push(node_out[&src]),
            }
        }
        tape.add_n(&parts)
    };

    let scale_factor = 1.0 / libm::sqrt(config.d_head as f64);
    for l in 0..config.n_layers {
        for h in 0..config.n_heads {
            let node = NodeId::AttnHead { layer: l, head: h };
            let in_q = assemble(tape, &node_out, node, Slot::Query)?;
            let in_k = assemble(tape, &node_out, node, Slot::Key)?;
            let in_v = assemble(tape, &node_out, node, Slot::Value)?;
            slot_in.insert((node, Slot::Query), in_q);
            slot_in.insert((node, Slot::Key), in_k);
            slot_in.insert((node, Slot::Value), in_v);

            let hid = &ids.layers[l].heads[h];
            let nq = tape.layer_norm_rows(in_q)?;
            let nk = tape.layer_norm_rows(in_k)?;
            let nv = tape.layer_norm_rows(in_v)?;
            let q = tape.matmul(nq, hid.w_q)?;
            let k = tape.matmul(nk, hid.w_k)?;
            let v = tape.matmul(nv, hid.w_v)?;
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, scale_factor)?;
            let probs = tape.causal_softmax(scaled)?;
            attn.insert((l, h), probs);
            let ctx = tape.matmul(probs, v)?;
            let raw = tape.matmul(ctx, hid.w_o)?;

            // scale -> ablate -> patch; ablation is scale-by-zero so the two
            // are bit-identical.
            let factor = if spec.ablate_heads.contains(&(l, h)) {
                Some(0.0)
            } else {
                spec.scale_heads.get(&(l, h)).copied()
            };
            let scaled_out = match factor {
                Some(f) => tape.scale(raw, f)?,
                None => raw,
            };
            let out = match spec.patch_nodes.get(&node) {
                Some(t) => tape.input(t.clone()),
                None => scaled_out,
            };
            node_out.insert(node, out);
        }

        let node = NodeId::Mlp { layer: l };
        let m_in = assemble(tape, &node_out, node, Slot::Single)?;
        slot_in.insert((node, Slot::Single), m_in);
        let lid = &ids.layers[l];
        let n = tape.layer_norm_rows(m_in)?;
        let h1 = tape.matmul(n, lid.w_in)?;
        let h1b = tape.add_row_vec(h1, lid.b_in)?;
        let act = tape.gelu(h1b)?;
        let h2 = tape.matmul(act, lid.w_out)?;
        let raw = tape.add_row_vec(h2, lid.b_out)?;
        let out = match spec.patch_nodes.get(&node) {
            Some(t) => tape.input(t.clone()),
            None => raw,
        };
        node_out.insert(node, out);
    }

    let out_in = assemble(tape, &node_out, NodeId::Output, Slot::Single)?;
    slot_in.insert((NodeId::Output, Slot::Single), out_in);
    let n = tape.layer_norm_rows(out_in)?;
    let ng = tape.mul_row_vec(n, ids.final_gain)?;
    let nb = tape.add_row_vec(ng, ids.final_bias)?;
    let logits = tape.matmul(nb, ids.unembed)?;
    let log_probs = tape.log_softmax(logits)?;
    let final_logp = tape.row(log_probs, seq - 1)?;

    Ok(ForwardHandles { node_out, slot_in, attn, logits, log_probs, final_logp })
}

fn cache_from_handles(
    tape: &Tape,
    params: &ModelParams,
    seq_len: usize,
    spec: &InterventionSpec,
    handles: &ForwardHandles,
    grads: Option<&Gradients>,
) -> ActivationCache {
    let outputs = handles
        .node_out
        .iter()
        .map(|(&n, &id)| (n, tape.value(id).clone()))
        .collect();
    let attn = handles
        .attn
        .iter()
        .map(|(&k, &id)| (k, tape.value(id).clone()))
        .collect();
    let mut input_grads = BTreeMap::new();
    if let Some(grads) = grads {
        for (&(node, slot), &id) in &handles.slot_in {
            let g = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()));
            input_grads.insert((node, slot), g);
        }
    }
    ActivationCache {
        config: params.config.clone(),
        seq_len,
        spec: spec.clone(),
        outputs,
        attn,
        logits: tape.value(handles.logits).clone(),
        log_probs: tape.value(handles.log_probs).clone(),
        input_grads,
    }
}

/// Plain forward pass (no gradients).
pub fn forward(
    params: &ModelParams,
    tokens: &[u32],
    spec: &InterventionSpec,
) -> Result<ActivationCache> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let handles = forward_on_tape(&mut tape, params, &ids, tokens, spec)?;
    Ok(cache_from_handles(&tape, params, tokens.len(), spec, &handles, None))
}

/// Direction of the divergence used as attribution loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossDirection {
    /// KL(P_ref || P_current): zero at the reference distribution.
    #[default]
    RefToCurrent,
    /// KL(P_current || P_ref).
    CurrentToRef,
}

/// A forward pass whose tape is still open, so a loss can be attached and
/// input gradients propagated into the cache.
pub struct TracedForward {
    tape: Tape,
    handles: ForwardHandles,
    seq_len: usize,
}

impl TracedForward {
    /// Final-position log-probabilities of this run.
    pub fn final_log_probs(&self) -> Tensor {
        self.tape.value(self.handles.final_logp).clone()
    }

    /// Attach a KL divergence at the final position against the reference
    /// distribution `p_ref`, backpropagate, and return the cache (with
    /// per-slot input gradients) plus the loss value.
    pub fn backward_kl(
        mut self,
        params: &ModelParams,
        spec: &InterventionSpec,
        p_ref: &Tensor,
        direction: LossDirection,
    ) -> Result<(ActivationCache, f64)> {
        let loss = match direction {
            LossDirection::RefToCurrent => {
                self.tape.kl_divergence(p_ref, self.handles.final_logp)?
            }
            LossDirection::CurrentToRef => {
                // KL(current || ref) = sum p_cur (log p_cur - log p_ref)
                let log_ref: Vec<f64> = p_ref.data().iter().map(|&p| libm::log(p)).collect();
                let log_ref = Tensor::new(vec![p_ref.numel()], log_ref).map_err(|_| {
                    CoreError::Invalid {
                        detail: "reference distribution has zero mass entries".into(),
                    }
                })?;
                let lr = self.tape.input(log_ref);
                let p_cur = self.tape.exp(self.handles.final_logp)?;
                let diff = self.tape.sub(self.handles.final_logp, lr)?;
                let prod = self.tape.mul(p_cur, diff)?;
                self.tape.sum_all(prod)?
            }
        };
        let grads = self.tape.backward(loss)?;
        let cache = cache_from_handles(
            &self.tape,
            params,
            self.seq_len,
            spec,
            &self.handles,
            Some(&grads),
        );
        Ok((cache, self.tape.value(loss).item()))
    }
}

/// Forward pass that keeps its tape open for gradient extraction.
pub fn forward_traced(
    params: &ModelParams,
    tokens: &[u32],
    spec: &InterventionSpec,
) -> Result<TracedForward> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let handles = forward_on_tape(&mut tape, params, &ids, tokens, spec)?;
    Ok(TracedForward { tape, handles, seq_len: tokens.len() })
}

// ---- sampling --------------------------------------------------------------

/// Autoregressive sampling: temperature, then top-p truncation, then top-k
/// if set, then renormalized categorical draw. Deterministic given the seed.
/// Returns the generated tokens (prompt excluded).
pub fn sample(
    params: &ModelParams,
    prompt: &[u32],
    cfg: &SamplerConfig,
    spec: &InterventionSpec,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    sample_with_rng(params, prompt, cfg, spec, &mut rng)
}

/// Sampling loop with an externally managed RNG stream (used by the
/// evaluation harness and GRPO rollouts for per-stream seed derivation).
pub fn sample_with_rng(
    params: &ModelParams,
    prompt: &[u32],
    cfg: &SamplerConfig,
    spec: &InterventionSpec,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::with_capacity(cfg.max_new_tokens);
    for _ in 0..cfg.max_new_tokens {
        let cache = forward(params, &tokens, spec)?;
        let logp = cache.final_log_probs();
        let next = if cfg.temperature < 1e-6 {
            argmax(logp.data()) as u32
        } else {
            draw_token(logp.data(), cfg, rng)?
        };
        tokens.push(next);
        generated.push(next);
    }
    Ok(generated)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn draw_token(logp: &[f64], cfg: &SamplerConfig, rng: &mut Rng) -> Result<u32> {
    // Temperature rescale in log space, then stable softmax.
    let scaled: Vec<f64> = logp.iter().map(|&x| x / cfg.temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|&x| libm::exp(x - m)).collect();
    let z: f64 = probs.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(CoreError::NonFinite { op: "sample" });
    }
    for p in probs.iter_mut() {
        *p /= z;
    }

    // Sort descending by probability, token id ascending on ties.
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });

    // Smallest prefix with cumulative mass >= top_p.
    let mut keep = 0;
    let mut cum = 0.0;
    for (rank, &tok) in order.iter().enumerate() {
        cum += probs[tok];
        keep = rank + 1;
        if cum >= cfg.top_p {
            break;
        }
    }
    if let Some(k) = cfg.top_k {
        keep = keep.min(k);
    }
    let kept = &order[..keep];
    let mass: f64 = kept.iter().map(|&t| probs[t]).sum();

    let u = rng.next_f64() * mass;
    let mut acc = 0.0;
    for &tok in kept {
        acc += probs[tok];
        if u < acc {
            return Ok(tok as u32);
        }
    }
    Ok(*kept.last().expect("non-empty candidate set") as u32)
}
