//! Memory-augmented margin learner.
//!
//! A GRU controller reads an episode of `(x_t, l_{t-1})` pairs and emits a
//! key per step. Keys address an external memory with cosine reads and
//! least-recently-used writes; the mean read vector goes through a
//! two-output linear + ReLU head that yields the inter- and intra-modal
//! margins.
//!
//! Memory contents enter the graph as constants: gradients reach the
//! controller through the keys and read weights of every step, never
//! through earlier writes. The write gate `alpha` therefore only acts on
//! the forward pass.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{MarginNodes, MarginPair};
use crate::numerics::{sigmoid, Array, Bindings, Graph, NodeId, NumericsError, Trace};
use crate::SeedRng;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid memory configuration: {0}")]
    Config(String),
    #[error("key at step {step} has zero norm")]
    ZeroKey { step: usize },
    #[error("episode input: {0}")]
    Episode(String),
    #[error("missing or malformed controller parameter `{0}`")]
    Param(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub slots: usize,
    pub key_width: usize,
    pub hidden: usize,
    pub n_heads: usize,
    /// Usage decay; 1.0 keeps the full history.
    pub gamma: f64,
    pub similarity: Similarity,
    pub alpha_init: f64,
    pub head_bias_init: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            slots: 32,
            key_width: 32,
            hidden: 32,
            n_heads: 1,
            gamma: 1.0,
            similarity: Similarity::Cosine,
            alpha_init: 0.0,
            head_bias_init: 0.3,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        check_sizes(self.slots, self.key_width, self.n_heads)?;
        if self.hidden == 0 {
            return Err(MetaError::Config("hidden size must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(MetaError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !self.alpha_init.is_finite() || !self.head_bias_init.is_finite() {
            return Err(MetaError::Config("initial values must be finite".into()));
        }
        Ok(())
    }
}

fn check_sizes(slots: usize, width: usize, n_heads: usize) -> Result<(), MetaError> {
    if n_heads == 0 || slots <= n_heads {
        return Err(MetaError::Config(format!(
            "need slots > n_heads >= 1, got slots={slots}, n_heads={n_heads}"
        )));
    }
    if width == 0 {
        return Err(MetaError::Config("key width must be positive".into()));
    }
    Ok(())
}

/// External memory and its addressing weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    /// `slots` rows of width `key_width`.
    pub memory: Vec<Vec<f64>>,
    pub usage: Vec<f64>,
    /// Last read weights, one vector per head.
    pub read: Vec<Vec<f64>>,
    pub least_used: Vec<f64>,
    pub t: usize,
}

impl MemoryState {
    pub fn slots(&self) -> usize {
        self.memory.len()
    }

    pub fn width(&self) -> usize {
        self.memory.first().map_or(0, Vec::len)
    }

    pub fn n_heads(&self) -> usize {
        self.read.len()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.memory.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn matrix(&self) -> Array {
        Array::from_rows(&self.memory).expect("memory rows are rectangular")
    }
}

pub const MEMORY_INIT: f64 = 1e-6;

pub fn reset_memory(slots: usize, width: usize, n_heads: usize) -> Result<MemoryState, MetaError> {
    check_sizes(slots, width, n_heads)?;
    Ok(MemoryState {
        memory: vec![vec![MEMORY_INIT; width]; slots],
        usage: vec![0.0; slots],
        read: vec![vec![1.0 / slots as f64; slots]; n_heads],
        least_used: vec![0.0; slots],
        t: 0,
    })
}

/// Binary mask over the `n` smallest usage entries; ties go to the lower
/// index.
pub fn least_used(usage: &[f64], n: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..usage.len()).collect();
    order.sort_by(|&a, &b| usage[a].total_cmp(&usage[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; usage.len()];
    for &i in order.iter().take(n) {
        out[i] = 1.0;
    }
    out
}

/// `sigma(alpha) * w_r(t-1) + (1 - sigma(alpha)) * w_lu(t-1)` per head.
pub fn write_weights(state: &MemoryState, alpha_raw: f64) -> Vec<Vec<f64>> {
    let a = sigmoid(alpha_raw);
    state
        .read
        .iter()
        .map(|r| {
            r.iter()
                .zip(&state.least_used)
                .map(|(r, lu)| a * r + (1.0 - a) * lu)
                .collect()
        })
        .collect()
}

/// Adds `w_w(i) * key` to every memory row.
pub fn memory_write(state: &mut MemoryState, w_w: &[f64], key: &[f64]) {
    for (row, &w) in state.memory.iter_mut().zip(w_w) {
        for (m, k) in row.iter_mut().zip(key) {
            *m += w * k;
        }
    }
}

/// `w_u <- gamma * w_u + sum(w_r) + sum(w_w)` over heads.
pub fn update_usage(state: &mut MemoryState, reads: &[Vec<f64>], writes: &[Vec<f64>], gamma: f64) {
    for (i, u) in state.usage.iter_mut().enumerate() {
        *u = gamma * *u
            + reads.iter().map(|r| r[i]).sum::<f64>()
            + writes.iter().map(|w| w[i]).sum::<f64>();
    }
}

fn similarity_scores(memory: &[Vec<f64>], key: &[f64], sim: Similarity) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = |a: &[f64]| dot(a, a).sqrt().max(crate::numerics::NORM_GUARD);
    memory
        .iter()
        .map(|row| match sim {
            Similarity::Dot => dot(key, row),
            Similarity::Cosine => dot(key, row) / (norm(key) * norm(row)),
        })
        .collect()
}

/// Read result of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadOut {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Softmax-addressed read of one key.
pub fn memory_read(state: &MemoryState, key: &[f64], sim: Similarity) -> Result<ReadOut, MetaError> {
    if key.iter().all(|&k| k == 0.0) {
        return Err(MetaError::ZeroKey { step: state.t });
    }
    let s = similarity_scores(&state.memory, key, sim);
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let weights: Vec<f64> = e.iter().map(|x| x / z).collect();
    let mut vector = vec![0.0; state.width()];
    for (w, row) in weights.iter().zip(&state.memory) {
        for (v, r) in vector.iter_mut().zip(row) {
            *v += w * r;
        }
    }
    Ok(ReadOut { vector, weights })
}

// ---- controller parameters -------------------------------------------------

const GRU_GATES: [&str; 3] = ["z", "r", "n"];

/// Controller and head weights, keyed by their full parameter name
/// (`meta.gru.wz`, `meta.key.w`, `meta.head.b`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub key_width: usize,
    pub n_heads: usize,
    pub tensors: BTreeMap<String, Array>,
    /// Write gate before the sigmoid.
    pub alpha_raw: f64,
}

impl ControllerParams {
    pub const PREFIX: &'static str = "meta.";

    fn shapes(input_dim: usize, hidden: usize, key_width: usize, n_heads: usize) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for gate in GRU_GATES {
            v.push((format!("meta.gru.w{gate}"), vec![input_dim, hidden]));
            v.push((format!("meta.gru.u{gate}"), vec![hidden, hidden]));
            v.push((format!("meta.gru.b{gate}"), vec![1, hidden]));
        }
        v.push(("meta.key.w".into(), vec![hidden, key_width * n_heads]));
        v.push(("meta.key.b".into(), vec![1, key_width * n_heads]));
        v.push(("meta.head.w".into(), vec![key_width, 2]));
        v.push(("meta.head.b".into(), vec![1, 2]));
        v
    }

    /// Uniform `±1/sqrt(fan)` weights, zero GRU and key biases, head bias
    /// set to `head_bias_init`.
    pub fn init(cfg: &MetaConfig, input_dim: usize, rng: &mut SeedRng) -> Result<Self, MetaError> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(MetaError::Config("controller input dimension must be positive".into()));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::shapes(input_dim, cfg.hidden, cfg.key_width, cfg.n_heads) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".head.b") {
                vec![cfg.head_bias_init; n]
            } else if name.contains(".b") {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            tensors.insert(name, Array::new(shape, data)?);
        }
        Ok(Self {
            input_dim,
            hidden: cfg.hidden,
            key_width: cfg.key_width,
            n_heads: cfg.n_heads,
            tensors,
            alpha_raw: cfg.alpha_init,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Array, MetaError> {
        self.tensors.get(name).ok_or_else(|| MetaError::Param(name.into()))
    }

    /// Checks every expected tensor is present with the right shape.
    pub fn validate(&self) -> Result<(), MetaError> {
        let expected = Self::shapes(self.input_dim, self.hidden, self.key_width, self.n_heads);
        if expected.len() != self.tensors.len() {
            return Err(MetaError::Param(format!("expected {} tensors", expected.len())));
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() || !t.is_finite() {
                return Err(MetaError::Param(name));
            }
        }
        if !self.alpha_raw.is_finite() {
            return Err(MetaError::Param("meta.alpha".into()));
        }
        Ok(())
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        for (k, v) in &self.tensors {
            bindings.insert(k.clone(), v.clone());
        }
    }

    /// Declares every tensor as a graph leaf.
    pub fn declare(&self, g: &mut Graph) -> Result<ControllerLeaves, MetaError> {
        let mut leaf = |name: &str| -> Result<NodeId, MetaError> { Ok(g.leaf(name, self.get(name)?.shape())?) };
        Ok(ControllerLeaves {
            gates: [
                GateLeaves {
                    w: leaf("meta.gru.wz")?,
                    u: leaf("meta.gru.uz")?,
                    b: leaf("meta.gru.bz")?,
                },
                GateLeaves {
                    w: leaf("meta.gru.wr")?,
                    u: leaf("meta.gru.ur")?,
                    b: leaf("meta.gru.br")?,
                },
                GateLeaves {
                    w: leaf("meta.gru.wn")?,
                    u: leaf("meta.gru.un")?,
                    b: leaf("meta.gru.bn")?,
                },
            ],
            key_w: leaf("meta.key.w")?,
            key_b: leaf("meta.key.b")?,
            head_w: leaf("meta.head.w")?,
            head_b: leaf("meta.head.b")?,
            hidden: self.hidden,
            key_width: self.key_width,
            n_heads: self.n_heads,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateLeaves {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
}

/// Graph leaves of a declared controller.
#[derive(Debug, Clone, Copy)]
pub struct ControllerLeaves {
    /// Update, reset and candidate gates.
    pub gates: [GateLeaves; 3],
    pub key_w: NodeId,
    pub key_b: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
    pub hidden: usize,
    pub key_width: usize,
    pub n_heads: usize,
}

/// `x W + h U + b`.
fn affine(g: &mut Graph, x: NodeId, h: NodeId, gate: GateLeaves) -> Result<NodeId, NumericsError> {
    let xw = g.matmul(x, gate.w)?;
    let hu = g.matmul(h, gate.u)?;
    let s = g.add(xw, hu)?;
    g.add(s, gate.b)
}

/// One GRU cell update on `1 x in` input and `1 x hidden` state. Returns
/// the new hidden state and one `1 x key_width` key per head.
pub fn build_gru_step(
    g: &mut Graph,
    c: &ControllerLeaves,
    h: NodeId,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>), NumericsError> {
    let [gz, gr, gn] = c.gates;
    let z_pre = affine(g, x, h, gz)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = affine(g, x, h, gr)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h)?;
    let n_pre = affine(g, x, rh, gn)?;
    let n = g.tanh(n_pre)?;
    // (1 - z) * n + z * h = n + z * (h - n)
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    let h_new = g.add(n, zd)?;

    let kw = g.matmul(h_new, c.key_w)?;
    let keys_all = g.add(kw, c.key_b)?;
    let w = c.key_width;
    let keys = (0..c.n_heads)
        .map(|head| g.gather(keys_all, (head * w..(head + 1) * w).collect(), &[1, w]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((h_new, keys))
}

/// Read of one key against `memory`, held constant. Returns the read
/// vector (`1 x W`) and read weights (`1 x S`).
pub fn build_read(
    g: &mut Graph,
    key: NodeId,
    memory: &MemoryState,
    sim: Similarity,
) -> Result<(NodeId, NodeId), NumericsError> {
    let (s, w) = (memory.slots(), memory.width());
    let m = memory.matrix();
    let mut transposed = vec![0.0; s * w];
    for (i, row) in memory.memory.iter().enumerate() {
        let scale = match sim {
            Similarity::Dot => 1.0,
            Similarity::Cosine => {
                1.0 / row
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(crate::numerics::NORM_GUARD)
            }
        };
        for (j, x) in row.iter().enumerate() {
            transposed[j * s + i] = x * scale;
        }
    }
    let mt = g.constant(Array::new(vec![w, s], transposed)?);
    let q = match sim {
        Similarity::Dot => key,
        Similarity::Cosine => g.l2_normalize(key)?,
    };
    let scores = g.matmul(q, mt)?;
    let weights = g.softmax(scores)?;
    let mem = g.constant(m);
    let read = g.matmul(weights, mem)?;
    Ok((read, weights))
}

/// Sequence of `(x_t, l_{t-1})` controller inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInput {
    pub steps: Vec<Vec<f64>>,
}

impl EpisodeInput {
    /// Pairs each feature row with the one-hot label of the previous row
    /// (zeros at `t = 0`).
    pub fn new(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self, MetaError> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(MetaError::Episode(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(MetaError::Episode(format!("label {l} out of range for {num_classes} classes")));
        }
        let d = features[0].len();
        let mut steps = Vec::with_capacity(features.len());
        for (t, x) in features.iter().enumerate() {
            if x.len() != d {
                return Err(MetaError::Episode(format!("row {t} has width {}, expected {d}", x.len())));
            }
            let mut v = x.clone();
            let mut onehot = vec![0.0; num_classes];
            if t > 0 {
                onehot[labels[t - 1]] = 1.0;
            }
            v.extend(onehot);
            steps.push(v);
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }
}

/// Nodes produced by an episode.
#[derive(Debug, Clone)]
pub struct EpisodeNodes {
    /// `1 x 2` ReLU output.
    pub margins: NodeId,
    /// Scalar views of the two margins.
    pub margin_nodes: MarginNodes,
    /// Pre-activation of the head.
    pub head_pre: NodeId,
    pub read_weights: Vec<Vec<NodeId>>,
}

/// Appends a full episode to `g`, evaluating it step by step into `trace`
/// so memory writes can use concrete keys and read weights. `trace` must
/// cover every node already in `g`; `bindings` must hold the controller
/// tensors. Updates `memory` in place.
#[allow(clippy::too_many_arguments)]
pub fn build_episode(
    g: &mut Graph,
    trace: &mut Trace,
    bindings: &Bindings,
    leaves: &ControllerLeaves,
    params: &ControllerParams,
    cfg: &MetaConfig,
    episode: &EpisodeInput,
    memory: &mut MemoryState,
) -> Result<EpisodeNodes, MetaError> {
    if episode.is_empty() {
        return Err(MetaError::Episode("empty episode".into()));
    }
    if episode.input_dim() != params.input_dim {
        return Err(MetaError::Episode(format!(
            "step width {} does not match controller input {}",
            episode.input_dim(),
            params.input_dim
        )));
    }
    if memory.width() != params.key_width || memory.n_heads() != params.n_heads {
        return Err(MetaError::Config("memory does not match controller key width or heads".into()));
    }
    let n = params.n_heads;
    let mut h = g.constant(Array::zeros(&[1, params.hidden]));
    let mut step_reads = Vec::with_capacity(episode.len());
    let mut read_weights = Vec::with_capacity(episode.len());
    for x in &episode.steps {
        let x_node = g.constant(Array::matrix(1, x.len(), x.clone())?);
        let (h_new, keys) = build_gru_step(g, leaves, h, x_node)?;
        h = h_new;
        let mut head_reads = Vec::with_capacity(n);
        let mut head_weights = Vec::with_capacity(n);
        for &k in &keys {
            let (r, w) = build_read(g, k, memory, cfg.similarity)?;
            head_reads.push(r);
            head_weights.push(w);
        }
        g.extend(trace, bindings)?;

        let key_vals: Vec<Vec<f64>> = keys.iter().map(|&k| trace.value(k).data().to_vec()).collect();
        if key_vals.iter().any(|k| k.iter().all(|&v| v == 0.0)) {
            return Err(MetaError::ZeroKey { step: memory.t });
        }
        let reads: Vec<Vec<f64>> = head_weights.iter().map(|&w| trace.value(w).data().to_vec()).collect();
        let writes = write_weights(memory, params.alpha_raw);
        for (w_w, k) in writes.iter().zip(&key_vals) {
            memory_write(memory, w_w, k);
        }
        update_usage(memory, &reads, &writes, cfg.gamma);
        memory.read = reads;
        memory.least_used = least_used(&memory.usage, n);
        memory.t += 1;

        let read = if n == 1 {
            head_reads[0]
        } else {
            let s = g.add_all(&head_reads)?;
            g.scale(s, 1.0 / n as f64)?
        };
        step_reads.push(read);
        read_weights.push(head_weights);
    }
    let total = g.add_all(&step_reads)?;
    let mean = g.scale(total, 1.0 / episode.len() as f64)?;
    let lin = g.matmul(mean, leaves.head_w)?;
    let head_pre = g.add(lin, leaves.head_b)?;
    let margins = g.relu(head_pre)?;
    let inter = g.pick(margins, 0)?;
    let intra = g.pick(margins, 1)?;
    g.extend(trace, bindings)?;
    Ok(EpisodeNodes {
        margins,
        margin_nodes: MarginNodes { inter, intra },
        head_pre,
        read_weights,
    })
}

/// A standalone episode graph with the controller tensors as leaves.
pub struct EpisodeGraph {
    pub graph: Graph,
    pub trace: Trace,
    pub bindings: Bindings,
    pub nodes: EpisodeNodes,
    pub memory: MemoryState,
}

impl EpisodeGraph {
    pub fn margins(&self) -> MarginPair {
        MarginPair {
            inter: self.trace.scalar(self.nodes.margin_nodes.inter),
            intra: self.trace.scalar(self.nodes.margin_nodes.intra),
        }
    }
}

pub fn episode_graph(
    params: &ControllerParams,
    cfg: &MetaConfig,
    memory: MemoryState,
    episode: &EpisodeInput,
) -> Result<EpisodeGraph, MetaError> {
    params.validate()?;
    let mut graph = Graph::new();
    let mut bindings = Bindings::new();
    params.bind(&mut bindings);
    let leaves = params.declare(&mut graph)?;
    let mut trace = graph.forward(&bindings)?;
    let mut memory = memory;
    let nodes = build_episode(&mut graph, &mut trace, &bindings, &leaves, params, cfg, episode, &mut memory)?;
    Ok(EpisodeGraph {
        graph,
        trace,
        bindings,
        nodes,
        memory,
    })
}

/// Runs an episode and returns the margins with the updated memory.
pub fn run_episode(
    params: &ControllerParams,
    cfg: &MetaConfig,
    memory: MemoryState,
    episode: &EpisodeInput,
) -> Result<(MarginPair, MemoryState), MetaError> {
    let eg = episode_graph(params, cfg, memory, episode)?;
    Ok((eg.margins(), eg.memory))
}

/// Evaluates one GRU step outside any episode.
pub fn gru_step(params: &ControllerParams, h: &[f64], input: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), MetaError> {
    params.validate()?;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    params.bind(&mut b);
    let leaves = params.declare(&mut g)?;
    let h0 = g.constant(Array::matrix(1, h.len(), h.to_vec())?);
    let x = g.constant(Array::matrix(1, input.len(), input.to_vec())?);
    let (h1, keys) = build_gru_step(&mut g, &leaves, h0, x)?;
    let trace = g.forward(&b)?;
    Ok((
        trace.value(h1).data().to_vec(),
        keys.iter().map(|&k| trace.value(k).data().to_vec()).collect(),
    ))
}

/// `ReLU(m W + b)` for a read vector `m`.
pub fn margin_head(params: &ControllerParams, read: &[f64]) -> Result<MarginPair, MetaError> {
    let w = params.get("meta.head.w")?;
    let b = params.get("meta.head.b")?;
    if read.len() != w.shape()[0] {
        return Err(MetaError::Episode(format!("read width {} != {}", read.len(), w.shape()[0])));
    }
    let out: Vec<f64> = (0..2)
        .map(|j| {
            let s: f64 = read.iter().enumerate().map(|(i, r)| r * w.get2(i, j)).sum();
            (s + b.data()[j]).max(0.0)
        })
        .collect();
    Ok(MarginPair {
        inter: out[0],
        intra: out[1],
    })
}
