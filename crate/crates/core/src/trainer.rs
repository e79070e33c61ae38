//! Training loop: PK batches, embedding, optional meta-learned margins,
//! the combined objective and Adam updates, with resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataspace::{DataError, Dataset, Modality, PkSampler, SplitSpec};
use crate::losses::{
    build_objective, BatchLabels, ClassifierNodes, LossConfig, LossError, LossReport, MarginNodes, MarginPair,
};
use crate::meta_margin::{build_episode, reset_memory, ControllerParams, EpisodeInput, MetaConfig, MetaError};
use crate::numerics::{Array, Bindings, Gradients, Graph, NodeId, NumericsError};
use crate::SeedRng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint schema version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint schema error: {0}")]
    Schema(String),
}

/// How samples become embeddings before L2 normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Every sample's coordinates are free parameters.
    DirectCoordinates,
    /// One shared linear map of the input features.
    LinearProjection { out_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub embedding: EmbeddingMode,
    pub loss: LossConfig,
    /// Used when `loss.use_meta_margin` is set.
    pub meta: MetaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 20,
            batches_per_epoch: 10,
            p: 16,
            k: 4,
            seed: 0,
            embedding: EmbeddingMode::LinearProjection { out_dim: 16 },
            loss: LossConfig::default(),
            meta: MetaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let a = &self.adam;
        // A zero learning rate is accepted: it freezes every parameter.
        if !(a.learning_rate.is_finite() && a.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be >= 0", a.learning_rate));
        }
        if !(a.weight_decay.is_finite() && a.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0 && a.eps.is_finite()) {
            return bad("adam eps must be > 0".into());
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return bad("epochs and batches_per_epoch must be >= 1".into());
        }
        if self.p < 2 || self.k == 0 {
            return bad(format!("need p >= 2 and k >= 1, got p={} k={}", self.p, self.k));
        }
        if let EmbeddingMode::LinearProjection { out_dim: 0 } = self.embedding {
            return bad("out_dim must be positive".into());
        }
        self.loss.validate()?;
        if self.loss.use_meta_margin {
            self.meta.validate()?;
        }
        Ok(())
    }
}

// ---- Adam ------------------------------------------------------------------

pub type ParamSet = BTreeMap<String, Array>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One Adam update with bias correction and decoupled weight decay.
/// Parameters without a gradient entry are treated as having zero
/// gradient.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; p.len()],
            v: vec![0.0; p.len()],
        });
        let g = grads.get(name).map(|g| g.data());
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = mom.m[i] / c1;
            let v_hat = mom.v[i] / c2;
            *x -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
        }
    }
}

// ---- model -----------------------------------------------------------------

/// Trainable state: embedding, classifier and optional controller
/// tensors, all under one name space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub embedding: EmbeddingMode,
    pub params: ParamSet,
    /// Shape template and write gate of the controller; its tensors live
    /// in `params`.
    pub controller: Option<ControllerParams>,
    /// Seen classes in classifier column order.
    pub seen_classes: Vec<usize>,
}

impl Model {
    pub fn init(dataset: &Dataset, split: &SplitSpec, config: &TrainConfig, rng: &mut SeedRng) -> Result<Self, TrainError> {
        let in_dim = dataset.dim();
        let mut params = ParamSet::new();
        let embed_dim = match config.embedding {
            EmbeddingMode::DirectCoordinates => {
                let rows: Vec<Vec<f64>> = dataset.samples().iter().map(|s| s.features.clone()).collect();
                params.insert("embed.coords".into(), Array::from_rows(&rows)?);
                in_dim
            }
            EmbeddingMode::LinearProjection { out_dim } => {
                let proj = if out_dim == in_dim {
                    let mut a = Array::zeros(&[in_dim, in_dim]);
                    for i in 0..in_dim {
                        a.data_mut()[i * in_dim + i] = 1.0;
                    }
                    a
                } else {
                    uniform(rng, &[in_dim, out_dim], in_dim)
                };
                params.insert("embed.proj".into(), proj);
                out_dim
            }
        };
        let seen_classes: Vec<usize> = split.seen_classes.iter().copied().collect();
        let c = seen_classes.len();
        if config.loss.use_cls {
            params.insert("cls.w".into(), uniform(rng, &[embed_dim, c], embed_dim));
            params.insert("cls.b".into(), Array::zeros(&[1, c]));
        }
        let controller = if config.loss.use_meta_margin {
            let ctrl = ControllerParams::init(&config.meta, embed_dim + config.p, rng)?;
            for (k, v) in &ctrl.tensors {
                params.insert(k.clone(), v.clone());
            }
            Some(ctrl)
        } else {
            None
        };
        Ok(Self {
            embedding: config.embedding,
            params,
            controller,
            seen_classes,
        })
    }

    pub fn embed_dim(&self) -> usize {
        match self.embedding {
            EmbeddingMode::DirectCoordinates => self.params["embed.coords"].shape()[1],
            EmbeddingMode::LinearProjection { out_dim } => out_dim,
        }
    }

    /// Builds `l2_normalize(embedding)` for the dataset rows `indices`.
    fn embed_node(&self, g: &mut Graph, dataset: &Dataset, indices: &[usize]) -> Result<NodeId, TrainError> {
        let raw = match self.embedding {
            EmbeddingMode::DirectCoordinates => {
                let coords = g.leaf("embed.coords", self.params["embed.coords"].shape())?;
                if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
                    return Err(TrainError::Config(format!("sample index {bad} out of range")));
                }
                g.gather_rows(coords, indices)?
            }
            EmbeddingMode::LinearProjection { .. } => {
                let rows: Vec<Vec<f64>> = indices.iter().map(|&i| dataset.samples()[i].features.clone()).collect();
                let x = g.constant(Array::from_rows(&rows)?);
                let w = g.leaf("embed.proj", self.params["embed.proj"].shape())?;
                g.matmul(x, w)?
            }
        };
        Ok(g.l2_normalize(raw)?)
    }

    /// Normalized embeddings of the given dataset rows.
    pub fn embed(&self, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>, TrainError> {
        if indices.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let e = self.embed_node(&mut g, dataset, indices)?;
        let v = g.evaluate(e, &self.params)?;
        Ok((0..indices.len()).map(|i| v.row(i).to_vec()).collect())
    }

    pub fn embed_all(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>, TrainError> {
        self.embed(dataset, &(0..dataset.len()).collect::<Vec<_>>())
    }

    fn controller_view(&self) -> Option<ControllerParams> {
        self.controller.as_ref().map(|c| {
            let mut c = c.clone();
            for (k, v) in c.tensors.iter_mut() {
                *v = self.params[k].clone();
            }
            c
        })
    }
}

fn uniform(rng: &mut SeedRng, shape: &[usize], fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("finite uniform draws")
}

// ---- history ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub batch: usize,
    pub report: LossReport,
    pub margins: MarginPair,
}

pub const HISTORY_HEADER: &str = "epoch,batch,total,inter,intra,cls,active_fraction,m_inter,m_intra";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.batch,
            p.total,
            p.inter_term,
            p.intra_term,
            p.cls_term,
            p.active_fraction,
            r.margins.inter,
            r.margins.intra
        );
    }
    s
}

// ---- trainer ---------------------------------------------------------------

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub split: SplitSpec,
    /// Completed epochs.
    pub epoch: usize,
    pub model: Model,
    pub adam: AdamState,
    pub rng: SeedRng,
    pub history: Vec<HistoryRow>,
}

pub struct Trainer<'a> {
    dataset: &'a Dataset,
    sampler: PkSampler,
    state: Checkpoint,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, split: &SplitSpec, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = SeedRng::seed_from_u64(config.seed);
        let model = Model::init(dataset, split, config, &mut rng)?;
        let state = Checkpoint {
            config: config.clone(),
            split: split.clone(),
            epoch: 0,
            model,
            adam: AdamState::default(),
            rng,
            history: Vec::new(),
        };
        Self::from_checkpoint(dataset, state)
    }

    pub fn from_checkpoint(dataset: &'a Dataset, checkpoint: Checkpoint) -> Result<Self, TrainError> {
        let c = &checkpoint.config;
        c.validate()?;
        let sampler = PkSampler::new(dataset, &checkpoint.split, c.p, c.k)?;
        if let Some(coords) = checkpoint.model.params.get("embed.coords") {
            if coords.shape() != [dataset.len(), dataset.dim()] {
                return Err(TrainError::Config("checkpoint coordinates do not match the dataset".into()));
            }
        }
        if let Some(proj) = checkpoint.model.params.get("embed.proj") {
            if proj.shape()[0] != dataset.dim() {
                return Err(TrainError::Config("checkpoint projection does not match the dataset".into()));
            }
        }
        Ok(Self {
            dataset,
            sampler,
            state: checkpoint,
        })
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.state.history
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    /// One optimization step on a fresh PK batch.
    pub fn step(&mut self, batch_no: usize) -> Result<HistoryRow, TrainError> {
        let epoch = self.state.epoch + 1;
        let cfg = self.state.config.clone();
        let batch = self.sampler.sample(self.dataset, &mut self.state.rng);
        let model = &self.state.model;

        let mut g = Graph::new();
        let emb = model.embed_node(&mut g, self.dataset, &batch.indices)?;
        let mut bindings: Bindings = model.params.clone();
        let diverged = |e: NumericsError| match e {
            NumericsError::NonFiniteValue { .. } => TrainError::Diverged { epoch, batch: batch_no },
            other => other.into(),
        };
        let mut trace = g.forward(&bindings).map_err(diverged)?;

        let margin_nodes = match model.controller_view() {
            Some(ctrl) => {
                let n = batch.len();
                let rows: Vec<Vec<f64>> = (0..n).map(|i| trace.value(emb).row(i).to_vec()).collect();
                let episode = EpisodeInput::new(&rows, &batch.episode_labels(), cfg.p)?;
                let leaves = ctrl.declare(&mut g)?;
                ctrl.bind(&mut bindings);
                let mut memory = reset_memory(cfg.meta.slots, cfg.meta.key_width, cfg.meta.n_heads)?;
                let nodes = build_episode(
                    &mut g,
                    &mut trace,
                    &bindings,
                    &leaves,
                    &ctrl,
                    &cfg.meta,
                    &episode,
                    &mut memory,
                )?;
                nodes.margin_nodes
            }
            None => MarginNodes::constant(&mut g, MarginPair::fixed(cfg.loss.fixed_margin)),
        };

        let labels = BatchLabels::from(&batch);
        let dense: Vec<usize> = batch
            .class_ids()
            .iter()
            .map(|&c| model.seen_classes.iter().position(|&s| s == c).expect("batch drawn from seen classes"))
            .collect();
        let cls = if cfg.loss.use_cls {
            Some(ClassifierNodes {
                weight: g.leaf("cls.w", model.params["cls.w"].shape())?,
                bias: g.leaf("cls.b", model.params["cls.b"].shape())?,
                labels: &dense,
            })
        } else {
            None
        };
        let nodes = build_objective(&mut g, emb, &labels, cls.as_ref(), margin_nodes, &cfg.loss)?;
        g.extend(&mut trace, &bindings).map_err(diverged)?;
        let report = nodes.report(&trace);
        if ![report.total, report.inter_term, report.intra_term, report.cls_term]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(TrainError::Diverged { epoch, batch: batch_no });
        }
        let margins = MarginPair {
            inter: trace.scalar(margin_nodes.inter),
            intra: trace.scalar(margin_nodes.intra),
        };
        let grads = g.backward_trace(nodes.total, &trace).map_err(diverged)?;
        adam_step(&mut self.state.model.params, &grads, &mut self.state.adam, &cfg.adam);
        if !self.state.model.params.values().all(Array::is_finite) {
            return Err(TrainError::Diverged { epoch, batch: batch_no });
        }
        let row = HistoryRow {
            epoch,
            batch: batch_no,
            report,
            margins,
        };
        self.state.history.push(row);
        Ok(row)
    }

    pub fn run_epoch(&mut self) -> Result<(), TrainError> {
        for b in 0..self.state.config.batches_per_epoch {
            self.step(b)?;
        }
        self.state.epoch += 1;
        log::debug!(
            "epoch {} mean loss {:.6}",
            self.state.epoch,
            self.epoch_mean_loss(self.state.epoch).unwrap_or(f64::NAN)
        );
        Ok(())
    }

    /// Trains until `epoch` epochs are complete (no-op if already there).
    pub fn run_to(&mut self, epoch: usize) -> Result<(), TrainError> {
        while self.state.epoch < epoch {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_to(self.state.config.epochs)
    }

    fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .state
            .history
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.report.total)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(dataset: &Dataset, split: &SplitSpec, config: &TrainConfig) -> Result<Checkpoint, TrainError> {
    let mut t = Trainer::new(dataset, split, config)?;
    t.run()?;
    Ok(t.into_checkpoint())
}

// ---- checkpoint container ----------------------------------------------------

const MAGIC: &[u8; 8] = b"QMLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `magic | u32 version | u64 payload length | JSON payload | sha256(payload)`.
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let payload = serde_json::to_vec(c).map_err(|e| CheckpointError::Schema(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(Sha256::digest(&payload).as_slice());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let header = 8 + 4 + 8;
    if bytes.len() < header {
        return Err(CheckpointError::Schema("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != header + len + 32 {
        return Err(CheckpointError::Schema(format!(
            "payload length {len} does not match file size {}",
            bytes.len()
        )));
    }
    let payload = &bytes[header..header + len];
    if Sha256::digest(payload).as_slice() != &bytes[header + len..] {
        return Err(CheckpointError::Schema("checksum mismatch".into()));
    }
    let c: Checkpoint = serde_json::from_slice(payload).map_err(|e| CheckpointError::Schema(e.to_string()))?;
    c.config
        .validate()
        .map_err(|e| CheckpointError::Schema(e.to_string()))?;
    Ok(c)
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode_checkpoint(c)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

// ---- diagnostics -------------------------------------------------------------

/// Mean squared distances between class/modality groups of embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceStats {
    /// Same class, any modality (distinct samples).
    pub intra_class: f64,
    /// Same class, sketch vs photo.
    pub cross_modal_same_class: f64,
    /// Different classes.
    pub inter_class: f64,
}

pub fn distance_stats(embeddings: &[Vec<f64>], classes: &[usize], modalities: &[Modality]) -> DistanceStats {
    let (mut intra, mut ni) = (0.0, 0usize);
    let (mut cross, mut nc) = (0.0, 0usize);
    let (mut inter, mut nx) = (0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            let d: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if classes[i] == classes[j] {
                intra += d;
                ni += 1;
                if modalities[i] != modalities[j] {
                    cross += d;
                    nc += 1;
                }
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    DistanceStats {
        intra_class: mean(intra, ni),
        cross_modal_same_class: mean(cross, nc),
        inter_class: mean(inter, nx),
    }
}
