//! Relation-aware quadruplet loss, its triplet/quadruplet ablation
//! variants, the classification loss, and the combined objective.
//!
//! Every loss comes in two forms: plain functions over mined distance
//! values (used for inspection and as test oracles), and graph builders
//! that the trainer differentiates. Both are driven by the same
//! [`PairPlan`], so the pair selected by mining is the pair that receives
//! gradient.

mod mining;

pub use mining::{mine_pairs, mine_with_plan, BatchLabels, MinedPair, MinedPairs, PairPlan, PairSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataspace::{DistanceMatrix, Modality};
use crate::numerics::{Array, Bindings, Gradients, Graph, NodeId, NumericsError, Trace};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("no candidate {} pairs for {set:?}", if *positive { "positive" } else { "negative" })]
    EmptyPairs { set: PairSet, positive: bool },
    #[error("quadruplet terms need different modalities, got {0} twice")]
    SameModality(Modality),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which metric loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Inter- plus intra-modal quadruplets, both anchor modalities.
    RaQua,
    /// Photo anchor, sketch positive and negative.
    ComTri,
    /// `ComTri` plus its sketch-anchor mirror.
    BidTri,
    /// One triplet over hardest pairs regardless of modality.
    AllTri,
    /// `RaQua` without the intra-modal terms.
    SinQua,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::RaQua,
        LossVariant::ComTri,
        LossVariant::BidTri,
        LossVariant::AllTri,
        LossVariant::SinQua,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::RaQua => "ra_qua",
            LossVariant::ComTri => "com_tri",
            LossVariant::BidTri => "bid_tri",
            LossVariant::AllTri => "all_tri",
            LossVariant::SinQua => "sin_qua",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|v| v.name().replace('_', "") == key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the cross-modal hardest negative inside each quadruplet.
    pub lambda: f64,
    pub fixed_margin: f64,
    pub variant: LossVariant,
    pub use_meta_margin: bool,
    /// Adds the softmax cross-entropy term.
    pub use_cls: bool,
    /// Multiplier on the metric loss; the classification term is unweighted.
    pub metric_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            fixed_margin: 0.3,
            variant: LossVariant::RaQua,
            use_meta_margin: false,
            use_cls: true,
            metric_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.fixed_margin.is_finite() && self.fixed_margin >= 0.0) {
            return Err(LossError::Config(format!("fixed_margin {} must be >= 0", self.fixed_margin)));
        }
        if !(self.metric_weight.is_finite() && self.metric_weight >= 0.0) {
            return Err(LossError::Config("metric_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Margins for the inter- and intra-modal quadruplets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginPair {
    pub inter: f64,
    pub intra: f64,
}

impl MarginPair {
    pub fn fixed(m: f64) -> Self {
        Self { inter: m, intra: m }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub inter_term: f64,
    pub intra_term: f64,
    pub cls_term: f64,
    /// Share of hinged terms with a positive argument.
    pub active_fraction: f64,
}

pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

fn check_cross(j: Modality, k: Modality) -> Result<(), LossError> {
    if j == k {
        Err(LossError::SameModality(j))
    } else {
        Ok(())
    }
}

/// `λ·P-(j,k) + (1-λ)·P-(j,j)`.
pub fn weighted_negative(pairs: &MinedPairs, j: Modality, k: Modality, lambda: f64) -> Result<f64, LossError> {
    Ok(lambda * pairs.neg(j, k)? + (1.0 - lambda) * pairs.neg(j, j)?)
}

/// Global inter-modal quadruplet: cross-modal hardest positive.
pub fn inter_modal_quadruplet(
    pairs: &MinedPairs,
    j: Modality,
    k: Modality,
    margin: f64,
    lambda: f64,
) -> Result<f64, LossError> {
    check_cross(j, k)?;
    Ok(hinge(pairs.pos(j, k)? + margin - weighted_negative(pairs, j, k, lambda)?))
}

/// Local intra-modal quadruplet: same-modal hardest positive.
pub fn intra_modal_quadruplet(
    pairs: &MinedPairs,
    j: Modality,
    k: Modality,
    margin: f64,
    lambda: f64,
) -> Result<f64, LossError> {
    check_cross(j, k)?;
    Ok(hinge(pairs.pos(j, j)? + margin - weighted_negative(pairs, j, k, lambda)?))
}

/// Triplet hinge over one hard-mined pair set.
pub fn triplet_term(pairs: &MinedPairs, set: PairSet, margin: f64) -> Result<f64, LossError> {
    Ok(hinge(pairs.positive(set)?.value + margin - pairs.negative(set)?.value))
}

/// Per-term values of a metric loss, split into inter- and intra-modal
/// parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTerms {
    pub inter: f64,
    pub intra: f64,
    pub active: usize,
    pub total_terms: usize,
}

impl MetricTerms {
    pub fn total(&self) -> f64 {
        self.inter + self.intra
    }
}

/// Evaluates `variant` on mined pairs.
pub fn metric_terms(
    pairs: &MinedPairs,
    variant: LossVariant,
    margins: MarginPair,
    lambda: f64,
) -> Result<MetricTerms, LossError> {
    let mut inter = Vec::new();
    let mut intra = Vec::new();
    match variant {
        LossVariant::RaQua | LossVariant::SinQua => {
            for j in Modality::BOTH {
                let k = j.other();
                inter.push(inter_modal_quadruplet(pairs, j, k, margins.inter, lambda)?);
                if variant == LossVariant::RaQua {
                    intra.push(intra_modal_quadruplet(pairs, j, k, margins.intra, lambda)?);
                }
            }
        }
        LossVariant::ComTri => {
            inter.push(triplet_term(pairs, PairSet::Modal(Modality::Photo, Modality::Sketch), margins.inter)?);
        }
        LossVariant::BidTri => {
            inter.push(triplet_term(pairs, PairSet::Modal(Modality::Photo, Modality::Sketch), margins.inter)?);
            inter.push(triplet_term(pairs, PairSet::Modal(Modality::Sketch, Modality::Photo), margins.inter)?);
        }
        LossVariant::AllTri => {
            inter.push(triplet_term(pairs, PairSet::AnyModality, margins.inter)?);
        }
    }
    let all = inter.iter().chain(&intra);
    Ok(MetricTerms {
        inter: inter.iter().sum(),
        intra: intra.iter().sum(),
        active: all.clone().filter(|&&v| v > 0.0).count(),
        total_terms: inter.len() + intra.len(),
    })
}

/// Sum of the four hinged quadruplet terms over both anchor modalities.
pub fn relation_aware_quadruplet(
    d: &DistanceMatrix,
    labels: &BatchLabels,
    margins: MarginPair,
    lambda: f64,
) -> Result<f64, LossError> {
    let pairs = mine_pairs(d, labels)?;
    Ok(metric_terms(&pairs, LossVariant::RaQua, margins, lambda)?.total())
}

/// Any metric variant evaluated on a distance matrix. `lambda` is only
/// used by the quadruplet variants.
pub fn triplet_variant(
    d: &DistanceMatrix,
    labels: &BatchLabels,
    variant: LossVariant,
    margins: MarginPair,
    lambda: f64,
) -> Result<f64, LossError> {
    let pairs = mine_pairs(d, labels)?;
    Ok(metric_terms(&pairs, variant, margins, lambda)?.total())
}

/// Mean softmax cross-entropy of `logits` (`n x C`) against dense labels.
pub fn classification_loss(logits: &Array, labels: &[usize]) -> Result<f64, LossError> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(LossError::Batch(format!(
            "logits shape {:?} does not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(LossError::LabelOutOfRange { label, classes: c });
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

// ---- graph builders ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    Inter,
    Intra,
}

/// Scalar nodes holding the two margins.
#[derive(Debug, Clone, Copy)]
pub struct MarginNodes {
    pub inter: NodeId,
    pub intra: NodeId,
}

impl MarginNodes {
    pub fn constant(g: &mut Graph, margins: MarginPair) -> Self {
        Self {
            inter: g.constant(Array::scalar(margins.inter)),
            intra: g.constant(Array::scalar(margins.intra)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HingeTerm {
    pub node: NodeId,
    pub margin: MarginKind,
}

/// Nodes of a built objective.
#[derive(Debug, Clone)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub inter: NodeId,
    pub intra: NodeId,
    pub cls: Option<NodeId>,
    pub hinges: Vec<HingeTerm>,
    /// Pairwise squared distances of the batch embeddings.
    pub distances: NodeId,
}

impl ObjectiveNodes {
    pub fn report(&self, trace: &Trace) -> LossReport {
        let active = self
            .hinges
            .iter()
            .filter(|h| trace.scalar(h.node) > 0.0)
            .count();
        LossReport {
            total: trace.scalar(self.total),
            inter_term: trace.scalar(self.inter),
            intra_term: trace.scalar(self.intra),
            cls_term: self.cls.map_or(0.0, |c| trace.scalar(c)),
            active_fraction: if self.hinges.is_empty() {
                0.0
            } else {
                active as f64 / self.hinges.len() as f64
            },
        }
    }
}

struct MetricBuilder<'a> {
    plan: &'a PairPlan,
    dist: NodeId,
    margins: MarginNodes,
    lambda: f64,
    hinges: Vec<HingeTerm>,
}

impl MetricBuilder<'_> {
    fn pos(&self, g: &mut Graph, set: PairSet) -> Result<NodeId, LossError> {
        self.plan.positive_node(g, self.dist, set)
    }

    fn neg(&self, g: &mut Graph, set: PairSet) -> Result<NodeId, LossError> {
        self.plan.negative_node(g, self.dist, set)
    }

    fn margin(&self, kind: MarginKind) -> NodeId {
        match kind {
            MarginKind::Inter => self.margins.inter,
            MarginKind::Intra => self.margins.intra,
        }
    }

    /// `hinge(positive + margin - negative)`.
    fn hinged(&mut self, g: &mut Graph, positive: NodeId, negative: NodeId, kind: MarginKind) -> Result<NodeId, LossError> {
        let with_margin = g.add(positive, self.margin(kind))?;
        let arg = g.sub(with_margin, negative)?;
        let h = g.hinge(arg)?;
        self.hinges.push(HingeTerm { node: h, margin: kind });
        Ok(h)
    }

    fn weighted_negative(&self, g: &mut Graph, j: Modality, k: Modality) -> Result<NodeId, LossError> {
        let cross = self.neg(g, PairSet::Modal(j, k))?;
        let same = self.neg(g, PairSet::Modal(j, j))?;
        let a = g.scale(cross, self.lambda)?;
        let b = g.scale(same, 1.0 - self.lambda)?;
        Ok(g.add(a, b)?)
    }

    fn triplet(&mut self, g: &mut Graph, set: PairSet) -> Result<NodeId, LossError> {
        let p = self.pos(g, set)?;
        let n = self.neg(g, set)?;
        self.hinged(g, p, n, MarginKind::Inter)
    }

    fn build(&mut self, g: &mut Graph, variant: LossVariant) -> Result<(Vec<NodeId>, Vec<NodeId>), LossError> {
        let mut inter = Vec::new();
        let mut intra = Vec::new();
        match variant {
            LossVariant::RaQua | LossVariant::SinQua => {
                for j in Modality::BOTH {
                    let k = j.other();
                    let negative = self.weighted_negative(g, j, k)?;
                    let p_cross = self.pos(g, PairSet::Modal(j, k))?;
                    inter.push(self.hinged(g, p_cross, negative, MarginKind::Inter)?);
                    if variant == LossVariant::RaQua {
                        let p_same = self.pos(g, PairSet::Modal(j, j))?;
                        intra.push(self.hinged(g, p_same, negative, MarginKind::Intra)?);
                    }
                }
            }
            LossVariant::ComTri => {
                inter.push(self.triplet(g, PairSet::Modal(Modality::Photo, Modality::Sketch))?);
            }
            LossVariant::BidTri => {
                inter.push(self.triplet(g, PairSet::Modal(Modality::Photo, Modality::Sketch))?);
                inter.push(self.triplet(g, PairSet::Modal(Modality::Sketch, Modality::Photo))?);
            }
            LossVariant::AllTri => inter.push(self.triplet(g, PairSet::AnyModality)?),
        }
        Ok((inter, intra))
    }
}

/// Classifier nodes: weight `d x C`, bias `1 x C`, and dense labels.
#[derive(Debug, Clone)]
pub struct ClassifierNodes<'a> {
    pub weight: NodeId,
    pub bias: NodeId,
    pub labels: &'a [usize],
}

/// Mean cross-entropy of `softmax(E W + b)` as a graph node.
pub fn build_classification_loss(
    g: &mut Graph,
    embeddings: NodeId,
    cls: &ClassifierNodes<'_>,
) -> Result<NodeId, LossError> {
    let n = g.shape(embeddings)[0];
    if cls.labels.len() != n {
        return Err(LossError::Batch(format!("{} labels for {n} embeddings", cls.labels.len())));
    }
    let raw = g.matmul(embeddings, cls.weight)?;
    let logits = g.add(raw, cls.bias)?;
    let c = g.shape(logits)[1];
    if let Some(&label) = cls.labels.iter().find(|&&l| l >= c) {
        return Err(LossError::LabelOutOfRange { label, classes: c });
    }
    let lsm = g.log_softmax(logits)?;
    let picks: Vec<usize> = cls.labels.iter().enumerate().map(|(i, &l)| i * c + l).collect();
    let picked = g.gather(lsm, picks, &[n])?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

/// Builds `metric_weight * metric + cls` on top of an `n x d` embedding
/// node. The metric part follows `config.variant`.
pub fn build_objective(
    g: &mut Graph,
    embeddings: NodeId,
    labels: &BatchLabels,
    classifier: Option<&ClassifierNodes<'_>>,
    margins: MarginNodes,
    config: &LossConfig,
) -> Result<ObjectiveNodes, LossError> {
    config.validate()?;
    let plan = PairPlan::new(labels)?;
    if g.shape(embeddings).first() != Some(&labels.len()) {
        return Err(LossError::Batch(format!(
            "embeddings {:?} do not match {} labels",
            g.shape(embeddings),
            labels.len()
        )));
    }
    let dist = g.pairwise_sq_dist(embeddings)?;
    let mut mb = MetricBuilder {
        plan: &plan,
        dist,
        margins,
        lambda: config.lambda,
        hinges: Vec::new(),
    };
    let (inter_terms, intra_terms) = mb.build(g, config.variant)?;
    let hinges = mb.hinges;
    let inter = g.add_all(&inter_terms)?;
    let intra = g.add_all(&intra_terms)?;
    let metric = g.add(inter, intra)?;
    let weighted = g.scale(metric, config.metric_weight)?;

    let cls = match (config.use_cls, classifier) {
        (true, Some(c)) => Some(build_classification_loss(g, embeddings, c)?),
        (true, None) => return Err(LossError::Config("use_cls set but no classifier given".into())),
        (false, _) => None,
    };
    let total = match cls {
        Some(c) => g.add(weighted, c)?,
        None => weighted,
    };
    Ok(ObjectiveNodes {
        total,
        inter,
        intra,
        cls,
        hinges,
        distances: dist,
    })
}

/// Softmax classifier over seen classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `embed_dim x num_seen_classes`.
    pub weight: Array,
    /// `1 x num_seen_classes`.
    pub bias: Array,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub report: LossReport,
    /// Gradients keyed `embeddings`, `cls.weight`, `cls.bias`,
    /// `margin.inter`, `margin.intra`.
    pub grads: Gradients,
}

/// Evaluates the full objective for fixed embeddings and returns the
/// report with gradients for embeddings, classifier and margins.
pub fn total_loss(
    embeddings: &Array,
    labels: &BatchLabels,
    dense_labels: &[usize],
    classifier: Option<&ClassifierParams>,
    margins: MarginPair,
    config: &LossConfig,
) -> Result<TotalLoss, LossError> {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let e = g.leaf("embeddings", embeddings.shape())?;
    b.insert("embeddings".into(), embeddings.clone());
    let m_inter = g.leaf("margin.inter", &[])?;
    let m_intra = g.leaf("margin.intra", &[])?;
    b.insert("margin.inter".into(), Array::scalar(margins.inter));
    b.insert("margin.intra".into(), Array::scalar(margins.intra));
    let cls_nodes = match classifier {
        Some(c) if config.use_cls => {
            let w = g.leaf("cls.weight", c.weight.shape())?;
            let bias = g.leaf("cls.bias", c.bias.shape())?;
            b.insert("cls.weight".into(), c.weight.clone());
            b.insert("cls.bias".into(), c.bias.clone());
            Some(ClassifierNodes {
                weight: w,
                bias,
                labels: dense_labels,
            })
        }
        _ => None,
    };
    let nodes = build_objective(
        &mut g,
        e,
        labels,
        cls_nodes.as_ref(),
        MarginNodes {
            inter: m_inter,
            intra: m_intra,
        },
        config,
    )?;
    let trace = g.forward(&b)?;
    let grads = g.backward_trace(nodes.total, &trace)?;
    Ok(TotalLoss {
        report: nodes.report(&trace),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataspace::pairwise_sq_distances;
    use Modality::{Photo, Sketch};

    fn labels4() -> BatchLabels {
        BatchLabels::new(
            vec![0, 0, 0, 0, 1, 1, 1, 1],
            vec![Sketch, Sketch, Photo, Photo, Sketch, Sketch, Photo, Photo],
        )
    }

    fn feats(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        // small deterministic generator, unit rows
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                    })
                    .collect();
                crate::dataspace::l2_normalize(&v).unwrap()
            })
            .collect()
    }

    #[test]
    fn inter_worked_example() {
        // P+ = 0.2, P-(j,k) = 1.0, P-(j,j) = 0.8, lambda 0.3, margin 0.3
        let v = hinge(0.2 + 0.3 - (0.3 * 1.0 + 0.7 * 0.8));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn inter_requires_cross_modal() {
        let d = pairwise_sq_distances(&feats(1, 8, 3));
        let m = mine_pairs(&d, &labels4()).unwrap();
        assert!(matches!(
            inter_modal_quadruplet(&m, Sketch, Sketch, 0.3, 0.3),
            Err(LossError::SameModality(Sketch))
        ));
    }

    #[test]
    fn equal_distances_zero_margin_gives_zero() {
        let labels = labels4();
        let d = DistanceMatrix::from_data(8, {
            let mut v = vec![1.0; 64];
            for i in 0..8 {
                v[i * 8 + i] = 0.0;
            }
            v
        });
        let m = mine_pairs(&d, &labels).unwrap();
        for j in Modality::BOTH {
            assert_eq!(inter_modal_quadruplet(&m, j, j.other(), 0.0, 0.3).unwrap(), 0.0);
            assert_eq!(intra_modal_quadruplet(&m, j, j.other(), 0.0, 0.3).unwrap(), 0.0);
        }
    }

    #[test]
    fn lambda_one_is_cross_modal_triplet() {
        let labels = labels4();
        for seed in 0..20 {
            let d = pairwise_sq_distances(&feats(seed, 8, 4));
            let m = mine_pairs(&d, &labels).unwrap();
            for j in Modality::BOTH {
                let q = inter_modal_quadruplet(&m, j, j.other(), 0.3, 1.0).unwrap();
                let t = triplet_term(&m, PairSet::Modal(j, j.other()), 0.3).unwrap();
                assert_eq!(q, t);
            }
        }
    }

    #[test]
    fn collapsed_classes_give_zero_loss() {
        let labels = labels4();
        let mut f = vec![vec![1.0, 0.0]; 4];
        f.extend(vec![vec![-1.0, 0.0]; 4]);
        let d = pairwise_sq_distances(&f);
        let v = relation_aware_quadruplet(&d, &labels, MarginPair::fixed(0.3), 0.3).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_class_batch_errors() {
        let labels = BatchLabels::new(vec![0, 0], vec![Sketch, Photo]);
        let d = pairwise_sq_distances(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(relation_aware_quadruplet(&d, &labels, MarginPair::fixed(0.3), 0.3).is_err());
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let logits = Array::zeros(&[3, 4]);
        let v = classification_loss(&logits, &[0, 1, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_cross_entropy_vanishes() {
        let logits = Array::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        assert!(classification_loss(&logits, &[1]).unwrap() < 1e-300);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Array::zeros(&[1, 2]);
        assert!(matches!(
            classification_loss(&logits, &[2]),
            Err(LossError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(LossVariant::parse("RaQua"), Some(LossVariant::RaQua));
        assert_eq!(LossVariant::parse("bid-tri"), Some(LossVariant::BidTri));
        assert_eq!(LossVariant::parse("sin_qua"), Some(LossVariant::SinQua));
        assert_eq!(LossVariant::parse("quad"), None);
    }

    #[test]
    fn total_without_cls_and_zero_metric() {
        let labels = labels4();
        let mut f = vec![vec![1.0, 0.0]; 4];
        f.extend(vec![vec![-1.0, 0.0]; 4]);
        let e = Array::from_rows(&f).unwrap();
        let cfg = LossConfig {
            use_cls: false,
            ..LossConfig::default()
        };
        let t = total_loss(&e, &labels, &[], None, MarginPair::fixed(0.3), &cfg).unwrap();
        assert_eq!(t.report.total, 0.0);
        assert_eq!(t.report.active_fraction, 0.0);
    }

    #[test]
    fn margin_gradient_counts_active_hinges() {
        let labels = labels4();
        let e = Array::from_rows(&feats(5, 8, 3)).unwrap();
        let cfg = LossConfig {
            use_cls: false,
            ..LossConfig::default()
        };
        let t = total_loss(&e, &labels, &[], None, MarginPair { inter: 0.5, intra: 0.4 }, &cfg).unwrap();
        let d = pairwise_sq_distances(&feats(5, 8, 3));
        let m = mine_pairs(&d, &labels).unwrap();
        let mut inter_active = 0.0;
        let mut intra_active = 0.0;
        for j in Modality::BOTH {
            if inter_modal_quadruplet(&m, j, j.other(), 0.5, 0.3).unwrap() > 0.0 {
                inter_active += 1.0;
            }
            if intra_modal_quadruplet(&m, j, j.other(), 0.4, 0.3).unwrap() > 0.0 {
                intra_active += 1.0;
            }
        }
        assert_eq!(t.grads["margin.inter"].item(), Some(inter_active));
        assert_eq!(t.grads["margin.intra"].item(), Some(intra_active));
        assert!(inter_active + intra_active > 0.0);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let labels = labels4();
        let e = Array::from_rows(&feats(9, 8, 3)).unwrap();
        let cls = ClassifierParams {
            weight: Array::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.2]).unwrap(),
            bias: Array::matrix(1, 2, vec![0.01, -0.02]).unwrap(),
        };
        let dense = [0, 0, 0, 0, 1, 1, 1, 1];
        let t = total_loss(&e, &labels, &dense, Some(&cls), MarginPair::fixed(0.3), &LossConfig::default()).unwrap();
        let r = t.report;
        assert!((r.total - (r.inter_term + r.intra_term + r.cls_term)).abs() < 1e-15);
        assert!(r.cls_term > 0.0);
        assert!(t.grads.contains_key("cls.weight"));
    }
}
