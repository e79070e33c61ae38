//! Hard pair mining: the largest same-class distance and the smallest
//! different-class distance for every (anchor modality, partner modality)
//! combination.

use serde::Serialize;

use crate::dataspace::{Batch, DistanceMatrix, Modality};
use crate::numerics::{Graph, NodeId};

use super::LossError;

pub(crate) fn mod_index(m: Modality) -> usize {
    match m {
        Modality::Sketch => 0,
        Modality::Photo => 1,
    }
}

/// Class and modality of every batch position.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pub class_ids: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl BatchLabels {
    pub fn new(class_ids: Vec<usize>, modalities: Vec<Modality>) -> Self {
        assert_eq!(class_ids.len(), modalities.len());
        Self {
            class_ids,
            modalities,
        }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

impl From<&Batch> for BatchLabels {
    fn from(b: &Batch) -> Self {
        Self::new(b.class_ids(), b.modalities())
    }
}

/// Which pairs a hard-mined value was taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSet {
    /// Anchor in the first modality, partner in the second.
    Modal(Modality, Modality),
    /// Any modalities.
    AnyModality,
}

/// Candidate pair lists for a fixed batch labelling, as flat indices
/// `anchor * n + partner` in ascending (anchor, partner) order. Selecting
/// the first extreme value in this order breaks ties by lowest index pair.
#[derive(Debug, Clone)]
pub struct PairPlan {
    n: usize,
    positives: [[Vec<usize>; 2]; 2],
    negatives: [[Vec<usize>; 2]; 2],
    any_positive: Vec<usize>,
    any_negative: Vec<usize>,
}

impl PairPlan {
    pub fn new(labels: &BatchLabels) -> Result<Self, LossError> {
        let n = labels.len();
        let mut classes = labels.class_ids.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(LossError::Batch(format!(
                "mining needs at least 2 classes, batch has {}",
                classes.len()
            )));
        }
        for m in Modality::BOTH {
            if !labels.modalities.contains(&m) {
                return Err(LossError::Batch(format!("batch has no {m} samples")));
            }
        }
        let mut plan = Self {
            n,
            positives: Default::default(),
            negatives: Default::default(),
            any_positive: Vec::new(),
            any_negative: Vec::new(),
        };
        for a in 0..n {
            for p in 0..n {
                if a == p {
                    continue;
                }
                let (ma, mp) = (mod_index(labels.modalities[a]), mod_index(labels.modalities[p]));
                let flat = a * n + p;
                if labels.class_ids[a] == labels.class_ids[p] {
                    plan.positives[ma][mp].push(flat);
                    plan.any_positive.push(flat);
                } else {
                    plan.negatives[ma][mp].push(flat);
                    plan.any_negative.push(flat);
                }
            }
        }
        Ok(plan)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn positives(&self, set: PairSet) -> &[usize] {
        match set {
            PairSet::Modal(a, b) => &self.positives[mod_index(a)][mod_index(b)],
            PairSet::AnyModality => &self.any_positive,
        }
    }

    pub fn negatives(&self, set: PairSet) -> &[usize] {
        match set {
            PairSet::Modal(a, b) => &self.negatives[mod_index(a)][mod_index(b)],
            PairSet::AnyModality => &self.any_negative,
        }
    }

    /// Graph node for the hardest positive distance over `set`.
    pub fn positive_node(&self, g: &mut Graph, dist: NodeId, set: PairSet) -> Result<NodeId, LossError> {
        let cands = self.positives(set);
        if cands.is_empty() {
            return Err(LossError::EmptyPairs { set, positive: true });
        }
        let gathered = g.gather(dist, cands.to_vec(), &[cands.len()])?;
        Ok(g.max(gathered)?)
    }

    /// Graph node for the hardest negative distance over `set`.
    pub fn negative_node(&self, g: &mut Graph, dist: NodeId, set: PairSet) -> Result<NodeId, LossError> {
        let cands = self.negatives(set);
        if cands.is_empty() {
            return Err(LossError::EmptyPairs { set, positive: false });
        }
        let gathered = g.gather(dist, cands.to_vec(), &[cands.len()])?;
        Ok(g.min(gathered)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinedPair {
    pub value: f64,
    pub anchor: usize,
    pub partner: usize,
}

/// Hardest positive and negative pair per (anchor modality, partner
/// modality), plus the modality-agnostic extremes. A combination with no
/// candidate pairs is `None`; losses that need it report an error.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedPairs {
    positive: [[Option<MinedPair>; 2]; 2],
    negative: [[Option<MinedPair>; 2]; 2],
    any_positive: Option<MinedPair>,
    any_negative: Option<MinedPair>,
}

impl MinedPairs {
    pub fn positive(&self, set: PairSet) -> Result<MinedPair, LossError> {
        match set {
            PairSet::Modal(a, b) => self.positive[mod_index(a)][mod_index(b)],
            PairSet::AnyModality => self.any_positive,
        }
        .ok_or(LossError::EmptyPairs { set, positive: true })
    }

    pub fn negative(&self, set: PairSet) -> Result<MinedPair, LossError> {
        match set {
            PairSet::Modal(a, b) => self.negative[mod_index(a)][mod_index(b)],
            PairSet::AnyModality => self.any_negative,
        }
        .ok_or(LossError::EmptyPairs { set, positive: false })
    }

    /// Shorthand for the hardest positive value `P+(a, b)`.
    pub fn pos(&self, a: Modality, b: Modality) -> Result<f64, LossError> {
        Ok(self.positive(PairSet::Modal(a, b))?.value)
    }

    /// Shorthand for the hardest negative value `P-(a, b)`.
    pub fn neg(&self, a: Modality, b: Modality) -> Result<f64, LossError> {
        Ok(self.negative(PairSet::Modal(a, b))?.value)
    }
}

fn select(d: &DistanceMatrix, cands: &[usize], better: impl Fn(f64, f64) -> bool) -> Option<MinedPair> {
    let n = d.n();
    let mut best: Option<MinedPair> = None;
    for &flat in cands {
        let v = d.data()[flat];
        if best.is_none_or(|b| better(v, b.value)) {
            best = Some(MinedPair {
                value: v,
                anchor: flat / n,
                partner: flat % n,
            });
        }
    }
    best
}

pub fn mine_with_plan(d: &DistanceMatrix, plan: &PairPlan) -> MinedPairs {
    assert_eq!(d.n(), plan.n(), "distance matrix does not match the batch");
    let mut out = MinedPairs {
        positive: [[None; 2]; 2],
        negative: [[None; 2]; 2],
        any_positive: select(d, &plan.any_positive, |c, b| c > b),
        any_negative: select(d, &plan.any_negative, |c, b| c < b),
    };
    for a in 0..2 {
        for b in 0..2 {
            out.positive[a][b] = select(d, &plan.positives[a][b], |c, best| c > best);
            out.negative[a][b] = select(d, &plan.negatives[a][b], |c, best| c < best);
        }
    }
    out
}

pub fn mine_pairs(d: &DistanceMatrix, labels: &BatchLabels) -> Result<MinedPairs, LossError> {
    if d.n() != labels.len() {
        return Err(LossError::Batch(format!(
            "distance matrix is {0}x{0} but batch has {1} samples",
            d.n(),
            labels.len()
        )));
    }
    Ok(mine_with_plan(d, &PairPlan::new(labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataspace::pairwise_sq_distances;
    use Modality::{Photo, Sketch};

    #[test]
    fn singleton_sets() {
        // 2 classes x 1 sample per modality.
        let labels = BatchLabels::new(vec![0, 0, 1, 1], vec![Sketch, Photo, Sketch, Photo]);
        let feats = vec![vec![0.0, 1.0], vec![0.6, 0.8], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let d = pairwise_sq_distances(&feats);
        let m = mine_pairs(&d, &labels).unwrap();
        let p = m.positive(PairSet::Modal(Sketch, Photo)).unwrap();
        assert_eq!((p.anchor, p.partner), (2, 3));
        assert_eq!(p.value, d.get(2, 3));
        assert!(m.positive(PairSet::Modal(Sketch, Sketch)).is_err());
        let n = m.negative(PairSet::Modal(Sketch, Sketch)).unwrap();
        assert_eq!(n.value, d.get(0, 2));
    }

    #[test]
    fn identical_samples_have_zero_positive() {
        let labels = BatchLabels::new(vec![0, 0, 0, 1, 1, 1], vec![Sketch, Sketch, Photo, Sketch, Photo, Photo]);
        let d = pairwise_sq_distances(&vec![vec![0.5, 0.5]; 6]);
        let m = mine_pairs(&d, &labels).unwrap();
        for a in Modality::BOTH {
            for b in Modality::BOTH {
                assert_eq!(m.pos(a, b).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn ties_take_lowest_pair() {
        let labels = BatchLabels::new(vec![0, 0, 1, 1], vec![Sketch, Photo, Sketch, Photo]);
        let d = pairwise_sq_distances(&vec![vec![1.0, 0.0]; 4]);
        let m = mine_pairs(&d, &labels).unwrap();
        let n = m.negative(PairSet::Modal(Photo, Sketch)).unwrap();
        assert_eq!((n.anchor, n.partner), (1, 2));
        let any = m.negative(PairSet::AnyModality).unwrap();
        assert_eq!((any.anchor, any.partner), (0, 2));
    }

    #[test]
    fn single_class_is_an_error() {
        let labels = BatchLabels::new(vec![3, 3], vec![Sketch, Photo]);
        let d = pairwise_sq_distances(&[vec![0.0], vec![1.0]]);
        assert!(matches!(mine_pairs(&d, &labels), Err(LossError::Batch(_))));
    }

    #[test]
    fn missing_modality_is_an_error() {
        let labels = BatchLabels::new(vec![0, 1], vec![Sketch, Sketch]);
        let d = pairwise_sq_distances(&[vec![0.0], vec![1.0]]);
        assert!(mine_pairs(&d, &labels).is_err());
    }
}
