//! Zero-shot retrieval: rank a gallery by squared distance to each query
//! and score rankings with mAP and precision@K.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataspace::{Dataset, Modality, SplitSpec};
use crate::trainer::{Model, TrainError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("no queries")]
    NoQueries,
    #[error("query {query} has no relevant gallery item")]
    NoRelevant { query: usize },
    #[error("embedding width mismatch: {0}")]
    Width(String),
    #[error("k must be >= 1")]
    ZeroK,
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Per-query gallery rankings plus the class labels needed for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub query_classes: Vec<usize>,
    pub gallery_classes: Vec<usize>,
    /// For each query, gallery positions sorted by ascending distance.
    pub rankings: Vec<Vec<usize>>,
}

impl RetrievalRun {
    pub fn gallery_len(&self) -> usize {
        self.gallery_classes.len()
    }

    /// Relevance flags of query `q` in rank order.
    pub fn relevance(&self, q: usize) -> Vec<bool> {
        self.rankings[q]
            .iter()
            .map(|&g| self.gallery_classes[g] == self.query_classes[q])
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks the gallery for every query; equal distances keep gallery order.
pub fn retrieve(
    queries: &[Vec<f64>],
    query_classes: &[usize],
    gallery: &[Vec<f64>],
    gallery_classes: &[usize],
) -> Result<RetrievalRun, RetrievalError> {
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    if queries.is_empty() {
        return Err(RetrievalError::NoQueries);
    }
    if queries.len() != query_classes.len() || gallery.len() != gallery_classes.len() {
        return Err(RetrievalError::Width("labels do not match embeddings".into()));
    }
    let d = gallery[0].len();
    if let Some(bad) = queries.iter().chain(gallery).find(|v| v.len() != d) {
        return Err(RetrievalError::Width(format!("found width {}, expected {d}", bad.len())));
    }
    let rankings = queries
        .iter()
        .map(|q| {
            let dist: Vec<f64> = gallery.iter().map(|g| sq_dist(q, g)).collect();
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
            order
        })
        .collect();
    Ok(RetrievalRun {
        query_classes: query_classes.to_vec(),
        gallery_classes: gallery_classes.to_vec(),
        rankings,
    })
}

/// Average precision of one relevance list, optionally truncated to the
/// first `cutoff` ranks. Hits after the cutoff are ignored.
pub fn average_precision(relevant: &[bool], cutoff: Option<usize>) -> f64 {
    let limit = cutoff.unwrap_or(relevant.len()).min(relevant.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant[..limit].iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn mean_average_precision(run: &RetrievalRun, cutoff: Option<usize>) -> Result<f64, RetrievalError> {
    let mut total = 0.0;
    for q in 0..run.rankings.len() {
        let rel = run.relevance(q);
        if !rel.contains(&true) {
            return Err(RetrievalError::NoRelevant { query: q });
        }
        total += average_precision(&rel, cutoff);
    }
    Ok(total / run.rankings.len() as f64)
}

/// Mean fraction of relevant items in the top `k`; `k` is clamped to the
/// gallery size.
pub fn precision_at_k(run: &RetrievalRun, k: usize) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let k = k.min(run.gallery_len());
    let total: f64 = (0..run.rankings.len())
        .map(|q| run.relevance(q)[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
        .sum();
    Ok(total / run.rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map_all: f64,
    pub map_at_200: f64,
    pub prec_at_100: f64,
    pub prec_at_200: f64,
}

impl Metrics {
    pub fn from_run(run: &RetrievalRun) -> Result<Self, RetrievalError> {
        Ok(Self {
            map_all: mean_average_precision(run, None)?,
            map_at_200: mean_average_precision(run, Some(200))?,
            prec_at_100: precision_at_k(run, 100)?,
            prec_at_200: precision_at_k(run, 200)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Queries from one modality, gallery from the other, restricted to
/// `classes`. Sketch queries unless `reverse` is set.
pub fn cross_modal_run(
    embeddings: &[Vec<f64>],
    dataset: &Dataset,
    classes: &std::collections::BTreeSet<usize>,
    reverse: bool,
) -> Result<RetrievalRun, RetrievalError> {
    let query_modality = if reverse { Modality::Photo } else { Modality::Sketch };
    let (mut q, mut qc, mut g, mut gc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, e) in dataset.samples().iter().zip(embeddings) {
        if !classes.contains(&s.class_id) {
            continue;
        }
        if s.modality == query_modality {
            q.push(e.clone());
            qc.push(s.class_id);
        } else {
            g.push(e.clone());
            gc.push(s.class_id);
        }
    }
    retrieve(&q, &qc, &g, &gc)
}

/// Embeds the dataset with `model` and scores retrieval over the unseen
/// classes of `split`.
pub fn evaluate_unseen(model: &Model, dataset: &Dataset, split: &SplitSpec, reverse: bool) -> Result<Metrics, RetrievalError> {
    let emb = model.embed_all(dataset)?;
    Metrics::from_run(&cross_modal_run(&emb, dataset, &split.unseen_classes, reverse)?)
}
