//! Two-modality samples: synthetic generation, CSV ingestion, zero-shot
//! class splits, PK batch sampling and distances.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SeedRng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} features, found {found}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("class {class} has {available} {modality} samples, need {needed}")]
    InsufficientSamples {
        class: usize,
        modality: Modality,
        needed: usize,
        available: usize,
    },
    #[error("sample {id} has a zero-norm feature vector")]
    ZeroNorm { id: u64 },
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Sketch,
    Photo,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Sketch, Modality::Photo];

    /// Short code used in feature files.
    pub fn code(self) -> &'static str {
        match self {
            Modality::Sketch => "ske",
            Modality::Photo => "pho",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "ske" => Some(Modality::Sketch),
            "pho" => Some(Modality::Photo),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Sketch => Modality::Photo,
            Modality::Photo => Modality::Sketch,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Sketch => "sketch",
            Modality::Photo => "photo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub modality: Modality,
    pub class_id: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    /// Validates unique ids, finite features and a common dimension.
    pub fn new(samples: Vec<Sample>) -> Result<Self, DataError> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut ids = HashSet::with_capacity(samples.len());
        let mut classes = BTreeSet::new();
        for s in &samples {
            if !ids.insert(s.id) {
                return Err(DataError::Invalid(format!("duplicate sample id {}", s.id)));
            }
            if s.features.len() != dim {
                return Err(DataError::Invalid(format!(
                    "sample {} has dimension {}, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("sample {} has non-finite features", s.id)));
            }
            classes.insert(s.class_id);
        }
        Ok(Self {
            samples,
            num_classes: classes.len(),
            dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of distinct class ids.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// Dataset positions grouped by `(class, modality)`, in dataset order.
    pub fn index_by_class_modality(&self) -> BTreeMap<(usize, Modality), Vec<usize>> {
        let mut map: BTreeMap<(usize, Modality), Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry((s.class_id, s.modality)).or_default().push(i);
        }
        map
    }

    /// Feature CSV: `id,modality,class,f0,...,f{d-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,modality,class");
        for k in 0..self.dim {
            out.push_str(&format!(",f{k}"));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{},{}", s.id, s.modality.code(), s.class_id));
            for v in &s.features {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_csv()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class_per_modality: usize,
    /// Standard deviation of the class centers.
    pub center_scale: f64,
    /// Within-class noise standard deviation.
    pub intra_std: f64,
    /// Length of the global offset added to every sketch.
    pub modality_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            dim: 16,
            samples_per_class_per_modality: 20,
            center_scale: 1.0,
            intra_std: 0.35,
            modality_offset: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.num_classes == 0 || self.samples_per_class_per_modality == 0 {
            return bad("num_classes and samples_per_class_per_modality must be positive");
        }
        if !(self.center_scale.is_finite() && self.center_scale > 0.0) {
            return bad("center_scale must be > 0");
        }
        // Zero noise and zero offset are accepted as degenerate limits.
        if !(self.intra_std.is_finite() && self.intra_std >= 0.0) {
            return bad("intra_std must be >= 0");
        }
        if !(self.modality_offset.is_finite() && self.modality_offset >= 0.0) {
            return bad("modality_offset must be >= 0");
        }
        Ok(())
    }
}

fn gaussian(rng: &mut SeedRng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Class centers ~ N(0, center_scale² I); photos = center + N(0, intra_std² I);
/// sketches additionally shifted by one global offset of length
/// `modality_offset`. Ids are assigned sequentially, per class sketches
/// first.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = SeedRng::seed_from_u64(config.seed);
    let d = config.dim;

    let direction = loop {
        let v = gaussian(&mut rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let offset: Vec<f64> = direction.iter().map(|x| x * config.modality_offset).collect();
    let centers: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| gaussian(&mut rng, d, config.center_scale))
        .collect();

    let mut samples = Vec::with_capacity(config.num_classes * config.samples_per_class_per_modality * 2);
    let mut next_id = 0u64;
    for (class_id, center) in centers.iter().enumerate() {
        for modality in Modality::BOTH {
            for _ in 0..config.samples_per_class_per_modality {
                let noise = gaussian(&mut rng, d, config.intra_std);
                let features = center
                    .iter()
                    .zip(&noise)
                    .zip(&offset)
                    .map(|((c, e), o)| match modality {
                        Modality::Sketch => c + e + o,
                        Modality::Photo => c + e,
                    })
                    .collect();
                samples.push(Sample {
                    id: next_id,
                    modality,
                    class_id,
                    features,
                });
                next_id += 1;
            }
        }
    }
    Dataset::new(samples)
}

/// Parses a feature CSV (see [`Dataset::to_csv`]).
pub fn parse_features(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "modality" || cols[2] != "class" {
        return Err(DataError::Parse {
            line: 1,
            message: "header must start with `id,modality,class`".into(),
        });
    }
    for (k, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{k}") {
            return Err(DataError::Parse {
                line: 1,
                message: format!("expected column `f{k}`, found `{c}`"),
            });
        }
    }
    let dim = cols.len() - 3;

    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(DataError::Parse {
                line,
                message: "expected at least id, modality and class".into(),
            });
        }
        let perr = |message: String| DataError::Parse { line, message };
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| perr(format!("invalid id `{}`", fields[0])))?;
        let modality = Modality::from_code(fields[1])
            .ok_or_else(|| perr(format!("invalid modality `{}` (want ske|pho)", fields[1])))?;
        let class_id: usize = fields[2]
            .parse()
            .map_err(|_| perr(format!("invalid class `{}`", fields[2])))?;
        let found = fields.len() - 3;
        if found != dim {
            return Err(DataError::Dimension {
                line,
                expected: dim,
                found,
            });
        }
        let mut features = Vec::with_capacity(dim);
        for f in &fields[3..] {
            let v: f64 = f.parse().map_err(|_| perr(format!("invalid feature `{f}`")))?;
            if !v.is_finite() {
                return Err(perr(format!("non-finite feature `{f}`")));
            }
            features.push(v);
        }
        if !ids.insert(id) {
            return Err(perr(format!("duplicate id {id}")));
        }
        samples.push(Sample {
            id,
            modality,
            class_id,
            features,
        });
    }
    Dataset::new(samples)
}

pub fn load_features(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_features(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: BTreeSet<usize>,
    pub unseen_classes: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn new(seen: BTreeSet<usize>, unseen: BTreeSet<usize>) -> Result<Self, DataError> {
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(DataError::Split(format!("class {c} is both seen and unseen")));
        }
        Ok(Self {
            seen_classes: seen,
            unseen_classes: unseen,
        })
    }

    /// Dense index of a seen class in `0..seen_classes.len()`.
    pub fn seen_index(&self, class: usize) -> Option<usize> {
        self.seen_classes.iter().position(|&c| c == class)
    }
}

/// Randomly marks `round(num_classes * unseen_fraction)` classes as unseen.
pub fn zero_shot_split(
    dataset: &Dataset,
    unseen_fraction: f64,
    seed: u64,
) -> Result<SplitSpec, DataError> {
    if !(unseen_fraction > 0.0 && unseen_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "unseen_fraction must lie in (0, 1), got {unseen_fraction}"
        )));
    }
    let mut classes: Vec<usize> = dataset.classes().into_iter().collect();
    let n = classes.len();
    let n_unseen = (n as f64 * unseen_fraction).round() as usize;
    if n_unseen == 0 || n_unseen >= n {
        return Err(DataError::Split(format!(
            "{n} classes with fraction {unseen_fraction} leaves an empty side"
        )));
    }
    let mut rng = SeedRng::seed_from_u64(seed);
    classes.shuffle(&mut rng);
    let unseen = classes[..n_unseen].iter().copied().collect();
    let seen = classes[n_unseen..].iter().copied().collect();
    SplitSpec::new(seen, unseen)
}

/// A PK-sampled batch: `P` classes, `K` sketches and `K` photos each,
/// in shuffled order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Position of each batch member in the source dataset.
    pub indices: Vec<usize>,
    pub samples: Vec<Sample>,
    /// The `P` sampled classes in draw order.
    pub classes: Vec<usize>,
}

impl Batch {
    /// Builds a batch directly from samples (no sampling constraints).
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let mut classes = Vec::new();
        for s in &samples {
            if !classes.contains(&s.class_id) {
                classes.push(s.class_id);
            }
        }
        Self {
            indices: (0..samples.len()).collect(),
            samples,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.samples.iter().map(|s| s.modality).collect()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.features.clone()).collect()
    }

    /// Position of each member's class within [`Batch::classes`].
    pub fn episode_labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| self.classes.iter().position(|&c| c == s.class_id).unwrap())
            .collect()
    }
}

/// Reusable PK sampler over the seen classes of a split.
#[derive(Debug, Clone)]
pub struct PkSampler {
    p: usize,
    k: usize,
    seen: Vec<usize>,
    pools: BTreeMap<(usize, Modality), Vec<usize>>,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, split: &SplitSpec, p: usize, k: usize) -> Result<Self, DataError> {
        if p == 0 || k == 0 {
            return Err(DataError::Config("P and K must be positive".into()));
        }
        let seen: Vec<usize> = split.seen_classes.iter().copied().collect();
        if p > seen.len() {
            return Err(DataError::Config(format!(
                "P = {p} exceeds the {} seen classes",
                seen.len()
            )));
        }
        let pools = dataset.index_by_class_modality();
        for &class in &seen {
            for modality in Modality::BOTH {
                let available = pools.get(&(class, modality)).map_or(0, Vec::len);
                if available < k {
                    return Err(DataError::InsufficientSamples {
                        class,
                        modality,
                        needed: k,
                        available,
                    });
                }
            }
        }
        Ok(Self { p, k, seen, pools })
    }

    pub fn batch_size(&self) -> usize {
        2 * self.p * self.k
    }

    pub fn sample(&self, dataset: &Dataset, rng: &mut SeedRng) -> Batch {
        let chosen: Vec<usize> = index::sample(rng, self.seen.len(), self.p)
            .into_iter()
            .map(|i| self.seen[i])
            .collect();
        let mut indices = Vec::with_capacity(self.batch_size());
        for &class in &chosen {
            for modality in Modality::BOTH {
                let pool = &self.pools[&(class, modality)];
                indices.extend(index::sample(rng, pool.len(), self.k).into_iter().map(|i| pool[i]));
            }
        }
        indices.shuffle(rng);
        Batch {
            samples: indices.iter().map(|&i| dataset.samples()[i].clone()).collect(),
            indices,
            classes: chosen,
        }
    }
}

pub fn pk_sample(
    dataset: &Dataset,
    split: &SplitSpec,
    p: usize,
    k: usize,
    rng: &mut SeedRng,
) -> Result<Batch, DataError> {
    Ok(PkSampler::new(dataset, split, p, k)?.sample(dataset, rng))
}

pub fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

pub fn l2_normalize_batch(batch: &Batch) -> Result<Batch, DataError> {
    let mut out = batch.clone();
    for s in &mut out.samples {
        s.features = l2_normalize(&s.features).ok_or(DataError::ZeroNorm { id: s.id })?;
    }
    Ok(out)
}

/// Symmetric matrix of squared Euclidean distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_data(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn pairwise_sq_distances(features: &[Vec<f64>]) -> DistanceMatrix {
    let n = features.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    DistanceMatrix { n, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn synthetic_counts() {
        let ds = generate_synthetic(&cfg()).unwrap();
        assert_eq!(ds.len(), 200);
        let sketches = ds.samples().iter().filter(|s| s.modality == Modality::Sketch).count();
        assert_eq!(sketches, 100);
        assert_eq!(ds.num_classes(), 5);
        assert_eq!(ds.dim(), 16);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&cfg()).unwrap();
        let b = generate_synthetic(&cfg()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn degenerate_limit_coincides() {
        let c = SynthConfig {
            intra_std: 0.0,
            modality_offset: 0.0,
            ..cfg()
        };
        let ds = generate_synthetic(&c).unwrap();
        let n = c.samples_per_class_per_modality;
        // class 0: sketches at 0..n, photos at n..2n
        assert_eq!(ds.samples()[0].features, ds.samples()[n].features);
    }

    #[test]
    fn rejects_small_dim() {
        let c = SynthConfig { dim: 1, ..cfg() };
        assert!(matches!(generate_synthetic(&c), Err(DataError::Config(_))));
    }

    #[test]
    fn parse_three_rows() {
        let text = "id,modality,class,f0,f1\n0,ske,1,0.5,0.25\n1,pho,1,1,2\n2,pho,0,-1,3e-2\n";
        let ds = parse_features(text).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.samples()[0].modality, Modality::Sketch);
        assert_eq!(ds.samples()[2].features, vec![-1.0, 0.03]);
    }

    #[test]
    fn dimension_error_names_line() {
        let text = "id,modality,class,f0,f1,f2,f3,f4\n0,ske,0,1,2,3,4,5\n1,pho,0,1,2,3,4\n";
        match parse_features(text) {
            Err(DataError::Dimension {
                line: 3,
                expected: 5,
                found: 4,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let text = "id,modality,class,f0\n0,ske,0,1\n1,sketch,0,2\n";
        match parse_features(text) {
            Err(DataError::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate_synthetic(&cfg()).unwrap();
        let back = parse_features(&ds.to_csv()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn split_counts() {
        let c = SynthConfig { num_classes: 10, ..cfg() };
        let ds = generate_synthetic(&c).unwrap();
        let s = zero_shot_split(&ds, 0.3, 7).unwrap();
        assert_eq!(s.unseen_classes.len(), 3);
        assert_eq!(s.seen_classes.len(), 7);
        assert!(s.seen_classes.is_disjoint(&s.unseen_classes));
    }

    #[test]
    fn split_empty_side_errors() {
        let c = SynthConfig { num_classes: 2, ..cfg() };
        let ds = generate_synthetic(&c).unwrap();
        assert!(zero_shot_split(&ds, 0.99, 0).is_err());
    }

    #[test]
    fn pk_batch_composition() {
        let c = SynthConfig { num_classes: 6, ..cfg() };
        let ds = generate_synthetic(&c).unwrap();
        let split = zero_shot_split(&ds, 0.3, 1).unwrap();
        let mut rng = SeedRng::seed_from_u64(3);
        let b = pk_sample(&ds, &split, 2, 3, &mut rng).unwrap();
        assert_eq!(b.len(), 12);
        for &class in &b.classes {
            assert!(split.seen_classes.contains(&class));
            for m in Modality::BOTH {
                let n = b.samples.iter().filter(|s| s.class_id == class && s.modality == m).count();
                assert_eq!(n, 3);
            }
        }
        let unique: HashSet<usize> = b.indices.iter().copied().collect();
        assert_eq!(unique.len(), 12);
    }

    #[test]
    fn pk_default_batch_size() {
        let c = SynthConfig {
            num_classes: 20,
            samples_per_class_per_modality: 4,
            ..cfg()
        };
        let ds = generate_synthetic(&c).unwrap();
        let split = zero_shot_split(&ds, 0.2, 0).unwrap();
        let sampler = PkSampler::new(&ds, &split, 16, 4).unwrap();
        assert_eq!(sampler.batch_size(), 128);
    }

    #[test]
    fn pk_insufficient_names_class() {
        let c = SynthConfig {
            samples_per_class_per_modality: 2,
            ..cfg()
        };
        let ds = generate_synthetic(&c).unwrap();
        let split = zero_shot_split(&ds, 0.4, 0).unwrap();
        let mut rng = SeedRng::seed_from_u64(0);
        let err = pk_sample(&ds, &split, 2, 3, &mut rng).unwrap_err();
        assert!(matches!(err, DataError::InsufficientSamples { needed: 3, available: 2, .. }));
    }

    #[test]
    fn normalize_batch() {
        let b = Batch::from_samples(vec![
            Sample {
                id: 0,
                modality: Modality::Sketch,
                class_id: 0,
                features: vec![3.0, 4.0],
            },
            Sample {
                id: 1,
                modality: Modality::Photo,
                class_id: 0,
                features: vec![0.0, 1.0],
            },
        ]);
        let n = l2_normalize_batch(&b).unwrap();
        assert_eq!(n.samples[0].features, vec![0.6, 0.8]);
        assert_eq!(n.samples[1].features, vec![0.0, 1.0]);
        let mut z = b.clone();
        z.samples[1].features = vec![0.0, 0.0];
        assert!(matches!(l2_normalize_batch(&z), Err(DataError::ZeroNorm { id: 1 })));
    }

    #[test]
    fn distance_examples() {
        let d = pairwise_sq_distances(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(d.get(0, 1), 2.0);
        assert_eq!(d.get(0, 2), 4.0);
        assert_eq!(d.get(0, 3), 0.0);
        assert_eq!(d.get(2, 2), 0.0);
    }
}
