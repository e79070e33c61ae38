//! Experiment commands behind the `qml` binary.

pub mod config;
pub mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use qml_core::dataspace::{Dataset, Modality, SplitSpec};
use qml_core::losses::LossVariant;
use qml_core::retrieval::{cross_modal_run, Metrics};
use qml_core::trainer::{history_csv, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer};

pub use config::{DataSource, ExperimentConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.qml";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_COPY_FILE: &str = "config.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Loaded config plus its original text (or the serialized default).
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
    /// Directory relative feature paths resolve against.
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn from_path(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let (config, text) = ExperimentConfig::load(p)?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok(Self { config, text, base })
            }
            None => Ok(Self::from_config(ExperimentConfig::default())),
        }
    }

    pub fn from_config(config: ExperimentConfig) -> Self {
        let text = config.to_json();
        Self {
            config,
            text,
            base: PathBuf::new(),
        }
    }
}

// ---- generate --------------------------------------------------------------

/// Writes the configured synthetic dataset as CSV.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let DataSource::Synthetic(synth) = &config.data else {
        bail!("generate needs a synthetic data source");
    };
    synth.validate()?;
    let ds = qml_core::dataspace::generate_synthetic(synth)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.write_csv(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(ds)
}

// ---- train -----------------------------------------------------------------

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Metrics,
}

/// Histogram of cross-modal squared distances between unseen-class
/// embeddings, split by whether the pair shares a class.
pub fn distance_histogram(embeddings: &[Vec<f64>], dataset: &Dataset, split: &SplitSpec, bins: usize) -> String {
    let max = 4.0;
    let mut same = vec![0usize; bins];
    let mut diff = vec![0usize; bins];
    let samples = dataset.samples();
    for (i, a) in samples.iter().enumerate() {
        if a.modality != Modality::Sketch || !split.unseen_classes.contains(&a.class_id) {
            continue;
        }
        for (j, b) in samples.iter().enumerate() {
            if b.modality != Modality::Photo || !split.unseen_classes.contains(&b.class_id) {
                continue;
            }
            let d: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            let bin = ((d / max * bins as f64) as usize).min(bins - 1);
            if a.class_id == b.class_id {
                same[bin] += 1;
            } else {
                diff[bin] += 1;
            }
        }
    }
    let mut s = String::from("bin_lo,bin_hi,same_class,different_class\n");
    for b in 0..bins {
        let lo = max * b as f64 / bins as f64;
        let hi = max * (b + 1) as f64 / bins as f64;
        let _ = writeln!(s, "{lo},{hi},{},{}", same[b], diff[b]);
    }
    s
}

fn metrics_for(checkpoint: &Checkpoint, dataset: &Dataset, reverse: bool) -> Result<(Metrics, Vec<Vec<f64>>)> {
    let emb = checkpoint.model.embed_all(dataset)?;
    let run = cross_modal_run(&emb, dataset, &checkpoint.split.unseen_classes, reverse)?;
    Ok((Metrics::from_run(&run)?, emb))
}

/// Trains, evaluates on the unseen classes and, when `out` is given,
/// writes checkpoint, history, metrics, distance histogram and the config.
pub fn cmd_train(loaded: &LoadedConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let config = &loaded.config;
    config.validate()?;
    let dataset = config.dataset(&loaded.base)?;
    let split = config.split(&dataset)?;
    let mut trainer = Trainer::new(&dataset, &split, &config.train)?;
    trainer.run()?;
    let checkpoint = trainer.into_checkpoint();
    let (metrics, emb) = metrics_for(&checkpoint, &dataset, config.eval.reverse)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &checkpoint)?;
        fs::write(dir.join(HISTORY_FILE), history_csv(&checkpoint.history))?;
        fs::write(dir.join(METRICS_FILE), metrics.to_json())?;
        fs::write(dir.join(DISTANCES_FILE), distance_histogram(&emb, &dataset, &split, 40))?;
        fs::write(dir.join(CONFIG_COPY_FILE), &loaded.text)?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), config.to_json())?;
    }
    Ok(TrainOutcome { checkpoint, metrics })
}

// ---- evaluate --------------------------------------------------------------

/// Scores a saved checkpoint on the unseen classes of its own split.
pub fn cmd_evaluate(loaded: &LoadedConfig, checkpoint: &Path, reverse: bool, out: Option<&Path>) -> Result<Metrics> {
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = loaded.config.dataset(&loaded.base)?;
    // rebuilding the trainer checks the checkpoint against the dataset
    Trainer::from_checkpoint(&dataset, ck.clone())?;
    let (metrics, _) = metrics_for(&ck, &dataset, reverse)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), metrics.to_json())?;
    }
    Ok(metrics)
}

// ---- ablation --------------------------------------------------------------

/// One ablation arm: a loss variant, optionally with learned margins or
/// without the classification term. Written `raqua`, `bidtri+meta`,
/// `comtri-cls`, ...
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arm {
    pub label: String,
    pub variant: LossVariant,
    pub meta: bool,
    pub cls: bool,
}

impl FromStr for Arm {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let label = s.trim().to_ascii_lowercase();
        let mut rest = label.as_str();
        let (mut meta, mut cls) = (false, true);
        loop {
            if let Some(r) = rest.strip_suffix("+meta") {
                meta = true;
                rest = r;
            } else if let Some(r) = rest.strip_suffix("-cls") {
                cls = false;
                rest = r;
            } else {
                break;
            }
        }
        let variant = LossVariant::parse(rest).with_context(|| format!("unknown loss variant `{rest}`"))?;
        Ok(Self {
            label,
            variant,
            meta,
            cls,
        })
    }
}

impl Arm {
    pub fn apply(&self, train: &mut TrainConfig) {
        train.loss.variant = self.variant;
        train.loss.use_meta_margin = self.meta;
        train.loss.use_cls = self.cls;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub arm: String,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub cells: Vec<CellResult>,
    /// Per arm, in input order.
    pub medians: Vec<(String, Metrics)>,
}

impl AblationSummary {
    pub fn median_of(&self, arm: &str) -> Option<&Metrics> {
        self.medians.iter().find(|(a, _)| a == arm).map(|(_, m)| m)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,seed,map_all,map_at_200,prec_at_100,prec_at_200\n");
        let mut row = |arm: &str, seed: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{arm},{seed},{},{},{},{}",
                m.map_all, m.map_at_200, m.prec_at_100, m.prec_at_200
            );
        };
        for c in &self.cells {
            row(&c.arm, &c.seed.to_string(), &c.metrics);
        }
        for (arm, m) in &self.medians {
            row(arm, "median", m);
        }
        s
    }
}

/// Trains every (arm, seed) cell, up to `jobs` at a time. Each finished
/// cell writes its own metrics and history under `out/cells/` at once.
pub fn cmd_ablation(
    loaded: &LoadedConfig,
    arms: &[Arm],
    seeds: &[u64],
    jobs: usize,
    out: Option<&Path>,
) -> Result<AblationSummary> {
    if arms.len() < 2 {
        bail!("ablation needs at least 2 variants, got {}", arms.len());
    }
    if seeds.len() < 3 {
        bail!("ablation needs at least 3 seeds, got {}", seeds.len());
    }
    loaded.config.validate()?;
    let cells: Vec<(&Arm, u64)> = arms.iter().flat_map(|a| seeds.iter().map(move |&s| (a, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;
    let results: Vec<Result<CellResult>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(arm, seed)| {
                let mut cfg = loaded.config.clone().with_seed(seed);
                arm.apply(&mut cfg.train);
                let cell = LoadedConfig {
                    text: cfg.to_json(),
                    config: cfg,
                    base: loaded.base.clone(),
                };
                let dir = out.map(|o| o.join("cells").join(format!("{}_seed{seed}", arm.label)));
                let outcome = cmd_train(&cell, dir.as_deref()).with_context(|| format!("cell {} seed {seed}", arm.label))?;
                log::info!("cell {} seed {seed}: map_all {:.4}", arm.label, outcome.metrics.map_all);
                Ok(CellResult {
                    arm: arm.label.clone(),
                    seed,
                    metrics: outcome.metrics,
                })
            })
            .collect()
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let medians = arms
        .iter()
        .map(|a| {
            let of = |f: fn(&Metrics) -> f64| {
                median(&cells.iter().filter(|c| c.arm == a.label).map(|c| f(&c.metrics)).collect::<Vec<_>>())
            };
            (
                a.label.clone(),
                Metrics {
                    map_all: of(|m| m.map_all),
                    map_at_200: of(|m| m.map_at_200),
                    prec_at_100: of(|m| m.prec_at_100),
                    prec_at_200: of(|m| m.prec_at_200),
                },
            )
        })
        .collect();
    let summary = AblationSummary { cells, medians };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SUMMARY_FILE), summary.to_csv())?;
        fs::write(dir.join(CONFIG_COPY_FILE), &loaded.text)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_parsing() {
        let a: Arm = "RaQua+meta".parse().unwrap();
        assert_eq!((a.variant, a.meta, a.cls), (LossVariant::RaQua, true, true));
        let a: Arm = "bidtri-cls".parse().unwrap();
        assert_eq!((a.variant, a.meta, a.cls), (LossVariant::BidTri, false, false));
        let a: Arm = "sin_qua-cls+meta".parse().unwrap();
        assert_eq!((a.variant, a.meta, a.cls), (LossVariant::SinQua, true, false));
        assert!("pentuplet".parse::<Arm>().is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
