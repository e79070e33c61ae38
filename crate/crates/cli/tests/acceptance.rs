//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use qml::config::ExperimentConfig;
use qml::verify::{self, CheckResult};
use qml::{cmd_ablation, cmd_train, Arm, LoadedConfig, HISTORY_FILE, METRICS_FILE, SUMMARY_FILE};
use qml_core::losses::LossVariant;

type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: &[CheckResult]) -> Outcome {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| format!("{}={}({:.1e})", c.name, if c.passed { "ok" } else { "FAIL" }, c.max_error))
        .collect::<Vec<_>>()
        .join(" ");
    Outcome { passed, detail }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut checks: Vec<CheckResult> = LossVariant::ALL
        .into_iter()
        .enumerate()
        .map(|(i, v)| verify::loss_gradients(v, 100, 1_000 + i as u64, None))
        .collect();
    checks.push(verify::episode_gradients(100, 2_000, None));
    checks.push(verify::triplet_closed_form(200, 3_000, None));
    let elapsed = start.elapsed();
    let mut o = from_checks(&checks);
    o.passed &= elapsed < Duration::from_secs(60);
    o.detail = format!("{:.2}s; {}", elapsed.as_secs_f64(), o.detail);
    o
}

fn seeds() -> Vec<u64> {
    (0..5).collect()
}

fn convergence() -> Outcome {
    let mut good = 0;
    let mut slowest = Duration::ZERO;
    let mut maps = Vec::new();
    for seed in seeds() {
        let loaded = LoadedConfig::from_config(ExperimentConfig::default().with_seed(seed));
        let start = Instant::now();
        match cmd_train(&loaded, None) {
            Ok(o) => {
                slowest = slowest.max(start.elapsed());
                good += usize::from(o.metrics.map_all >= 0.90);
                maps.push(format!("{:.3}", o.metrics.map_all));
            }
            Err(e) => {
                return Outcome {
                    passed: false,
                    detail: format!("seed {seed}: {e:#}"),
                }
            }
        }
    }
    Outcome {
        passed: good >= 4 && slowest < Duration::from_secs(120),
        detail: format!(
            "{good}/5 seeds with mAP@all >= 0.90 [{}], slowest run {:.2}s",
            maps.join(", "),
            slowest.as_secs_f64()
        ),
    }
}

/// Criteria 6 and 7 share one ablation over the harder preset.
fn ablation() -> (Outcome, Outcome) {
    let arms: Vec<Arm> = ["raqua", "bidtri", "comtri", "raqua-cls", "raqua+meta"]
        .iter()
        .map(|a| a.parse().unwrap())
        .collect();
    let loaded = LoadedConfig::from_config(ExperimentConfig::ablation_preset());
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let summary = match cmd_ablation(&loaded, &arms, &seeds(), jobs, None) {
        Ok(s) => s,
        Err(e) => {
            let f = || Outcome {
                passed: false,
                detail: format!("{e:#}"),
            };
            return (f(), f());
        }
    };
    let med = |a: &str| summary.median_of(a).unwrap().map_all;
    let (ra, bid, com, alone, meta) = (med("raqua"), med("bidtri"), med("comtri"), med("raqua-cls"), med("raqua+meta"));
    let order = Outcome {
        passed: ra >= bid && bid >= com && ra >= alone,
        detail: format!(
            "median mAP@all raqua {ra:.4} ({}) bidtri {bid:.4} ({}) comtri {com:.4}; cls+raqua {ra:.4} ({}) raqua alone {alone:.4}",
            if ra >= bid { ">=" } else { "<" },
            if bid >= com { ">=" } else { "<" },
            if ra >= alone { ">=" } else { "<" },
        ),
    };

    // margins from every logged batch of every meta cell
    let mut min_margin = f64::INFINITY;
    let mut margin_err = None;
    for seed in seeds() {
        let mut cfg = ExperimentConfig::ablation_preset().with_seed(seed);
        arms[4].apply(&mut cfg.train);
        match cmd_train(&LoadedConfig::from_config(cfg), None) {
            Ok(o) => {
                for row in &o.checkpoint.history {
                    min_margin = min_margin.min(row.margins.inter).min(row.margins.intra);
                }
            }
            Err(e) => margin_err = Some(format!("{e:#}")),
        }
    }
    let meta_out = match margin_err {
        Some(e) => Outcome {
            passed: false,
            detail: e,
        },
        None => Outcome {
            passed: meta >= ra - 0.02 && min_margin >= 0.0,
            detail: format!(
                "median mAP@all meta {meta:.4} vs fixed {ra:.4} (diff {:+.4}); min emitted margin {min_margin:.4}",
                meta - ra
            ),
        },
    };
    (order, meta_out)
}

fn qml(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qml"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("qml {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool, String> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok(read(a)? == read(b)?)
}

fn determinism() -> Outcome {
    let run = || -> Result<(Vec<String>, usize), String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = tmp.path();
        let mut preset = ExperimentConfig::ablation_preset();
        preset.train.epochs = 3;
        preset.train.meta.slots = 8;
        let cfg = root.join("config.json");
        std::fs::write(&cfg, preset.to_json()).map_err(|e| e.to_string())?;
        let cfg = cfg.to_str().unwrap();
        let mut differing = Vec::new();
        for rep in ["a", "b"] {
            let dir = root.join(rep);
            let d = |s: &str| dir.join(s).to_str().unwrap().to_owned();
            qml(&["train", "--config", cfg, "--seed", "3", "--out", &d("train")])?;
            qml(&["evaluate", "--config", cfg, "--seed", "3", "--out", &d("train"), "--reverse"])?;
            qml(&[
                "ablation", "--config", cfg, "--variants", "raqua,comtri,raqua+meta", "--seeds", "0,1,2", "--jobs", "3",
                "--out", &d("ablation"),
            ])?;
            qml(&["generate", "--config", cfg, "--seed", "3", "--out", &d("features.csv")])?;
        }
        let mut files = vec![
            format!("train/{HISTORY_FILE}"),
            format!("train/{METRICS_FILE}"),
            format!("train/checkpoint.qml"),
            format!("ablation/{SUMMARY_FILE}"),
            "features.csv".to_owned(),
        ];
        for arm in ["raqua", "comtri", "raqua+meta"] {
            for s in 0..3 {
                files.push(format!("ablation/cells/{arm}_seed{s}/{HISTORY_FILE}"));
                files.push(format!("ablation/cells/{arm}_seed{s}/{METRICS_FILE}"));
            }
        }
        for f in &files {
            if !same_bytes(&root.join("a").join(f), &root.join("b").join(f))? {
                differing.push(f.clone());
            }
        }
        Ok((differing, files.len()))
    };
    match run() {
        Ok((diff, compared)) => Outcome {
            passed: diff.is_empty(),
            detail: if diff.is_empty() {
                format!("generate/train/evaluate/ablation rerun: {compared} files byte-identical")
            } else {
                format!("differing: {}", diff.join(", "))
            },
        },
        Err(e) => Outcome {
            passed: false,
            detail: e,
        },
    }
}

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        ("1 gradient correctness", Box::new(gradients)),
        ("2 mining oracle", Box::new(|| from_checks(&[verify::mining_oracle(200, 4_000)]))),
        ("3 memory invariants", Box::new(|| from_checks(&[verify::memory_invariants(1_000, 5_000)]))),
        ("4 structural identities", Box::new(|| from_checks(&[verify::structural_identities(200, 6_000)]))),
        ("5 synthetic convergence", Box::new(convergence)),
    ];
    let mut all = true;
    let mut report = |name: &str, o: Outcome, t: Duration| {
        all &= o.passed;
        println!(
            "{} criterion {name} [{:.2}s]: {}",
            if o.passed { "PASS" } else { "FAIL" },
            t.as_secs_f64(),
            o.detail
        );
    };
    for (name, f) in criteria {
        let t = Instant::now();
        let o = f();
        report(name, o, t.elapsed());
    }
    let t = Instant::now();
    let (order, meta) = ablation();
    let el = t.elapsed();
    report("6 ablation ordering", order, el);
    report("7 meta-margin direction", meta, el);
    let t = Instant::now();
    report("8 determinism", determinism(), t.elapsed());
    let t = Instant::now();
    report("9 metric oracles", from_checks(&[verify::metric_oracle(50, 9_000)]), t.elapsed());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
