//! Built-in verification suite: gradient checks, mining and metric
//! oracles, memory invariants and loss identities.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use qml_core::dataspace::{pairwise_sq_distances, DistanceMatrix, Modality};
use qml_core::losses::{
    build_objective, inter_modal_quadruplet, intra_modal_quadruplet, metric_terms, mine_pairs, triplet_term,
    BatchLabels, ClassifierNodes, LossConfig, LossVariant, MarginNodes, MarginPair, MinedPair, PairSet,
};
use qml_core::meta_margin::{
    episode_graph, least_used, memory_read, memory_write, reset_memory, update_usage, write_weights, ControllerParams,
    EpisodeInput, MetaConfig, Similarity,
};
use qml_core::numerics::{grad_check, Array, Bindings, GradCheckConfig, GradFault, Graph, OpKind};
use qml_core::retrieval::{mean_average_precision, precision_at_k, retrieve};
use qml_core::SeedRng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest observed error of the check's own measure.
    pub max_error: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:<4} max_err={:<10.3e} {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_error,
            self.detail
        )
    }
}

fn normal(rng: &mut SeedRng) -> f64 {
    rng.sample(StandardNormal)
}

/// `classes x k` samples per modality in random order.
fn random_labels(rng: &mut SeedRng, classes: usize, k: usize) -> BatchLabels {
    let mut items = Vec::new();
    for c in 0..classes {
        for m in Modality::BOTH {
            for _ in 0..k {
                items.push((c, m));
            }
        }
    }
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    BatchLabels::new(items.iter().map(|x| x.0).collect(), items.iter().map(|x| x.1).collect())
}

fn fault_for(op: Option<OpKind>) -> Option<GradFault> {
    op.map(|kind| GradFault { kind, factor: 1.5 })
}

fn fault_note(op: Option<OpKind>) -> String {
    op.map_or(String::new(), |k| format!(" [gradient of `{k}` perturbed]"))
}

/// Finite-difference check of the full objective (normalization, chosen
/// metric loss, classifier, margins) for `instances` random batches per
/// variant.
pub fn loss_gradients(variant: LossVariant, instances: usize, seed: u64, perturb: Option<OpKind>) -> CheckResult {
    let mut rng = SeedRng::seed_from_u64(seed);
    let cfg = GradCheckConfig::default();
    let (mut worst, mut checked, mut skipped, mut failures) = (0.0f64, 0usize, 0usize, 0usize);
    let mut worst_at = String::new();
    for _ in 0..instances {
        let classes = rng.random_range(2..=3);
        let labels = random_labels(&mut rng, classes, 2);
        let n = labels.len();
        let d = rng.random_range(3..=4);
        let loss = LossConfig {
            variant,
            lambda: rng.random_range(0.1..0.9),
            use_cls: true,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let x = g.leaf("x", &[n, d]).unwrap();
        b.insert("x".into(), Array::new(vec![n, d], (0..n * d).map(|_| normal(&mut rng)).collect()).unwrap());
        let e = g.l2_normalize(x).unwrap();
        let w = g.leaf("cls.w", &[d, classes]).unwrap();
        let bias = g.leaf("cls.b", &[1, classes]).unwrap();
        b.insert(
            "cls.w".into(),
            Array::new(vec![d, classes], (0..d * classes).map(|_| normal(&mut rng)).collect()).unwrap(),
        );
        b.insert(
            "cls.b".into(),
            Array::new(vec![1, classes], (0..classes).map(|_| 0.1 * normal(&mut rng)).collect()).unwrap(),
        );
        let mi = g.leaf("m.inter", &[]).unwrap();
        let ma = g.leaf("m.intra", &[]).unwrap();
        b.insert("m.inter".into(), Array::scalar(rng.random_range(0.5..1.5)));
        b.insert("m.intra".into(), Array::scalar(rng.random_range(0.5..1.5)));
        let cls = ClassifierNodes {
            weight: w,
            bias,
            labels: &labels.class_ids,
        };
        let nodes = build_objective(&mut g, e, &labels, Some(&cls), MarginNodes { inter: mi, intra: ma }, &loss)
            .expect("valid random batch");
        g.set_fault(fault_for(perturb));
        let r = grad_check(&g, nodes.total, &b, &cfg).expect("finite forward");
        checked += r.checked;
        skipped += r.skipped.len();
        if !r.passed {
            failures += 1;
        }
        if r.max_rel_error > worst {
            worst = r.max_rel_error;
            worst_at = r.worst.map_or(String::new(), |e| format!(" worst at {}[{}]", e.leaf, e.index));
        }
    }
    CheckResult {
        name: format!("grad/{}", variant.name()),
        passed: failures == 0,
        max_error: worst,
        detail: format!(
            "{instances} instances, {checked} entries checked, {skipped} skipped at kinks, {failures} failing{worst_at}{}",
            fault_note(perturb)
        ),
    }
}

/// Finite-difference check of the margins produced by short episodes
/// with respect to every controller tensor.
pub fn episode_gradients(instances: usize, seed: u64, perturb: Option<OpKind>) -> CheckResult {
    let mut rng = SeedRng::seed_from_u64(seed);
    let gc = GradCheckConfig::default();
    let (mut worst, mut checked, mut skipped, mut failures) = (0.0f64, 0usize, 0usize, 0usize);
    for i in 0..instances {
        let width = rng.random_range(3..=4);
        let heads = if i % 4 == 3 { 2 } else { 1 };
        let cfg = MetaConfig {
            slots: rng.random_range(4..=8),
            key_width: width,
            hidden: width,
            n_heads: heads,
            gamma: if i % 2 == 0 { 1.0 } else { 0.9 },
            similarity: if i % 5 == 4 { Similarity::Dot } else { Similarity::Cosine },
            ..MetaConfig::default()
        };
        let p = 2;
        let d = 3;
        let len = rng.random_range(1..=5);
        let feats: Vec<Vec<f64>> = (0..len).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..p)).collect();
        let ep = EpisodeInput::new(&feats, &labels, p).unwrap();
        let mut params = ControllerParams::init(&cfg, d + p, &mut rng).unwrap();
        // wider weights so the gates leave their linear regime
        for t in params.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= 2.0);
        }
        params.alpha_raw = normal(&mut rng);
        let memory = reset_memory(cfg.slots, cfg.key_width, cfg.n_heads).unwrap();
        let mut eg = episode_graph(&params, &cfg, memory, &ep).expect("episode builds");
        let coef = eg
            .graph
            .constant(Array::matrix(1, 2, vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]).unwrap());
        let weighted = eg.graph.mul(eg.nodes.margins, coef).unwrap();
        let root = eg.graph.sum(weighted).unwrap();
        eg.graph.set_fault(fault_for(perturb));
        let r = grad_check(&eg.graph, root, &eg.bindings, &gc).expect("finite forward");
        checked += r.checked;
        skipped += r.skipped.len();
        if !r.passed {
            failures += 1;
        }
        worst = worst.max(r.max_rel_error);
    }
    CheckResult {
        name: "grad/run_episode".into(),
        passed: failures == 0,
        max_error: worst,
        detail: format!(
            "{instances} episodes, {checked} entries checked, {skipped} skipped at kinks, {failures} failing{}",
            fault_note(perturb)
        ),
    }
}

/// Triplet `hinge(|a-p|^2 - |a-n|^2 + m)` gradients against the closed
/// form `2(n-p)`, `2(p-a)`, `2(a-n)` on active instances.
pub fn triplet_closed_form(instances: usize, seed: u64, perturb: Option<OpKind>) -> CheckResult {
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut active = 0;
    for _ in 0..instances {
        let d = rng.random_range(2..=6);
        let v = |rng: &mut SeedRng| (0..d).map(|_| normal(rng)).collect::<Vec<f64>>();
        let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let m = rng.random_range(0.0..3.0);
        let mut g = Graph::new();
        let (la, lp, ln) = (
            g.leaf("a", &[d]).unwrap(),
            g.leaf("p", &[d]).unwrap(),
            g.leaf("n", &[d]).unwrap(),
        );
        let dp = g.sq_dist(la, lp).unwrap();
        let dn = g.sq_dist(la, ln).unwrap();
        let diff = g.sub(dp, dn).unwrap();
        let arg = g.shift(diff, m).unwrap();
        let root = g.hinge(arg).unwrap();
        g.set_fault(fault_for(perturb));
        let mut b = Bindings::new();
        b.insert("a".into(), Array::vector(a.clone()).unwrap());
        b.insert("p".into(), Array::vector(p.clone()).unwrap());
        b.insert("n".into(), Array::vector(n.clone()).unwrap());
        let out = g.backward(root, &b).unwrap();
        let on = out.value > 0.0;
        active += usize::from(on);
        let s = if on { 2.0 } else { 0.0 };
        for i in 0..d {
            let expect = [
                ("a", s * (n[i] - p[i])),
                ("p", s * (p[i] - a[i])),
                ("n", s * (a[i] - n[i])),
            ];
            for (leaf, e) in expect {
                worst = worst.max((out.grads[leaf].data()[i] - e).abs());
            }
        }
    }
    CheckResult {
        name: "grad/triplet_closed_form".into(),
        passed: worst <= 1e-12,
        max_error: worst,
        detail: format!("{instances} instances, {active} active{}", fault_note(perturb)),
    }
}

/// Exhaustive reference: the extreme value first, then the lowest
/// (anchor, partner) pair attaining it.
fn brute_force(d: &DistanceMatrix, labels: &BatchLabels, set: PairSet, positive: bool) -> Option<MinedPair> {
    let n = labels.len();
    let in_set = |a: usize, p: usize| {
        a != p
            && (labels.class_ids[a] == labels.class_ids[p]) == positive
            && match set {
                PairSet::Modal(x, y) => labels.modalities[a] == x && labels.modalities[p] == y,
                PairSet::AnyModality => true,
            }
    };
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |p| (a, p))).filter(|&(a, p)| in_set(a, p)).collect();
    let values = pairs.iter().map(|&(a, p)| d.get(a, p));
    let target = if positive {
        values.fold(f64::NEG_INFINITY, f64::max)
    } else {
        values.fold(f64::INFINITY, f64::min)
    };
    pairs.iter().find(|&&(a, p)| d.get(a, p) == target).map(|&(a, p)| MinedPair {
        value: target,
        anchor: a,
        partner: p,
    })
}

/// Mining against the exhaustive scan on random batches with 2-8 classes
/// and up to 64 samples. Every third batch uses coarse coordinates to
/// force ties.
pub fn mining_oracle(batches: usize, seed: u64) -> CheckResult {
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut compared = 0;
    for i in 0..batches {
        let classes = rng.random_range(2..=8);
        let n = rng.random_range((2 * classes).max(4)..=64);
        let mut class_ids: Vec<usize> = (0..n).map(|j| if j < classes { j } else { rng.random_range(0..classes) }).collect();
        let mut modalities: Vec<Modality> = (0..n)
            .map(|j| match j {
                0 => Modality::Sketch,
                1 => Modality::Photo,
                _ => Modality::BOTH[rng.random_range(0..2)],
            })
            .collect();
        for j in (1..n).rev() {
            let k = rng.random_range(0..=j);
            class_ids.swap(j, k);
            modalities.swap(j, k);
        }
        let labels = BatchLabels::new(class_ids, modalities);
        let dim = rng.random_range(2..=5);
        let coarse = i % 3 == 0;
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let x = normal(&mut rng);
                        if coarse {
                            x.round()
                        } else {
                            x
                        }
                    })
                    .collect()
            })
            .collect();
        let d = pairwise_sq_distances(&feats);
        let mined = mine_pairs(&d, &labels).expect("both modalities and >= 2 classes");
        let mut sets: Vec<PairSet> = Vec::new();
        for a in Modality::BOTH {
            for b in Modality::BOTH {
                sets.push(PairSet::Modal(a, b));
            }
        }
        sets.push(PairSet::AnyModality);
        for set in sets {
            for positive in [true, false] {
                compared += 1;
                let got = if positive { mined.positive(set).ok() } else { mined.negative(set).ok() };
                if got != brute_force(&d, &labels, set, positive) {
                    mismatches += 1;
                }
            }
        }
    }
    CheckResult {
        name: "oracle/mining".into(),
        passed: mismatches == 0,
        max_error: mismatches as f64,
        detail: format!("{batches} batches, {compared} extremes compared, {mismatches} mismatches"),
    }
}

/// Steps the memory with random keys and checks the addressing
/// invariants after every step, plus the least-used worked example.
pub fn memory_invariants(steps: usize, seed: u64) -> CheckResult {
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut worst_sum = 0.0f64;
    let mut violations = Vec::new();
    let example = least_used(&[3.0, 1.0, 2.0, 5.0], 2);
    if example != [0.0, 1.0, 1.0, 0.0] {
        violations.push(format!("least_used example gave {example:?}"));
    }
    let mut done = 0;
    while done < steps {
        let heads = rng.random_range(1..=2);
        let slots = rng.random_range(heads + 1..=8);
        let width = rng.random_range(2..=5);
        let gamma = if rng.random_bool(0.5) { 1.0 } else { 0.95 };
        let sim = if rng.random_bool(0.8) { Similarity::Cosine } else { Similarity::Dot };
        let alpha = normal(&mut rng);
        let mut st = reset_memory(slots, width, heads).unwrap();
        let len = rng.random_range(1..=20).min(steps - done);
        for _ in 0..len {
            let keys: Vec<Vec<f64>> = (0..heads).map(|_| (0..width).map(|_| normal(&mut rng)).collect()).collect();
            let reads: Vec<Vec<f64>> = keys
                .iter()
                .map(|k| memory_read(&st, k, sim).expect("nonzero key").weights)
                .collect();
            let writes = write_weights(&st, alpha);
            let before_usage = st.usage.clone();
            for (w, k) in writes.iter().zip(&keys) {
                memory_write(&mut st, w, k);
            }
            update_usage(&mut st, &reads, &writes, gamma);
            st.read = reads;
            st.least_used = least_used(&st.usage, heads);
            st.t += 1;

            for r in &st.read {
                let s: f64 = r.iter().sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
                if r.iter().any(|&x| x < 0.0) {
                    violations.push("negative read weight".into());
                }
            }
            let ones = st.least_used.iter().filter(|&&x| x == 1.0).count();
            let zeros = st.least_used.iter().filter(|&&x| x == 0.0).count();
            if ones != heads || ones + zeros != slots {
                violations.push(format!("least-used has {ones} ones, expected {heads}"));
            }
            if st.usage.iter().any(|&u| u < 0.0) {
                violations.push("negative usage".into());
            }
            if gamma == 1.0 && st.usage.iter().zip(&before_usage).any(|(a, b)| a < b) {
                violations.push("usage decreased with gamma = 1".into());
            }
            done += 1;
        }
    }
    if worst_sum > 1e-10 {
        violations.push(format!("read weights sum off by {worst_sum:e}"));
    }
    violations.dedup();
    CheckResult {
        name: "memory/invariants".into(),
        passed: violations.is_empty(),
        max_error: worst_sum,
        detail: if violations.is_empty() {
            format!("{steps} steps")
        } else {
            format!("{steps} steps; {}", violations.join("; "))
        },
    }
}

/// Definitional AP: for every relevant rank `r` within the cutoff,
/// recount relevant items in the top `r`.
fn brute_ap(relevant: &[bool], cutoff: usize) -> f64 {
    let ranks: Vec<usize> = (1..=relevant.len().min(cutoff)).filter(|&r| relevant[r - 1]).collect();
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| relevant[..r].iter().filter(|&&x| x).count() as f64 / r as f64)
        .sum::<f64>()
        / ranks.len() as f64
}

/// Metrics against definitional recomputation on random runs.
pub fn metric_oracle(runs: usize, seed: u64) -> CheckResult {
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut rank_mismatch = 0;
    for _ in 0..runs {
        let classes = rng.random_range(2..=5);
        let g = rng.random_range(classes..=40);
        let q = rng.random_range(1..=20);
        let dim = rng.random_range(2..=4);
        let coarse = rng.random_bool(0.3);
        let pt = |rng: &mut SeedRng| -> Vec<f64> {
            (0..dim)
                .map(|_| {
                    let x = normal(rng);
                    if coarse {
                        x.round()
                    } else {
                        x
                    }
                })
                .collect()
        };
        let gallery: Vec<Vec<f64>> = (0..g).map(|_| pt(&mut rng)).collect();
        let gc: Vec<usize> = (0..g).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
        let queries: Vec<Vec<f64>> = (0..q).map(|_| pt(&mut rng)).collect();
        let qc: Vec<usize> = (0..q).map(|_| rng.random_range(0..classes)).collect();
        let run = retrieve(&queries, &qc, &gallery, &gc).unwrap();

        let mut ref_rel = Vec::new();
        for (qi, qv) in queries.iter().enumerate() {
            let mut keyed: Vec<(f64, usize)> = gallery
                .iter()
                .enumerate()
                .map(|(i, gv)| (qv.iter().zip(gv).map(|(a, b)| (a - b).powi(2)).sum(), i))
                .collect();
            keyed.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
            let order: Vec<usize> = keyed.iter().map(|x| x.1).collect();
            if order != run.rankings[qi] {
                rank_mismatch += 1;
            }
            ref_rel.push(order.iter().map(|&i| gc[i] == qc[qi]).collect::<Vec<bool>>());
        }
        let mean = |f: &dyn Fn(&[bool]) -> f64| ref_rel.iter().map(|r| f(r)).sum::<f64>() / q as f64;
        for cutoff in [None, Some(5), Some(g)] {
            let c = cutoff.unwrap_or(usize::MAX);
            let want = mean(&|r| brute_ap(r, c));
            worst = worst.max((mean_average_precision(&run, cutoff).unwrap() - want).abs());
        }
        for k in [1, 3, 10, 100] {
            let kk = k.min(g);
            let want = mean(&|r| r[..kk].iter().filter(|&&x| x).count() as f64 / kk as f64);
            worst = worst.max((precision_at_k(&run, k).unwrap() - want).abs());
        }
    }
    CheckResult {
        name: "oracle/retrieval_metrics".into(),
        passed: worst <= 1e-12 && rank_mismatch == 0,
        max_error: worst,
        detail: format!("{runs} runs, {rank_mismatch} ranking mismatches"),
    }
}

/// Exact loss identities on random batches.
pub fn structural_identities(instances: usize, seed: u64) -> CheckResult {
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let classes = rng.random_range(2..=4);
        let per = rng.random_range(2..=3);
        let labels = random_labels(&mut rng, classes, per);
        let dim = rng.random_range(2..=5);
        let feats: Vec<Vec<f64>> = (0..labels.len()).map(|_| (0..dim).map(|_| normal(&mut rng)).collect()).collect();
        let d = pairwise_sq_distances(&feats);
        let m = mine_pairs(&d, &labels).unwrap();
        let margins = MarginPair {
            inter: rng.random_range(0.0..2.0),
            intra: rng.random_range(0.0..2.0),
        };
        let lambda = rng.random_range(0.0..1.0);

        // SinQua is RaQua without its intra terms.
        let ra = metric_terms(&m, LossVariant::RaQua, margins, lambda).unwrap();
        let sin = metric_terms(&m, LossVariant::SinQua, margins, lambda).unwrap();
        let intra: f64 = Modality::BOTH
            .iter()
            .map(|&j| intra_modal_quadruplet(&m, j, j.other(), margins.intra, lambda).unwrap())
            .sum();
        worst = worst.max((sin.total() - (ra.total() - intra)).abs());

        // lambda = 1 leaves only the cross-modal negative.
        for j in Modality::BOTH {
            let q = inter_modal_quadruplet(&m, j, j.other(), margins.inter, 1.0).unwrap();
            let t = triplet_term(&m, PairSet::Modal(j, j.other()), margins.inter).unwrap();
            worst = worst.max((q - t).abs());
        }

        // Distances are symmetric, so the mirrored triplet equals ComTri.
        let com = metric_terms(&m, LossVariant::ComTri, margins, lambda).unwrap().total();
        let bid = metric_terms(&m, LossVariant::BidTri, margins, lambda).unwrap().total();
        worst = worst.max((bid - 2.0 * com).abs());
    }
    CheckResult {
        name: "identity/loss_variants".into(),
        passed: worst <= 1e-12,
        max_error: worst,
        detail: format!("{instances} batches: SinQua, lambda=1, BidTri=2xComTri"),
    }
}

/// The default suite run by `qml verify`.
pub fn run_suite(perturb: Option<OpKind>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (i, v) in LossVariant::ALL.into_iter().enumerate() {
        out.push(loss_gradients(v, 20, 100 + i as u64, perturb));
    }
    out.push(episode_gradients(20, 200, perturb));
    out.push(triplet_closed_form(50, 300, perturb));
    out.push(mining_oracle(50, 400));
    out.push(memory_invariants(300, 500));
    out.push(structural_identities(50, 600));
    out.push(metric_oracle(20, 700));
    out
}
