use std::collections::BTreeMap;

use proptest::prelude::*;

use qml_core::dataspace::{pairwise_sq_distances, DistanceMatrix, Modality};
use qml_core::losses::{mine_pairs, relation_aware_quadruplet, triplet_variant, BatchLabels, LossVariant, MarginPair, PairSet};
use qml_core::meta_margin::least_used;
use qml_core::retrieval::{average_precision, retrieve, Metrics};

/// Batch where every class has at least one sketch and one photo.
fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<Modality>)> {
    (2usize..=4, 1usize..=3, 2usize..=4).prop_flat_map(|(classes, per, dim)| {
        let n = classes * per * 2;
        prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), n).prop_map(move |feats| {
            let mut c = Vec::new();
            let mut m = Vec::new();
            for class in 0..classes {
                for _ in 0..per {
                    c.extend([class, class]);
                    m.extend([Modality::Sketch, Modality::Photo]);
                }
            }
            (feats, c, m)
        })
    })
}

fn permute(d: &DistanceMatrix, perm: &[usize]) -> DistanceMatrix {
    let n = d.n();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = d.get(perm[i], perm[j]);
        }
    }
    DistanceMatrix::from_data(n, data)
}

const SETS: [PairSet; 5] = [
    PairSet::Modal(Modality::Sketch, Modality::Sketch),
    PairSet::Modal(Modality::Sketch, Modality::Photo),
    PairSet::Modal(Modality::Photo, Modality::Sketch),
    PairSet::Modal(Modality::Photo, Modality::Photo),
    PairSet::AnyModality,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mined_values_survive_batch_permutation((feats, classes, mods) in batch(), seed in any::<u64>()) {
        let d = pairwise_sq_distances(&feats);
        let n = classes.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pd = permute(&d, &perm);
        let pc: Vec<usize> = perm.iter().map(|&i| classes[i]).collect();
        let pm: Vec<Modality> = perm.iter().map(|&i| mods[i]).collect();
        let a = mine_pairs(&d, &BatchLabels::new(classes.clone(), mods.clone())).unwrap();
        let b = mine_pairs(&pd, &BatchLabels::new(pc, pm)).unwrap();
        for set in SETS {
            let (x, y) = (a.negative(set).unwrap(), b.negative(set).unwrap());
            prop_assert_eq!(x.value, y.value);
            let (x, y) = (a.positive(set).ok().map(|p| p.value), b.positive(set).ok().map(|p| p.value));
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn metric_losses_are_nonnegative((feats, classes, mods) in batch(), inter in 0.0f64..1.0, intra in 0.0f64..1.0, lambda in 0.0f64..=1.0) {
        let d = pairwise_sq_distances(&feats);
        let labels = BatchLabels::new(classes, mods);
        let margins = MarginPair { inter, intra };
        let has_intra = mine_pairs(&d, &labels).unwrap().positive(PairSet::Modal(Modality::Sketch, Modality::Sketch)).is_ok()
            && mine_pairs(&d, &labels).unwrap().positive(PairSet::Modal(Modality::Photo, Modality::Photo)).is_ok();
        if has_intra {
            prop_assert!(relation_aware_quadruplet(&d, &labels, margins, lambda).unwrap() >= 0.0);
        }
        for v in [LossVariant::ComTri, LossVariant::BidTri, LossVariant::AllTri, LossVariant::SinQua] {
            prop_assert!(triplet_variant(&d, &labels, v, margins, lambda).unwrap() >= 0.0);
        }
    }

    #[test]
    fn retrieval_metrics_invariant_under_isometry_and_relabel(
        q in prop::collection::vec(prop::collection::vec(-3i32..3, 3), 1..6),
        g in prop::collection::vec((prop::collection::vec(-3i32..3, 3), 0usize..3), 3..12),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
        flip in prop::collection::vec(any::<bool>(), 3),
    ) {
        // integer coordinates keep every distance exact after the isometry
        let gallery: Vec<Vec<f64>> = g.iter().map(|(v, _)| v.iter().map(|&x| x as f64).collect()).collect();
        let mut gc: Vec<usize> = g.iter().map(|(_, c)| *c).collect();
        gc[..3].copy_from_slice(&[0, 1, 2]);
        let queries: Vec<Vec<f64>> = q.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let qc: Vec<usize> = (0..queries.len()).map(|i| i % 3).collect();
        let base = Metrics::from_run(&retrieve(&queries, &qc, &gallery, &gc).unwrap()).unwrap();

        let shift: Vec<f64> = shift.iter().map(|s| s.round()).collect();
        let iso = |v: &Vec<f64>| -> Vec<f64> {
            // coordinate rotation, reflection, then translation
            (0..3).map(|i| {
                let x = v[(i + 1) % 3];
                (if flip[i] { -x } else { x }) + shift[i]
            }).collect()
        };
        let moved = Metrics::from_run(&retrieve(
            &queries.iter().map(iso).collect::<Vec<_>>(), &qc,
            &gallery.iter().map(iso).collect::<Vec<_>>(), &gc,
        ).unwrap()).unwrap();
        prop_assert_eq!(base, moved);

        let relabel: BTreeMap<usize, usize> = [(0, 17), (1, 4), (2, 9)].into();
        let relabeled = Metrics::from_run(&retrieve(
            &queries, &qc.iter().map(|c| relabel[c]).collect::<Vec<_>>(),
            &gallery, &gc.iter().map(|c| relabel[c]).collect::<Vec<_>>(),
        ).unwrap()).unwrap();
        prop_assert_eq!(base, relabeled);

        for m in [base.map_all, base.map_at_200, base.prec_at_100, base.prec_at_200] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn average_precision_bounds(rel in prop::collection::vec(any::<bool>(), 1..40), cutoff in 1usize..50) {
        let ap = average_precision(&rel, Some(cutoff));
        prop_assert!((0.0..=1.0).contains(&ap));
        if rel.iter().all(|&r| r) {
            prop_assert_eq!(average_precision(&rel, None), 1.0);
        }
    }

    #[test]
    fn least_used_marks_exactly_n(usage in prop::collection::vec(0.0f64..5.0, 1..20), n in 1usize..20) {
        let n = n.min(usage.len());
        let w = least_used(&usage, n);
        prop_assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), n);
        prop_assert!(w.iter().all(|&x| x == 0.0 || x == 1.0));
        let marked_max = usage.iter().zip(&w).filter(|(_, &x)| x == 1.0).map(|(u, _)| *u).fold(f64::MIN, f64::max);
        let unmarked_min = usage.iter().zip(&w).filter(|(_, &x)| x == 0.0).map(|(u, _)| *u).fold(f64::MAX, f64::min);
        prop_assert!(marked_max <= unmarked_min);
    }
}
