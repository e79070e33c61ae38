use std::collections::BTreeMap;

use qml_core::dataspace::{generate_synthetic, zero_shot_split, Dataset, SplitSpec, SynthConfig};
use qml_core::losses::LossVariant;
use qml_core::numerics::Array;
use qml_core::retrieval::evaluate_unseen;
use qml_core::trainer::{
    adam_step, decode_checkpoint, distance_stats, encode_checkpoint, load_checkpoint, save_checkpoint, train,
    AdamConfig, AdamState, CheckpointError, Model, TrainConfig, Trainer,
};
use qml_core::SeedRng;
use rand::SeedableRng;

fn data() -> (Dataset, SplitSpec) {
    let d = generate_synthetic(&SynthConfig::default()).unwrap();
    let s = zero_shot_split(&d, 0.4, 0).unwrap();
    (d, s)
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batches_per_epoch: 5,
        p: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (d, s) = data();
    for meta in [false, true] {
        let mut cfg = config();
        cfg.loss.use_meta_margin = meta;
        cfg.meta.slots = 8;
        let full = train(&d, &s, &cfg).unwrap();

        let mut t = Trainer::new(&d, &s, &cfg).unwrap();
        t.run_to(2).unwrap();
        let bytes = encode_checkpoint(t.checkpoint()).unwrap();
        drop(t);
        let mut resumed = Trainer::from_checkpoint(&d, decode_checkpoint(&bytes).unwrap()).unwrap();
        resumed.run().unwrap();
        assert_eq!(
            encode_checkpoint(&resumed.into_checkpoint()).unwrap(),
            encode_checkpoint(&full).unwrap(),
            "meta = {meta}"
        );
    }
}

#[test]
fn adam_two_steps_match_hand_computation() {
    let cfg = AdamConfig {
        learning_rate: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut params = BTreeMap::from([("w".to_string(), Array::vector(vec![1.0, -2.0]).unwrap())]);
    let mut state = AdamState::default();
    let g1 = [0.5, -1.0];
    let g2 = [-0.25, 3.0];
    let mut expect = [1.0, -2.0];
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    for (t, g) in [g1, g2].into_iter().enumerate() {
        let grads = BTreeMap::from([("w".to_string(), Array::vector(g.to_vec()).unwrap())]);
        adam_step(&mut params, &grads, &mut state, &cfg);
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            expect[i] -= 0.1 * (mh / (vh.sqrt() + 1e-8) + 0.01 * expect[i]);
        }
    }
    assert_eq!(state.step, 2);
    for (a, b) in params["w"].data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn training_pulls_modalities_together() {
    let cfg = SynthConfig {
        modality_offset: 3.0,
        ..SynthConfig::default()
    };
    let d = generate_synthetic(&cfg).unwrap();
    let s = zero_shot_split(&d, 0.4, 0).unwrap();
    let tc = TrainConfig {
        epochs: 20,
        p: 3,
        ..TrainConfig::default()
    };
    let classes: Vec<usize> = d.samples().iter().map(|x| x.class_id).collect();
    let mods: Vec<_> = d.samples().iter().map(|x| x.modality).collect();
    let mut rng = SeedRng::seed_from_u64(tc.seed);
    let init = Model::init(&d, &s, &tc, &mut rng).unwrap();
    let before = distance_stats(&init.embed_all(&d).unwrap(), &classes, &mods);
    let ck = train(&d, &s, &tc).unwrap();
    let after = distance_stats(&ck.model.embed_all(&d).unwrap(), &classes, &mods);
    let ratio = |s: &qml_core::trainer::DistanceStats| s.cross_modal_same_class / s.inter_class;
    assert!(ratio(&after) < ratio(&before), "{before:?} -> {after:?}");
}

#[test]
fn every_variant_trains_and_evaluates() {
    let (d, s) = data();
    for v in LossVariant::ALL {
        let mut cfg = config();
        cfg.loss.variant = v;
        let ck = train(&d, &s, &cfg).unwrap();
        let m = evaluate_unseen(&ck.model, &d, &s, false).unwrap();
        assert!(m.map_all > 0.0 && m.map_all <= 1.0, "{v:?}");
        assert_eq!(ck.history.len(), cfg.epochs * cfg.batches_per_epoch);
    }
}

#[test]
fn checkpoint_file_round_trip_and_version_check() {
    let (d, s) = data();
    let ck = train(&d, &s, &TrainConfig { epochs: 1, ..config() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.qml");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);

    let mut bytes = encode_checkpoint(&ck).unwrap();
    bytes[8] = 9;
    assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Version { found: 9, .. })));
    bytes[0] = b'X';
    assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Magic)));
}
