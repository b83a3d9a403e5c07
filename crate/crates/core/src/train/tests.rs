use super::*;
use crate::data::{build_windows, synth_generate, DatasetSpec, SynthKind, SynthSpec};
use crate::model::{Mode, ModelConfig};

fn windows(n: usize, seed: u64) -> Vec<Window> {
    let tracks = synth_generate(&SynthSpec {
        kind: SynthKind::PiecewiseGoal { every: 3 },
        n,
        len: 6,
        seed,
        noise: 0.02,
    });
    let spec = DatasetSpec {
        obs_len: 3,
        pred_len: 3,
        fps: 1.0,
        ..DatasetSpec::default()
    };
    build_windows(&tracks, &spec, 0).unwrap()
}

fn tiny_model(seed: u64) -> Sgnet<f32> {
    Sgnet::new(ModelConfig { input_dim: 6, ..ModelConfig::tiny() }, seed).unwrap()
}

fn cfg(batch: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        epochs,
        shard_size: 4,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn tree_reduction_order() {
    let items: Vec<String> = (0..5).map(|i| i.to_string()).collect();
    let s = tree_reduce(items, |a, b| format!("({}+{})", a, b)).unwrap();
    assert_eq!(s, "(((0+1)+(2+3))+4)");
    assert!(tree_reduce(Vec::<String>::new(), |a, _| a).is_none());
}

#[test]
fn batch_loss_is_mean_of_sample_losses() {
    let w = windows(10, 1);
    let t = Trainer::new(tiny_model(1), cfg(10, 1)).unwrap();
    let refs: Vec<&Window> = w.iter().collect();
    let batch = t.batch_loss(&refs, 1).unwrap();
    let mean = w.iter().map(|x| t.batch_loss(&[x], 1).unwrap()).sum::<f64>() / w.len() as f64;
    assert!((batch - mean).abs() < 1e-6, "{} vs {}", batch, mean);
}

#[test]
fn shard_size_only_changes_rounding() {
    let w = windows(12, 2);
    let refs: Vec<&Window> = w.iter().collect();
    let run = |shard| {
        let mut t = Trainer::new(tiny_model(2), TrainConfig { shard_size: shard, ..cfg(12, 1) }).unwrap();
        t.train_step(&refs).unwrap();
        t.model().params().clone()
    };
    let (a, b) = (run(1), run(12));
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let w = windows(40, 3);
    let trace = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut t = Trainer::new(tiny_model(3), cfg(16, 2)).unwrap();
            t.fit(&w, &[], |_, _| Ok(())).unwrap().steps
        })
    };
    assert_eq!(trace(1), trace(3));
}

#[test]
fn single_step_smoke_decreases_loss() {
    let mut improved = 0;
    for seed in 0..20 {
        let w = windows(8, 100 + seed);
        let refs: Vec<&Window> = w.iter().collect();
        let mut t = Trainer::new(tiny_model(seed), TrainConfig { seed, ..cfg(8, 1) }).unwrap();
        let before = t.batch_loss(&refs, 1).unwrap();
        let rec = t.train_step(&refs).unwrap();
        assert_eq!(rec.loss, before);
        if t.batch_loss(&refs, 1).unwrap() < before {
            improved += 1;
        }
    }
    assert!(improved >= 19, "{} of 20 trials improved", improved);
}

#[test]
fn kld_is_non_negative_during_training() {
    let w = windows(24, 4);
    let mut t = Trainer::new(tiny_model(4), cfg(8, 3)).unwrap();
    let out = t.fit(&w, &[], |_, _| Ok(())).unwrap();
    assert_eq!(out.steps.len(), 9);
    assert!(out.steps.iter().all(|s| s.kld.unwrap() >= 0.0));
    let det = Sgnet::new(
        ModelConfig {
            input_dim: 6,
            mode: Mode::Deterministic,
            ..ModelConfig::tiny()
        },
        4,
    )
    .unwrap();
    let mut t = Trainer::new(det, cfg(8, 1)).unwrap();
    assert!(t.fit(&w, &[], |_, _| Ok(())).unwrap().steps.iter().all(|s| s.kld.is_none()));
}

#[test]
fn identical_seeds_give_identical_traces() {
    let w = windows(100, 5);
    let run = || {
        let mut t = Trainer::new(tiny_model(5), cfg(4, 2)).unwrap();
        t.fit(&w, &w[..10], |_, _| Ok(())).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.steps.len() >= 50);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.epochs.len(), 2);
    assert_eq!(
        a.epochs.iter().map(|e| e.val_loss).collect::<Vec<_>>(),
        b.epochs.iter().map(|e| e.val_loss).collect::<Vec<_>>()
    );
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let w = windows(30, 6);
    let val = &w[..6];
    let mut full = Trainer::new(tiny_model(6), cfg(8, 3)).unwrap();
    let mut saved = None;
    let whole = full
        .fit(&w, val, |rec, t| {
            if rec.epoch == 1 {
                saved = Some(t.checkpoint().to_bytes());
            }
            Ok(())
        })
        .unwrap();
    let ckpt = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    assert_eq!(ckpt.epoch, 1);
    let mut resumed = Trainer::resume(&ckpt, TrainConfig { seed: 0, ..cfg(8, 3) }).unwrap();
    let rest = resumed.fit(&w, val, |_, _| Ok(())).unwrap();
    let per_epoch = whole.steps.len() / 3;
    assert_eq!(rest.steps, whole.steps[per_epoch..]);
    assert_eq!(rest.epochs[1].val_loss, whole.epochs[2].val_loss);
    assert_eq!(resumed.model().params(), full.model().params());
}

#[test]
fn checkpoint_reload_forward_is_bitwise() {
    let w = windows(6, 7);
    let mut t = Trainer::new(tiny_model(7), cfg(6, 1)).unwrap();
    t.fit(&w, &[], |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.checkpoint().save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let opts = EvalOptions::default();
    assert_eq!(
        predict_windows(t.model(), &w, &opts).unwrap(),
        predict_windows(&back, &w, &opts).unwrap()
    );
}

#[test]
fn non_finite_input_aborts_with_dump() {
    let mut w = windows(4, 8);
    w[2].obs[1][0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("bad.txt");
    let mut t = Trainer::new(
        tiny_model(8),
        TrainConfig {
            dump_path: Some(dump.clone()),
            ..cfg(4, 1)
        },
    )
    .unwrap();
    let before = t.model().params().clone();
    let err = t.fit(&w, &[], |_, _| Ok(())).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("window ids")), "{}", err);
    assert!(std::fs::read_to_string(&dump).unwrap().contains("NaN"));
    assert_eq!(t.model().params(), &before);
}

#[test]
fn config_keys_round_trip() {
    let mut c = TrainConfig::default();
    assert!(c.set("batch_size", "7").unwrap());
    assert!(c.set("k", "3").unwrap());
    assert!(c.set("decode_last_only", "true").unwrap());
    assert!(!c.set("unknown", "1").unwrap());
    assert!(matches!(c.set("lr", "fast"), Err(Error::Config(m)) if m.contains("train.lr")));
    let mut d = TrainConfig::default();
    for (k, v) in c.to_pairs() {
        assert!(d.set(k.strip_prefix("train.").unwrap(), &v).unwrap());
    }
    assert_eq!(c, d);
    assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..c }.validate().is_err());
}
