use catnerf::checkpoint::{Checkpoint, MAGIC};
use catnerf::kv::KeyValues;
use catnerf::losses::LossVariant;
use catnerf::model::Model;
use catnerf::synthdata::{Dataset, SceneSpec};
use catnerf::train::*;
use catnerf::txformer::FusionVariant;
use numgrad::{Gradients, Tensor, TensorMap};

fn micro_data() -> Dataset {
    let spec =
        SceneSpec { parts: 2, frames: 2, width: 8, height: 8, colors: vec![[0.8, 0.3, 0.2], [0.2, 0.4, 0.8]], ..SceneSpec::default() };
    Dataset::generate(&spec).unwrap()
}

fn micro_cfg(steps: u64) -> TrainConfig {
    TrainConfig { preset: "micro".into(), rays: 16, points: 8, steps: Some(steps), lr0: 5e-3, ..TrainConfig::default() }
}

#[test]
fn schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 5e-4);
    assert!((lr_at(1000, &cfg) - 5e-5).abs() < 1e-18);
    assert!((lr_at(500, &cfg) - 1.5811e-4).abs() < 1e-8);
    for e in 0..2000 {
        assert!(lr_at(e + 1, &cfg) < lr_at(e, &cfg));
    }
}

#[test]
fn config_round_trips_through_key_values() {
    let mut cfg = micro_cfg(17);
    cfg.loss = LossVariant::Kld;
    cfg.fusion = FusionVariant::AvgT2;
    cfg.unique_width = Some(0);
    cfg.body_fraction = 0.25;
    cfg.model_overrides.set("model.width", 12);
    let mut kv = KeyValues::new();
    cfg.write_kv(&mut kv);
    let back = TrainConfig::from_kv(&KeyValues::parse(&kv.render()).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.model_config(2, 2).unwrap().width, 12);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { rays: 0, ..TrainConfig::default() },
        TrainConfig { points: 0, ..TrainConfig::default() },
        TrainConfig { lr0: 0.0, ..TrainConfig::default() },
        TrainConfig { body_fraction: 1.5, ..TrainConfig::default() },
    ] {
        assert_eq!(bad.validate().unwrap_err().kind(), "invalid");
    }
    let kv = KeyValues::parse("loss = l2\n").unwrap();
    assert!(TrainConfig::from_kv(&kv).is_err());
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut params = TensorMap::new();
    params.insert("w".into(), Tensor::vector(vec![0.5, -1.0]).with_grad());
    let before = params.clone();
    let mut adam = Adam::default();
    let mut grads = Gradients::new();
    grads.insert("w".into(), Tensor::vector(vec![0.0, 0.0]));
    for _ in 0..5 {
        adam.update(&mut params, &grads, 1e-2).unwrap();
    }
    assert_eq!(params, before);
    adam.update(&mut params, &Gradients::new(), 1e-2).unwrap();
    assert_eq!(params, before);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut params = TensorMap::new();
    params.insert("w".into(), Tensor::vector(vec![1.0, 1.0]).with_grad());
    params.insert("frozen".into(), Tensor::vector(vec![3.0]));
    let mut grads = Gradients::new();
    grads.insert("w".into(), Tensor::vector(vec![2.0, -0.5]));
    grads.insert("frozen".into(), Tensor::vector(vec![1.0]));
    Adam::default().update(&mut params, &grads, 0.1).unwrap();
    let w = params["w"].data();
    assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] - 1.1).abs() < 1e-8);
    assert_eq!(params["frozen"].data(), &[3.0]);
}

#[test]
fn zero_steps_leave_the_initialization() {
    let ds = micro_data();
    let cfg = micro_cfg(0);
    let ckpt = train_novel_view(&ds, cfg.clone(), None, None).unwrap();
    let init = Model::init(cfg.model_config(2, 2).unwrap(), cfg.seed).unwrap();
    assert_eq!(ckpt.state.model, init);
    assert_eq!(ckpt.state.step, 0);
}

#[test]
fn same_seed_runs_are_identical() {
    let ds = micro_data();
    let a = train_novel_view(&ds, micro_cfg(15), None, None).unwrap();
    let b = train_novel_view(&ds, micro_cfg(15), None, None).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = train_novel_view(&ds, TrainConfig { seed: 1, ..micro_cfg(15) }, None, None).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let ds = micro_data();
    let whole = train_novel_view(&ds, micro_cfg(20), None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(&ds, micro_cfg(20)).unwrap();
    first.run_until(8, None, None).unwrap();
    first.checkpoint().save(&path).unwrap();
    let mut second = Trainer::resume(&ds, Checkpoint::load(&path).unwrap()).unwrap();
    second.run_until(20, None, None).unwrap();
    assert_eq!(second.checkpoint().to_bytes(), whole.to_bytes());
}

#[test]
fn checkpoints_round_trip_byte_exactly() {
    let ds = micro_data();
    let ckpt = train_novel_view(&ds, micro_cfg(5), None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ctx = ds.context(1);
    let cam = &ds.cameras[2];
    assert_eq!(loaded.model().render_image(&ctx, cam, 1, 8).unwrap(), ckpt.model().render_image(&ctx, cam, 1, 8).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ds = micro_data();
    let bytes = train_novel_view(&ds, micro_cfg(1), None, None).unwrap().to_bytes();
    let path = std::path::Path::new("x.ckpt");
    let kind = |b: &[u8]| Checkpoint::from_bytes(b, path).unwrap_err().kind();

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"NOPE");
    assert_eq!(kind(&magic), "format");
    assert_eq!(&bytes[..4], MAGIC);

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert_eq!(kind(&version), "version");

    assert_eq!(kind(&bytes[..bytes.len() - 3]), "format");
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(kind(&long), "format");

    // a config echo that declares a different width no longer matches the directory
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("model.width = 8").unwrap();
    let mut shape = bytes.clone();
    shape[at + 14] = b'9';
    assert_eq!(kind(&shape), "format");

    let err = Checkpoint::load(std::path::Path::new("/nonexistent/c.ckpt")).unwrap_err();
    assert_eq!(err.kind(), "io");
    assert!(err.to_string().contains("/nonexistent/c.ckpt"));
}

#[test]
fn micro_run_lowers_the_logged_loss() {
    let ds = micro_data();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.ckpt");
    train_novel_view(&ds, micro_cfg(200), Some(&out), None).unwrap();
    let log = read_log(&out.with_extension("csv")).unwrap();
    assert_eq!(log.len(), 200);
    assert_eq!(log.first().unwrap().0, 0);
    let tail: f64 = log[180..].iter().map(|r| r.1[0]).sum::<f64>() / 20.0;
    assert!(tail < log[0].1[0], "{} -> {tail}", log[0].1[0]);
    for (_, v) in &log {
        assert!((v[3] - (v[0] + v[1] + v[2])).abs() < 1e-9);
    }
}

#[test]
fn periodic_checkpoints_are_written() {
    let ds = micro_data();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("keep.ckpt");
    let cfg = TrainConfig { keep_every: 4, ..micro_cfg(6) };
    let mut t = Trainer::new(&ds, cfg).unwrap();
    t.run_until(5, None, Some(&out)).unwrap();
    assert_eq!(Checkpoint::load(&out).unwrap().state.step, 4);
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_good_state() {
    let ds = micro_data();
    let mut t = Trainer::new(&ds, micro_cfg(10)).unwrap();
    t.run_until(2, None, None).unwrap();
    let name = t.state.model.params.keys().find(|k| k.starts_with("radiance")).unwrap().clone();
    t.state.model.params.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let before = t.state.clone();
    let err = t.step_once().unwrap_err();
    assert_eq!(err.kind(), "diverged");
    assert_eq!(t.state.step, before.step);
    assert_eq!(t.state.adam, before.adam);
}

#[test]
fn epochs_cover_the_training_pixels() {
    let ds = micro_data();
    let cfg = TrainConfig { steps: None, epochs: 3, ..micro_cfg(0) };
    // 2 views × 2 frames × 64 pixels at 16 rays a step
    assert_eq!(cfg.steps_per_epoch(ds.train_pixels()), 16);
    assert_eq!(cfg.total_steps(ds.train_pixels()), 48);
}
