use catnerf::experiments::*;
use catnerf::image::Image8;
use catnerf::losses::{mse, LossVariant};
use catnerf::model::Anchor;
use catnerf::synthdata::{Dataset, SceneSpec, Split};
use catnerf::train::{train_novel_view, TrainConfig};
use catnerf::txformer::{FusionVariant, PSI_C, PSI_U};
use numgrad::Tensor;

fn data(novel: usize) -> Dataset {
    let spec = SceneSpec {
        parts: 2,
        frames: 2,
        novel_frames: novel,
        width: 12,
        height: 12,
        colors: vec![[0.8, 0.3, 0.2], [0.2, 0.4, 0.8]],
        ..SceneSpec::default()
    };
    Dataset::generate(&spec).unwrap()
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig { preset: "micro".into(), rays: 16, points: 8, steps: Some(steps), lr0: 5e-3, ..TrainConfig::default() }
}

#[test]
fn ground_truth_scores_perfectly() {
    let ds = data(0);
    let gt = ds.image(2, 1).to_float();
    assert_eq!(score(&gt, &gt).unwrap(), (99.0, Some(1.0)));
    let tiny = Image8 { width: 4, height: 4, data: vec![7; 48] }.to_float();
    assert_eq!(score(&tiny, &tiny).unwrap(), (99.0, None));
}

#[test]
fn evaluation_covers_every_test_pair() {
    let ds = data(0);
    let ckpt = train_novel_view(&ds, cfg(0), None, None).unwrap();
    let table = evaluate(ckpt.model(), &ds, Split::Test, 8).unwrap();
    assert_eq!(table.rows.len(), ds.test_views.len() * ds.train_frames.len());
    assert_eq!(table.to_csv().lines().count(), 1 + table.rows.len());
    assert!(table.to_string().contains("mean"));
    assert!(table.mean_psnr().unwrap().is_finite());
}

#[test]
fn trained_model_beats_its_initialization() {
    let ds = data(0);
    let init = train_novel_view(&ds, cfg(0), None, None).unwrap();
    let trained = train_novel_view(&ds, cfg(300), None, None).unwrap();
    let a = evaluate(init.model(), &ds, Split::Test, 8).unwrap().mean_psnr().unwrap();
    let b = evaluate(trained.model(), &ds, Split::Test, 8).unwrap().mean_psnr().unwrap();
    assert!(b > a, "{a} -> {b}");
}

#[test]
fn self_exchange_is_exact_and_ranges_are_checked() {
    let ds = data(0);
    let ckpt = train_novel_view(&ds, cfg(3), None, None).unwrap();
    let same = exchange_latents(ckpt.model(), &ds, 0, 1, 0, 8).unwrap();
    assert_eq!(same.mse, 0.0);
    assert_eq!(same.own, same.swapped);
    assert_eq!(exchange_latents(ckpt.model(), &ds, 0, 1, 1, 8).unwrap_err().kind(), "range");
    assert_eq!(exchange_latents(ckpt.model(), &ds, 0, 0, -1, 8).unwrap_err().kind(), "range");
    assert_eq!(exchange_latents(ckpt.model(), &ds, 9, 0, 1, 8).unwrap_err().kind(), "range");
}

#[test]
fn exchange_mse_matches_the_written_images() {
    let ds = data(0);
    let ckpt = train_novel_view(&ds, cfg(20), None, None).unwrap();
    let ex = exchange_latents(ckpt.model(), &ds, 1, 0, 1, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("own.ppm"), dir.path().join("swapped.ppm"));
    ex.own.quantize().write_ppm(&a).unwrap();
    ex.swapped.quantize().write_ppm(&b).unwrap();
    let back = mse(&Image8::read_ppm(&a).unwrap().to_float(), &Image8::read_ppm(&b).unwrap().to_float()).unwrap();
    assert_eq!(back, ex.mse);
}

#[test]
fn nearest_frame_copy_rule() {
    assert_eq!(nearest_trained(0, 4), 0);
    assert_eq!(nearest_trained(3, 4), 3);
    assert_eq!(nearest_trained(4, 4), 3);
    assert_eq!(nearest_trained(11, 4), 3);
}

#[test]
fn anchor_penalty_vanishes_at_the_anchor() {
    let target = Tensor::row(vec![0.3, -0.2, 1.5]);
    let a = Anchor { target: target.clone(), weight: 1.0, beta: 1.0 };
    assert_eq!(a.penalty(&target), 0.0);
    // quadratic inside the unit ball, linear outside
    assert!((a.penalty(&Tensor::row(vec![0.8, -0.2, 1.5])) - 0.125).abs() < 1e-15);
    assert!((a.penalty(&Tensor::row(vec![2.3, -0.2, 1.5])) - 1.5).abs() < 1e-15);
}

#[test]
fn zero_step_adaptation_copies_latents() {
    let ds = data(2);
    let ckpt = train_novel_view(&ds, cfg(3), None, None).unwrap();
    let adapted = adapt_novel_pose(&ckpt, &ds, &TrainConfig { adapt_steps: 0, ..ckpt.config.clone() }).unwrap();
    let m = adapted.ckpt.model();
    assert_eq!(m.config.frames, 4);
    assert_eq!(adapted.penalty, 0.0);
    let (old, new) = (ckpt.model().tensor(PSI_U).unwrap(), m.tensor(PSI_U).unwrap());
    assert_eq!(new.row_slice(2), old.row_slice(1));
    assert_eq!(new.row_slice(3), old.row_slice(1));
    let img = m.render_image(&ds.context(3), &ds.cameras[0], 3, 8).unwrap();
    assert!(img.data.iter().all(|v| v.is_finite()));
}

#[test]
fn adaptation_on_training_poses_stays_near_the_anchor() {
    let ds = data(2);
    let ckpt = train_novel_view(&ds, cfg(30), None, None).unwrap();
    // novel frames that repeat the trained poses
    let mut same = ds.clone();
    for j in 0..2 {
        let f = same.novel_frames[j];
        same.poses[f] = catnerf::deform::PoseFrame { frame: f, ..ds.poses[1].clone() };
        for v in 0..same.cameras.len() {
            same.images[v][f] = ds.images[v][1].clone();
        }
    }
    let adapted = adapt_novel_pose(&ckpt, &same, &TrainConfig { adapt_steps: 40, ..ckpt.config.clone() }).unwrap();
    assert!(adapted.penalty < 1e-3, "{}", adapted.penalty);
    assert_eq!(adapted.records.len(), 40);
    // only the constant latent moves
    for (name, t) in &adapted.ckpt.model().params {
        if name != PSI_C && name != PSI_U && !name.starts_with("latent.appearance") {
            assert_eq!(t.data(), ckpt.model().params[name].data(), "{name}");
        }
    }
}

#[test]
fn adaptation_needs_novel_frames() {
    let ds = data(0);
    let ckpt = train_novel_view(&ds, cfg(1), None, None).unwrap();
    assert_eq!(adapt_novel_pose(&ckpt, &ds, &ckpt.config).unwrap_err().kind(), "invalid");
}

#[test]
fn full_grid_has_one_row_per_cell() {
    let ds = data(0);
    let report = ablate(&ds, &cfg(2), &LossVariant::ALL, &FusionVariant::ALL).unwrap();
    assert_eq!(report.cells.len(), 20);
    assert_eq!(report.to_csv().lines().count(), 21);
    assert!(report.cells.iter().all(|c| c.outcome.is_ok()));
    assert!(ablate(&ds, &cfg(2), &[], &FusionVariant::ALL).is_err());
}

#[test]
fn failed_cells_are_recorded() {
    let ds = data(0);
    // three heads cannot split a width-4 latent, which only the attention variants need
    let mut bad = cfg(2);
    bad.model_overrides.set("model.heads", 3);
    let report = ablate(&ds, &bad, &[LossVariant::None], &[FusionVariant::Raw, FusionVariant::Tx2]).unwrap();
    assert!(report.get(LossVariant::None, FusionVariant::Raw).unwrap().outcome.is_ok());
    assert!(report.get(LossVariant::None, FusionVariant::Tx2).unwrap().outcome.is_err());
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("none,tx2,failed"));
}

#[test]
fn covariance_cell_decorrelates_more_than_none() {
    let ds = data(0);
    let base = TrainConfig { ..cfg(150) };
    let report = ablate(&ds, &base, &[LossVariant::None, LossVariant::Cov], &[FusionVariant::Tx2]).unwrap();
    let get = |l| report.get(l, FusionVariant::Tx2).unwrap().outcome.clone().unwrap().offdiag_cov.unwrap();
    assert!(get(LossVariant::Cov) < get(LossVariant::None));
}

#[test]
fn micro_gradcheck_passes() {
    let r = gradcheck_micro(0).unwrap();
    assert!(r.fd.max_rel_error < 1e-3, "{:?}", r.fd);
    assert_eq!(r.fd.checked, r.parameters);
    assert!(r.elapsed.as_secs() < 60);
}
