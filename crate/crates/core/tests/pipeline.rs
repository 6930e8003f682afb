use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xedge_core::artifact::{read_saliency_artifact, write_saliency_artifact};
use xedge_core::augment::{apply_augmentation_pipeline, AugmentationPlan, MaskSet};
use xedge_core::dataset::{load_dataset, Dataset};
use xedge_core::explain::{explain_rise, RiseConfig, RiseMode};
use xedge_core::imaging::{BinaryMask, ImageTensor, RangeTag};
use xedge_core::model::{
    introspect_forward, target_region, LinearConvToyModel, ModelRegistry, RegionTemplateModel, ScoreRegion, Template,
};
use xedge_core::report::{evaluate_method_over_set, rank_methods, EvalConfig, MetricReport, RiseSettings, XaiMethod};

fn mini() -> Dataset {
    load_dataset(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini.json")).unwrap()
}

fn cfg() -> EvalConfig {
    let rise = RiseSettings { n_masks: 96, grid: 4, keep_prob: 0.5, mode: RiseMode::MonteCarlo, region: ScoreRegion::FrozenArgmax };
    EvalConfig { rise, seed: 5, ..Default::default() }
}

#[test]
fn evaluation_is_independent_of_pool_size() {
    let ds = mini();
    let model = ModelRegistry::default().resolve("toy:region").unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate_method_over_set(XaiMethod::Rise, model.as_ref(), &ds, &cfg()).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one.rows.len() + one.skipped, 8);
    for r in &one.rows {
        for v in [r.ebpg, r.bbox, r.iou] {
            assert!((0.0..=100.0).contains(&v));
        }
        assert!(r.del.is_finite() && r.ins.is_finite());
    }
    let report = MetricReport::build(&[one], ds.digest()).unwrap();
    assert_eq!(report.advisable, "RISE");
    assert_eq!(rank_methods(&report.methods).unwrap().advisable, "RISE");
}

#[test]
fn evaluation_of_a_subset_only_sees_its_images() {
    let ds = mini().subset(&BTreeSet::from([2, 4]));
    let model = ModelRegistry::default().resolve("toy:region").unwrap();
    let agg = evaluate_method_over_set(XaiMethod::Rise, model.as_ref(), &ds, &cfg()).unwrap();
    assert!(agg.rows.iter().all(|r| r.image_id == 2 || r.image_id == 4));
}

#[test]
fn saliency_artifact_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::new(1, 6, 5, (0..30).map(|i| i as f64 / 30.0).collect(), RangeTag::Unit).unwrap();
    let model = RegionTemplateModel::new(Template::center(), 1);
    let mut rc = RiseConfig::for_image(&img, 3);
    rc.n_masks = 40;
    rc.grid = 3;
    let res = explain_rise(&model, &img, 1, &rc).unwrap();
    let paths = write_saliency_artifact(dir.path(), "s", &res).unwrap();
    let (sal, side) = read_saliency_artifact(&paths.raw, &paths.sidecar).unwrap();
    // raw values are stored as f32
    for (a, b) in sal.values.iter().zip(&res.saliency.values) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert_eq!((side.method.as_str(), side.seed, side.config_digest.as_str()), ("RISE", 3, res.config_digest.as_str()));
    assert!(paths.preview.exists());
}

#[test]
fn exhaustive_enumeration_matches_monte_carlo_at_grid_resolution() {
    let img = ImageTensor::new(1, 2, 2, vec![0.2, 0.9, 0.5, 0.7], RangeTag::Unit).unwrap();
    let model = LinearConvToyModel::seeded(1, 2, 2, 8);
    let mut ex = RiseConfig::exhaustive(2, 2, 2);
    ex.region = ScoreRegion::WholeImage;
    let exact = explain_rise(&model, &img, 1, &ex).unwrap().saliency.values;
    let mc = RiseConfig { mode: RiseMode::MonteCarlo, n_masks: 20_000, seed: 1, ..ex };
    let est = explain_rise(&model, &img, 1, &mc).unwrap().saliency.values;
    for (a, b) in est.iter().zip(&exact) {
        assert!((a - b).abs() <= 0.05 * b.abs(), "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradcam_gradients_match_finite_differences(seed in 0u64..10_000) {
        let model = LinearConvToyModel::seeded(2, 3, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageTensor::new(2, 5, 6, (0..60).map(|_| rng.random::<f64>()).collect(), RangeTag::Unit).unwrap();
        let (out, rec) = introspect_forward(&model, &img, 2).unwrap();
        let region = target_region(&out, 2, ScoreRegion::FrozenArgmax);
        let h = 1e-6;
        for i in 0..rec.activations.len() {
            let (mut up, mut down) = (rec.activations.clone(), rec.activations.clone());
            up[i] += h;
            down[i] -= h;
            let f = |a: &[f64]| model.score_from_activations(a, 5, 6, 2, &region).unwrap();
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            let scale = fd.abs().max(rec.grads[i].abs());
            prop_assert!(scale < 1e-9 || (fd - rec.grads[i]).abs() <= 1e-4 * scale, "{} vs {}", rec.grads[i], fd);
        }
    }

    #[test]
    fn geometric_plan_moves_image_and_masks_together(seed in 0u64..10_000, h in 8usize..20, w in 8usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        let mask = BinaryMask::new(h, w, bits).unwrap();
        let img = ImageTensor::new(1, h, w, mask.to_plane(), RangeTag::Unit).unwrap();
        let plan = AugmentationPlan::from_json(&format!(r#"{{"seed": {seed}, "transforms": [
            {{"name": "hflip", "p": 0.5}}, {{"name": "hshift"}}, {{"name": "pad", "p": 0.5}},
            {{"name": "perspective", "p": 0.5, "params": {{"interpolation": "nearest"}}}}]}}"#)).unwrap();
        let (out, masks) = apply_augmentation_pipeline(&img, &MaskSet::from([(7, mask)]), &plan, seed).unwrap();
        let m = &masks[&7];
        prop_assert_eq!((m.height(), m.width()), (out.height(), out.width()));
        for (v, b) in out.plane(0).iter().zip(m.bits()) {
            prop_assert_eq!(*v, if *b { 1.0 } else { 0.0 });
        }
    }
}
