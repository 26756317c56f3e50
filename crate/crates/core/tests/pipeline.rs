use std::sync::OnceLock;

use pascal::phantom::{generate_cohort, CohortOptions, PhantomCase, PhantomSpec};
use pascal::pipeline::{
    bundle_from_slice, load_bundle, save_bundle, segment, to_json_bytes, train, Init, ModelBundle, PipelineError, SegmentConfig,
    TrainConfig, TrainingCase, FORMAT_VERSION,
};
use pascal::shape::TubeLandmarks;

fn small_spec() -> PhantomSpec {
    PhantomSpec {
        n_stations: 12,
        points_per_ring: 8,
        control_points: vec![[6.0, 10.0, 10.0], [15.0, 10.8, 9.4], [24.0, 10.0, 10.5]],
        radii: vec![2.0; 12],
        tissues: vec![],
        dims: [62, 42, 42],
        ..PhantomSpec::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig { k_min: 2, k_max: 6, scales: 2, coarsest_patch: [5, 5, 5], ..TrainConfig::default() }
}

fn cohort() -> &'static [PhantomCase] {
    static C: OnceLock<Vec<PhantomCase>> = OnceLock::new();
    C.get_or_init(|| {
        let opts = CohortOptions { shape_sigma: 0.4, ..CohortOptions::default() };
        generate_cohort(&small_spec(), 7, 0, &opts, 21).unwrap()
    })
}

fn training_cases(n: usize) -> Vec<TrainingCase> {
    cohort()[..n]
        .iter()
        .map(|c| TrainingCase { id: c.id.clone(), volume: c.volume.clone(), landmarks: c.landmarks.clone(), truth: Some(c.truth.clone()) })
        .collect()
}

fn bundle() -> &'static ModelBundle {
    static B: OnceLock<ModelBundle> = OnceLock::new();
    B.get_or_init(|| train(&training_cases(6), &small_config()).unwrap())
}

#[test]
fn bundle_round_trips_through_a_file() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_bundle(b, &path).unwrap();
    let back = load_bundle(&path).unwrap();
    assert_eq!(&back, b);
    assert_eq!(to_json_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn bundle_records_the_schedule_and_coverage() {
    let b = bundle();
    assert_eq!(b.scales.len(), 2);
    assert_eq!(b.schedule.levels.len(), 2);
    assert!((2..=6).contains(&b.selected_partitions));
    assert_eq!(b.silhouette.len(), 5);
    assert_eq!(b.scales[1].partitioning.k, b.selected_partitions);
    assert_eq!(b.scales[0].partitioning.k, b.selected_partitions.div_ceil(2));
    assert_eq!(b.weights.len(), 12 * 8);
    assert!(b.healthy.std > 0.0);
}

#[test]
fn retraining_is_byte_identical() {
    let again = train(&training_cases(6), &small_config()).unwrap();
    assert_eq!(to_json_bytes(&again).unwrap(), to_json_bytes(bundle()).unwrap());
}

#[test]
fn pinned_partition_count_is_recorded() {
    let cfg = TrainConfig { partitions: Some(4), ..small_config() };
    let b = train(&training_cases(4), &cfg).unwrap();
    assert_eq!(b.selected_partitions, 4);
    assert_eq!(b.config.partitions, Some(4));
    assert!(b.silhouette.is_empty());
}

#[test]
fn truncated_bundle_is_a_schema_error() {
    let bytes = to_json_bytes(bundle()).unwrap();
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 2] {
        match bundle_from_slice(&bytes[..cut]) {
            Err(PipelineError::Schema(_)) => {}
            other => panic!("cut at {cut}: expected schema error, got {other:?}"),
        }
    }
}

#[test]
fn future_version_names_both_versions() {
    let mut v: serde_json::Value = serde_json::from_slice(&to_json_bytes(bundle()).unwrap()).unwrap();
    v["version"] = serde_json::json!(FORMAT_VERSION + 1);
    let err = bundle_from_slice(&serde_json::to_vec(&v).unwrap()).unwrap_err();
    match &err {
        PipelineError::VersionMismatch { found, supported } => {
            assert_eq!((*found, *supported), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("expected version mismatch, got {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains(&(FORMAT_VERSION + 1).to_string()) && msg.contains(&FORMAT_VERSION.to_string()));
}

#[test]
fn inconsistent_bundle_fails_validation() {
    let mut v: serde_json::Value = serde_json::from_slice(&to_json_bytes(bundle()).unwrap()).unwrap();
    v["weights"].as_array_mut().unwrap().pop();
    assert!(matches!(bundle_from_slice(&serde_json::to_vec(&v).unwrap()), Err(PipelineError::Schema(_))));
}

#[test]
fn two_cases_are_not_enough() {
    match train(&training_cases(2), &small_config()) {
        Err(PipelineError::InsufficientCases { needed: 3, got: 2 }) => {}
        other => panic!("expected insufficient cases, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn topology_mismatch_names_the_case() {
    let mut cases = training_cases(3);
    let other = PhantomSpec { points_per_ring: 10, ..small_spec() };
    let (_, lm, _) = pascal::phantom::generate(&other, 1).unwrap();
    cases[2].landmarks = lm;
    match train(&cases, &small_config()) {
        Err(PipelineError::TopologyMismatch { id, expected, got }) => {
            assert_eq!(id, cases[2].id);
            assert_eq!((expected, got), ((12, 8), (12, 10)));
        }
        other => panic!("expected topology mismatch, got {:?}", other.map(|_| ())),
    }
}

fn mean_distance(a: &TubeLandmarks, b: &TubeLandmarks) -> f64 {
    (0..a.len()).map(|l| (a.point(l) - b.point(l)).norm()).sum::<f64>() / a.len() as f64
}

#[test]
fn truth_initialization_is_a_near_fixed_point() {
    let case = &cohort()[6];
    let cfg = SegmentConfig { init: Init::Landmarks { landmarks: case.landmarks.clone() }, refine: false, ..SegmentConfig::default() };
    let seg = segment(&case.volume, bundle(), &cfg).unwrap();
    let voxel = case.volume.geometry().min_spacing();
    let moved = mean_distance(&seg.landmarks, &case.landmarks);
    assert!(moved < voxel, "moved {moved} mm");
    for s in &seg.report.scales {
        assert!(s.converged, "scale j={} did not converge: {:?}", s.j, s.movements);
        assert!(*s.movements.last().unwrap() < cfg.tol_voxels * voxel);
    }
}

#[test]
fn segmentation_reports_every_scale_and_is_repeatable() {
    let case = &cohort()[6];
    let cfg = SegmentConfig { refine_rounds: 1, ..SegmentConfig::default() };
    let a = segment(&case.volume, bundle(), &cfg).unwrap();
    let b = segment(&case.volume, bundle(), &cfg).unwrap();
    assert_eq!(a.report.scales.len(), 2);
    assert_eq!(a.report.scales[0].j, 1);
    assert!(a.report.refinement.is_some());
    assert!(a.mask.count() > 0);
    assert_eq!(a.report.mask_voxels, a.mask.count());
    assert_eq!(a.landmarks, b.landmarks);
    assert_eq!(a.mask.data(), b.mask.data());
}

#[test]
fn invalid_segment_config_is_rejected_before_work() {
    let case = &cohort()[6];
    let cfg = SegmentConfig { tol_voxels: 0.0, ..SegmentConfig::default() };
    let err = segment(&case.volume, bundle(), &cfg).unwrap_err();
    assert!(err.is_input_error());
}
