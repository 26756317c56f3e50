use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::geometry::{extract_centerline, radius_profile};
use crate::metrics::{detect_opg_with, evaluate, overlay, Detection, EvaluationReport, HealthyRadiusStats};
use crate::phantom::{generate_cohort, write_case, CaseMeta};
use crate::pipeline::{self, load_bundle, save_bundle, Init, ModelBundle, PipelineError, SegmentConfig, SegmentReport, TrainingCase};
use crate::shape::TubeLandmarks;
use crate::sparse::DictionaryDump;
use crate::volume::{load_mask, load_volume, save_mask, save_nifti, BinaryMask, NiftiDatatype};

use super::{CliError, DetectArgs, EvalArgs, PhantomArgs, RunConfig, SegmentArgs, TrainArgs};

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::compute)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

pub fn phantom(mut cfg: RunConfig, a: PhantomArgs) -> Result<(), CliError> {
    let p = &mut cfg.phantom;
    if let Some(v) = a.healthy {
        p.healthy = v;
    }
    if let Some(v) = a.path {
        p.pathological = v;
    }
    if let Some(v) = a.bulge_factor {
        p.bulge_factor = v;
    }
    if let Some(v) = a.bulge_fraction {
        p.bulge_fraction = v;
    }
    if let Some(v) = a.shape_sigma {
        p.shape_sigma = v;
    }
    cfg.validate_phantom()?;
    create_dir(&a.out)?;
    let p = &cfg.phantom;
    let cohort = generate_cohort(&p.spec, p.healthy, p.pathological, &p.options(), cfg.seed).map_err(CliError::compute)?;
    let mut table = String::from("id,pathological,seed,bulge_station,bulge_factor,tube_voxels\n");
    for case in &cohort {
        write_case(&a.out, case).map_err(CliError::input)?;
        let (station, factor) = match &case.spec.bulge {
            Some(b) => (format!("{}", b.center_station), format!("{}", b.factor)),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(table, "{},{},{},{},{},{}", case.id, case.pathological, case.seed, station, factor, case.truth.count());
    }
    write_bytes(&a.out.join("cohort.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn case_dirs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs = Vec::new();
    for p in inputs {
        if p.join("volume.nii").exists() || p.join("landmarks.json").exists() {
            dirs.push(p.clone());
            continue;
        }
        let rd = std::fs::read_dir(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
        let mut found: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.is_dir() && d.file_name().is_some_and(|n| n.to_string_lossy().starts_with("case_")))
            .collect();
        if found.is_empty() {
            return Err(CliError::input(format!("{}: no case directories found", p.display())));
        }
        found.sort();
        dirs.extend(found);
    }
    Ok(dirs)
}

fn load_training_case(dir: &Path) -> Result<(TrainingCase, bool), CliError> {
    let fallback = dir.file_name().map(|n| n.to_string_lossy().trim_start_matches("case_").to_string()).unwrap_or_default();
    let meta: Option<CaseMeta> = match std::fs::read_to_string(dir.join("meta.json")) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| CliError::input(format!("case {fallback}: meta.json: {e}")))?),
        Err(_) => None,
    };
    let id = meta.as_ref().map(|m| m.id.clone()).unwrap_or(fallback);
    let fail = |what: &str, e: &dyn std::fmt::Display| CliError::input(format!("case {id}: {what}: {e}"));
    let lm_path = dir.join("landmarks.json");
    if !lm_path.exists() {
        return Err(CliError::input(format!("case {id}: missing {}", lm_path.display())));
    }
    let landmarks = TubeLandmarks::load_json(&lm_path).map_err(|e| fail("landmarks.json", &e))?;
    let volume = load_volume(&dir.join("volume.nii")).map_err(|e| fail("volume.nii", &e))?;
    let truth_path = dir.join("truth.nii");
    let truth = if truth_path.exists() { Some(load_mask(&truth_path).map_err(|e| fail("truth.nii", &e))?) } else { None };
    let pathological = meta.is_some_and(|m| m.pathological);
    Ok((TrainingCase { id, volume, landmarks, truth }, pathological))
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(k) = a.partitions {
        cfg.train.partitions = Some(k);
    }
    cfg.train.validate()?;
    let mut cases = Vec::new();
    for dir in case_dirs(&a.inputs)? {
        let (case, pathological) = load_training_case(&dir)?;
        if pathological && !a.include_pathological {
            warn!("skipping pathological case {}", case.id);
            continue;
        }
        cases.push(case);
    }
    info!("training on {} cases", cases.len());
    let mut bundle = pipeline::train(&cases, &cfg.train)?;
    bundle.seed = cfg.seed;
    save_bundle(&bundle, &a.out).map_err(CliError::from)?;
    let mut csv = String::from("k,silhouette\n");
    for s in &bundle.silhouette {
        let _ = writeln!(csv, "{},{}", s.k, s.score);
    }
    let csv_path = a.silhouette.unwrap_or_else(|| a.out.with_extension("silhouette.csv"));
    write_bytes(&csv_path, csv.as_bytes())?;
    println!("selected_partitions,{}", bundle.selected_partitions);
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    training_cases: &'a [String],
    selected_partitions: usize,
    seed: u64,
}

#[derive(Serialize)]
struct SegmentOutput<'a> {
    seed: u64,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    config: &'a SegmentConfig,
    model: ModelSummary<'a>,
    segmentation: &'a SegmentReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    evaluation: Option<EvaluationReport>,
}

fn read_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    load_bundle(path).map_err(CliError::from)
}

pub fn segment(mut cfg: RunConfig, a: SegmentArgs) -> Result<(), CliError> {
    if a.no_refine {
        cfg.segment.refine = false;
    }
    if let Some(p) = &a.init_landmarks {
        let landmarks = TubeLandmarks::load_json(p).map_err(CliError::input)?;
        cfg.segment.init = Init::Landmarks { landmarks };
    }
    cfg.segment.validate()?;
    let (volume_path, truth_path) = match (&a.volume, &a.case) {
        (Some(v), _) => (v.clone(), a.truth.clone()),
        (None, Some(c)) => {
            let t = c.join("truth.nii");
            (c.join("volume.nii"), a.truth.clone().or_else(|| t.exists().then_some(t)))
        }
        (None, None) => return Err(CliError::input("either --volume or --case is required")),
    };
    let bundle = read_bundle(&a.model)?;
    let vol = load_volume(&volume_path).map_err(CliError::input)?;
    let truth = truth_path.as_deref().map(load_mask).transpose().map_err(CliError::input)?;
    create_dir(&a.out)?;
    let model = || ModelSummary { training_cases: &bundle.training_cases, selected_partitions: bundle.selected_partitions, seed: bundle.seed };

    match pipeline::segment(&vol, &bundle, &cfg.segment) {
        Ok(seg) => {
            save_mask(&seg.mask, &a.out.join("seg.nii")).map_err(CliError::input)?;
            seg.landmarks.save_json(&a.out.join("landmarks.json")).map_err(CliError::input)?;
            let evaluation = truth.as_ref().map(|t| evaluate(t, &seg.mask)).transpose().map_err(CliError::input)?;
            if let Some(e) = &evaluation {
                println!("dsc,{}\nhausdorff_mm,{}", e.dsc, e.hausdorff_mm);
            }
            if a.dump_dicts {
                let dumps: Vec<DictionaryDump> = seg.dictionaries.iter().map(|d| d.dump()).collect();
                write_json(&a.out.join("dictionaries.json"), &dumps)?;
            }
            let out = SegmentOutput {
                seed: cfg.seed,
                status: "ok",
                error: None,
                config: &cfg.segment,
                model: model(),
                segmentation: &seg.report,
                evaluation,
            };
            write_json(&a.out.join("report.json"), &out)
        }
        Err(PipelineError::Divergence { scale, iteration, last_stable, report }) => {
            let message = format!("search diverged at scale j={scale}, iteration {iteration}");
            last_stable.save_json(&a.out.join("landmarks.json")).map_err(CliError::input)?;
            let out = SegmentOutput {
                seed: cfg.seed,
                status: "diverged",
                error: Some(message.clone()),
                config: &cfg.segment,
                model: model(),
                segmentation: &report,
                evaluation: None,
            };
            write_json(&a.out.join("report.json"), &out)?;
            Err(CliError::Compute(message))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn eval(cfg: RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let truth = load_mask(&a.truth).map_err(CliError::input)?;
    let pred = load_mask(&a.pred).map_err(CliError::input)?;
    let report = evaluate(&truth, &pred).map_err(CliError::input)?;
    if let Some(p) = &a.overlay {
        let ov = overlay(&truth, &pred).map_err(CliError::input)?;
        save_nifti(&ov, p, NiftiDatatype::Uint8).map_err(CliError::input)?;
    }
    #[derive(Serialize)]
    struct Out<'a> {
        seed: u64,
        #[serde(flatten)]
        report: &'a EvaluationReport,
    }
    let out = Out { seed: cfg.seed, report: &report };
    println!("dsc,{}\nhausdorff_mm,{}", report.dsc, report.hausdorff_mm);
    match &a.out {
        Some(p) => write_json(p, &out),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize)]
struct DetectOutput {
    seed: u64,
    mean_radius_mm: f64,
    threshold: f64,
    healthy: HealthyRadiusStats,
    #[serde(flatten)]
    detection: Detection,
}

/// Mean radius of `mask` along its centreline, anchored at the end rings
/// of `landmarks` when given.
fn mask_radius_profile(
    mask: &BinaryMask,
    landmarks: Option<&TubeLandmarks>,
) -> Result<crate::geometry::RadiusProfile, CliError> {
    let ends = landmarks.map(|l| (l.station(0), l.station(l.n_stations - 1)));
    let cl = extract_centerline(mask, ends).map_err(CliError::compute)?;
    radius_profile(mask, &cl).map_err(CliError::compute)
}

pub fn detect(mut cfg: RunConfig, a: DetectArgs) -> Result<(), CliError> {
    if let Some(t) = a.threshold {
        cfg.detect.threshold = t;
    }
    cfg.validate_detect()?;
    let bundle = read_bundle(&a.model)?;
    let mask = load_mask(&a.mask).map_err(CliError::input)?;
    let landmarks = a.landmarks.as_deref().map(TubeLandmarks::load_json).transpose().map_err(CliError::input)?;
    let profile = mask_radius_profile(&mask, landmarks.as_ref())?;
    let detection = detect_opg_with(&profile, &bundle.healthy, cfg.detect.threshold).map_err(CliError::input)?;
    let mut radii = profile.radii.clone();
    radii.sort_by(|x, y| x.total_cmp(y));
    let mean_radius_mm = radii.iter().sum::<f64>() / radii.len().max(1) as f64;
    let out = DetectOutput { seed: cfg.seed, mean_radius_mm, threshold: cfg.detect.threshold, healthy: bundle.healthy, detection };
    println!("z,{}\nflag,{}", detection.z, detection.flag);
    match &a.out {
        Some(p) => write_json(p, &out),
        None => Ok(()),
    }
}
