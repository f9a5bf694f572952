use std::fs;
use std::path::{Path, PathBuf};

use brnlab::data::{read_annotations, read_detections, write_detections, AnnotationSet, DetectionSet};
use brnlab::inference::{rank_order, InferenceConfig};
use brnlab::metrics::{evaluate, CoverageGroup, DistanceBucket, EvalReport};
use brnlab::synth::{generate_dataset, load_dataset, Dataset, Split, SynthConfig};
use brnlab::train::{detect_videos, load_checkpoint, parse_loss_log, train, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{DetectArgs, DiagnoseArgs, EvalArgs, GenArgs, PlotArgs, PlotKind, SplitName, TrainArgs};
use crate::error::{require, CliError};
use crate::manifest::{write_atomic, RunManifest};
use crate::plot;

type CliResult<T = ()> = Result<T, CliError>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Overlay `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// `default` with the keys present in the JSON file at `path` replaced.
fn layered<T: Serialize + DeserializeOwned>(default: &T, path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(serde_json::from_value(to_value(default)).expect("round trip"));
    };
    require(path, "config file")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    if !patch.is_object() {
        return Err(CliError::Invalid(format!("{}: config must be a JSON object", path.display())));
    }
    let mut value = to_value(default);
    merge(&mut value, patch);
    serde_json::from_value(value).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    write_atomic(path, text.as_bytes())
}

fn split_ids(split: &Split, all: &AnnotationSet, which: SplitName) -> Vec<String> {
    match which {
        SplitName::Train => split.train.clone(),
        SplitName::Val => split.val.clone(),
        SplitName::All => all.videos.iter().map(|v| v.video_id.clone()).collect(),
    }
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    require(dir, "dataset directory")?;
    Ok(load_dataset(dir)?)
}

fn load_annotations(path: &Path, split_file: Option<&Path>, which: SplitName) -> CliResult<AnnotationSet> {
    require(path, "annotation file")?;
    let ann = read_annotations(path)?;
    let Some(split_path) = split_file else {
        return Ok(ann);
    };
    require(split_path, "split file")?;
    let text = fs::read_to_string(split_path).map_err(|e| CliError::io(split_path, e))?;
    let split: Split =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", split_path.display())))?;
    let ids = split_ids(&split, &ann, which);
    Ok(ann.subset(&ids)?)
}

/// Drop detections on videos outside `ann`, so a split-restricted score ignores the other split.
fn restrict(mut dets: DetectionSet, ann: &AnnotationSet, split_file: Option<&Path>) -> DetectionSet {
    if split_file.is_some() {
        dets.retain(|id, _| ann.get(id).is_some());
    }
    dets
}

fn load_detections(path: &Path) -> CliResult<DetectionSet> {
    require(path, "detection file")?;
    Ok(read_detections(path)?)
}

pub fn gen(args: &GenArgs) -> CliResult {
    let mut cfg = layered(&SynthConfig::default(), args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let paths = generate_dataset(&cfg, &args.out)?;
    log::info!("wrote {} videos to {}", cfg.num_videos, args.out.display());
    let mut man = RunManifest::new("gen", to_value(&cfg), Some(cfg.seed))
        .output(&paths.features)
        .output(&paths.annotations)
        .output(&paths.split)
        .output(&paths.config);
    if let Some(c) = &args.config {
        man = man.input(c);
    }
    man.finish(&args.out.join("run_manifest.json"))
}

pub fn train_cmd(args: &TrainArgs) -> CliResult {
    let data = load_data(&args.data)?;
    let mut cfg = layered(&TrainConfig::desk(), args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(model) = args.model {
        cfg.model = model;
    }
    if !args.ablate.is_empty() {
        cfg.ablations = args.ablate.clone();
    }
    cfg.validate()?;
    let outcome = train(&data, &cfg, Some(&args.out))?;
    if let Some(last) = outcome.log.last() {
        log::info!("finished {} epochs, final loss {:.5}", cfg.epochs, last.total);
    }
    let cfg_path = args.out.join("train_config.json");
    write_text(&cfg_path, &serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    let mut man = RunManifest::new("train", to_value(&cfg), Some(cfg.seed))
        .input(&args.data)
        .output(&args.out.join("loss_log.csv"))
        .output(&args.out.join("checkpoint"))
        .output(&cfg_path);
    for epoch in 1..cfg.epochs {
        let periodic = args.out.join(format!("checkpoint_epoch{epoch:04}"));
        if periodic.exists() {
            man = man.output(&periodic);
        }
    }
    if let Some(c) = &args.config {
        man = man.input(c);
    }
    man.finish(&args.out.join("run_manifest.json"))
}

pub fn detect(args: &DetectArgs) -> CliResult {
    require(&args.checkpoint, "checkpoint directory")?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    let icfg = layered(&InferenceConfig::for_preset(args.preset), args.config.as_deref())?;
    icfg.validate()?;
    let ids = split_ids(&data.split, &data.annotations, args.split);
    let dets = detect_videos(&ck.model, &ck.params, &data, &ids, &icfg)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_detections(&dets, &args.out)?;
    let mut man = RunManifest::new("detect", json!({ "preset": args.preset, "inference": icfg, "videos": ids.len() }), None)
        .input(&args.checkpoint)
        .input(&args.data)
        .output(&args.out);
    if let Some(c) = &args.config {
        man = man.input(c);
    }
    man.finish(&sibling(&args.out, "manifest.json"))
}

pub fn eval(args: &EvalArgs) -> CliResult {
    let ann = load_annotations(&args.annotations, args.split_file.as_deref(), args.split)?;
    let dets = restrict(load_detections(&args.detections)?, &ann, args.split_file.as_deref());
    let report = evaluate(&dets, &ann, args.preset)?;
    write_text(&args.out, &report.to_json())?;
    let table = sibling(&args.out, "txt");
    write_text(&table, &report.to_table())?;
    print!("{}", report.to_table());
    let mut man = RunManifest::new("eval", json!({ "preset": args.preset, "split": format!("{:?}", args.split) }), None)
        .input(&args.detections)
        .input(&args.annotations)
        .output(&args.out)
        .output(&table);
    if let Some(s) = &args.split_file {
        man = man.input(s);
    }
    man.finish(&sibling(&args.out, "manifest.json"))
}

fn delta(base: Option<f64>, brn: Option<f64>) -> Value {
    json!({ "baseline": base, "brn": brn, "delta": base.zip(brn).map(|(a, b)| b - a) })
}

/// Side-by-side comparison; deltas are `brn - baseline`.
pub fn vbp_diagnosis(base: &EvalReport, brn: &EvalReport) -> Value {
    let mut distance = serde_json::Map::new();
    for b in DistanceBucket::ALL {
        let get = |r: &EvalReport| r.distance.get(b.name()).and_then(|s| s.map);
        distance.insert(b.name().to_string(), delta(get(base), get(brn)));
    }
    let mut fnr = serde_json::Map::new();
    let mut cov_map = serde_json::Map::new();
    for g in CoverageGroup::ALL {
        fnr.insert(g.name().to_string(), delta(base.fnr(g), brn.fnr(g)));
        let get = |r: &EvalReport| r.coverage.get(g.name()).and_then(|s| s.map);
        cov_map.insert(g.name().to_string(), delta(get(base), get(brn)));
    }
    json!({
        "preset": base.preset,
        "average_map": delta(Some(base.average_map()), Some(brn.average_map())),
        "merge_rate": delta(base.merge.rate, brn.merge.rate),
        "neighbouring_pairs": base.merge.pairs,
        "distance_map": distance,
        "coverage_fnr": fnr,
        "coverage_map": cov_map,
    })
}

fn diagnosis_table(diag: &Value) -> String {
    let mut out = format!("{:<22}{:>10}{:>10}{:>10}\n", "metric", "baseline", "brn", "delta");
    let fmt = |v: &Value| v.as_f64().map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut row = |name: String, v: &Value| {
        out.push_str(&format!("{name:<22}{:>10}{:>10}{:>10}\n", fmt(&v["baseline"]), fmt(&v["brn"]), fmt(&v["delta"])));
    };
    row("average mAP".into(), &diag["average_map"]);
    row("merge_rate".into(), &diag["merge_rate"]);
    for b in DistanceBucket::ALL {
        row(format!("mAP dist {}", b.name()), &diag["distance_map"][b.name()]);
    }
    for g in CoverageGroup::ALL {
        row(format!("FNR {}", g.name()), &diag["coverage_fnr"][g.name()]);
    }
    out
}

pub fn diagnose_vbp(args: &DiagnoseArgs) -> CliResult {
    let ann = load_annotations(&args.annotations, args.split_file.as_deref(), args.split)?;
    let base = restrict(load_detections(&args.baseline)?, &ann, args.split_file.as_deref());
    let brn = restrict(load_detections(&args.brn)?, &ann, args.split_file.as_deref());
    let diag = vbp_diagnosis(&evaluate(&base, &ann, args.preset)?, &evaluate(&brn, &ann, args.preset)?);
    write_text(&args.out, &serde_json::to_string_pretty(&diag).expect("json"))?;
    let table = sibling(&args.out, "txt");
    let text = diagnosis_table(&diag);
    write_text(&table, &text)?;
    print!("{text}");
    let mut man = RunManifest::new("diagnose-vbp", json!({ "preset": args.preset }), None)
        .input(&args.baseline)
        .input(&args.brn)
        .input(&args.annotations)
        .output(&args.out)
        .output(&table);
    if let Some(s) = &args.split_file {
        man = man.input(s);
    }
    man.finish(&sibling(&args.out, "manifest.json"))
}

fn need<'a, T>(v: &'a Option<T>, flag: &str, kind: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| CliError::Invalid(format!("--{flag} is required for --kind {kind}")))
}

fn selection_figure(args: &PlotArgs) -> CliResult<(plot::Figure, Vec<PathBuf>)> {
    let ck_path = need(&args.checkpoint, "checkpoint", "selection-weights")?;
    let data_path = need(&args.data, "data", "selection-weights")?;
    require(ck_path, "checkpoint directory")?;
    let ck = load_checkpoint(ck_path)?;
    let data = load_data(data_path)?;
    let video = match &args.video {
        Some(v) => v.clone(),
        None => data
            .split
            .val
            .first()
            .or_else(|| data.split.train.first())
            .cloned()
            .ok_or_else(|| CliError::Invalid("dataset has no videos".into()))?,
    };
    let seq = data.feature(&video).ok_or_else(|| CliError::Invalid(format!("no video `{video}` in dataset")))?;
    let blocks = &ck.model.stb.blocks;
    let index = args.block.unwrap_or(blocks.len().saturating_sub(1));
    let sub = blocks
        .get(index)
        .and_then(|b| b.scale.as_ref())
        .ok_or_else(|| CliError::Invalid(format!("checkpoint has no scale sub-block in block {index}")))?;
    let x = ck.model.input::<f32>(seq)?;
    let (_, cache) = ck.model.forward(&ck.params, &x)?;
    let sc = cache.stb().subs[index].0.as_ref().expect("scale sub-block ran");
    let w = sc.selection_weights();
    let rows: Vec<Vec<f64>> = w.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let names: Vec<String> = sub.branches.iter().map(|b| format!("kernel {} rate {}", b.kernel, b.dilation)).collect();
    let time = cache.stf().time();
    let scales = cache.stf().scales();
    Ok((plot::selection_weights(&rows, scales, time, &names), vec![ck_path.clone(), data_path.clone()]))
}

fn timeline_figure(args: &PlotArgs) -> CliResult<(plot::Figure, Vec<PathBuf>)> {
    let ann_path = need(&args.annotations, "annotations", "detections-timeline")?;
    if args.detections.is_empty() {
        return Err(CliError::Invalid("--detections is required for --kind detections-timeline".into()));
    }
    require(ann_path, "annotation file")?;
    let ann = read_annotations(ann_path)?;
    let sets: Vec<(String, DetectionSet)> = args
        .detections
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            load_detections(p).map(|d| (name, d))
        })
        .collect::<CliResult<_>>()?;
    let video = match &args.video {
        Some(v) => v.clone(),
        None => sets[0].1.keys().next().cloned().ok_or_else(|| CliError::Invalid("detection file is empty".into()))?,
    };
    let gt = ann.get(&video).ok_or_else(|| CliError::Invalid(format!("no annotation for video `{video}`")))?;
    let sources: Vec<_> = sets
        .into_iter()
        .map(|(name, set)| {
            let mut dets = set.get(&video).cloned().unwrap_or_default();
            dets.sort_by(rank_order);
            dets.truncate(args.top);
            (name, dets)
        })
        .collect();
    let mut inputs = args.detections.clone();
    inputs.push(ann_path.clone());
    Ok((plot::timeline(gt, &sources), inputs))
}

fn loss_figure(args: &PlotArgs) -> CliResult<(plot::Figure, Vec<PathBuf>)> {
    let path = need(&args.log, "log", "loss-curve")?;
    require(path, "loss log")?;
    let file = if path.is_dir() { path.join("loss_log.csv") } else { path.clone() };
    require(&file, "loss log")?;
    let text = fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    let log = parse_loss_log(&text)?;
    Ok((plot::loss_curve(&log), vec![file]))
}

pub fn plot_cmd(args: &PlotArgs) -> CliResult {
    let (figure, inputs) = match args.kind {
        PlotKind::SelectionWeights => selection_figure(args)?,
        PlotKind::DetectionsTimeline => timeline_figure(args)?,
        PlotKind::LossCurve => loss_figure(args)?,
    };
    let prefix = match args.out.extension().and_then(|e| e.to_str()) {
        Some("csv" | "svg") => args.out.with_extension(""),
        _ => args.out.clone(),
    };
    let with = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let (csv, svg) = (with(".csv"), with(".svg"));
    write_text(&csv, &figure.csv)?;
    write_text(&svg, &figure.svg)?;
    let mut man = RunManifest::new("plot", json!({ "kind": format!("{:?}", args.kind), "video": args.video }), None)
        .output(&csv)
        .output(&svg);
    for i in &inputs {
        man = man.input(i);
    }
    man.finish(&with(".manifest.json"))
}
