//! The five subcommands. Each resolves its configuration, writes the
//! resolved snapshot as `run_config.json` into its output directory and
//! leaves its inputs untouched.

use std::path::{Path, PathBuf};

use serde::Serialize;

use seqseg::analysis::{self, ActivationReport, AnalysisInput, AnalysisReport, TauSummary};
use seqseg::checkpoint;
use seqseg::data::{self, DatasetRecord, Splits};
use seqseg::encoder::encode;
use seqseg::metrics::{self, Detection, EvalResult};
use seqseg::parallel::Exec;
use seqseg::plot;
use seqseg::trainer::{self, EpochLog};
use seqseg::types::argmax;
use seqseg::{
    binarize, box_from_mask, BBox, Error, GroundTruthInstance, InstancePrediction, Model, PredictionSequence,
};

use crate::args::{AnalyzeArgs, EvalArgs, GenDataArgs, PredictArgs, TrainArgs};
use crate::config::{require, resolve, AnalyzeConfig, EvalConfig, GenDataConfig, PredictConfig, TrainRunConfig};
use crate::CliError;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

const EXEC: Exec = Exec::Parallel;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn to_json_pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_snapshot(out_dir: &Path, cfg: &impl Serialize) -> Result<(), CliError> {
    create_dir(out_dir)?;
    write_file(&out_dir.join(RUN_CONFIG_FILE), to_json_pretty(cfg))
}

fn must_exist(path: &Path, key: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("`{key}` path {} does not exist", path.display())))
    }
}

/// Records of `split`, resized to `size`×`size` when given.
fn load_records(data_dir: &Path, split: &str, size: Option<usize>) -> Result<Vec<DatasetRecord>, CliError> {
    let records = data::load_split(data_dir, split)?;
    match size {
        None => Ok(records),
        Some(s) => Ok(records
            .iter()
            .map(|r| data::resize_record(r, s, s))
            .collect::<seqseg::Result<Vec<_>>>()?),
    }
}

fn class_names(data_dir: &Path, num_classes: usize) -> Vec<String> {
    data::load_manifest(data_dir)
        .map(|m| m.class_names)
        .unwrap_or_default()
        .into_iter()
        .chain((0..).map(|i| format!("class_{i}")))
        .take(num_classes)
        .collect()
}

fn check_stop(stop_threshold: f64, max_steps: usize) -> Result<(), CliError> {
    if !(stop_threshold > 0.0 && stop_threshold < 1.0) {
        return Err(CliError::config(format!("stop_threshold must lie in (0, 1), got {stop_threshold}")));
    }
    if max_steps == 0 {
        return Err(CliError::config("max_steps must be at least 1"));
    }
    Ok(())
}

fn infer_all(
    model: &Model<f32>,
    records: &[DatasetRecord],
    stop_threshold: f64,
    max_steps: usize,
) -> Result<Vec<PredictionSequence>, CliError> {
    Ok(EXEC
        .map(records, |r| model.infer(&r.image, stop_threshold, max_steps))
        .into_iter()
        .collect::<seqseg::Result<Vec<_>>>()?)
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let cfg: GenDataConfig = resolve(args.config.as_deref(), args)?;
    let out_dir = require(&cfg.out_dir, "out_dir")?;
    let spec = cfg.spec();
    spec.validate()?;
    let splits = Splits::contiguous(cfg.num_images, cfg.val_images, cfg.test_images)?;
    let records = data::generate_dataset(&spec, cfg.num_images, EXEC)?;
    data::save_dataset(&out_dir, &records, Some(&splits), Some(&spec))?;
    write_snapshot(&out_dir, &cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "out_dir": out_dir,
            "num_images": records.len(),
            "train": splits.train.len(),
            "val": splits.val.len(),
            "test": splits.test.len(),
        })
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg: TrainRunConfig = resolve(args.config.as_deref(), args)?;
    let data_dir = require(&cfg.data_dir, "data_dir")?;
    let out_dir = require(&cfg.out_dir, "out_dir")?;
    must_exist(&data_dir, "data_dir")?;
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;
    let resume = match &cfg.resume {
        Some(path) => {
            must_exist(path, "resume")?;
            Some(checkpoint::load(path)?)
        }
        None => None,
    };
    let train = load_records(&data_dir, "train", cfg.image_size)?;
    let val = load_records(&data_dir, "val", cfg.image_size)?;
    write_snapshot(&out_dir, &cfg)?;
    let outcome = trainer::fit(&train_cfg, &train, &val, Some(&out_dir), resume, EXEC, |e: &EpochLog| {
        println!("{}", serde_json::to_string(e).expect("serializable"));
    })?;
    let last = trainer::checkpoint_path(&out_dir, outcome.state.epoch);
    println!(
        "{}",
        serde_json::json!({
            "epochs": outcome.state.epoch,
            "max_objects": outcome.state.curriculum.max_objects,
            "checkpoint": last,
        })
    );
    Ok(())
}

/// A prediction sequence that reproduces `gts` exactly.
pub fn oracle_sequence(gts: &[GroundTruthInstance], num_classes: usize) -> PredictionSequence {
    PredictionSequence {
        steps: gts
            .iter()
            .map(|g| {
                let mut class_probs = vec![0.0; num_classes.max(g.class_id + 1)];
                class_probs[g.class_id] = 1.0;
                InstancePrediction {
                    mask: g.mask.to_soft(),
                    bbox: box_from_mask(&g.mask).unwrap_or(BBox([0.0; 4])),
                    class_probs,
                    stop_score: 1.0,
                }
            })
            .collect(),
    }
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg: EvalConfig = resolve(args.config.as_deref(), args)?;
    let data_dir = require(&cfg.data_dir, "data_dir")?;
    let out_dir = require(&cfg.out_dir, "out_dir")?;
    must_exist(&data_dir, "data_dir")?;
    check_stop(cfg.stop_threshold, cfg.max_steps)?;
    if cfg.iou_thresholds.is_empty() || cfg.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(CliError::config("iou_thresholds must be non-empty values in (0, 1]"));
    }
    let records = load_records(&data_dir, &cfg.split, cfg.image_size)?;
    let (preds, num_classes) = if cfg.oracle_predictions {
        let num_classes = data::load_manifest(&data_dir)
            .map(|m| m.class_names.len())
            .unwrap_or(0)
            .max(records.iter().flat_map(|r| &r.instances).map(|g| g.class_id + 1).max().unwrap_or(1));
        (records.iter().map(|r| oracle_sequence(&r.instances, num_classes)).collect(), num_classes)
    } else {
        let path = cfg
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::config("missing required setting `checkpoint`"))?;
        must_exist(&path, "checkpoint")?;
        let model = checkpoint::load(&path)?.model;
        let n = model.config.decoder.num_classes;
        (infer_all(&model, &records, cfg.stop_threshold, cfg.max_steps)?, n)
    };
    let gts: Vec<Vec<GroundTruthInstance>> = records.iter().map(|r| r.instances.clone()).collect();
    let result: EvalResult = metrics::evaluate(&preds, &gts, num_classes, &cfg.iou_thresholds, EXEC)?;
    write_snapshot(&out_dir, &cfg)?;
    write_file(&out_dir.join("eval.json"), result.to_json() + "\n")?;
    write_file(&out_dir.join("eval.csv"), result.to_csv(&class_names(&data_dir, num_classes)))?;
    println!("{}", serde_json::to_string(&result).expect("serializable"));
    Ok(())
}

#[derive(Serialize)]
struct PredictedStep {
    step: usize,
    class_id: usize,
    class_probs: Vec<f64>,
    stop_score: f64,
    score: f64,
    bbox: [f64; 4],
    area: usize,
    mask: String,
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let cfg: PredictConfig = resolve(args.config.as_deref(), args)?;
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let image_path = require(&cfg.image, "image")?;
    let out_dir = require(&cfg.out_dir, "out_dir")?;
    must_exist(&ckpt, "checkpoint")?;
    must_exist(&image_path, "image")?;
    check_stop(cfg.stop_threshold, cfg.max_steps)?;
    let model = checkpoint::load(&ckpt)?.model;
    let image = data::load_image(&image_path)?;
    let seq = model.infer(&image, cfg.stop_threshold, cfg.max_steps)?;
    write_snapshot(&out_dir, &cfg)?;
    let mut steps = Vec::with_capacity(seq.len());
    let mut masks = Vec::with_capacity(seq.len());
    for (t, p) in seq.steps.iter().enumerate() {
        let mask = binarize(&p.mask, 0.5);
        let name = format!("step_{:02}.png", t + 1);
        data::save_mask(&out_dir.join(&name), &mask)?;
        steps.push(PredictedStep {
            step: t + 1,
            class_id: argmax(&p.class_probs),
            class_probs: p.class_probs.clone(),
            stop_score: p.stop_score,
            score: p.stop_score * p.max_class_prob(),
            bbox: p.bbox.0,
            area: mask.area(),
            mask: name,
        });
        masks.push(mask);
    }
    plot::save_overlay(&out_dir.join("overlay.png"), &image, &masks)?;
    let report = serde_json::json!({ "image": image_path, "steps": steps });
    write_file(&out_dir.join("predictions.json"), to_json_pretty(&report))?;
    println!("{}", serde_json::json!({ "num_steps": steps.len(), "out_dir": out_dir }));
    Ok(())
}

/// Mean activation-order τ per encoder block (counting from the image) over
/// images with at least two non-empty detections.
fn activation_taus(model: &Model<f32>, records: &[DatasetRecord], dets: &[Vec<Detection>]) -> Result<Vec<TauSummary>, CliError> {
    let blocks = model.config.encoder.num_blocks;
    let per_image = EXEC.map_range(records.len(), |i| -> seqseg::Result<Option<Vec<f64>>> {
        let masks: Vec<_> = dets[i].iter().map(|d| d.mask.clone()).filter(|m| !m.is_empty()).collect();
        if masks.len() < 2 {
            return Ok(None);
        }
        let pyramid = encode(&records[i].image, &model.config.encoder, model.encoder_ids(), &model.params)?;
        (0..blocks)
            .map(|b| analysis::activation_order_correlation(&pyramid.features[blocks - 1 - b], &masks))
            .collect::<seqseg::Result<Vec<_>>>()
            .map(Some)
    });
    let mut by_block = vec![Vec::new(); blocks];
    for taus in per_image {
        if let Some(taus) = taus? {
            taus.into_iter().enumerate().for_each(|(b, t)| by_block[b].push(t));
        }
    }
    Ok(by_block.iter().map(|v| TauSummary::of(v)).collect())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let cfg: AnalyzeConfig = resolve(args.config.as_deref(), args)?;
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let data_dir = require(&cfg.data_dir, "data_dir")?;
    let out_dir = require(&cfg.out_dir, "out_dir")?;
    must_exist(&ckpt, "checkpoint")?;
    must_exist(&data_dir, "data_dir")?;
    check_stop(cfg.stop_threshold, cfg.max_steps)?;
    if !(cfg.pair_threshold >= 0.0 && cfg.pair_threshold <= 1.0) {
        return Err(CliError::config("pair_threshold must lie in [0, 1]"));
    }
    let loaded = checkpoint::load(&ckpt)?;
    let model = loaded.model;
    let seed = cfg
        .seed
        .or_else(|| loaded.train_config.as_ref().map(|c| c.seed))
        .unwrap_or(0);
    let records = load_records(&data_dir, &cfg.split, cfg.image_size)?;
    let preds = infer_all(&model, &records, cfg.stop_threshold, cfg.max_steps)?;
    let inputs: Vec<AnalysisInput> = preds
        .iter()
        .zip(&records)
        .map(|(p, r)| AnalysisInput {
            detections: metrics::detections(p),
            gts: r.instances.clone(),
        })
        .collect();
    let mut report: AnalysisReport = analysis::analyze(&inputs, cfg.pair_threshold, cfg.pair_min_count)?;

    let dets: Vec<Vec<Detection>> = inputs.iter().map(|i| i.detections.clone()).collect();
    let untrained = Model::<f32>::new(model.config.clone(), seed)?;
    let trained_taus = activation_taus(&model, &records, &dets)?;
    let untrained_taus = activation_taus(&untrained, &records, &dets)?;
    report.activation = trained_taus
        .into_iter()
        .zip(untrained_taus)
        .enumerate()
        .map(|(block, (trained, untrained))| ActivationReport {
            block,
            untrained,
            trained,
        })
        .collect();

    write_snapshot(&out_dir, &cfg)?;
    write_file(&out_dir.join("analysis.json"), to_json_pretty(&report))?;
    let plots = out_dir.join("plots");
    let fp = &report.false_positives;
    plot::save_bar_chart(
        &plots.join("false_positives.png"),
        &[fp.loc, fp.bg, fp.dup, fp.cls, fp.loc_cls].map(|v| v as f64),
    )?;
    let fns: Vec<f64> = report.false_negatives_by_size.iter().map(|&v| v as f64).collect();
    plot::save_bar_chart(&plots.join("false_negatives_by_size.png"), &fns)?;
    let by_step: Vec<f64> = report.iou_by_timestep.values().copied().collect();
    plot::save_bar_chart(&plots.join("iou_by_timestep.png"), &by_step)?;
    let by_size: Vec<f64> = (0..analysis::NUM_SIZE_BINS)
        .map(|b| report.iou_by_size.get(&b).copied().unwrap_or(0.0))
        .collect();
    plot::save_bar_chart(&plots.join("iou_by_size.png"), &by_size)?;
    let overlays: PathBuf = out_dir.join("overlays");
    for (i, (r, d)) in records.iter().zip(&dets).take(cfg.num_overlays).enumerate() {
        let masks: Vec<_> = d.iter().map(|d| d.mask.clone()).collect();
        plot::save_overlay(&overlays.join(format!("image_{i:04}.png")), &r.image, &masks)?;
    }
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}
