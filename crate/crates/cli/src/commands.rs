use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fruitmon::baseline::nn_match;
use fruitmon::cloud::{load_association_csv, load_ply, save_association_csv, save_ply, ColoredCloud, SceneAnnotation};
use fruitmon::encoder::{EncoderConfig, EncoderModel};
use fruitmon::matcher::{match_scenes, train_matcher, MatchConfig, MatchTrainConfig, MatcherModel};
use fruitmon::metrics::{
    matching_confusion, parse_grid, transfer_ids, write_json, write_threshold_csv, PanopticAccumulator, ThresholdRow,
};
use fruitmon::rng::substream;
use fruitmon::segmentation::{
    instances_from_prediction, seg_forward, train_segmentation, tune_bandwidth, SegModel, SegNetConfig,
    SegPrediction, SegTrainConfig,
};
use fruitmon::synth::{list_pairs, load_pair, write_dataset, OrchardConfig, ScenePair, CURRENT_SCENE, PREV_SCENE};
use fruitmon::{Error, Result};
use serde::Serialize;

use crate::config::ConfigFile;
use crate::{EvalArgs, GenArgs, MatchArgs, SegmentArgs, TrainMatchArgs, TrainSegArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 3,
        Error::Shape(_) | Error::Validation(_) | Error::EmptyInput(_) | Error::Infeasible(_) => 4,
        Error::Io { .. } | Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => 5,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Line-delimited JSON written to a file and echoed to stdout.
struct JsonLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(JsonLog {
            out: BufWriter::new(file),
            path,
        })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        println!("{line}");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

fn default_log(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

fn load_pairs(root: &Path) -> Result<Vec<ScenePair>> {
    let dirs = list_pairs(root)?;
    if dirs.is_empty() {
        return Err(Error::EmptyInput(format!("no scene pairs under {}", root.display())));
    }
    dirs.iter().map(|d| load_pair(d)).collect()
}

fn scenes(pairs: Vec<ScenePair>) -> Vec<(ColoredCloud, SceneAnnotation)> {
    pairs.into_iter().flat_map(|p| [p.prev, p.current]).collect()
}

fn load_annotated(path: &Path) -> Result<(ColoredCloud, SceneAnnotation)> {
    let (cloud, ann) = load_ply(path)?;
    let ann = ann.ok_or_else(|| Error::Validation(format!("{} carries no instance labels", path.display())))?;
    Ok((cloud, ann))
}

pub fn gen(args: GenArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let mut orchard: OrchardConfig = file.section("orchard")?;
    if let Some(seed) = args.seed {
        orchard.rng_seed = seed;
    }
    let pairs = args.pairs.or(file.value("pairs")?).unwrap_or(1);
    let dirs = write_dataset(&args.out, &orchard, pairs)?;
    for dir in dirs {
        for name in [PREV_SCENE, CURRENT_SCENE] {
            let (cloud, ann) = load_annotated(&dir.join(name))?;
            println!(
                "{}: {} points, {} fruits",
                dir.join(name).display(),
                cloud.len(),
                ann.instances.len()
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SegSummary {
    best_epoch: Option<usize>,
    best_val_pq: Option<f64>,
    bandwidth: f64,
}

pub fn train_seg(args: TrainSegArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let mut model_cfg: SegNetConfig = file.section("model")?;
    let mut train_cfg: SegTrainConfig = file.section("train")?;
    model_cfg.rng_seed = substream(args.seed, "init");
    train_cfg.seed = substream(args.seed, "augment");
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let grid = args.bandwidth_grid.as_deref().map(parse_grid).transpose()?;
    let train = scenes(load_pairs(&args.data)?);
    let val = match &args.val {
        Some(v) => scenes(load_pairs(v)?),
        None => Vec::new(),
    };
    let mut log = JsonLog::create(args.log.clone().unwrap_or_else(|| default_log(&args.out)))?;
    let model = SegModel::new(model_cfg)?;
    let mut log_err = None;
    let trained = train_segmentation(model, &train, &val, &train_cfg, |e| {
        if let Err(err) = log.write(e) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err);
    }
    let mut model = trained.model;
    if let (Some(grid), false) = (grid, val.is_empty()) {
        let sweep = tune_bandwidth(&model, &val, &grid, train_cfg.iou_threshold)?;
        model.config.bandwidth = sweep.best;
    }
    model.save(&args.out)?;
    log.write(&SegSummary {
        best_epoch: trained.best_epoch,
        best_val_pq: trained.best_val_pq,
        bandwidth: model.config.bandwidth,
    })?;
    log.finish()
}

#[derive(Serialize)]
struct MatchSummary {
    best_epoch: Option<usize>,
    best_val_mf1: Option<f64>,
}

pub fn train_match(args: TrainMatchArgs) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let mut enc_cfg: EncoderConfig = file.section("encoder")?;
    let mut match_cfg: MatchConfig = file.section("matcher")?;
    let mut train_cfg: MatchTrainConfig = file.section("train")?;
    enc_cfg.rng_seed = substream(args.seed, "init-encoder");
    match_cfg.rng_seed = substream(args.seed, "init-matcher");
    train_cfg.seed = substream(args.seed, "augment");
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    let train = load_pairs(&args.data)?;
    let val = match &args.val {
        Some(v) => load_pairs(v)?,
        None => Vec::new(),
    };
    let encoder = EncoderModel::new(enc_cfg)?;
    let matcher = MatcherModel::new(match_cfg, encoder.config.descriptor_len())?;
    let mut log = JsonLog::create(args.log.clone().unwrap_or_else(|| default_log(&args.out)))?;
    let mut log_err = None;
    let trained = train_matcher(encoder, matcher, &train, &val, &train_cfg, |e| {
        if let Err(err) = log.write(e) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err);
    }
    trained.encoder.save(&args.out_encoder)?;
    trained.matcher.save(&args.out)?;
    log.write(&MatchSummary {
        best_epoch: trained.best_epoch,
        best_val_mf1: trained.best_val_mf1,
    })?;
    log.finish()
}

pub fn segment(args: SegmentArgs) -> Result<()> {
    let (cloud, gt) = load_ply(&args.input)?;
    let model = args.model.as_deref().map(SegModel::load).transpose()?;
    let config = model.as_ref().map_or_else(SegNetConfig::default, |m| m.config.clone());
    let bandwidth = args.bandwidth.unwrap_or(config.bandwidth);
    let pred = if args.oracle_offsets {
        let gt = gt.ok_or_else(|| {
            Error::Validation(format!("{} has no ground truth for --oracle-offsets", args.input.display()))
        })?;
        SegPrediction::from_ground_truth(&cloud, &gt)?
    } else {
        let model = model.ok_or_else(|| Error::Config("--model is required without --oracle-offsets".into()))?;
        seg_forward(&cloud, &model)?
    };
    let instances = instances_from_prediction(&cloud, &pred, bandwidth, config.min_points)?;
    save_ply(&cloud, Some(&instances), &args.out)?;
    println!("{}: {} fruit instances", args.out.display(), instances.instances.len());
    Ok(())
}

pub fn match_clouds(args: MatchArgs) -> Result<()> {
    let (ct, at) = load_annotated(&args.t)?;
    let (cp, ap) = load_annotated(&args.prev)?;
    let association = match args.baseline.as_deref() {
        Some(_) => nn_match(&at.centers(), &ap.centers(), args.epsilon)?,
        None => {
            let (Some(enc), Some(mat)) = (&args.enc, &args.matcher) else {
                return Err(Error::Config("--enc and --matcher are required unless --baseline is given".into()));
            };
            let encoder = EncoderModel::load(enc)?;
            let matcher = MatcherModel::load(mat)?;
            let out = match_scenes((&ct, &at.instances), (&cp, &ap.instances), &encoder, &matcher)?;
            if let Some(p) = &args.probs {
                out.probabilities.write_json(p)?;
            }
            out.association
        }
    };
    save_association_csv(&association, &args.out)?;
    println!(
        "{}: {} of {} fruits matched",
        args.out.display(),
        association.num_matched(),
        association.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    schema_version: u32,
    panoptic: fruitmon::metrics::PanopticReport,
    matching: &'a [ThresholdRow],
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let grid = parse_grid(&args.iou_grid)?;
    let (_, pred_t) = load_annotated(&args.pred[0])?;
    let (_, pred_prev) = load_annotated(&args.pred[1])?;
    let (_, gt_t) = load_annotated(&args.gt[0])?;
    let (_, gt_prev) = load_annotated(&args.gt[1])?;
    let gt_assoc = load_association_csv(&args.assoc_gt)?;
    let pred_assoc = load_association_csv(&args.pred_assoc)?;
    let mut acc = PanopticAccumulator::new();
    acc.add(&pred_t, &gt_t, args.pq_iou)?;
    acc.add(&pred_prev, &gt_prev, args.pq_iou)?;
    let panoptic = acc.report();
    let mut rows = Vec::with_capacity(grid.len());
    for &thr in &grid {
        let truth = transfer_ids(&pred_t, &gt_t, &pred_prev, &gt_prev, &gt_assoc, thr)?;
        rows.push(ThresholdRow::new(thr, matching_confusion(&pred_assoc, &truth.association)?));
    }
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    panoptic.write_csv(args.out.join("panoptic.csv"))?;
    write_threshold_csv(&rows, args.out.join("matching.csv"))?;
    write_json(
        &EvalReport {
            schema_version: 1,
            panoptic,
            matching: &rows,
        },
        args.out.join("report.json"),
    )?;
    println!(
        "PQ={:.4} SQ={:.4} RQ={:.4} (fruit)",
        panoptic.fruit.pq, panoptic.fruit.sq, panoptic.fruit.rq
    );
    for r in &rows {
        let c = &r.confusion;
        println!(
            "iou={:.2} F1p={:.4} F1n={:.4} mF1={:.4} CM={} MM={} FM={} TN={} FN={}",
            r.threshold, r.f1p, r.f1n, r.mf1, c.cm, c.mm, c.fm, c.tn, c.fn_
        );
    }
    let mean = rows.iter().map(|r| r.mf1).sum::<f64>() / rows.len() as f64;
    println!("mean mF1={mean:.4} over {} thresholds", rows.len());
    Ok(())
}
