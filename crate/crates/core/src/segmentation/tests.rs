use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::nn::grad_check;
use crate::rng::rng_from_seed;
use crate::synth::{generate_scene, OrchardConfig};

fn tiny_config() -> SegNetConfig {
    SegNetConfig {
        encoder_channels: vec![4, 6],
        decoder_channels: vec![4],
        ..Default::default()
    }
}

fn random_scene(seed: u64, n: usize, fruits: usize) -> (ColoredCloud, SceneAnnotation) {
    let mut rng = rng_from_seed(seed);
    let points = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(0.0..0.02))).collect();
    let colors = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(0.0..1.0))).collect();
    let cloud = ColoredCloud::new(points, colors).unwrap();
    let labels: Vec<Option<usize>> = (0..n)
        .map(|_| {
            let l = rng.gen_range(0..=fruits);
            (l < fruits).then_some(l)
        })
        .collect();
    let ann = SceneAnnotation::from_labels(&cloud, &labels).unwrap();
    (cloud, ann)
}

fn small_orchard(seed: u64) -> (ColoredCloud, SceneAnnotation) {
    generate_scene(&OrchardConfig {
        row_length: 0.12,
        fruit_count: [4, 4],
        points_per_fruit: [120, 150],
        canopy_density: 1e5,
        rng_seed: seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn probabilities_sum_to_one() {
    let model = SegModel::new(tiny_config()).unwrap();
    let (cloud, _) = random_scene(1, 80, 2);
    let pred = seg_forward(&cloud, &model).unwrap();
    assert_eq!(pred.len(), 80);
    for r in 0..pred.len() {
        let s: f64 = pred.probs.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(pred.offsets[r].iter().all(|v| v.is_finite()));
    }
}

#[test]
fn single_point_gives_single_row() {
    let model = SegModel::new(SegNetConfig::default()).unwrap();
    let cloud = ColoredCloud::new(vec![[0.01, 0.02, 0.03]], vec![[0.9, 0.1, 0.1]]).unwrap();
    let pred = seg_forward(&cloud, &model).unwrap();
    assert_eq!(pred.probs.shape(), (1, 2));
    assert_eq!(pred.offsets.len(), 1);
}

#[test]
fn empty_cloud_is_rejected() {
    let model = SegModel::new(tiny_config()).unwrap();
    let cloud = ColoredCloud::new(vec![], vec![]).unwrap();
    assert!(matches!(seg_forward(&cloud, &model), Err(Error::EmptyInput(_))));
}

#[test]
fn points_in_one_voxel_share_prediction() {
    let model = SegModel::new(tiny_config()).unwrap();
    let cloud = ColoredCloud::new(
        vec![[0.0101, 0.0, 0.0], [0.0105, 0.0009, 0.0015], [0.05, 0.0, 0.0]],
        vec![[0.2, 0.3, 0.4], [0.6, 0.1, 0.0], [0.5; 3]],
    )
    .unwrap();
    let pred = seg_forward(&cloud, &model).unwrap();
    assert_eq!(pred.probs.row(0), pred.probs.row(1));
    assert_eq!(pred.offsets[0], pred.offsets[1]);
}

#[test]
fn config_validation() {
    assert!(SegNetConfig::default().validate().is_ok());
    let bad = [
        SegNetConfig { encoder_channels: vec![], decoder_channels: vec![], ..Default::default() },
        SegNetConfig { decoder_channels: vec![8], ..Default::default() },
        SegNetConfig { num_classes: 1, ..Default::default() },
        SegNetConfig { offset_dim: 2, ..Default::default() },
        SegNetConfig { voxel_size: 0.0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(SegModel::new(c), Err(Error::Config(_))));
    }
}

#[test]
fn zero_offsets_keep_fruit_positions() {
    let (cloud, ann) = random_scene(2, 50, 3);
    let mut pred = SegPrediction::from_ground_truth(&cloud, &ann).unwrap();
    pred.offsets = vec![[0.0; 3]; cloud.len()];
    let s = shift_points(&cloud, &pred).unwrap();
    let fruit: Vec<usize> = (0..cloud.len()).filter(|&i| ann.per_point_semantic[i] == Semantic::Fruit).collect();
    assert_eq!(s.source, fruit);
    for (p, &i) in s.positions.iter().zip(&s.source) {
        assert_eq!(*p, cloud.points[i]);
    }
}

#[test]
fn ground_truth_offsets_collapse_onto_centers() {
    let (cloud, ann) = small_orchard(3);
    let pred = SegPrediction::from_ground_truth(&cloud, &ann).unwrap();
    let s = shift_points(&cloud, &pred).unwrap();
    let labels = ann.point_labels();
    for (p, &i) in s.positions.iter().zip(&s.source) {
        let c = ann.instances[labels[i].unwrap()].center;
        assert!(crate::dist3(*p, c) < 1e-15);
    }
}

#[test]
fn shift_count_matches_threshold_oracle() {
    let mut rng = rng_from_seed(4);
    let (cloud, _) = random_scene(4, 200, 1);
    let mut probs = Matrix::zeros(200, 2);
    for r in 0..200 {
        let p: f64 = rng.gen();
        probs.set(r, 0, 1.0 - p);
        probs.set(r, 1, p);
    }
    let expected = (0..200).filter(|&r| probs.get(r, 1) > 0.5).count();
    let pred = SegPrediction { probs, offsets: vec![[1e-3; 3]; 200] };
    assert_eq!(shift_points(&cloud, &pred).unwrap().positions.len(), expected);
}

#[test]
fn argmax_and_half_threshold_agree_for_two_classes() {
    let mut rng = rng_from_seed(5);
    for _ in 0..1000 {
        let logits = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let p = crate::nn::softmax(&logits);
        assert_eq!(p[1] > 0.5, logits[1] > logits[0]);
    }
}

#[test]
fn perfect_offsets_recover_ground_truth_partition() {
    for seed in 0..3 {
        let (cloud, ann) = small_orchard(10 + seed);
        let pred = SegPrediction::from_ground_truth(&cloud, &ann).unwrap();
        let out = instances_from_prediction(&cloud, &pred, 0.01125, DEFAULT_MIN_POINTS).unwrap();
        out.validate(cloud.len()).unwrap();
        let mut got: Vec<_> = out.instances.iter().map(|i| i.point_indices.clone()).collect();
        let mut want: Vec<_> = ann.instances.iter().map(|i| i.point_indices.clone()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }
}

#[test]
fn bandwidth_separates_touching_fruits() {
    let r = 0.0094;
    let bw = 0.01125;
    let mut rng = rng_from_seed(6);
    for trial in 0..20 {
        let centers = [[0.0, 0.0, 0.0], [2.0 * r + trial as f64 * 1e-4, 0.0, 0.0]];
        let mut pts = Vec::new();
        for c in centers {
            for _ in 0..400 {
                let n: [f64; 3] = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal) * 0.001);
                pts.push([c[0] + n[0], c[1] + n[1], c[2] + n[2]]);
            }
        }
        let res = mean_shift(&pts, bw).unwrap();
        assert_eq!(res.modes.len(), 2, "trial {trial}");
        assert!(res.cluster_id[..400].iter().all(|&c| c == res.cluster_id[0]));
        assert!(res.cluster_id[400..].iter().all(|&c| c != res.cluster_id[0]));
    }
}

#[test]
fn blob_modes_within_tenth_of_bandwidth() {
    let bw = 0.01;
    for seed in 0..50 {
        let mut rng = rng_from_seed(100 + seed);
        let k = rng.gen_range(1..=4);
        let mut pts = Vec::new();
        let mut means = Vec::new();
        for b in 0..k {
            let c = [b as f64 * 10.0 * bw, rng.gen_range(-0.05..0.05), 0.0];
            let blob: Vec<Vec3> = (0..rng.gen_range(30..120))
                .map(|_| [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal) * bw / 8.0))
                .map(|d| [c[0] + d[0], c[1] + d[1], c[2] + d[2]])
                .collect();
            means.push([0, 1, 2].map(|a| blob.iter().map(|p| p[a]).sum::<f64>() / blob.len() as f64));
            pts.extend(blob);
        }
        let res = mean_shift(&pts, bw).unwrap();
        assert_eq!(res.modes.len(), k, "seed {seed}");
        for m in &means {
            let d = res.modes.iter().map(|x| crate::dist3(*x, *m)).fold(f64::INFINITY, f64::min);
            assert!(d < bw / 10.0, "seed {seed}: {d}");
        }
    }
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let (cloud, ann) = small_orchard(7);
    let pred = SegPrediction::from_ground_truth(&cloud, &ann).unwrap();
    let l = loss_ins(&cloud, &pred, &ann, &LossWeights::default()).unwrap();
    assert!(l.parts.total.abs() < 1e-12, "{:?}", l.parts);
}

/// Lovász hinge of the mispredicted set as an integral over thresholds.
fn lovasz_by_thresholds(errors: &[f64], fg: &[bool]) -> f64 {
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut levels: Vec<f64> = errors.to_vec();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    levels.push(0.0);
    let mut total = 0.0;
    for w in levels.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let mut inter = 0.0;
        let mut union = gts;
        for i in 0..errors.len() {
            if errors[i] >= hi {
                if fg[i] {
                    inter += 1.0;
                } else {
                    union += 1.0;
                }
            }
        }
        let jaccard_loss = 1.0 - (gts - inter) / union;
        total += (hi - lo) * jaccard_loss;
    }
    total
}

#[test]
fn loss_matches_scalar_oracle() {
    let w = LossWeights { ce: 2.0, lovasz: 10.0, offset: 10.0 };
    for seed in 0..10 {
        let (cloud, ann) = random_scene(20 + seed, 12, 2);
        let mut rng = rng_from_seed(seed);
        let n = cloud.len();
        let mut probs = Matrix::zeros(n, 2);
        let mut offsets = Vec::new();
        for r in 0..n {
            let p: f64 = rng.gen_range(0.01..0.99);
            probs.set(r, 0, 1.0 - p);
            probs.set(r, 1, p);
            offsets.push([0; 3].map(|_| rng.gen_range(-0.01..0.01)));
        }
        let pred = SegPrediction { probs: probs.clone(), offsets: offsets.clone() };
        let got = loss_ins(&cloud, &pred, &ann, &w).unwrap().parts;

        let labels: Vec<usize> = ann.per_point_semantic.iter().map(|s| (*s == Semantic::Fruit) as usize).collect();
        let ce = (0..n).map(|r| -probs.get(r, labels[r]).ln()).sum::<f64>() / n as f64;
        let mut lov = 0.0;
        let mut present = 0.0;
        for c in 0..2 {
            let fg: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            if !fg.contains(&true) {
                continue;
            }
            present += 1.0;
            let err: Vec<f64> = (0..n).map(|r| if fg[r] { 1.0 - probs.get(r, c) } else { probs.get(r, c) }).collect();
            lov += lovasz_by_thresholds(&err, &fg);
        }
        lov /= present;
        let mut off = 0.0;
        let mut count = 0.0;
        for inst in &ann.instances {
            for &i in &inst.point_indices {
                count += 1.0;
                for k in 0..3 {
                    off += (offsets[i][k] - (inst.center[k] - cloud.points[i][k])).abs();
                }
            }
        }
        if count > 0.0 {
            off /= count;
        }
        let total = w.ce * ce + w.lovasz * lov + w.offset * off;
        assert!((got.ce - ce).abs() < 1e-9);
        assert!((got.lovasz - lov).abs() < 1e-9, "{} vs {}", got.lovasz, lov);
        assert!((got.offset - off).abs() < 1e-12);
        assert!((got.total - total).abs() < 1e-9);
    }
}

#[test]
fn offset_term_vanishes_without_fruit() {
    let (cloud, _) = random_scene(8, 20, 1);
    let ann = SceneAnnotation::all_background(cloud.len());
    let pred = SegPrediction {
        probs: Matrix::filled(20, 2, 0.5),
        offsets: vec![[0.3; 3]; 20],
    };
    let l = loss_ins(&cloud, &pred, &ann, &LossWeights::default()).unwrap();
    assert_eq!(l.parts.offset, 0.0);
    assert!(l.grad_offsets.data.iter().all(|g| *g == 0.0));
}

#[test]
fn network_loss_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (cloud, ann) = random_scene(40 + seed, 30, 2);
        // An odd number of fruit points keeps the L1 sign sums away from zero,
        // where the offset bias would sit on a flat piece.
        let mut labels = ann.point_labels();
        if labels.iter().flatten().count() % 2 == 0 {
            let last = labels.iter().rposition(|l| l.is_some()).unwrap();
            labels[last] = None;
        }
        let ann = SceneAnnotation::from_labels(&cloud, &labels).unwrap();
        let model = SegModel::new(SegNetConfig { rng_seed: seed, ..tiny_config() }).unwrap();
        let pyramid = Pyramid::build(&cloud, &model.config).unwrap();
        let weights = LossWeights::default();
        // The center tap of the constant input channel shifts every voxel
        // equally and is cancelled by batch norm, so its gradient is exactly
        // zero; that row is held fixed and every other entry is checked.
        let fixed_row = 13 * INPUT_CHANNELS + 3;
        let full = model.params.get("stem.conv1.weight").unwrap().clone();
        let cols = full.cols;
        let without = |m: &Matrix| {
            let rows: Vec<Vec<f64>> = (0..m.rows).filter(|&r| r != fixed_row).map(|r| m.row(r).to_vec()).collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let mut checked = model.params.clone();
        checked.insert("stem.conv1.weight", without(&full));
        let eval = |store: &ParamStore| -> Result<(f64, BTreeMap<String, Matrix>)> {
            let reduced = store.get("stem.conv1.weight").unwrap();
            let mut w = full.clone();
            for r in 0..reduced.rows {
                let dst = if r < fixed_row { r } else { r + 1 };
                w.row_mut(dst).copy_from_slice(reduced.row(r));
            }
            let mut params = store.clone();
            params.insert("stem.conv1.weight", w);
            let m = SegModel { config: model.config.clone(), params };
            let mut tape = Tape::new();
            let v = forward_on_tape(&mut tape, &m, &pyramid, Mode::Train)?;
            let l = loss_on_tape(&mut tape, v.logits, CeInput::Logits, v.offsets, &cloud.points, &ann, &weights)?;
            let mut grads = tape.backward(l.total).params;
            let g = grads.remove("stem.conv1.weight").unwrap();
            assert!(g.row(fixed_row).iter().all(|v| v.abs() < 1e-12));
            grads.insert("stem.conv1.weight".into(), without(&g));
            Ok((l.parts.total, grads))
        };
        assert_eq!(cols, 4);
        let err = grad_check(&checked, 1e-5, eval).unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn learning_rate_decays_per_epoch() {
    let cfg = SegTrainConfig::default();
    for k in [0, 1, 5, 40] {
        assert!((learning_rate(&cfg, k) - 0.01 * 0.97f64.powi(k as i32)).abs() < 1e-15);
    }
}

#[test]
fn zero_epochs_return_initial_model() {
    let model = SegModel::new(tiny_config()).unwrap();
    let scene = random_scene(9, 40, 2);
    let cfg = SegTrainConfig { epochs: 0, ..Default::default() };
    let out = train_segmentation(model.clone(), &[scene.clone()], &[scene], &cfg, |_| {}).unwrap();
    assert_eq!(out.model, model);
    assert!(out.logs.is_empty());
}

#[test]
fn training_lowers_loss_and_is_deterministic() {
    let scene = small_orchard(11);
    let cfg = SegTrainConfig { epochs: 8, augment: false, eval_every: 4, ..Default::default() };
    let run = || {
        let model = SegModel::new(tiny_config()).unwrap();
        train_segmentation(model, &[scene.clone()], &[scene.clone()], &cfg, |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.model, b.model);
    assert_eq!(a.logs, b.logs);
    assert!(a.logs.last().unwrap().loss.total < a.logs[0].loss.total);
    assert!(a.logs[3].val_pq.is_some() && a.logs[2].val_pq.is_none());
}

#[test]
fn checkpoint_round_trip() {
    let model = SegModel::new(tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.bin");
    model.save(&path).unwrap();
    let back = SegModel::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    let (cloud, _) = random_scene(12, 60, 2);
    let a = seg_forward(&cloud, &model).unwrap();
    let b = seg_forward(&cloud, &back).unwrap();
    assert!(a.probs.max_abs_diff(&b.probs) < 1e-5);
}

#[test]
fn foreign_checkpoint_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("other.bin");
    crate::nn::save_checkpoint(&path, "matcher", &serde_json::json!({}), &ParamStore::new()).unwrap();
    assert!(matches!(SegModel::load(&path), Err(Error::Shape(_))));
}

#[test]
fn bandwidth_sweep_prefers_smaller_on_ties() {
    let model = SegModel::new(tiny_config()).unwrap();
    let scene = random_scene(13, 40, 2);
    let one = tune_bandwidth(&model, &[scene.clone()], &[0.02], 0.5).unwrap();
    assert_eq!(one.best, 0.02);
    assert_eq!(one.table.len(), 1);
    let all = tune_bandwidth(&model, &[scene], &[0.03, 0.01, 0.02], 0.5).unwrap();
    let top = all.table.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let expect = all.table.iter().filter(|r| r.1 == top).map(|r| r.0).fold(f64::INFINITY, f64::min);
    assert_eq!(all.best, expect);
    assert!(tune_bandwidth(&SegModel::new(tiny_config()).unwrap(), &[], &[], 0.5).is_err());
}


