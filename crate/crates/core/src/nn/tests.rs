use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng as _;

use super::*;
use crate::rng::{rng_from_seed, Rng};
use crate::sparsegrid::{kernel_neighbors, kernel_offsets, SparseVoxelTensor, VoxelCoord};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix { rows, cols, data }
}

/// `s^T out r` with fixed random `s`, `r`: a scalar that touches every entry.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (rows, cols) = tape.value(out).shape();
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let s = tape.leaf(random_matrix(&mut rng, 1, rows));
    let r = tape.leaf(random_matrix(&mut rng, cols, 1));
    let left = tape.matmul(s, out).unwrap();
    tape.matmul(left, r).unwrap()
}

fn random_tensor(rng: &mut Rng, n: usize, extent: i32, channels: usize) -> SparseVoxelTensor {
    let mut coords = Vec::new();
    while coords.len() < n {
        let c = VoxelCoord::new(rng.gen_range(0..extent), rng.gen_range(0..extent), rng.gen_range(0..extent));
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    coords.sort();
    SparseVoxelTensor {
        features: random_matrix(rng, coords.len(), channels),
        coords,
        voxel_size: 1.0,
        stride: 1,
    }
}

#[test]
fn kernel_one_identity_conv_is_identity() {
    let mut rng = rng_from_seed(1);
    let t = random_tensor(&mut rng, 20, 5, 3);
    let out = sparse_conv_tensor(&t, &Matrix::identity(3), 1, 1).unwrap();
    assert_eq!(out.coords, t.coords);
    assert_eq!(out.features, t.features);
}

#[test]
fn single_voxel_sees_only_the_center_tap() {
    let mut rng = rng_from_seed(2);
    let t = SparseVoxelTensor {
        coords: vec![VoxelCoord::new(3, -1, 2)],
        features: random_matrix(&mut rng, 1, 2),
        voxel_size: 1.0,
        stride: 1,
    };
    let w = random_matrix(&mut rng, 27 * 2, 4);
    let out = sparse_conv_tensor(&t, &w, 3, 1).unwrap();
    let center = Matrix::from_vec(2, 4, w.data[13 * 8..14 * 8].to_vec()).unwrap();
    let expect = t.features.matmul(&center);
    assert!(out.features.max_abs_diff(&expect) < 1e-15);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut rng = rng_from_seed(3);
    let t = random_tensor(&mut rng, 5, 3, 3);
    let w = random_matrix(&mut rng, 27 * 2, 4);
    assert!(matches!(sparse_conv_tensor(&t, &w, 3, 1), Err(crate::Error::Shape(_))));
}

/// Dense convolution over the bounding box, read out at occupied outputs.
fn dense_conv(t: &SparseVoxelTensor, w: &Matrix, kernel: usize, out_coords: &[VoxelCoord]) -> Matrix {
    let cin = t.channels();
    let cout = w.cols;
    let (lo, hi) = (-2, 8);
    let side = (hi - lo) as usize;
    let at = |i: i32, j: i32, k: i32| ((i - lo) as usize * side + (j - lo) as usize) * side + (k - lo) as usize;
    let mut grid = vec![0.0; side * side * side * cin];
    for (r, c) in t.coords.iter().enumerate() {
        let base = at(c.i, c.j, c.k) * cin;
        grid[base..base + cin].copy_from_slice(t.features.row(r));
    }
    let half = (kernel / 2) as i32;
    let mut out = Matrix::zeros(out_coords.len(), cout);
    for (o, c) in out_coords.iter().enumerate() {
        let mut tap = 0;
        for dx in -half..=half {
            for dy in -half..=half {
                for dz in -half..=half {
                    let base = at(c.i + dx, c.j + dy, c.k + dz) * cin;
                    for ci in 0..cin {
                        for co in 0..cout {
                            let v = out.get(o, co) + grid[base + ci] * w.get(tap * cin + ci, co);
                            out.set(o, co, v);
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
    out
}

#[test]
fn sparse_conv_matches_dense_oracle() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(100 + seed);
        let t = random_tensor(&mut rng, 50, 6, 3);
        let w = random_matrix(&mut rng, 27 * 3, 5);
        for stride in [1, 2] {
            let out = sparse_conv_tensor(&t, &w, 3, stride).unwrap();
            let expect = dense_conv(&t, &w, 3, &out.coords);
            assert!(out.features.max_abs_diff(&expect) < 1e-12, "seed {seed} stride {stride}");
        }
    }
}

#[test]
fn kernel_offsets_are_ordered_like_the_dense_oracle() {
    let offs = kernel_offsets(3);
    assert_eq!(offs[0], [-1, -1, -1]);
    assert_eq!(offs[1], [-1, -1, 0]);
    assert_eq!(offs[13], [0, 0, 0]);
}

fn bn_store(c: usize) -> ParamStore {
    let mut s = ParamStore::new();
    init_batch_norm(&mut s, "bn", c);
    s
}

fn run_bn(store: &ParamStore, x: Matrix, mode: Mode) -> (Matrix, Vec<(String, Matrix)>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = batch_norm(&mut tape, store, "bn", xv, mode).unwrap();
    (tape.value(y).clone(), tape.take_buffer_updates())
}

#[test]
fn batch_norm_eval_with_unit_stats_is_nearly_identity() {
    let mut rng = rng_from_seed(4);
    let x = random_matrix(&mut rng, 7, 3);
    let (y, updates) = run_bn(&bn_store(3), x.clone(), Mode::Eval);
    assert!(y.max_abs_diff(&x.scale(1.0 / (1.0 + BN_EPS).sqrt())) < 1e-15);
    assert!(y.max_abs_diff(&x) < 1e-5);
    assert!(updates.is_empty());
}

#[test]
fn batch_norm_constant_channel_gives_bias() {
    let mut store = bn_store(2);
    store.insert("bn.bias", Matrix::row_vector(&[0.3, -0.7]));
    store.insert("bn.gain", Matrix::row_vector(&[2.0, 5.0]));
    let x = Matrix::from_rows(&vec![vec![4.0, -1.0]; 5]).unwrap();
    let (y, _) = run_bn(&store, x, Mode::Train);
    for r in 0..5 {
        assert_eq!(y.row(r), &[0.3, -0.7]);
    }
}

#[test]
fn batch_norm_train_moments_and_running_stats() {
    let mut rng = rng_from_seed(5);
    let mut store = bn_store(4);
    let gain = [0.5, 1.0, 2.0, 3.0];
    let bias = [-1.0, 0.0, 0.5, 2.0];
    store.insert("bn.gain", Matrix::row_vector(&gain));
    store.insert("bn.bias", Matrix::row_vector(&bias));
    let x = random_matrix(&mut rng, 200, 4).scale(3.0);
    let (y, updates) = run_bn(&store, x.clone(), Mode::Train);
    let n = 200.0;
    for j in 0..4 {
        let col: Vec<f64> = (0..200).map(|r| y.get(r, j)).collect();
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - bias[j]).abs() < 1e-4);
        assert!((std - gain[j]).abs() < 1e-4 * gain[j].max(1.0));
    }
    let updates: HashMap<_, _> = updates.into_iter().collect();
    let xs: Vec<f64> = (0..200).map(|r| x.get(r, 0)).collect();
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((updates["bn.running_mean"].data[0] - 0.1 * m).abs() < 1e-12);
    assert!((updates["bn.running_var"].data[0] - (0.9 + 0.1 * var)).abs() < 1e-12);
}

#[test]
fn batch_norm_single_row_uses_running_stats() {
    let store = bn_store(2);
    let x = Matrix::row_vector(&[0.4, -0.2]);
    let (train, updates) = run_bn(&store, x.clone(), Mode::Train);
    let (eval, _) = run_bn(&store, x, Mode::Eval);
    assert_eq!(train, eval);
    assert!(updates.is_empty());
}

#[test]
fn batch_norm_zero_rows_is_a_shape_error() {
    let store = bn_store(2);
    let mut tape = Tape::new();
    let x = tape.leaf(Matrix::zeros(0, 2));
    assert!(matches!(batch_norm(&mut tape, &store, "bn", x, Mode::Train), Err(crate::Error::Shape(_))));
}

#[test]
fn relu_variants_match_scalar_loop() {
    let mut rng = rng_from_seed(6);
    let x = random_matrix(&mut rng, 10, 10);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let r = tape.relu(xv);
    let l = tape.leaky_relu(xv, 0.01);
    for (i, v) in x.data.iter().enumerate() {
        assert_eq!(tape.value(r).data[i], if *v > 0.0 { *v } else { 0.0 });
        assert_eq!(tape.value(l).data[i], if *v > 0.0 { *v } else { 0.01 * v });
    }
    let t = tape.leaf(Matrix::row_vector(&[-1.0]));
    let (a, b) = (tape.relu(t), tape.leaky_relu(t, 0.01));
    assert_eq!(tape.scalar(a), 0.0);
    assert_eq!(tape.scalar(b), -0.01);
}

fn linear_store(w: Matrix, b: Matrix) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("fc.weight", w);
    s.insert("fc.bias", b);
    s
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = rng_from_seed(7);
    let x = random_matrix(&mut rng, 6, 5);
    let w = random_matrix(&mut rng, 5, 4);
    let b = random_matrix(&mut rng, 1, 4);
    let store = linear_store(w.clone(), b.clone());
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = linear(&mut tape, &store, "fc", xv).unwrap();
    for i in 0..6 {
        for j in 0..4 {
            let mut s = b.data[j];
            for k in 0..5 {
                s += x.get(i, k) * w.get(k, j);
            }
            let got = tape.value(y).get(i, j);
            assert!((got - s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }
    let id = linear_store(Matrix::identity(5), Matrix::zeros(1, 5));
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = linear(&mut tape, &id, "fc", xv).unwrap();
    assert_eq!(tape.value(y), &x);
    let one = linear_store(Matrix::row_vector(&[3.0]), Matrix::row_vector(&[0.5]));
    let mut tape = Tape::new();
    let xv = tape.leaf(Matrix::row_vector(&[2.0]));
    let y = linear(&mut tape, &one, "fc", xv).unwrap();
    assert_eq!(tape.scalar(y), 6.5);
    let mut tape = Tape::new();
    let xv = tape.leaf(Matrix::zeros(2, 3));
    assert!(linear(&mut tape, &id, "fc", xv).is_err());
}

#[test]
fn softmax_properties() {
    assert_eq!(softmax(&[0.7; 4]), vec![0.25; 4]);
    let p = softmax(&[1000.0, 0.0, 0.0]);
    assert!((p[0] - 1.0).abs() < 1e-15 && p.iter().all(|v| v.is_finite()));
    let mut rng = rng_from_seed(8);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|v| v + 13.25).collect();
        let q = softmax(&shifted);
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
        // Oracle: exp-normalize in extended precision via pairwise ratios.
        for i in 0..7 {
            let denom: f64 = logits.iter().map(|l| (l - logits[i]).exp()).sum();
            assert!((p[i] - 1.0 / denom).abs() < 1e-12);
        }
    }
}

#[test]
fn global_avg_pool_cases() {
    let one = SparseVoxelTensor {
        coords: vec![VoxelCoord::new(0, 0, 0)],
        features: Matrix::row_vector(&[1.0, -2.0]),
        voxel_size: 1.0,
        stride: 1,
    };
    assert_eq!(global_avg_pool(&one).unwrap(), vec![1.0, -2.0]);
    let pair = SparseVoxelTensor {
        coords: vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 0, 0)],
        features: Matrix::from_rows(&[vec![0.3, -0.4], vec![-0.3, 0.4]]).unwrap(),
        voxel_size: 1.0,
        stride: 1,
    };
    assert_eq!(global_avg_pool(&pair).unwrap(), vec![0.0, 0.0]);
    let mut rng = rng_from_seed(9);
    let t = random_tensor(&mut rng, 30, 5, 4);
    let got = global_avg_pool(&t).unwrap();
    for j in 0..4 {
        let m = (0..30).map(|r| t.features.get(r, j)).sum::<f64>() / 30.0;
        assert!((got[j] - m).abs() < 1e-12);
    }
    let empty = SparseVoxelTensor {
        coords: vec![],
        features: Matrix::zeros(0, 4),
        voxel_size: 1.0,
        stride: 1,
    };
    assert!(matches!(global_avg_pool(&empty), Err(crate::Error::EmptyInput(_))));
}

fn attention_store(seed: u64, dim: usize, ff: usize, heads: usize) -> ParamStore {
    let mut rng = rng_from_seed(seed);
    let mut s = ParamStore::new();
    init_encoder_layer(&mut s, &mut rng, "enc", dim, ff, heads).unwrap();
    s
}

fn run_layer(store: &ParamStore, x: &Matrix, heads: usize) -> Matrix {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = encoder_layer(&mut tape, store, "enc", xv, heads).unwrap();
    tape.value(y).clone()
}

fn layer_norm_rows(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = x.row(r);
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64;
        for j in 0..x.cols {
            out.set(r, j, (row[j] - m) / (v + 1e-5).sqrt() * gain.data[j] + bias.data[j]);
        }
    }
    out
}

fn affine(x: &Matrix, store: &ParamStore, name: &str) -> Matrix {
    let mut y = x.matmul(store.get(&format!("{name}.weight")).unwrap());
    let b = store.get(&format!("{name}.bias")).unwrap();
    for r in 0..y.rows {
        for (a, c) in y.row_mut(r).iter_mut().zip(&b.data) {
            *a += c;
        }
    }
    y
}

#[test]
fn single_token_attention_reduces_to_value_projection() {
    let store = attention_store(10, 8, 16, 2);
    let mut rng = rng_from_seed(11);
    let x = random_matrix(&mut rng, 1, 8);
    let got = run_layer(&store, &x, 2);
    let attn = affine(&affine(&x, &store, "enc.v"), &store, "enc.o");
    let mut res = x.clone();
    res.add_assign(&attn);
    let x1 = layer_norm_rows(&res, store.get("enc.norm1.gain").unwrap(), store.get("enc.norm1.bias").unwrap());
    let mut h = affine(&x1, &store, "enc.ff1");
    h.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut res2 = x1.clone();
    res2.add_assign(&affine(&h, &store, "enc.ff2"));
    let expect = layer_norm_rows(&res2, store.get("enc.norm2.gain").unwrap(), store.get("enc.norm2.bias").unwrap());
    assert!(got.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn encoder_layer_is_permutation_equivariant() {
    for seed in 0..5 {
        let store = attention_store(20 + seed, 8, 12, 4);
        let mut rng = rng_from_seed(30 + seed);
        let x = random_matrix(&mut rng, 6, 8);
        let perm = [3, 0, 5, 1, 4, 2];
        let px = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let y = run_layer(&store, &x, 4);
        let py = run_layer(&store, &px, 4);
        for (r, &i) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((py.get(r, j) - y.get(i, j)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_layer_full_width_keeps_shape() {
    let store = attention_store(40, 512, 1024, 8);
    let mut rng = rng_from_seed(41);
    let x = random_matrix(&mut rng, 6, 512);
    assert_eq!(run_layer(&store, &x, 8).shape(), (6, 512));
}

#[test]
fn encoder_layer_rejects_indivisible_heads() {
    let mut rng = rng_from_seed(1);
    let mut s = ParamStore::new();
    assert!(matches!(
        init_encoder_layer(&mut s, &mut rng, "enc", 10, 8, 3),
        Err(crate::Error::Config(_))
    ));
}

fn grads_of(tape: &Tape, loss: Var) -> BTreeMap<String, Matrix> {
    tape.backward(loss).params
}

#[test]
fn grad_check_linear() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(200 + seed);
        let mut store = linear_store(random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 1, 3));
        store.insert("x", random_matrix(&mut rng, 5, 4));
        let err = grad_check(&store, 1e-4, |s| {
            let mut tape = Tape::new();
            let x = tape.param(s, "x");
            let y = linear(&mut tape, s, "fc", x)?;
            let l = probe(&mut tape, y, seed);
            Ok((tape.scalar(l), grads_of(&tape, l)))
        })
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_batch_norm_train() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(300 + seed);
        let mut store = bn_store(3);
        store.insert("bn.gain", random_matrix(&mut rng, 1, 3));
        store.insert("bn.bias", random_matrix(&mut rng, 1, 3));
        store.insert("x", random_matrix(&mut rng, 6, 3));
        let err = grad_check(&store, 1e-4, |s| {
            let mut tape = Tape::new();
            let x = tape.param(s, "x");
            let y = batch_norm(&mut tape, s, "bn", x, Mode::Train)?;
            let y = tape.leaky_relu(y, 0.01);
            let l = probe(&mut tape, y, seed);
            Ok((tape.scalar(l), grads_of(&tape, l)))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_encoder_layer() {
    for seed in 0..20 {
        let mut store = attention_store(400 + seed, 4, 6, 2);
        let mut rng = rng_from_seed(500 + seed);
        store.insert("x", random_matrix(&mut rng, 3, 4));
        // The key bias shifts every score of a query row equally, so its
        // gradient is exactly zero and finite differences only see rounding.
        let key_bias = store.get("enc.k.bias").unwrap().clone();
        let mut checked = ParamStore::new();
        for (name, value) in store.params() {
            if name != "enc.k.bias" {
                checked.insert(name.clone(), value.clone());
            }
        }
        let err = grad_check(&checked, 1e-4, |s| {
            let mut s = s.clone();
            s.insert("enc.k.bias", key_bias.clone());
            let s = &s;
            let mut tape = Tape::new();
            let x = tape.param(s, "x");
            let y = encoder_layer(&mut tape, s, "enc", x, 2)?;
            let l = probe(&mut tape, y, seed);
            Ok((tape.scalar(l), grads_of(&tape, l)))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_losses() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(600 + seed);
        let mut store = ParamStore::new();
        store.insert("z", random_matrix(&mut rng, 6, 3).scale(2.0));
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        let mut target = Matrix::zeros(6, 3);
        for (r, &l) in labels.iter().enumerate() {
            target.set(r, l, 1.0);
        }
        let offsets = random_matrix(&mut rng, 6, 3);
        let mask: Vec<bool> = (0..6).map(|i| i % 2 == 0).collect();
        let err = grad_check(&store, 1e-6, |s| {
            let mut tape = Tape::new();
            let z = tape.param(s, "z");
            let p = tape.softmax_rows(z);
            let a = cross_entropy(&mut tape, z, &target, CeInput::Logits)?;
            let b = cross_entropy(&mut tape, p, &target, CeInput::Probabilities)?;
            let c = lovasz_softmax(&mut tape, p, &labels)?;
            let d = masked_l1(&mut tape, z, &offsets, &mask)?;
            let ab = tape.add(a, b)?;
            let cd = tape.add(c, d)?;
            let l = tape.add(ab, cd)?;
            Ok((tape.scalar(l), grads_of(&tape, l)))
        })
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_sparse_pipeline() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(700 + seed);
        let t = random_tensor(&mut rng, 10, 3, 2);
        let rb1 = Rc::new(kernel_neighbors(&t.coords, 1, 3, 1));
        let rb2 = Rc::new(kernel_neighbors(&rb1.out_coords, 1, 3, 2));
        let mut store = ParamStore::new();
        init_sparse_conv(&mut store, &mut rng, "c1", 3, 2, 3);
        init_batch_norm(&mut store, "bn1", 3);
        init_sparse_conv(&mut store, &mut rng, "c2", 3, 3, 2);
        store.insert("x", t.features.clone());
        let groups = Rc::new(vec![0; rb2.out_count()]);
        let err = grad_check(&store, 1e-4, |s| {
            let mut tape = Tape::new();
            let x = tape.param(s, "x");
            let h = sparse_conv(&mut tape, s, "c1", x, rb1.clone())?;
            let h = batch_norm(&mut tape, s, "bn1", h, Mode::Train)?;
            let h = tape.leaky_relu(h, 0.1);
            let h = sparse_conv(&mut tape, s, "c2", h, rb2.clone())?;
            let g = tape.segment_mean(h, groups.clone(), 1);
            let l = probe(&mut tape, g, seed);
            Ok((tape.scalar(l), grads_of(&tape, l)))
        })
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn grad_check_structural_ops() {
    for seed in 0..20 {
        let mut rng = rng_from_seed(800 + seed);
        let mut store = ParamStore::new();
        store.insert("a", random_matrix(&mut rng, 4, 3));
        store.insert("b", random_matrix(&mut rng, 4, 2));
        store.insert("g", random_matrix(&mut rng, 1, 5));
        store.insert("h", random_matrix(&mut rng, 1, 5));
        let err = grad_check(&store, 1e-5, |s| {
            let mut tape = Tape::new();
            let a = tape.param(s, "a");
            let b = tape.param(s, "b");
            let ab = tape.concat_cols(&[a, b])?;
            let top = tape.slice_rows(ab, 1, 2);
            let stacked = tape.concat_rows(&[ab, top])?;
            let picked = tape.gather_rows(stacked, Rc::new(vec![5, 0, 0, 3]));
            let (g, h) = (tape.param(s, "g"), tape.param(s, "h"));
            let n = tape.layer_norm(picked, g, h)?;
            let cols = tape.slice_cols(n, 1, 3);
            let t = tape.transpose(cols);
            let sm = tape.softmax_rows(t);
            let sc = tape.scale(sm, 1.5);
            let total = tape.sum(sc);
            let l = probe(&mut tape, n, seed);
            let l = tape.add(l, total)?;
            Ok((tape.scalar(l), grads_of(&tape, l)))
        })
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let store = attention_store(900, 8, 16, 2);
    let mut rng = rng_from_seed(901);
    let x = random_matrix(&mut rng, 5, 8);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = encoder_layer(&mut tape, &store, "enc", xv, 2).unwrap();
        let l = probe(&mut tape, y, 1);
        let g = tape.backward(l);
        let dx = g.of(xv).unwrap().clone();
        (g.params, dx)
    };
    assert_eq!(run(), run());
}
