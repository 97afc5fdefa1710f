use std::rc::Rc;

use super::{Matrix, ParamStore, Tape, Var, BN_MOMENTUM};
use crate::rng::Rng;
use crate::sparsegrid::{kernel_neighbors, Rulebook, SparseVoxelTensor};
use crate::{Error, Result};

/// Batch-norm behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn init_linear(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.init_uniform(rng, format!("{name}.weight"), fan_in, fan_out, fan_in);
    store.init_uniform(rng, format!("{name}.bias"), 1, fan_out, fan_in);
}

/// Conv weights are stored as `(K^3 * C_in) x C_out`, offset-major.
pub fn init_sparse_conv(store: &mut ParamStore, rng: &mut Rng, name: &str, kernel: usize, c_in: usize, c_out: usize) {
    let k3 = kernel.pow(3);
    store.init_uniform(rng, format!("{name}.weight"), k3 * c_in, c_out, k3 * c_in);
}

pub fn init_batch_norm(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert(format!("{name}.gain"), Matrix::filled(1, channels, 1.0));
    store.insert(format!("{name}.bias"), Matrix::zeros(1, channels));
    store.insert_buffer(format!("{name}.running_mean"), Matrix::zeros(1, channels));
    store.insert_buffer(format!("{name}.running_var"), Matrix::filled(1, channels, 1.0));
}

fn init_layer_norm(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert(format!("{name}.gain"), Matrix::filled(1, channels, 1.0));
    store.insert(format!("{name}.bias"), Matrix::zeros(1, channels));
}

/// Parameters of a post-norm transformer encoder layer of width `dim`.
pub fn init_encoder_layer(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, ff_dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
    }
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{name}.{proj}"), dim, dim);
    }
    init_layer_norm(store, &format!("{name}.norm1"), dim);
    init_linear(store, rng, &format!("{name}.ff1"), dim, ff_dim);
    init_linear(store, rng, &format!("{name}.ff2"), ff_dim, dim);
    init_layer_norm(store, &format!("{name}.norm2"), dim);
    Ok(())
}

/// `x W + b`.
pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"));
    let b = tape.param(store, &format!("{name}.bias"));
    let xw = tape.matmul(x, w).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
    tape.add_row(xw, b)
}

/// Batch normalization. Train mode records running-statistic updates on the
/// tape; a single-row batch always uses the running statistics.
pub fn batch_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, mode: Mode) -> Result<Var> {
    let rows = tape.value(x).rows;
    if rows == 0 {
        return Err(Error::Shape(format!("{name}: batch norm on zero rows")));
    }
    let gain = tape.param(store, &format!("{name}.gain"));
    let bias = tape.param(store, &format!("{name}.bias"));
    let mean_key = format!("{name}.running_mean");
    let var_key = format!("{name}.running_var");
    let rm = store
        .buffer(&mean_key)
        .ok_or_else(|| Error::Shape(format!("missing buffer {mean_key}")))?;
    let rv = store
        .buffer(&var_key)
        .ok_or_else(|| Error::Shape(format!("missing buffer {var_key}")))?;
    if mode == Mode::Eval || rows == 1 {
        return tape.batch_norm_eval(x, gain, bias, &rm.data, &rv.data);
    }
    let (out, mean, var) = tape.batch_norm_train(x, gain, bias)?;
    let blend = |old: &[f64], new: &[f64]| {
        let data = old
            .iter()
            .zip(new)
            .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
            .collect::<Vec<_>>();
        Matrix::row_vector(&data)
    };
    let new_mean = blend(&rm.data, &mean);
    let new_var = blend(&rv.data, &var);
    tape.record_buffer(mean_key, new_mean);
    tape.record_buffer(var_key, new_var);
    Ok(out)
}

pub fn sparse_conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, rulebook: Rc<Rulebook>) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"));
    tape.sparse_conv(x, w, rulebook)
        .map_err(|e| Error::Shape(format!("{name}: {e}")))
}

/// Convolves a tensor directly, without keeping gradients.
pub fn sparse_conv_tensor(
    tensor: &SparseVoxelTensor,
    weights: &Matrix,
    kernel: usize,
    stride: usize,
) -> Result<SparseVoxelTensor> {
    let rb = Rc::new(kernel_neighbors(&tensor.coords, tensor.stride, kernel, stride));
    let mut tape = Tape::new();
    let x = tape.leaf(tensor.features.clone());
    let w = tape.leaf(weights.clone());
    let y = tape.sparse_conv(x, w, rb.clone())?;
    Ok(SparseVoxelTensor {
        coords: rb.out_coords.clone(),
        features: tape.value(y).clone(),
        voxel_size: tensor.voxel_size,
        stride: rb.out_stride,
    })
}

/// Channelwise mean over all occupied voxels.
pub fn global_avg_pool(tensor: &SparseVoxelTensor) -> Result<Vec<f64>> {
    if tensor.is_empty() {
        return Err(Error::EmptyInput("global average pool of an empty tensor".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(tensor.features.clone());
    let y = tape.segment_mean(x, Rc::new(vec![0; tensor.len()]), 1);
    Ok(tape.value(y).data.clone())
}

/// Post-norm transformer encoder layer: self-attention, residual, layer
/// norm, then a ReLU feedforward, residual, layer norm.
pub fn encoder_layer(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, heads: usize) -> Result<Var> {
    let dim = tape.value(x).cols;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
    }
    let d_head = dim / heads;
    let q = linear(tape, store, &format!("{name}.q"), x)?;
    let k = linear(tape, store, &format!("{name}.k"), x)?;
    let v = linear(tape, store, &format!("{name}.v"), x)?;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_head, d_head);
        let kh = tape.slice_cols(k, h * d_head, d_head);
        let vh = tape.slice_cols(v, h * d_head, d_head);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { head_outs[0] } else { tape.concat_cols(&head_outs)? };
    let attn_out = linear(tape, store, &format!("{name}.o"), merged)?;
    let res1 = tape.add(x, attn_out)?;
    let n1g = tape.param(store, &format!("{name}.norm1.gain"));
    let n1b = tape.param(store, &format!("{name}.norm1.bias"));
    let x1 = tape.layer_norm(res1, n1g, n1b)?;
    let hidden = linear(tape, store, &format!("{name}.ff1"), x1)?;
    let hidden = tape.relu(hidden);
    let ff = linear(tape, store, &format!("{name}.ff2"), hidden)?;
    let res2 = tape.add(x1, ff)?;
    let n2g = tape.param(store, &format!("{name}.norm2.gain"));
    let n2b = tape.param(store, &format!("{name}.norm2.bias"));
    tape.layer_norm(res2, n2g, n2b)
}
