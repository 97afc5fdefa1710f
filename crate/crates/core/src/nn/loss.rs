use super::tape::{softmax_in_place, LOG_CLAMP};
use super::{Matrix, Tape, Var};
use crate::{Error, Result};

/// What the rows passed to [`cross_entropy`] hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeInput {
    Logits,
    Probabilities,
}

/// `-sum(target * log(pred))` over all rows, with the log clamped at 1e-12.
pub fn cross_entropy(tape: &mut Tape, pred: Var, target: &Matrix, input: CeInput) -> Result<Var> {
    let pv = tape.value(pred);
    if pv.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "cross entropy prediction {:?} vs target {:?}",
            pv.shape(),
            target.shape()
        )));
    }
    if let Some(bad) = target.data.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Validation(format!("target has negative mass {bad}")));
    }
    let log_floor = LOG_CLAMP.ln();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pv.rows, pv.cols);
    for r in 0..pv.rows {
        let t = target.row(r);
        let x = pv.row(r);
        let g = grad.row_mut(r);
        match input {
            CeInput::Probabilities => {
                for j in 0..x.len() {
                    if t[j] == 0.0 {
                        continue;
                    }
                    if x[j] > LOG_CLAMP {
                        loss -= t[j] * x[j].ln();
                        g[j] = -t[j] / x[j];
                    } else {
                        loss -= t[j] * log_floor;
                    }
                }
            }
            CeInput::Logits => {
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let mut p = x.to_vec();
                softmax_in_place(&mut p);
                let mut active_mass = 0.0;
                for j in 0..x.len() {
                    if t[j] == 0.0 {
                        continue;
                    }
                    let lp = x[j] - lse;
                    if lp > log_floor {
                        loss -= t[j] * lp;
                        g[j] -= t[j];
                        active_mass += t[j];
                    } else {
                        loss -= t[j] * log_floor;
                    }
                }
                for j in 0..x.len() {
                    g[j] += p[j] * active_mass;
                }
            }
        }
    }
    Ok(tape.scalar_with_grad(pred, loss, grad))
}

/// Lovász extension of the Jaccard loss for each class, averaged over the
/// classes present in `labels`. `probs` is `N x C`.
pub fn lovasz_softmax(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let pv = tape.value(probs);
    if pv.rows != labels.len() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), pv.rows)));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= pv.cols) {
        return Err(Error::Shape(format!("label {l} out of range for {} classes", pv.cols)));
    }
    let n = pv.rows;
    let mut grad = Matrix::zeros(n, pv.cols);
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..pv.cols {
        let fg: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let gts = fg.iter().filter(|&&f| f).count();
        if gts == 0 {
            continue;
        }
        present += 1;
        let errors: Vec<f64> = (0..n)
            .map(|i| {
                let p = pv.get(i, c);
                if fg[i] {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let jacc_grad = jaccard_gradient(&order.iter().map(|&i| fg[i]).collect::<Vec<_>>(), gts);
        for (pos, &i) in order.iter().enumerate() {
            total += errors[i] * jacc_grad[pos];
            let sign = if fg[i] { -1.0 } else { 1.0 };
            grad.set(i, c, sign * jacc_grad[pos]);
        }
    }
    if present > 0 {
        let inv = 1.0 / present as f64;
        total *= inv;
        for g in &mut grad.data {
            *g *= inv;
        }
    }
    Ok(tape.scalar_with_grad(probs, total, grad))
}

/// Increments of `1 - IoU` as points are added in sorted order.
fn jaccard_gradient(sorted_fg: &[bool], gts: usize) -> Vec<f64> {
    let gts = gts as f64;
    let mut out = Vec::with_capacity(sorted_fg.len());
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    for &f in sorted_fg {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jacc = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jacc - prev);
        prev = jacc;
    }
    out
}

/// Mean over masked rows of the row-wise L1 distance to `target`.
pub fn masked_l1(tape: &mut Tape, x: Var, target: &Matrix, mask: &[bool]) -> Result<Var> {
    let xv = tape.value(x);
    if xv.shape() != target.shape() || mask.len() != xv.rows {
        return Err(Error::Shape("masked L1 operands disagree".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Matrix::zeros(xv.rows, xv.cols);
    let mut loss = 0.0;
    if count > 0 {
        let inv = 1.0 / count as f64;
        for r in (0..xv.rows).filter(|&r| mask[r]) {
            for j in 0..xv.cols {
                let d = xv.get(r, j) - target.get(r, j);
                loss += d.abs() * inv;
                grad.set(r, j, d.signum() * inv * (d != 0.0) as u8 as f64);
            }
        }
    }
    Ok(tape.scalar_with_grad(x, loss, grad))
}
