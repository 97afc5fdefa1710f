use super::ProbMatrix;
use crate::cloud::TemporalAssociation;
use crate::nn::{cross_entropy, masked_l1, CeInput, Matrix, Tape, Var, LOG_CLAMP};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MatchLoss {
    pub total: f64,
    pub ce: f64,
    pub injectivity: f64,
    /// Derivative of `total` with respect to every probability.
    pub grad: Matrix,
}

/// One-hot targets with the no-match outcome in the last column.
fn targets(gt: &TemporalAssociation, rows: usize, candidates: usize) -> Result<Matrix> {
    if gt.len() != rows {
        return Err(Error::Shape(format!("{} ground-truth rows for {rows} queries", gt.len())));
    }
    let mut m = Matrix::zeros(rows, candidates + 1);
    for (i, p) in gt.pairs().iter().enumerate() {
        let j = match *p {
            Some(j) if j < candidates => j,
            Some(j) => return Err(Error::Shape(format!("ground truth refers to candidate {j} of {candidates}"))),
            None => candidates,
        };
        m.set(i, j, 1.0);
    }
    Ok(m)
}

/// Sum of `|row sum - 1|` over rows plus `|column sum - 1|` over columns,
/// both over candidate columns only.
pub fn injectivity_penalty(h: &ProbMatrix) -> f64 {
    let b = h.num_candidates();
    let mut cols = vec![0.0; b];
    let mut total = 0.0;
    for r in &h.rows {
        let s: f64 = r.probs[..b].iter().sum();
        total += (s - 1.0).abs();
        for (c, p) in cols.iter_mut().zip(&r.probs) {
            *c += p;
        }
    }
    total + cols.iter().map(|c| (c - 1.0).abs()).sum::<f64>()
}

/// Cross-entropy against the ground truth plus `lambda_inj` times the
/// injectivity penalty, on unmasked probabilities.
pub fn loss_match(h: &ProbMatrix, gt: &TemporalAssociation, lambda_inj: f64) -> Result<MatchLoss> {
    let b = h.num_candidates();
    let target = targets(gt, h.rows.len(), b)?;
    let mut grad = Matrix::zeros(h.rows.len(), h.columns);
    let mut ce = 0.0;
    for (i, r) in h.rows.iter().enumerate() {
        for (j, p) in r.probs.iter().enumerate() {
            let t = target.get(i, j);
            if t == 0.0 {
                continue;
            }
            if *p > LOG_CLAMP {
                ce -= t * p.ln();
                grad.set(i, j, -t / p);
            } else {
                ce -= t * LOG_CLAMP.ln();
            }
        }
    }
    let injectivity = injectivity_penalty(h);
    let sign = |x: f64| if x == 0.0 { 0.0 } else { x.signum() };
    let col_sign: Vec<f64> = (0..b)
        .map(|j| sign(h.rows.iter().map(|r| r.probs[j]).sum::<f64>() - 1.0))
        .collect();
    for (i, r) in h.rows.iter().enumerate() {
        let rs = sign(r.probs[..b].iter().sum::<f64>() - 1.0);
        for j in 0..b {
            let g = grad.get(i, j) + lambda_inj * (rs + col_sign[j]);
            grad.set(i, j, g);
        }
    }
    Ok(MatchLoss {
        total: ce + lambda_inj * injectivity,
        ce,
        injectivity,
        grad,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MatchLossVars {
    pub total: Var,
    pub ce: f64,
    pub injectivity: f64,
}

/// The matching loss over `A x (B + 1)` logits.
pub fn loss_on_tape(tape: &mut Tape, logits: Var, gt: &TemporalAssociation, lambda_inj: f64) -> Result<MatchLossVars> {
    let (a, cols) = tape.value(logits).shape();
    let b = cols - 1;
    let target = targets(gt, a, b)?;
    if a == 0 {
        let zero = tape.leaf(Matrix::zeros(1, 1));
        return Ok(MatchLossVars {
            total: zero,
            ce: 0.0,
            injectivity: 0.0,
        });
    }
    let ce = cross_entropy(tape, logits, &target, CeInput::Logits)?;
    let ce_value = tape.scalar(ce);
    if b == 0 {
        return Ok(MatchLossVars {
            total: ce,
            ce: ce_value,
            injectivity: 0.0,
        });
    }
    let probs = tape.softmax_rows(logits);
    let cand = tape.slice_cols(probs, 0, b);
    let ones_b = tape.leaf(Matrix::filled(b, 1, 1.0));
    let row_sums = tape.matmul(cand, ones_b)?;
    let row_mean = masked_l1(tape, row_sums, &Matrix::filled(a, 1, 1.0), &vec![true; a])?;
    let row_term = tape.scale(row_mean, a as f64);
    let ones_a = tape.leaf(Matrix::filled(1, a, 1.0));
    let col_sums = tape.matmul(ones_a, cand)?;
    let col_term = masked_l1(tape, col_sums, &Matrix::filled(1, b, 1.0), &[true])?;
    let inj = tape.add(row_term, col_term)?;
    let inj_value = tape.scalar(inj);
    let weighted = tape.scale(inj, lambda_inj);
    let total = tape.add(ce, weighted)?;
    Ok(MatchLossVars {
        total,
        ce: ce_value,
        injectivity: inj_value,
    })
}
