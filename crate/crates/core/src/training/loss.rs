//! Multi-similarity loss with hard-pair mining.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Descriptor rows must have unit norm within this tolerance.
pub const ROW_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsLossParams {
    /// Positive-pair temperature.
    pub alpha: f64,
    /// Negative-pair temperature.
    pub beta: f64,
    /// Similarity threshold.
    pub lambda: f64,
    /// Mining margin.
    pub epsilon: f64,
}

impl Default for MsLossParams {
    fn default() -> Self {
        MsLossParams {
            alpha: 1.0,
            beta: 50.0,
            lambda: 0.5,
            epsilon: 0.1,
        }
    }
}

impl MsLossParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && self.lambda > -1.0
            && self.lambda < 1.0
            && self.epsilon >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid multi-similarity parameters {self:?}")))
        }
    }
}

/// `(1/t)·log(1 + Σ exp(zₖ))` with `zₖ = t·sₖ`, and its derivative with
/// respect to each `zₖ`, evaluated without overflow.
fn soft_term(z: &[f64], t: f64) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(0.0f64, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    let denom = (-m).exp() + sum;
    // ln_1p keeps precision when every term is tiny
    let log = if m == 0.0 { sum.ln_1p() } else { m + denom.ln() };
    (log / t, e.iter().map(|v| v / denom / t).collect())
}

/// Loss value and `dL/dS` for a similarity matrix `s` (`b × b`, row-major).
pub fn multi_similarity_from_similarities(s: &[f64], labels: &[u64], p: &MsLossParams) -> Result<(f64, Vec<f64>)> {
    p.validate()?;
    let b = labels.len();
    if s.len() != b * b {
        return Err(Error::dim("multi_similarity_loss", format!("{} similarities for {b} labels", s.len())));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; b * b];
    for i in 0..b {
        let row = &s[i * b..(i + 1) * b];
        let pos: Vec<usize> = (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
        let neg: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
        // with no opposing set the threshold is undefined; keep everything
        let mined_pos: Vec<usize> = match neg.iter().map(|&k| row[k]).reduce(f64::max) {
            Some(hardest) => pos.iter().copied().filter(|&k| row[k] < hardest + p.epsilon).collect(),
            None => pos.clone(),
        };
        let mined_neg: Vec<usize> = match pos.iter().map(|&k| row[k]).reduce(f64::min) {
            Some(hardest) => neg.iter().copied().filter(|&k| row[k] > hardest - p.epsilon).collect(),
            None => neg.clone(),
        };
        if !mined_pos.is_empty() {
            let z: Vec<f64> = mined_pos.iter().map(|&k| -p.alpha * (row[k] - p.lambda)).collect();
            let (v, dz) = soft_term(&z, p.alpha);
            total += v;
            for (&k, d) in mined_pos.iter().zip(dz) {
                grad[i * b + k] -= p.alpha * d;
            }
        }
        if !mined_neg.is_empty() {
            let z: Vec<f64> = mined_neg.iter().map(|&k| p.beta * (row[k] - p.lambda)).collect();
            let (v, dz) = soft_term(&z, p.beta);
            total += v;
            for (&k, d) in mined_neg.iter().zip(dz) {
                grad[i * b + k] += p.beta * d;
            }
        }
    }
    let inv_b = 1.0 / b as f64;
    grad.iter_mut().for_each(|g| *g *= inv_b);
    Ok((total * inv_b, grad))
}

/// Records the loss over `descriptors` (`B × D`, unit rows) on `tape`.
pub fn multi_similarity_loss(tape: &mut Tape, descriptors: Var, place_ids: &[u64], p: &MsLossParams) -> Result<Var> {
    let (b, d) = match tape.shape(descriptors) {
        [b, d] => (*b, *d),
        s => return Err(Error::dim("multi_similarity_loss", format!("descriptors must be B × D, got {s:?}"))),
    };
    if b < 2 {
        return Err(Error::Contract(format!("multi-similarity loss needs at least 2 rows, got {b}")));
    }
    if place_ids.len() != b {
        return Err(Error::dim("multi_similarity_loss", format!("{} labels for {b} rows", place_ids.len())));
    }
    let values = tape.value(descriptors);
    for i in 0..b {
        let n = values[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > ROW_NORM_TOL {
            return Err(Error::Contract(format!("descriptor row {i} has norm {n}, expected 1")));
        }
    }
    let t = tape.transpose(descriptors)?;
    let s = tape.matmul(descriptors, t)?;
    let (value, grad) = multi_similarity_from_similarities(tape.value(s), place_ids, p)?;
    tape.scalar_with_grad("multi_similarity", s, value, grad)
}
