//! Multi-head attention and the transformer encoder unit.
//!
//! Parameter structs are generic over their leaf type: `MhaParams<Tensor>`
//! owns weights, `MhaParams<Var>` is the same set registered on a tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{join, xavier_uniform};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection weights act on row vectors: `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T = Tensor> {
    pub num_heads: usize,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub bq: Option<T>,
    pub bk: Option<T>,
    pub bv: Option<T>,
    pub bo: Option<T>,
}

impl MhaParams<Tensor> {
    pub fn new<R: Rng + ?Sized>(model_dim: usize, num_heads: usize, bias: bool, rng: &mut R) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model dim {model_dim} is not divisible by {num_heads} heads"
            )));
        }
        let mut w = || xavier_uniform(&[model_dim, model_dim], model_dim, model_dim, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let b = || bias.then(|| Tensor::zeros(&[model_dim]));
        Ok(MhaParams {
            num_heads,
            wq,
            wk,
            wv,
            wo,
            bq: b(),
            bk: b(),
            bv: b(),
            bo: b(),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.num_heads
    }
}

impl<T> MhaParams<T> {
    pub fn map<'s, U, F: FnMut(&str, &'s T) -> U>(&'s self, prefix: &str, f: &mut F) -> MhaParams<U> {
        let wq = f(&join(prefix, "wq"), &self.wq);
        let wk = f(&join(prefix, "wk"), &self.wk);
        let wv = f(&join(prefix, "wv"), &self.wv);
        let wo = f(&join(prefix, "wo"), &self.wo);
        let mut opt = |name: &str, b: &'s Option<T>| b.as_ref().map(|b| f(&join(prefix, name), b));
        MhaParams {
            num_heads: self.num_heads,
            wq,
            wk,
            wv,
            wo,
            bq: opt("bq", &self.bq),
            bk: opt("bk", &self.bk),
            bv: opt("bv", &self.bv),
            bo: opt("bo", &self.bo),
        }
    }

    pub fn visit_mut<'s, F: FnMut(&str, &'s mut T)>(&'s mut self, prefix: &str, f: &mut F) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
        for (name, b) in [
            ("bq", &mut self.bq),
            ("bk", &mut self.bk),
            ("bv", &mut self.bv),
            ("bo", &mut self.bo),
        ] {
            if let Some(b) = b {
                f(&join(prefix, name), b);
            }
        }
    }
}

/// Attention output together with the per-head weights `[h × m × n]`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

fn project(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// `softmax(q·kᵀ / √d_h)·v` per head, heads concatenated and projected by `W_o`.
pub fn multi_head_attention(tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var, p: &MhaParams<Var>) -> Result<Attention> {
    let d = tape.shape(p.wq)[0];
    let (m, n) = match (tape.shape(q_in), tape.shape(k_in), tape.shape(v_in)) {
        ([m, dq], [n, dk], [n2, dv]) if *dq == d && *dk == d && *dv == d && n == n2 => (*m, *n),
        (q, k, v) => {
            return Err(Error::dim(
                "multi_head_attention",
                format!("q {q:?}, k {k:?}, v {v:?} with model dim {d}"),
            ))
        }
    };
    if n == 0 {
        return Err(Error::EmptyInput("multi_head_attention"));
    }
    let h = p.num_heads;
    if h == 0 || !d.is_multiple_of(h) {
        return Err(Error::Config(format!("model dim {d} is not divisible by {h} heads")));
    }
    let dh = d / h;
    let q = project(tape, q_in, p.wq, p.bq)?;
    let k = project(tape, k_in, p.wk, p.bk)?;
    let v = project(tape, v_in, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for head in 0..h {
        let (qh, kh, vh) = if h == 1 {
            (q, k, v)
        } else {
            (
                tape.narrow(q, 1, head * dh, dh)?,
                tape.narrow(k, 1, head * dh, dh)?,
                tape.narrow(v, 1, head * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
        weights.push(tape.reshape(attn, &[1, m, n])?);
    }
    let merged = if h == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let output = project(tape, merged, p.wo, p.bo)?;
    let weights = if h == 1 { weights[0] } else { tape.concat(&weights, 0)? };
    Ok(Attention { output, weights })
}

/// Post-norm transformer block: attention and a relu feed-forward layer,
/// each wrapped in a residual connection followed by layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub attn: MhaParams<T>,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
}

impl EncoderParams<Tensor> {
    pub fn new<R: Rng + ?Sized>(model_dim: usize, num_heads: usize, ffn_mult: usize, rng: &mut R) -> Result<Self> {
        if ffn_mult == 0 {
            return Err(Error::Config("feed-forward multiplier must be positive".into()));
        }
        let hidden = ffn_mult * model_dim;
        let attn = MhaParams::new(model_dim, num_heads, true, rng)?;
        Ok(EncoderParams {
            attn,
            ffn_in: xavier_uniform(&[model_dim, hidden], model_dim, hidden, rng),
            ffn_in_bias: Tensor::zeros(&[hidden]),
            ffn_out: xavier_uniform(&[hidden, model_dim], hidden, model_dim, rng),
            ffn_out_bias: Tensor::zeros(&[model_dim]),
            norm1_gain: Tensor::ones(&[model_dim]),
            norm1_bias: Tensor::zeros(&[model_dim]),
            norm2_gain: Tensor::ones(&[model_dim]),
            norm2_bias: Tensor::zeros(&[model_dim]),
        })
    }
}

impl<T> EncoderParams<T> {
    pub fn map<'s, U, F: FnMut(&str, &'s T) -> U>(&'s self, prefix: &str, f: &mut F) -> EncoderParams<U> {
        EncoderParams {
            attn: self.attn.map(&join(prefix, "attn"), f),
            ffn_in: f(&join(prefix, "ffn_in"), &self.ffn_in),
            ffn_in_bias: f(&join(prefix, "ffn_in_bias"), &self.ffn_in_bias),
            ffn_out: f(&join(prefix, "ffn_out"), &self.ffn_out),
            ffn_out_bias: f(&join(prefix, "ffn_out_bias"), &self.ffn_out_bias),
            norm1_gain: f(&join(prefix, "norm1_gain"), &self.norm1_gain),
            norm1_bias: f(&join(prefix, "norm1_bias"), &self.norm1_bias),
            norm2_gain: f(&join(prefix, "norm2_gain"), &self.norm2_gain),
            norm2_bias: f(&join(prefix, "norm2_bias"), &self.norm2_bias),
        }
    }

    pub fn visit_mut<'s, F: FnMut(&str, &'s mut T)>(&'s mut self, prefix: &str, f: &mut F) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(&join(prefix, "ffn_in"), &mut self.ffn_in);
        f(&join(prefix, "ffn_in_bias"), &mut self.ffn_in_bias);
        f(&join(prefix, "ffn_out"), &mut self.ffn_out);
        f(&join(prefix, "ffn_out_bias"), &mut self.ffn_out_bias);
        f(&join(prefix, "norm1_gain"), &mut self.norm1_gain);
        f(&join(prefix, "norm1_bias"), &mut self.norm1_bias);
        f(&join(prefix, "norm2_gain"), &mut self.norm2_gain);
        f(&join(prefix, "norm2_bias"), &mut self.norm2_bias);
    }
}

pub fn encoder_forward(tape: &mut Tape, x: Var, p: &EncoderParams<Var>) -> Result<Var> {
    let attn = multi_head_attention(tape, x, x, x, &p.attn)?;
    let y = tape.add(x, attn.output)?;
    let y = tape.layer_norm(y, p.norm1_gain, p.norm1_bias, LAYER_NORM_EPS)?;
    let hidden = project(tape, y, p.ffn_in, Some(p.ffn_in_bias))?;
    let hidden = tape.relu(hidden)?;
    let ffn = project(tape, hidden, p.ffn_out, Some(p.ffn_out_bias))?;
    let z = tape.add(y, ffn)?;
    tape.layer_norm(z, p.norm2_gain, p.norm2_bias, LAYER_NORM_EPS)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::init::normal;

    fn identity_params(d: usize, h: usize) -> MhaParams<Tensor> {
        MhaParams {
            num_heads: h,
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
            wo: Tensor::eye(d),
            bq: None,
            bk: None,
            bv: None,
            bo: None,
        }
    }

    fn constants(tape: &mut Tape, p: &MhaParams<Tensor>) -> MhaParams<Var> {
        p.map("", &mut |_, t| tape.constant(t))
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut tape = Tape::new();
        let p = constants(&mut tape, &identity_params(3, 1));
        let q = tape.constant(&Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]).unwrap());
        let kv = tape.constant(&Tensor::from_rows(&[vec![0.7, 0.1, -0.4]]).unwrap());
        let out = multi_head_attention(&mut tape, q, kv, kv, &p).unwrap();
        assert_eq!(tape.value(out.output), &[0.7, 0.1, -0.4, 0.7, 0.1, -0.4]);
        assert_eq!(tape.shape(out.weights), &[1, 2, 1]);
    }

    #[test]
    fn orthogonal_query_attends_uniformly() {
        let mut tape = Tape::new();
        let p = constants(&mut tape, &identity_params(3, 1));
        let q = tape.constant(&Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap());
        let keys = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let k = tape.constant(&keys);
        let v = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 0.0, -1.0]]).unwrap());
        let out = multi_head_attention(&mut tape, q, k, v, &p).unwrap();
        let expect = [2.0, 1.0, 1.0];
        for (a, b) in tape.value(out.output).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_mismatched_dims() {
        let mut tape = Tape::new();
        let p = constants(&mut tape, &identity_params(4, 2));
        let q = tape.constant(&Tensor::zeros(&[2, 4]));
        let k = tape.constant(&Tensor::zeros(&[3, 3]));
        assert!(matches!(
            multi_head_attention(&mut tape, q, k, k, &p),
            Err(Error::Dimension { .. })
        ));
        assert!(MhaParams::new(6, 4, true, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = MhaParams::new(8, 4, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = constants(&mut tape, &params);
        let q = tape.constant(&normal(&[5, 8], 1.0, &mut rng));
        let x = tape.constant(&normal(&[7, 8], 1.0, &mut rng));
        let out = multi_head_attention(&mut tape, q, x, x, &p).unwrap();
        assert_eq!(tape.shape(out.weights), &[4, 5, 7]);
        for row in tape.value(out.weights).chunks(7) {
            assert!(row.iter().all(|w| *w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_residual_branches_leave_double_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = EncoderParams::new(8, 2, 4, &mut rng).unwrap();
        params.attn.wo = Tensor::zeros(&[8, 8]);
        params.ffn_out = Tensor::zeros(&[32, 8]);
        params.norm1_gain = normal(&[8], 1.0, &mut rng);
        params.norm1_bias = normal(&[8], 1.0, &mut rng);
        let x = normal(&[5, 8], 1.0, &mut rng);

        let mut tape = Tape::new();
        let p = params.map("", &mut |_, t| tape.constant(t));
        let xv = tape.constant(&x);
        let out = encoder_forward(&mut tape, xv, &p).unwrap();

        // with both branches dead, out = LN2(LN1(x)) computed row by row
        let ln = |row: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(v, (g, b))| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g + b)
                .collect()
        };
        for (r, row) in x.data().chunks(8).enumerate() {
            let y = ln(row, params.norm1_gain.data(), params.norm1_bias.data());
            let z = ln(&y, params.norm2_gain.data(), params.norm2_bias.data());
            for (a, b) in tape.value(out)[r * 8..(r + 1) * 8].iter().zip(z) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn visit_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = EncoderParams::new(4, 2, 4, &mut rng).unwrap();
        let mut names = Vec::new();
        p.visit_mut("enc", &mut |name, _| names.push(name.to_string()));
        assert_eq!(names[0], "enc.attn.wq");
        assert!(names.contains(&"enc.attn.bo".to_string()));
        assert_eq!(names.last().unwrap(), "enc.norm2_bias");
        assert_eq!(names.len(), 16);
    }
}
