//! Independent oracles and shared checks for the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::cell::Cell;

use boq::attention::{encoder_forward, multi_head_attention, EncoderParams, MhaParams};
use boq::gradcheck::finite_difference_check_many;
use boq::model::{boq_block_forward, feature_stem, BlockParams, BoqModel, ConvParams, InputMode, ModelConfig, ModelInput, Reduction};
use boq::retrieval::EARTH_RADIUS_M;
use boq::training::{multi_similarity_loss, MsLossParams};
use boq::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn positive(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap()
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let t = random(&[rows, cols], rng);
    let mut data = t.into_data();
    for r in data.chunks_mut(cols) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

// ---------------------------------------------------------------- attention

/// Plain-loop multi-head attention. Returns the `[m × d]` output and the
/// `[h][m][n]` weights.
pub fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, p: &MhaParams) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let d = p.wq.shape()[0];
    let proj = |x: &Tensor, w: &Tensor, b: &Option<Tensor>| -> Vec<Vec<f64>> {
        let rows = x.shape()[0];
        (0..rows)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let mut s = b.as_ref().map_or(0.0, |b| b.data()[j]);
                        for t in 0..d {
                            s += x.at2(i, t) * w.at2(t, j);
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    };
    let (qp, kp, vp) = (proj(q, &p.wq, &p.bq), proj(k, &p.wk, &p.bk), proj(v, &p.wv, &p.bv));
    let (m, n, h) = (qp.len(), kp.len(), p.num_heads);
    let dh = d / h;
    let mut merged = vec![vec![0.0; d]; m];
    let mut weights = vec![vec![vec![0.0; n]; m]; h];
    for head in 0..h {
        for i in 0..m {
            let mut scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|t| qp[i][head * dh + t] * kp[j][head * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for j in 0..n {
                weights[head][i][j] = scores[j] / z;
                for t in 0..dh {
                    merged[i][head * dh + t] += weights[head][i][j] * vp[j][head * dh + t];
                }
            }
        }
    }
    let out = (0..m)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let mut s = p.bo.as_ref().map_or(0.0, |b| b.data()[j]);
                    for t in 0..d {
                        s += merged[i][t] * p.wo.at2(t, j);
                    }
                    s
                })
                .collect()
        })
        .collect();
    (out, weights)
}

/// Max abs difference between the tape implementation and the oracle on one instance.
pub fn attention_discrepancy(q: &Tensor, k: &Tensor, v: &Tensor, p: &MhaParams) -> f64 {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let pv = p.map("", &mut |_, t| tape.constant(t));
    let a = multi_head_attention(&mut tape, qv, kv, vv, &pv).unwrap();
    let (out, weights) = attention_oracle(q, k, v, p);
    let d = p.wq.shape()[0];
    let got = tape.value(a.output);
    let mut worst = 0.0f64;
    for (i, row) in out.iter().enumerate() {
        for j in 0..d {
            worst = worst.max((got[i * d + j] - row[j]).abs());
        }
    }
    let gw = tape.value(a.weights);
    let flat: Vec<f64> = weights.into_iter().flatten().flatten().collect();
    for (a, b) in gw.iter().zip(&flat) {
        worst = worst.max((a - b).abs());
    }
    worst
}

/// A random attention instance with `m, n ≤ 8`, `d ≤ 16`, `h ∈ {1, 2, 4}`.
pub fn random_attention_instance(rng: &mut impl Rng) -> (Tensor, Tensor, Tensor, MhaParams) {
    let h = [1, 2, 4][rng.gen_range(0..3)];
    let d = h * rng.gen_range(1..=16 / h);
    let (m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let bias = rng.gen_bool(0.5);
    let mut p = MhaParams::new(d, h, bias, rng).unwrap();
    if let Some(b) = p.bq.as_mut() {
        *b = random(&[d], rng);
    }
    let q = random(&[m, d], rng);
    let k = random(&[n, d], rng);
    let v = random(&[n, d], rng);
    (q, k, v, p)
}

// -------------------------------------------------------------- convolution

pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = b.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.data()[(ic * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(oc * oh + y) * ow + xo] = s;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).unwrap()
}

// ---------------------------------------------------------------- retrieval

/// Great-circle distance via 3-D unit vectors and the chord length.
pub fn chord_distance_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let v = |lat: f64, lon: f64| {
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (a, b) = (v(lat1, lon1), v(lat2, lon2));
    let chord = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    2.0 * EARTH_RADIUS_M * (chord / 2.0).asin()
}

/// Ranks every row by a full sort: score descending, then id ascending.
pub fn full_sort_ranking(ids: &[String], rows: &[Tensor], query: &[f64]) -> Vec<String> {
    let mut scored: Vec<(f64, &String)> = rows
        .iter()
        .zip(ids)
        .map(|(r, id)| (r.data().iter().zip(query).map(|(a, b)| a * b).sum(), id))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.clone()).collect()
}

/// Recall by explicit set intersection of each top-k prefix.
pub fn recall_oracle(predictions: &[Vec<String>], correct: &[std::collections::BTreeSet<String>], k: usize) -> f64 {
    let mut hit = 0;
    let mut total = 0;
    for (p, c) in predictions.iter().zip(correct) {
        if c.is_empty() {
            continue;
        }
        total += 1;
        let top: std::collections::BTreeSet<String> = p.iter().take(k).cloned().collect();
        if top.intersection(c).next().is_some() {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

// ---------------------------------------------------------------- gradients

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(y), &mut rng(seed));
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check<F>(name: &'static str, inputs: &[Tensor], f: F) -> (&'static str, f64)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    (name, finite_difference_check_many(f, inputs, FD_STEP).unwrap())
}

fn mha_vars(p: &MhaParams, vars: &[Var]) -> MhaParams<Var> {
    let next = Cell::new(0);
    p.map("", &mut |_, _| {
        let v = vars[next.get()];
        next.set(next.get() + 1);
        v
    })
}

fn encoder_vars(p: &EncoderParams, vars: &[Var]) -> EncoderParams<Var> {
    let next = Cell::new(0);
    p.map("", &mut |_, _| {
        let v = vars[next.get()];
        next.set(next.get() + 1);
        v
    })
}

fn tensors_of<T: Clone>(named: Vec<(String, &T)>) -> Vec<T> {
    named.into_iter().map(|(_, t)| t.clone()).collect()
}

fn mha_tensors(p: &MhaParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.map("", &mut |_, t| out.push(t.clone()));
    out
}

/// Every differentiable op and composite, with its worst relative error.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let r = &mut rng(2024);
    let a = random(&[3, 4], r);
    let b = random(&[4, 2], r);
    let c = random(&[3, 4], r);
    let row = random(&[4], r);
    let pos = positive(&[3, 4], r);
    let mut out = vec![
        check("matmul", &[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        check("add", &[a.clone(), c.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }),
        check("sub", &[a.clone(), c.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }),
        check("mul", &[a.clone(), c.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        check("add_row", &[a.clone(), row.clone()], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }),
        check("scale", &[a.clone()], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, 6)
        }),
        check("relu", &[a.clone()], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 7)
        }),
        check("exp", &[a.clone()], |t, v| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, 8)
        }),
        check("log", &[pos.clone()], |t, v| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, 9)
        }),
        check("transpose", &[a.clone()], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 10)
        }),
        check("reshape", &[a.clone()], |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            weighted_sum(t, y, 11)
        }),
        check("concat", &[a.clone(), c.clone()], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, 12)
        }),
        check("narrow", &[a.clone()], |t, v| {
            let y = t.narrow(v[0], 1, 1, 2)?;
            weighted_sum(t, y, 13)
        }),
        check("sum", &[a.clone()], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        }),
        check("mean", &[a.clone()], |t, v| {
            let y = t.exp(v[0])?;
            t.mean(y)
        }),
        check("softmax_rows", &[a.clone()], |t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted_sum(t, y, 14)
        }),
        check("softmax_cols", &[a.clone()], |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted_sum(t, y, 15)
        }),
        check("layer_norm", &[a.clone(), positive(&[4], r), random(&[4], r)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 16)
        }),
        check("l2_normalize", &[a.clone()], |t, v| {
            let y = t.l2_normalize(v[0])?;
            weighted_sum(t, y, 17)
        }),
        check(
            "conv2d",
            &[random(&[2, 5, 6], r), random(&[3, 2, 3, 3], r), random(&[3], r)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(t, y, 18)
            },
        ),
    ];

    let mha = MhaParams::new(8, 2, true, r).unwrap();
    let mut inputs = vec![random(&[3, 8], r), random(&[5, 8], r), random(&[5, 8], r)];
    inputs.extend(mha_tensors(&mha));
    out.push(check("multi_head_attention", &inputs, |t, v| {
        let p = mha_vars(&mha, &v[3..]);
        let a = multi_head_attention(t, v[0], v[1], v[2], &p)?;
        weighted_sum(t, a.output, 19)
    }));

    let enc = EncoderParams::new(8, 2, 2, r).unwrap();
    let mut inputs = vec![random(&[4, 8], r)];
    enc.map("", &mut |_, t| inputs.push(t.clone()));
    out.push(check("encoder", &inputs, |t, v| {
        let p = encoder_vars(&enc, &v[1..]);
        let y = encoder_forward(t, v[0], &p)?;
        weighted_sum(t, y, 20)
    }));

    let stem_cfg = ModelConfig {
        input: InputMode::Image {
            height: 16,
            width: 16,
            stem_channels: vec![4, 4],
        },
        model_dim: 8,
        num_heads: 2,
        ..ModelConfig::default()
    };
    let stem_model = BoqModel::new(stem_cfg, 21).unwrap();
    let image = positive(&[3, 16, 16], r);
    let stem_weights: Vec<Tensor> = stem_model.params().stem.iter().flat_map(|c| [c.weight.clone(), c.bias.clone()]).collect();
    out.push(check("feature_stem", &stem_weights, |t, v| {
        let stem: Vec<ConvParams<Var>> = v.chunks(2).map(|c| ConvParams { weight: c[0], bias: c[1] }).collect();
        let x = t.constant(&image);
        let (tokens, _) = feature_stem(t, x, &stem)?;
        t.mean(tokens)
    }));

    let block_model = BoqModel::new(tiny_config(), 22).unwrap();
    let block = &block_model.params().blocks[0];
    let block_tensors: Vec<Tensor> = std::iter::once(block.queries.clone())
        .chain(mha_tensors(&block.self_attn))
        .chain(mha_tensors(&block.cross_attn))
        .collect();
    let n_sa = mha_tensors(&block.self_attn).len();
    let mut inputs = vec![random(&[5, 8], r)];
    inputs.extend(block_tensors);
    out.push(check("boq_block", &inputs, |t, v| {
        let b = BlockParams {
            queries: v[1],
            self_attn: mha_vars(&block.self_attn, &v[2..2 + n_sa]),
            cross_attn: mha_vars(&block.cross_attn, &v[2 + n_sa..]),
            out_norm: None,
        };
        let (o, _) = boq_block_forward(t, b.queries, v[0], &b, true)?;
        weighted_sum(t, o, 23)
    }));

    let labels = [0u64, 0, 1, 1, 2, 2, 3, 3];
    let raw = random(&[8, 6], r);
    out.push(check("multi_similarity_loss", &[raw], |t, v| {
        let d = t.l2_normalize(v[0])?;
        multi_similarity_loss(t, d, &labels, &MsLossParams::default())
    }));

    out.push(("tiny_model_with_loss", tiny_model_gradient_error(24)));
    out
}

/// N = 4 tokens, d = 8, M = 2, L = 2, h = 2 over 8-d features.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        queries_per_block: 2,
        model_dim: 8,
        num_heads: 2,
        channel_proj: 4,
        row_proj: Some(2),
        ffn_mult: 2,
        self_attention: true,
        output_norm: true,
        reduction: Reduction::Linear,
        input: InputMode::Features {
            feature_dim: 8,
            grid: None,
        },
    }
}

/// Finite-difference check of multi-similarity loss over a batch of four
/// tiny-model descriptors, perturbing every model parameter.
pub fn tiny_model_gradient_error(seed: u64) -> f64 {
    let model = BoqModel::new(tiny_config(), seed).unwrap();
    let r = &mut rng(seed + 1);
    let inputs: Vec<ModelInput> = (0..4).map(|_| ModelInput::Features(random(&[4, 8], r))).collect();
    let labels = [0u64, 0, 1, 1];
    let params: Vec<Tensor> = tensors_of(model.params().named());
    finite_difference_check_many(
        |t, v| {
            let next = Cell::new(0);
            let vars = model.params().map(&mut |_, _| {
                let x = v[next.get()];
                next.set(next.get() + 1);
                x
            });
            let mut rows = Vec::new();
            for input in &inputs {
                let f = model.forward(t, &vars, input, None)?;
                rows.push(t.reshape(f.descriptor, &[1, 8])?);
            }
            let d = t.concat(&rows, 0)?;
            multi_similarity_loss(t, d, &labels, &MsLossParams::default())
        },
        &params,
        FD_STEP,
    )
    .unwrap()
}
