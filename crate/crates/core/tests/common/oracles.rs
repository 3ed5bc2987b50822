//! Plain scalar re-implementations, written without the tensor graph.

#![allow(dead_code)]

use dflmoe::model::{ClientModel, Expert, Head};
use dflmoe::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `x · w + b` for row-major `x` and a `[in × out]` weight tensor.
pub fn affine(x: &Rows, w: &Tensor, b: Option<&Tensor>) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|o| {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * w.at(i, o);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn body(model: &ClientModel, x: &Tensor) -> Rows {
    let mut h = rows(x);
    let depth = model.body.len();
    for (i, layer) in model.body.iter().enumerate() {
        h = affine(&h, &layer.weight, layer.bias.as_ref());
        if i + 1 < depth {
            for row in &mut h {
                for v in row.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }
    h
}

pub fn head(head: &Head, feature: &Rows) -> Rows {
    affine(feature, &head.weight, head.bias.as_ref())
}

pub fn remote(model: &ClientModel, expert: Expert<'_>, feature: &Rows) -> Rows {
    let common = affine(feature, &model.fst.w_com, None);
    let mapped = affine(&common, &model.fst.per_expert[&expert.id], None);
    head(expert.head, &mapped)
}

/// Attention of one query over keys that double as values.
pub fn attend(query: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let d = query.len() as f64;
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| query.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    (0..keys[0].len())
        .map(|c| keys.iter().zip(&exps).map(|(k, e)| e / z * k[c]).sum())
        .collect()
}

/// Fused output with the local head first and remote experts in the given order.
pub fn moe(model: &ClientModel, x: &Tensor, experts: &[Expert<'_>]) -> Rows {
    let feature = body(model, x);
    let mut preds = vec![head(&model.head, &feature)];
    for &e in experts {
        preds.push(remote(model, e, &feature));
    }
    let queries = affine(&feature, &model.moe.query_proj, None);
    (0..feature.len())
        .map(|r| {
            let keys: Vec<Vec<f64>> = preds.iter().map(|p| p[r].clone()).collect();
            attend(&queries[r], &keys)
        })
        .collect()
}

pub fn cross_entropy(logits: &Rows, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

pub fn max_abs_diff(a: &Rows, b: &Tensor) -> f64 {
    a.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (r, c, *v)))
        .map(|(r, c, v)| (v - b.at(r, c)).abs())
        .fold(0.0, f64::max)
}

/// Σ wᵢ·xᵢ / Σ wᵢ, element by element.
pub fn weighted_mean(values: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..values[0].len())
        .map(|k| {
            values
                .iter()
                .zip(weights)
                .map(|(v, w)| w * v[k])
                .sum::<f64>()
                / total
        })
        .collect()
}
