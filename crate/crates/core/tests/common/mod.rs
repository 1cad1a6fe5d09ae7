//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use calprio::{Tape, Tensor, Var};
use rand::Rng;

/// ECE computed as `Σ_m |Σ_{i∈m} (correct_i − conf_i)| / N`, with each
/// sample's bin found by scanning the bin edges.
pub fn naive_ece(probs: &[Vec<f64>], labels: &[usize], num_bins: usize) -> f64 {
    let m = num_bins as f64;
    let mut gap = vec![0.0; num_bins];
    for (row, &y) in probs.iter().zip(labels) {
        let mut pred = 0;
        for k in 1..row.len() {
            if row[k] > row[pred] {
                pred = k;
            }
        }
        let conf = row[pred];
        let bin = (0..num_bins).find(|&b| conf <= (b + 1) as f64 / m).unwrap_or(num_bins - 1);
        gap[bin] += if pred == y { 1.0 } else { 0.0 } - conf;
    }
    gap.iter().map(|g| g.abs()).sum::<f64>() / labels.len() as f64
}

/// Top-k ids by a full sort on (entropy desc, id asc), returned sorted.
pub fn topk_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut out = ids[..k].to_vec();
    out.sort_unstable();
    out
}

pub fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|z| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Mean of `−Σ_k t_k log p_k` over rows.
pub fn soft_ce(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, t)| -p.iter().zip(t).map(|(pi, ti)| ti * pi.max(1e-12).ln()).sum::<f64>())
        .sum();
    total / probs.len() as f64
}

pub fn one_hot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&y| (0..k).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn random_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, so ReLU kinks are not straddled by the
/// finite-difference step.
pub fn random_nonzero<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Worst relative error between tape gradients and central differences
/// (step `h`) over every coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[which]);
        for i in 0..input.len() {
            let shifted = |delta: f64| {
                let mut ins = inputs.to_vec();
                let mut d = input.data().to_vec();
                d[i] += delta;
                ins[which] = Tensor::new(input.shape().to_vec(), d).unwrap();
                eval(&ins)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
