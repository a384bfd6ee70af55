//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use gsqa_core::regioning::GroupingPoint;

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Rank of each value as 1 + (number smaller) + (number of equal others) / 2.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(i, &a)| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let eq = v.iter().enumerate().filter(|&(j, &b)| j != i && b == a).count() as f64;
            1.0 + less + eq / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Tau-b from an explicit loop over all pairs.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut c, mut d, mut tx, mut ty, mut n0) = (0i64, 0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            n0 += 1;
            let sx = (x[i] - x[j]).signum() * f64::from(x[i] != x[j]);
            let sy = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
            if sx == 0.0 {
                tx += 1;
            }
            if sy == 0.0 {
                ty += 1;
            }
            if sx * sy > 0.0 {
                c += 1;
            } else if sx * sy < 0.0 {
                d += 1;
            }
        }
    }
    let denom = ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt();
    (denom > 0.0).then(|| (c - d) as f64 / denom)
}

/// Greedy farthest point sampling recomputing every min-distance from scratch.
pub fn fps(points: &[GroupingPoint], n: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < n {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| points[i].dist2(&points[c])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

/// Center first, then every other point sorted by (distance, index), truncated to k.
pub fn knn(points: &[GroupingPoint], center: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..points.len()).filter(|&i| i != center).collect();
    others.sort_by(|&a, &b| {
        let da = points[a].dist2(&points[center]);
        let db = points[b].dist2(&points[center]);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    std::iter::once(center).chain(others).take(k).collect()
}

/// `1 − r` with the constant-input convention.
pub fn loss_lin(pred: &[f64], target: &[f64]) -> f64 {
    pearson(pred, target).map_or(1.0, |r| 1.0 - r)
}

pub fn loss_mon(pred: &[f64], target: &[f64]) -> f64 {
    let b = pred.len() as f64;
    let mut total = 0.0;
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if target[i] > target[j] {
                total += (1.0 - (pred[i] - pred[j])).max(0.0);
            }
        }
    }
    total / (b * b)
}
