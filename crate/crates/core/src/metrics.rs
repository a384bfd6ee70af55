//! PLCC, SRCC, KRCC (tau-b) and RMSE between predicted and subjective scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_pair<T: Scalar>(pred: &[T], target: &[T], min_len: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Domain(format!(
            "score vectors differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < min_len {
        return Err(Error::Domain(format!(
            "need at least {min_len} score pairs, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    Ok(())
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap()
}

/// Sample Pearson correlation.
pub fn plcc<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target, 2)?;
    let (mp, mt) = (mean(pred), mean(target));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::UndefinedMetric(
            "Pearson correlation with a zero-variance input".into(),
        ));
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(r.max(-T::one()).min(T::one()))
}

/// Fractional ranks starting at 1; tied values share their average rank.
pub fn fractional_ranks<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite scores"));
    let mut ranks = vec![T::zero(); v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let avg = T::from_usize(i + 1 + j).unwrap() / T::lit(2.0);
        for &o in &order[i..j] {
            ranks[o] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of mid-ranks.
pub fn srcc<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target, 2)?;
    plcc(&fractional_ranks(pred), &fractional_ranks(target)).map_err(|_| {
        Error::UndefinedMetric("Spearman correlation with an all-tied input".into())
    })
}

/// Pair counts behind Kendall's tau.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KendallCounts {
    /// All unordered pairs, m(m−1)/2.
    pub pairs: u64,
    /// Pairs tied in the first argument.
    pub ties_x: u64,
    /// Pairs tied in the second argument.
    pub ties_y: u64,
    /// Pairs tied in both.
    pub ties_xy: u64,
    /// Concordant minus discordant pairs.
    pub score: i64,
}

impl KendallCounts {
    pub fn tau_b(&self) -> Option<f64> {
        let nx = self.pairs - self.ties_x;
        let ny = self.pairs - self.ties_y;
        if nx == 0 || ny == 0 {
            return None;
        }
        Some(self.score as f64 / ((nx as f64) * (ny as f64)).sqrt())
    }
}

fn tie_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Knight's O(m log m) pair counting.
pub fn kendall_counts<T: Scalar>(x: &[T], y: &[T]) -> KendallCounts {
    let m = x.len();
    let cmp = |a: T, b: T| a.partial_cmp(&b).expect("finite scores");
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| cmp(x[a], x[b]).then(cmp(y[a], y[b])));

    let ties_x = tie_pairs(idx.iter().map(|&i| x[i]));
    let ties_xy = tie_pairs(idx.iter().map(|&i| (x[i], y[i])));

    // merge sort on y counting inversions (strict discordances)
    let mut buf = idx.clone();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < m {
        let mut start = 0;
        while start < m {
            let mid = (start + width).min(m);
            let end = (start + 2 * width).min(m);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid && j < end {
                if y[idx[j]] < y[idx[i]] {
                    buf[k] = idx[j];
                    swaps += (mid - i) as u64;
                    j += 1;
                } else {
                    buf[k] = idx[i];
                    i += 1;
                }
                k += 1;
            }
            buf[k..k + (mid - i)].copy_from_slice(&idx[i..mid]);
            k += mid - i;
            buf[k..k + (end - j)].copy_from_slice(&idx[j..end]);
            start = end;
        }
        std::mem::swap(&mut idx, &mut buf);
        width *= 2;
    }
    let ties_y = tie_pairs(idx.iter().map(|&i| y[i]));

    let pairs = (m as u64) * (m as u64).saturating_sub(1) / 2;
    let score = pairs as i64 - ties_x as i64 - ties_y as i64 + ties_xy as i64 - 2 * swaps as i64;
    KendallCounts {
        pairs,
        ties_x,
        ties_y,
        ties_xy,
        score,
    }
}

/// Kendall tau-b.
pub fn krcc<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target, 2)?;
    let tau = kendall_counts(pred, target)
        .tau_b()
        .ok_or_else(|| Error::UndefinedMetric("Kendall correlation with an all-tied input".into()))?;
    Ok(T::from_f64(tau).unwrap())
}

pub fn rmse<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    check_pair(pred, target, 1)?;
    let sq: T = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok((sq / T::from_usize(pred.len()).unwrap()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub rmse: f64,
}

/// All four metrics; PLCC and RMSE optionally after a fitted logistic mapping.
pub fn evaluate(pred: &[f64], target: &[f64], logistic_map: bool) -> Result<MetricSet> {
    let mapped;
    let linear = if logistic_map {
        mapped = Logistic4::fit(pred, target)?.apply_all(pred);
        &mapped
    } else {
        pred
    };
    Ok(MetricSet {
        plcc: plcc(linear, target)?,
        srcc: srcc(pred, target)?,
        krcc: krcc(pred, target)?,
        rmse: rmse(linear, target)?,
    })
}

/// Monotone four-parameter logistic `(b1 − b2) / (1 + exp(−(x − b3)/|b4|)) + b2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic4 {
    pub b: [f64; 4],
}

impl Logistic4 {
    pub fn apply(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.b;
        (b1 - b2) / (1.0 + (-(x - b3) / b4.abs()).exp()) + b2
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    fn residuals(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(&xi, &yi)| (self.apply(xi) - yi).powi(2)).sum()
    }

    /// Least-squares fit by Levenberg–Marquardt.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check_pair(x, y, 4)?;
        let (ymax, ymin) = y.iter().fold((f64::MIN, f64::MAX), |(a, b), &v| (a.max(v), b.min(v)));
        let mx = mean(x);
        let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        let mut cur = Logistic4 {
            b: [ymax, ymin, mx, if sx > 0.0 { sx } else { 1.0 }],
        };
        let mut lambda = 1e-3;
        let mut cost = cur.residuals(x, y);
        for _ in 0..500 {
            let [b1, b2, b3, b4] = cur.b;
            let s4 = b4.abs().max(1e-12);
            let mut jtj = [[0.0; 4]; 4];
            let mut jtr = [0.0; 4];
            for (&xi, &yi) in x.iter().zip(y) {
                let e = (-(xi - b3) / s4).exp();
                let sig = 1.0 / (1.0 + e);
                let ds = sig * sig * e; // d sig / d z, z = (x − b3)/s4
                let r = (b1 - b2) * sig + b2 - yi;
                let j = [
                    sig,
                    1.0 - sig,
                    -(b1 - b2) * ds / s4,
                    -(b1 - b2) * ds * (xi - b3) / (s4 * s4) * b4.signum(),
                ];
                for a in 0..4 {
                    jtr[a] += j[a] * r;
                    for c in 0..4 {
                        jtj[a][c] += j[a] * j[c];
                    }
                }
            }
            let mut improved = false;
            while lambda < 1e12 {
                let mut a = jtj;
                for d in 0..4 {
                    a[d][d] += lambda * (1.0 + jtj[d][d]);
                }
                let Some(step) = solve4(a, jtr) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial = Logistic4 {
                    b: std::array::from_fn(|i| cur.b[i] - step[i]),
                };
                let c = trial.residuals(x, y);
                if c.is_finite() && c < cost {
                    let done = (cost - c) <= 1e-14 * cost.max(1e-300);
                    cur = trial;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = !done;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        Ok(cur)
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for c in col..4 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}
