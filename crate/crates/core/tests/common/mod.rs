//! Independent scalar re-implementations used as test oracles. Nothing here
//! calls into the library's numeric code.
#![allow(dead_code)]

use prefopt::{PolicyTable, PreferenceTuple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `row[y] - log(sum(exp(row)))`, max-shifted.
pub fn lp(row: &[f64], y: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row[y] - m - s.ln()
}

/// Flat tables plus the layout needed to address their rows.
#[derive(Clone, Copy)]
pub struct Layout<'a> {
    pub n: usize,
    pub aug: &'a [usize],
}

impl<'a> Layout<'a> {
    pub fn of(p: &'a PolicyTable) -> Self {
        Layout {
            n: p.num_responses(),
            aug: p.aug_map(),
        }
    }

    fn row<'b>(&self, flat: &'b [f64], r: usize) -> &'b [f64] {
        &flat[r * self.n..(r + 1) * self.n]
    }

    pub fn ratio(&self, pi: &[f64], reference: &[f64], r: usize, y: usize) -> f64 {
        lp(self.row(pi, r), y) - lp(self.row(reference, r), y)
    }

    /// Unscaled log-ratio margin on base row `q`.
    pub fn margin(&self, pi: &[f64], reference: &[f64], q: usize, pos: usize, neg: usize) -> f64 {
        self.ratio(pi, reference, q, pos) - self.ratio(pi, reference, q, neg)
    }

    /// Prompt refinement: beta-scaled margin on the augmented row of `q`.
    pub fn delta(&self, pi: &[f64], reference: &[f64], q: usize, pos: usize, neg: usize, beta: f64) -> f64 {
        let a = self.aug[q];
        beta * (self.ratio(pi, reference, a, pos) - self.ratio(pi, reference, a, neg))
    }
}

pub fn log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kind {
    Dpo,
    Ipo,
}

/// Where a tuple's refinement comes from in the oracle.
#[derive(Clone, Copy)]
pub enum Refine<'a> {
    None,
    /// Recomputed from the (perturbed) policy: the undetached graph.
    Live(f64),
    /// Numeric constants: the detached graph.
    Fixed(f64, &'a [f64]),
    /// The naive refinement from the base row, undetached.
    Naive(f64),
}

/// Mean loss over `batch`, written from the textbook formulas.
pub fn loss(kind: Kind, l: Layout, pi: &[f64], reference: &[f64], batch: &[PreferenceTuple], beta: f64, refine: Refine) -> f64 {
    let total: f64 = batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let m = l.margin(pi, reference, t.query, t.y_pos, t.y_neg);
            let (lambda, d) = match refine {
                Refine::None => (0.0, 0.0),
                Refine::Live(lambda) => (lambda, l.delta(pi, reference, t.query, t.y_pos, t.y_neg, beta)),
                Refine::Fixed(lambda, ds) => (lambda, ds[i]),
                Refine::Naive(lambda) => (lambda, beta * m),
            };
            match kind {
                Kind::Dpo => -log_sigmoid(beta * m - lambda * d),
                Kind::Ipo => (m - lambda * d - 1.0 / (2.0 * beta)).powi(2),
            }
        })
        .sum();
    total / batch.len() as f64
}

pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        return 0.0;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / scale
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Augmented table with `q` base rows, logits uniform in `[-scale, scale]`.
pub fn random_table(rng: &mut impl Rng, q: usize, n: usize, scale: f64) -> PolicyTable {
    let rows = (0..2 * q)
        .map(|_| (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .collect();
    PolicyTable::from_rows((q..2 * q).collect(), rows).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, q: usize, n: usize, size: usize) -> Vec<PreferenceTuple> {
    (0..size)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            PreferenceTuple {
                query: rng.random_range(0..q),
                y_pos: a,
                y_neg: b,
                true_gap: None,
                judge_scores: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub pi: PolicyTable,
    pub reference: PolicyTable,
    pub batch: Vec<PreferenceTuple>,
}

pub fn instances(seed: u64, count: usize, q: usize, n: usize, size: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Instance {
            pi: random_table(&mut rng, q, n, 2.0),
            reference: random_table(&mut rng, q, n, 2.0),
            batch: random_batch(&mut rng, q, n, size),
        })
        .collect()
}

/// O(n^2) Kendall tau-b from pair counts.
pub fn brute_kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                c += 1;
            } else {
                d += 1;
            }
        }
    }
    let denom = (((c + d + tx) as f64) * ((c + d + ty) as f64)).sqrt();
    (denom > 0.0).then(|| (c - d) as f64 / denom)
}

/// Average rank: one plus the number of smaller values plus half the other ties.
pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    brute_pearson(&brute_ranks(x), &brute_ranks(y))
}

/// Twenty fixed `(x, y)` pairs of lengths 3..=40, several with heavy ties.
pub fn fixed_vectors() -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = vec![
        (vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0]),
        (vec![1.0, 1.0, 2.0, 2.0], vec![1.0, 2.0, 1.0, 2.0]),
        (vec![0.5, -1.0, 2.5, 2.5, 3.0], vec![1.0, 1.0, 1.0, 2.0, 0.0]),
        (vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0], vec![2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0, 2.0, 8.0]),
        (vec![10.0, 20.0, 30.0, 40.0, 50.0], vec![5.0, 4.0, 3.0, 2.0, 1.0]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for i in 0..15 {
        let n = 6 + 2 * i;
        let levels = if i % 3 == 0 { 3.0 } else { 1e6 };
        let x: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * levels).floor()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| if i % 2 == 0 { (v + rng.random_range(-1.0..2.0)).round() } else { rng.random::<f64>() - 0.3 * v })
            .collect();
        out.push((x, y));
    }
    out
}
