//! Kernel two-sample test on 2-D point sets.

use std::cmp::Ordering;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

pub const DEFAULT_RESAMPLES: usize = 5000;
/// Below this many resamples the p-value is reported with a warning.
pub const MIN_STABLE_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullKind {
    /// Pooled labels shuffled into groups of the original sizes.
    #[default]
    Permutation,
    /// Both groups drawn with replacement from the pooled set.
    Bootstrap,
}

impl std::str::FromStr for NullKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permutation" => Ok(NullKind::Permutation),
            "bootstrap" => Ok(NullKind::Bootstrap),
            other => Err(Error::Config(format!("unknown null `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub mmd_sq: f64,
    pub mmd: f64,
    pub sigma: f64,
    pub null_values: Vec<f64>,
    pub p_value: f64,
    pub null: NullKind,
    /// Set when every label assignment was enumerated instead of sampled.
    pub exact: bool,
    pub warnings: Vec<String>,
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn kernel(a: &Point, b: &Point, sigma: f64) -> f64 {
    (-sq_dist(a, b) / (sigma * sigma)).exp()
}

/// Median of all pairwise Euclidean distances of the pooled set.
pub fn median_bandwidth(points: &[Point]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("bandwidth needs at least two points"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points must be finite"));
    }
    let mut d = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d.push(sq_dist(a, b).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if median <= 0.0 {
        return Err(Error::Degenerate("median pairwise distance is zero".into()));
    }
    Ok(median)
}

fn mean_kernel(a: &[Point], b: &[Point], sigma: f64) -> f64 {
    let mut s = 0.0;
    for p in a {
        for q in b {
            s += kernel(p, q, sigma);
        }
    }
    s / (a.len() * b.len()) as f64
}

fn check_sets(x: &[Point], y: &[Point]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("point sets must be non-empty"));
    }
    if x.iter().chain(y).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points must be finite"));
    }
    Ok(())
}

/// Biased squared MMD with a Gaussian kernel `exp(-|x-y|^2 / sigma^2)`.
pub fn mmd_sq(x: &[Point], y: &[Point], sigma: f64) -> Result<f64> {
    check_sets(x, y)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {sigma}")));
    }
    Ok(mean_kernel(x, x, sigma) + mean_kernel(y, y, sigma) - 2.0 * mean_kernel(x, y, sigma))
}

/// `(mmd_sq, mmd)` with the square clipped at zero before the root.
pub fn mmd(x: &[Point], y: &[Point], sigma: f64) -> Result<(f64, f64)> {
    let raw = mmd_sq(x, y, sigma)?;
    let clipped = if raw < 0.0 { 0.0 } else { raw };
    Ok((clipped, clipped.sqrt()))
}

/// Gram matrix of the pooled set with cached row sums.
struct PooledKernel {
    n: usize,
    k: Vec<f64>,
    row_sums: Vec<f64>,
    total: f64,
}

impl PooledKernel {
    fn new(points: &[Point], sigma: f64) -> Self {
        let n = points.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = kernel(&points[i], &points[j], sigma);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let row_sums: Vec<f64> = k.chunks(n).map(|r| r.iter().sum()).collect();
        let total = row_sums.iter().sum();
        PooledKernel { n, k, row_sums, total }
    }

    /// Statistic for the split where `group` (sorted) forms the first sample.
    fn split_statistic(&self, group: &[usize]) -> f64 {
        let m = group.len() as f64;
        let r = (self.n - group.len()) as f64;
        let mut s_xx = 0.0;
        let mut r_x = 0.0;
        for &i in group {
            let row = &self.k[i * self.n..(i + 1) * self.n];
            s_xx += group.iter().map(|&j| row[j]).sum::<f64>();
            r_x += self.row_sums[i];
        }
        let s_xy = r_x - s_xx;
        let s_yy = self.total - 2.0 * r_x + s_xx;
        s_xx / (m * m) + s_yy / (r * r) - 2.0 * s_xy / (m * r)
    }

    fn block_sum(&self, a: &[usize], b: &[usize]) -> f64 {
        let mut s = 0.0;
        for &i in a {
            let row = &self.k[i * self.n..(i + 1) * self.n];
            s += b.iter().map(|&j| row[j]).sum::<f64>();
        }
        s
    }

    /// Statistic for two index multisets drawn from the pool.
    fn multiset_statistic(&self, a: &[usize], b: &[usize]) -> f64 {
        let (m, r) = (a.len() as f64, b.len() as f64);
        self.block_sum(a, a) / (m * m) + self.block_sum(b, b) / (r * r) - 2.0 * self.block_sum(a, b) / (m * r)
    }
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn combinations(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn cmp_sets(a: &[Point], b: &[Point]) -> Ordering {
    let sorted = |s: &[Point]| {
        let mut v = s.to_vec();
        v.sort_by(|p, q| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])));
        v
    };
    a.len().cmp(&b.len()).then_with(|| {
        sorted(a)
            .iter()
            .zip(sorted(b).iter())
            .map(|(p, q)| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn resample_rng(seed: u64, resample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(resample as u64);
    rng
}

/// Observed statistic against a resampled null, bandwidth from the pooled set.
///
/// With a permutation null and at most `n_resamples` distinct label
/// assignments, every assignment is enumerated and the p-value is exact.
pub fn resampling_test(x: &[Point], y: &[Point], n_resamples: usize, seed: u64, null: NullKind) -> Result<MmdResult> {
    check_sets(x, y)?;
    if n_resamples == 0 {
        return Err(Error::invalid("at least one resample is required"));
    }
    let mut warnings = Vec::new();
    if n_resamples < MIN_STABLE_RESAMPLES {
        let msg = format!("{n_resamples} resamples give an unstable p-value");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    // Canonical order makes the result independent of argument order.
    let (a, b) = if cmp_sets(x, y) == Ordering::Greater { (y, x) } else { (x, y) };
    let pooled: Vec<Point> = a.iter().chain(b).copied().collect();
    let sigma = median_bandwidth(&pooled)?;
    let (mmd_sq, mmd_val) = mmd(a, b, sigma)?;
    let gram = PooledKernel::new(&pooled, sigma);
    let n = pooled.len();
    let m = a.len();
    let observed_group: Vec<usize> = (0..m).collect();
    let observed = gram.split_statistic(&observed_group);
    let tol = 1e-12 * (1.0 + observed.abs());

    let exact_count = match null {
        NullKind::Permutation => binomial(n, m).filter(|&c| c <= n_resamples),
        NullKind::Bootstrap => None,
    };
    let (null_values, p_value, exact) = match exact_count {
        Some(count) => {
            let mut values = Vec::with_capacity(count);
            combinations(n, m, |g| values.push(gram.split_statistic(g)));
            let hits = values.iter().filter(|&&v| v >= observed - tol).count();
            let p = hits as f64 / values.len() as f64;
            (values, p, true)
        }
        None => {
            let values: Vec<f64> = (0..n_resamples)
                .map(|r| {
                    let mut rng = resample_rng(seed, r);
                    match null {
                        NullKind::Permutation => {
                            let mut g = index::sample(&mut rng, n, m).into_vec();
                            g.sort_unstable();
                            gram.split_statistic(&g)
                        }
                        NullKind::Bootstrap => {
                            let ga: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
                            let gb: Vec<usize> = (0..n - m).map(|_| rng.random_range(0..n)).collect();
                            gram.multiset_statistic(&ga, &gb)
                        }
                    }
                })
                .collect();
            let hits = values.iter().filter(|&&v| v >= observed - tol).count();
            let p = (1 + hits) as f64 / (1 + n_resamples) as f64;
            (values, p, false)
        }
    };
    Ok(MmdResult {
        mmd_sq,
        mmd: mmd_val,
        sigma,
        null_values,
        p_value,
        null,
        exact,
        warnings,
    })
}
