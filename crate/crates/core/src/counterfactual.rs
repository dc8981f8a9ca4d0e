//! Counterfactual in-distribution replacement of a variable subset inside an
//! interval.
//!
//! The nominal process is modelled as a stationary Gaussian over `l`
//! consecutive time steps, `l = |I| + 2(kappa - 1)`: the interval plus
//! `kappa - 1` steps of context on each side. Its covariance is block-Toeplitz
//! and generated by the lagged cross-covariances `C_0 .. C_{L-1}`, estimated
//! with the interval masked out. A replacement for the chosen variables is a
//! draw from this Gaussian conditioned on everything else in the window.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{factor_or_clip, jitter_for, symmetrize, GaussianModel};
use crate::series::{Interval, MultivariateSeries};

/// Lag-indexed cross-covariance blocks, `blocks[k] ~ cov(x_t, x_{t-k})`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryCovariance {
    blocks: Vec<DMatrix<f64>>,
}

impl StationaryCovariance {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Estimation("no covariance blocks".into()))?;
        let d = first.nrows();
        if d == 0 || blocks.iter().any(|b| b.nrows() != d || b.ncols() != d) {
            return Err(Error::Estimation(
                "covariance blocks must be square and equally sized".into(),
            ));
        }
        if (first - first.transpose()).amax() > 1e-10 {
            return Err(Error::Estimation("lag-0 block is not symmetric".into()));
        }
        Ok(Self { blocks })
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn max_lag(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn block(&self, lag: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(lag)
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Symmetric block-Toeplitz matrix over `length` consecutive steps in
    /// increasing time order: block `(i, j)` is `C_{i-j}` for `i >= j` and
    /// `C_{j-i}'` otherwise. Lags past [`Self::max_lag`] are zero.
    pub fn toeplitz(&self, length: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut s = DMatrix::zeros(d * length, d * length);
        for i in 0..length {
            for j in 0..=i {
                let Some(c) = self.blocks.get(i - j) else { continue };
                s.view_mut((i * d, j * d), (d, d)).copy_from(c);
                if i != j {
                    s.view_mut((j * d, i * d), (d, d)).copy_from(&c.transpose());
                }
            }
        }
        s
    }
}

/// Nominal mean and lagged covariances estimated with `mask` removed.
#[derive(Debug, Clone)]
pub struct StationaryEstimate {
    pub covariance: StationaryCovariance,
    pub mean: DVector<f64>,
    /// Largest lag that was requested; exceeds `covariance.max_lag()` when
    /// the data ran out of pairs.
    pub requested_lag: usize,
}

impl StationaryEstimate {
    pub fn truncated(&self) -> bool {
        self.covariance.max_lag() < self.requested_lag
    }
}

/// Estimates `C_0 .. C_max_lag` and the per-variable mean with the cells of
/// `mask` treated as missing. Only pairs of fully observed rows outside the
/// mask contribute to a lag.
pub fn estimate_stationary(
    series: &MultivariateSeries,
    mask: Interval,
    max_lag: usize,
) -> Result<(StationaryCovariance, DVector<f64>)> {
    let est = estimate_blocks(series, mask, max_lag, false)?;
    Ok((est.covariance, est.mean))
}

/// Like [`estimate_stationary`], but stops at the first lag with fewer than
/// two pairs instead of failing; later blocks are implicitly zero.
pub fn estimate_stationary_truncated(
    series: &MultivariateSeries,
    mask: Interval,
    max_lag: usize,
) -> Result<StationaryEstimate> {
    estimate_blocks(series, mask, max_lag, true)
}

fn estimate_blocks(
    series: &MultivariateSeries,
    mask: Interval,
    max_lag: usize,
    truncate: bool,
) -> Result<StationaryEstimate> {
    let (n, d) = (series.n(), series.d());
    mask.check_within(n)?;
    if !truncate && max_lag >= n - mask.len() {
        return Err(Error::Config(format!(
            "max_lag {max_lag} must be below the {} unmasked steps",
            n - mask.len()
        )));
    }

    let mut mean = DVector::zeros(d);
    for j in 0..d {
        let (count, sum) = (0..n)
            .filter(|&t| !mask.contains(t))
            .filter_map(|t| series.get(t, j))
            .fold((0usize, 0.0), |(c, s), v| (c + 1, s + v));
        if count == 0 {
            return Err(Error::Estimation(format!(
                "variable {:?} has no observed values outside {mask}",
                series.names()[j]
            )));
        }
        mean[j] = sum / count as f64;
    }

    let valid: Vec<bool> = (0..n).map(|t| !mask.contains(t) && series.row_complete(t)).collect();
    let centered: Vec<f64> = (0..n)
        .flat_map(|t| (0..d).map(move |j| (t, j)))
        .map(|(t, j)| if valid[t] { series.value(t, j) - mean[j] } else { 0.0 })
        .collect();

    let mut blocks = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag.min(n.saturating_sub(1)) {
        let mut sum = DMatrix::<f64>::zeros(d, d);
        let mut pairs = 0usize;
        for t in lag..n {
            if !(valid[t] && valid[t - lag]) {
                continue;
            }
            let now = &centered[t * d..(t + 1) * d];
            let past = &centered[(t - lag) * d..(t - lag + 1) * d];
            for (c, &p) in past.iter().enumerate() {
                for (r, &x) in now.iter().enumerate() {
                    sum[(r, c)] += x * p;
                }
            }
            pairs += 1;
        }
        if pairs < 2 {
            if truncate && lag > 0 {
                break;
            }
            return Err(Error::Estimation(format!(
                "lag {lag} has {pairs} usable pairs, need at least 2"
            )));
        }
        blocks.push(sum / pairs as f64);
    }
    if blocks.len() <= max_lag && !truncate {
        return Err(Error::Estimation(format!("lag {} has no usable pairs", blocks.len())));
    }
    blocks[0] = symmetrize(blocks[0].clone());
    Ok(StationaryEstimate {
        covariance: StationaryCovariance::new(blocks)?,
        mean,
        requested_lag: max_lag,
    })
}

/// Joint Gaussian over `length` consecutive steps: the mean tiled `length`
/// times and the block-Toeplitz covariance, repaired by eigenvalue clipping
/// only when it is not positive definite.
pub fn assemble_joint(stat: &StationaryCovariance, mean: &DVector<f64>, length: usize) -> Result<GaussianModel> {
    let d = stat.dim();
    if mean.len() != d {
        return Err(Error::Numerical(format!(
            "mean of length {} for {d} variables",
            mean.len()
        )));
    }
    if length == 0 {
        return Err(Error::Config("joint window must span at least one step".into()));
    }
    let tiled = DVector::from_iterator(d * length, (0..length).flat_map(|_| mean.iter().copied()));
    GaussianModel::from_psd(tiled, stat.toeplitz(length), 0)
}

/// The interval to replace, the replaced variables and the surrounding
/// context steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacementWindow {
    pub interval: Interval,
    pub kappa: usize,
    subset: Vec<usize>,
}

impl ReplacementWindow {
    /// `subset` holds 0-based variable indices; it must be non-empty, within
    /// `0..d` and at most `ceil(d / 2)` long.
    pub fn new(interval: Interval, kappa: usize, subset: &[usize], d: usize) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        let mut subset = subset.to_vec();
        subset.sort_unstable();
        subset.dedup();
        let cap = d.div_ceil(2);
        if subset.is_empty() || subset.len() > cap {
            return Err(Error::Config(format!(
                "replaced subset must hold between 1 and {cap} variables, got {}",
                subset.len()
            )));
        }
        if let Some(&j) = subset.iter().find(|&&j| j >= d) {
            return Err(Error::Config(format!(
                "variable index {j} out of range for {d} variables"
            )));
        }
        Ok(Self {
            interval,
            kappa,
            subset,
        })
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    /// `|I| + 2(kappa - 1)`.
    pub fn length(&self) -> usize {
        self.interval.len() + 2 * (self.kappa - 1)
    }

    /// Time of the first window position (may be negative at the boundary).
    pub fn origin(&self) -> i64 {
        self.interval.start as i64 - (self.kappa as i64 - 1)
    }

    pub fn time_at(&self, pos: usize) -> i64 {
        self.origin() + pos as i64
    }

    /// `a-(kappa-1) ..= a-1`, possibly reaching before the series start.
    pub fn left_context(&self) -> std::ops::Range<i64> {
        self.origin()..self.interval.start as i64
    }

    /// `b ..= b+(kappa-2)`, possibly reaching past the series end.
    pub fn right_context(&self) -> std::ops::Range<i64> {
        let b = self.interval.end as i64;
        b..b + self.kappa as i64 - 1
    }
}

/// Replacement values for `subset` over `interval`, row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Replacement {
    pub interval: Interval,
    pub subset: Vec<usize>,
    pub values: Vec<f64>,
}

impl Replacement {
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[(t - self.interval.start) * self.subset.len() + k]
    }
}

/// Conditional distribution of the query cells `(t in I, j in V)` given every
/// other observed cell of the window, ready to be sampled repeatedly.
#[derive(Debug, Clone)]
pub struct ConditionalReplacement {
    window: ReplacementWindow,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    lower: DMatrix<f64>,
    evidence: usize,
    repair: f64,
}

impl ConditionalReplacement {
    pub fn new(joint: &GaussianModel, window: &ReplacementWindow, series: &MultivariateSeries) -> Result<Self> {
        let (n, d) = (series.n(), series.d());
        let length = window.length();
        if joint.dim() != d * length {
            return Err(Error::Numerical(format!(
                "joint of dimension {} does not cover {length} steps of {d} variables",
                joint.dim()
            )));
        }
        window.interval.check_within(n)?;
        if window.subset().iter().any(|&j| j >= d) {
            return Err(Error::Config("replaced subset references a missing variable".into()));
        }

        let mut query = Vec::new();
        let mut evidence = Vec::new();
        let mut observed = Vec::new();
        for pos in 0..length {
            let t = window.time_at(pos);
            if t < 0 || t >= n as i64 {
                continue;
            }
            let t = t as usize;
            for j in 0..d {
                let coord = pos * d + j;
                if window.interval.contains(t) && window.subset().binary_search(&j).is_ok() {
                    query.push(coord);
                } else if let Some(v) = series.get(t, j) {
                    evidence.push(coord);
                    observed.push(v);
                }
            }
        }

        let s = joint.cov();
        let mu = joint.mean();
        let pick =
            |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |r, c| s[(rows[r], cols[c])]);
        let mu_q = DVector::from_iterator(query.len(), query.iter().map(|&i| mu[i]));
        let s_qq = pick(&query, &query);

        let (mean, cov) = if evidence.is_empty() {
            (mu_q, s_qq)
        } else {
            let s_ee = pick(&evidence, &evidence);
            let s_eq = pick(&evidence, &query);
            let lower_e = match Cholesky::new(s_ee.clone()) {
                Some(ch) => ch.unpack(),
                None => {
                    let eps = jitter_for(&s_ee);
                    factor_or_clip(s_ee, eps)?.1
                }
            };
            let solve_err = || Error::Numerical("evidence covariance is singular".into());
            let gain = lower_e.solve_lower_triangular(&s_eq).ok_or_else(solve_err)?;
            let resid = DVector::from_iterator(evidence.len(), evidence.iter().zip(&observed).map(|(&i, v)| v - mu[i]));
            let whitened = lower_e.solve_lower_triangular(&resid).ok_or_else(solve_err)?;
            (mu_q + gain.tr_mul(&whitened), s_qq - gain.tr_mul(&gain))
        };

        let cov = symmetrize(cov);
        let eps = jitter_for(&cov);
        let (cov, lower, repair) = factor_or_clip(cov, eps)?;
        Ok(Self {
            window: window.clone(),
            mean,
            cov,
            lower,
            evidence: evidence.len(),
            repair,
        })
    }

    pub fn window(&self) -> &ReplacementWindow {
        &self.window
    }

    /// Conditional mean, laid out like [`Replacement::values`].
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn evidence_len(&self) -> usize {
        self.evidence
    }

    pub fn repair_magnitude(&self) -> f64 {
        self.repair
    }

    pub fn sample(&self, seed: u64) -> Replacement {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_iterator(
            self.mean.len(),
            (0..self.mean.len()).map(|_| rng.sample(StandardNormal)),
        );
        let x = &self.mean + &self.lower * z;
        Replacement {
            interval: self.window.interval,
            subset: self.window.subset().to_vec(),
            values: x.as_slice().to_vec(),
        }
    }
}

/// One draw of the replaced cells from the conditional nominal distribution.
pub fn sample_replacement(
    joint: &GaussianModel,
    window: &ReplacementWindow,
    series: &MultivariateSeries,
    seed: u64,
) -> Result<Replacement> {
    Ok(ConditionalReplacement::new(joint, window, series)?.sample(seed))
}

/// Copy of `series` with `sample` written over the window's subset inside its
/// interval. Those cells are no longer missing.
pub fn apply_replacement(
    series: &MultivariateSeries,
    window: &ReplacementWindow,
    sample: &Replacement,
) -> Result<MultivariateSeries> {
    let iv = window.interval;
    if sample.interval != iv
        || sample.subset != window.subset()
        || sample.values.len() != iv.len() * window.subset().len()
    {
        return Err(Error::Config(format!(
            "replacement of {} values does not match {} steps x {} variables",
            sample.values.len(),
            iv.len(),
            window.subset().len()
        )));
    }
    iv.check_within(series.n())?;
    let mut out = series.clone();
    for t in iv.start..iv.end {
        for (k, &j) in window.subset().iter().enumerate() {
            out.set(t, j, sample.get(t, k));
        }
    }
    Ok(out)
}

/// Mixes a root seed with a path of counters into an independent stream seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}
