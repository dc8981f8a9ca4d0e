//! Exhaustive interval scan maximizing the U-KL divergence between the
//! embedded samples anchored inside an interval and those anchored outside.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{kl, u_kl, GaussianModel};
use crate::series::{embed, Embedding, EmbeddingConfig, Interval, MultivariateSeries};

/// A scored interval in original time coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub interval: Interval,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub len_min: usize,
    pub len_max: usize,
    pub top_k: usize,
    pub stride: usize,
    pub embedding: EmbeddingConfig,
}

impl ScanConfig {
    /// Checks the bounds that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "interval length bounds must satisfy 1 <= len_min <= len_max, got {}..{}",
                self.len_min, self.len_max
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        self.embedding.validate_for(n)?;
        if self.len_max > n {
            return Err(Error::Config(format!(
                "len_max {} exceeds series length {n}",
                self.len_max
            )));
        }
        Ok(())
    }
}

/// Which side of an interval a set of embedded rows belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Inside,
    Outside,
}

/// Splits the embedded rows by whether their anchor time lies in `interval`.
/// Rows flagged missing are marked missing on both sides.
pub(crate) fn split_rows(emb: &Embedding, interval: Interval, side: Side) -> Vec<bool> {
    (0..emb.height())
        .map(|r| {
            let inside = interval.contains(emb.anchor_time(r));
            emb.missing[r] || (inside != (side == Side::Inside))
        })
        .collect()
}

pub(crate) fn fit_side(emb: &Embedding, interval: Interval, side: Side) -> Result<GaussianModel> {
    let mask = split_rows(emb, interval, side);
    let usable = mask.iter().filter(|m| !**m).count();
    if usable < 2 {
        let which = match side {
            Side::Inside => "inside",
            Side::Outside => "outside",
        };
        return Err(Error::Scoring(format!(
            "{which} of {interval} has {usable} usable embedded rows, need at least 2"
        )));
    }
    GaussianModel::estimate(&emb.rows, emb.width, &mask)
}

/// U-KL score of one interval, re-estimating both Gaussians from scratch.
pub fn score_interval(series: &MultivariateSeries, interval: Interval, cfg: EmbeddingConfig) -> Result<f64> {
    interval.check_within(series.n())?;
    if interval.start == 0 && interval.end == series.n() {
        return Err(Error::Scoring(format!(
            "empty complement: {interval} covers the whole series"
        )));
    }
    let emb = embed(series, cfg)?;
    score_embedded(&emb, interval)
}

pub(crate) fn score_embedded(emb: &Embedding, interval: Interval) -> Result<f64> {
    let inside = fit_side(emb, interval, Side::Inside)?;
    let outside = fit_side(emb, interval, Side::Outside)?;
    Ok(u_kl(kl(&inside, &outside)?, interval))
}

/// Scores `interval` against a fixed nominal model instead of re-fitting the
/// complement.
pub fn score_against(
    series: &MultivariateSeries,
    interval: Interval,
    cfg: EmbeddingConfig,
    nominal: &GaussianModel,
) -> Result<f64> {
    interval.check_within(series.n())?;
    let emb = embed(series, cfg)?;
    let inside = fit_side(&emb, interval, Side::Inside)?;
    Ok(u_kl(kl(&inside, nominal)?, interval))
}

/// Gaussian fitted to the embedded rows anchored outside `interval`.
pub fn nominal_model(series: &MultivariateSeries, interval: Interval, cfg: EmbeddingConfig) -> Result<GaussianModel> {
    interval.check_within(series.n())?;
    let emb = embed(series, cfg)?;
    fit_side(&emb, interval, Side::Outside)
}

/// Prefix sums of embedded rows (centered on their global mean) and of their
/// outer products, indexed by anchor time.
pub(crate) struct CumulativeMoments {
    width: usize,
    packed: usize,
    center: Vec<f64>,
    count: Vec<usize>,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl CumulativeMoments {
    pub(crate) fn new(emb: &Embedding, n: usize) -> Self {
        let width = emb.width;
        let packed = width * (width + 1) / 2;
        let mut center = vec![0.0; width];
        let mut used = 0usize;
        for r in (0..emb.height()).filter(|&r| !emb.missing[r]) {
            for (c, v) in center.iter_mut().zip(emb.row(r)) {
                *c += v;
            }
            used += 1;
        }
        if used > 0 {
            center.iter_mut().for_each(|c| *c /= used as f64);
        }
        let mut count = vec![0usize; n + 1];
        let mut first = vec![0.0; (n + 1) * width];
        let mut second = vec![0.0; (n + 1) * packed];
        let mut x = vec![0.0; width];
        for t in 0..n {
            let (prev_first, next_first) = first.split_at_mut((t + 1) * width);
            let next_first = &mut next_first[..width];
            next_first.copy_from_slice(&prev_first[t * width..]);
            let (prev_second, next_second) = second.split_at_mut((t + 1) * packed);
            let next_second = &mut next_second[..packed];
            next_second.copy_from_slice(&prev_second[t * packed..]);
            count[t + 1] = count[t];

            if t < emb.span || emb.missing[t - emb.span] {
                continue;
            }
            let row = emb.row(t - emb.span);
            for ((xi, v), c) in x.iter_mut().zip(row).zip(&center) {
                *xi = v - c;
            }
            count[t + 1] += 1;
            for (acc, xi) in next_first.iter_mut().zip(&x) {
                *acc += xi;
            }
            let mut k = 0;
            for i in 0..width {
                for j in 0..=i {
                    next_second[k] += x[i] * x[j];
                    k += 1;
                }
            }
        }
        Self {
            width,
            packed,
            center,
            count,
            first,
            second,
        }
    }

    fn sums(&self, lo: usize, hi: usize) -> (usize, Vec<f64>, Vec<f64>) {
        let c = self.count[hi] - self.count[lo];
        let s1 = (0..self.width)
            .map(|i| self.first[hi * self.width + i] - self.first[lo * self.width + i])
            .collect();
        let s2 = (0..self.packed)
            .map(|k| self.second[hi * self.packed + k] - self.second[lo * self.packed + k])
            .collect();
        (c, s1, s2)
    }

    /// Count and sums over anchor times in `interval` and over its complement.
    fn split(&self, interval: Interval) -> [(usize, Vec<f64>, Vec<f64>); 2] {
        let n = self.count.len() - 1;
        let inside = self.sums(interval.start, interval.end);
        let (total_c, total_1, total_2) = self.sums(0, n);
        let outside = (
            total_c - inside.0,
            total_1.iter().zip(&inside.1).map(|(a, b)| a - b).collect(),
            total_2.iter().zip(&inside.2).map(|(a, b)| a - b).collect(),
        );
        [inside, outside]
    }

    fn model(&self, count: usize, s1: &[f64], s2: &[f64]) -> Result<GaussianModel> {
        let c = count as f64;
        let centered_mean: Vec<f64> = s1.iter().map(|v| v / c).collect();
        let mut cov = DMatrix::zeros(self.width, self.width);
        let mut k = 0;
        for i in 0..self.width {
            for j in 0..=i {
                let v = s2[k] / c - centered_mean[i] * centered_mean[j];
                cov[(i, j)] = v;
                cov[(j, i)] = v;
                k += 1;
            }
        }
        let mean = DVector::from_iterator(self.width, centered_mean.iter().zip(&self.center).map(|(m, c)| m + c));
        GaussianModel::from_moments(mean, cov, count)
    }

    pub(crate) fn score(&self, interval: Interval) -> Result<f64> {
        let [inside, outside] = self.split(interval);
        for (side, (c, _, _)) in [("inside", &inside), ("outside", &outside)] {
            if *c < 2 {
                return Err(Error::Scoring(format!(
                    "{side} of {interval} has {c} usable embedded rows, need at least 2"
                )));
            }
        }
        let p = self.model(inside.0, &inside.1, &inside.2)?;
        let q = self.model(outside.0, &outside.1, &outside.2)?;
        Ok(u_kl(kl(&p, &q)?, interval))
    }
}

/// Every scorable candidate on the `(start, length)` grid, in grid order.
pub fn scan(series: &MultivariateSeries, cfg: &ScanConfig) -> Result<Vec<Detection>> {
    cfg.validate_for(series.n())?;
    let n = series.n();
    let emb = embed(series, cfg.embedding)?;
    let moments = CumulativeMoments::new(&emb, n);
    let lengths: Vec<usize> = (cfg.len_min..=cfg.len_max).step_by(cfg.stride).collect();
    let starts: Vec<usize> = (0..n).step_by(cfg.stride).collect();

    let per_start: Vec<(Vec<Detection>, Option<Error>)> = starts
        .par_iter()
        .map(|&a| {
            let mut found = Vec::new();
            let mut first_err = None;
            for &len in &lengths {
                let b = a + len;
                if b > n {
                    break;
                }
                if a == 0 && b == n {
                    continue;
                }
                let interval = Interval { start: a, end: b };
                match moments.score(interval) {
                    Ok(score) => found.push(Detection {
                        interval,
                        score,
                        rank: 0,
                    }),
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            (found, first_err)
        })
        .collect();

    let mut first_err = None;
    let mut all = Vec::new();
    for (found, err) in per_start {
        all.extend(found);
        if first_err.is_none() {
            first_err = err;
        }
    }
    if all.is_empty() {
        return Err(first_err.unwrap_or_else(|| {
            Error::Scoring(format!(
                "no candidate interval with length in {}..={} fits a series of length {n}",
                cfg.len_min, cfg.len_max
            ))
        }));
    }
    Ok(all)
}

/// Orders candidates by descending score, ties broken by position.
pub(crate) fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.interval.start.cmp(&b.interval.start))
        .then(a.interval.end.cmp(&b.interval.end))
}

/// Greedy non-intersecting selection: accept in descending score order and
/// discard anything overlapping an accepted interval.
pub fn suppress(mut candidates: Vec<Detection>, top_k: usize) -> Vec<Detection> {
    candidates.sort_by(by_score_desc);
    let mut accepted: Vec<Detection> = Vec::with_capacity(top_k);
    for c in candidates {
        if accepted.len() == top_k {
            break;
        }
        if accepted.iter().all(|a| !a.interval.intersects(&c.interval)) {
            accepted.push(Detection {
                rank: accepted.len() + 1,
                ..c
            });
        }
    }
    accepted
}

/// Top-k pairwise-disjoint intervals by U-KL score.
pub fn detect(series: &MultivariateSeries, cfg: &ScanConfig) -> Result<Vec<Detection>> {
    Ok(suppress(scan(series, cfg)?, cfg.top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    fn cfg(len_min: usize, len_max: usize, top_k: usize) -> ScanConfig {
        ScanConfig {
            len_min,
            len_max,
            top_k,
            stride: 1,
            embedding: EmbeddingConfig::default(),
        }
    }

    #[test]
    fn whole_series_has_empty_complement() {
        let s = MultivariateSeries::from_columns(&noise(50, 2, 1)).unwrap();
        let err = score_interval(&s, Interval::new(0, 50).unwrap(), EmbeddingConfig::default()).unwrap_err();
        assert!(err.to_string().contains("empty complement"), "{err}");
    }

    #[test]
    fn too_few_rows_names_the_side() {
        let s = MultivariateSeries::from_columns(&noise(50, 1, 1)).unwrap();
        let err = score_interval(&s, Interval::new(10, 11).unwrap(), EmbeddingConfig::default()).unwrap_err();
        assert!(err.to_string().contains("inside"), "{err}");
        let err = score_interval(&s, Interval::new(1, 50).unwrap(), EmbeddingConfig::default()).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn shifted_interval_beats_every_disjoint_peer() {
        let mut cols = noise(400, 2, 7);
        for col in cols.iter_mut() {
            col[200..240].iter_mut().for_each(|v| *v += 5.0);
        }
        let s = MultivariateSeries::from_columns(&cols).unwrap();
        let e = EmbeddingConfig::default();
        let target = score_interval(&s, Interval::new(200, 240).unwrap(), e).unwrap();
        for a in 0..=360 {
            let j = Interval::new(a, a + 40).unwrap();
            if j.intersects(&Interval::new(200, 240).unwrap()) {
                continue;
            }
            assert!(score_interval(&s, j, e).unwrap() < target, "{j}");
        }
    }

    #[test]
    fn cumulative_scores_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..20 {
            let n = rng.random_range(60..200);
            let d = rng.random_range(1..4);
            let mut cols = noise(n, d, 100 + case);
            // sprinkle missing cells
            for _ in 0..rng.random_range(0..5) {
                let (t, j) = (rng.random_range(0..n), rng.random_range(0..d));
                cols[j][t] = f64::NAN;
            }
            let s = MultivariateSeries::from_columns(&cols).unwrap();
            let e = EmbeddingConfig::new(rng.random_range(1..4), rng.random_range(1..3)).unwrap();
            let emb = embed(&s, e).unwrap();
            let m = CumulativeMoments::new(&emb, n);
            let a = rng.random_range(0..n - 30);
            let b = a + rng.random_range(15..30);
            let iv = Interval::new(a, b).unwrap();
            let (fast, naive) = (m.score(iv), score_interval(&s, iv, e));
            match (fast, naive) {
                (Ok(f), Ok(v)) => assert!((f - v).abs() <= 1e-8 * v.abs().max(1e-12), "{f} vs {v}"),
                (Err(_), Err(_)) => {}
                (f, v) => panic!("disagreement: {f:?} vs {v:?}"),
            }
        }
    }

    #[test]
    fn top_one_has_rank_one() {
        let s = MultivariateSeries::from_columns(&noise(120, 2, 5)).unwrap();
        let found = detect(&s, &cfg(10, 20, 1)).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].rank, 1);
    }

    #[test]
    fn suppression_contract() {
        let s = MultivariateSeries::from_columns(&noise(200, 2, 9)).unwrap();
        let c = cfg(10, 30, 4);
        let all = scan(&s, &c).unwrap();
        let kept = suppress(all.clone(), c.top_k);
        assert_eq!(kept.len(), 4);
        for (i, a) in kept.iter().enumerate() {
            assert_eq!(a.rank, i + 1);
            for b in &kept[i + 1..] {
                assert!(!a.interval.intersects(&b.interval));
                assert!(a.score >= b.score);
            }
        }
        let lowest = kept.last().unwrap().score;
        for cand in &all {
            let disjoint = kept.iter().all(|k| !k.interval.intersects(&cand.interval));
            assert!(!(disjoint && cand.score > lowest), "{cand:?} should have been kept");
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 5, 1).validate().is_err());
        assert!(cfg(0, 5, 1).validate().is_err());
        assert!(cfg(1, 5, 0).validate().is_err());
        assert!(ScanConfig {
            stride: 0,
            ..cfg(1, 5, 1)
        }
        .validate()
        .is_err());
        assert!(cfg(1, 500, 1).validate_for(100).is_err());
    }
}
