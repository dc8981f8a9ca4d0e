//! Synthetic ground truth: a stable VAR(p) process with injected interval
//! anomalies.
//!
//! Anomaly intervals use the same 0-based half-open `[start, end)` convention
//! as the rest of the crate.

use nalgebra::{Cholesky, DMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::counterfactual::derive_seed;
use crate::error::{Error, Result};
use crate::series::{default_names, Interval, MultivariateSeries};

/// Steps simulated and discarded before the first returned sample.
pub const BURN_IN: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Adds `magnitude` marginal standard deviations.
    MeanShift,
    /// Multiplies the innovations by `magnitude`.
    VarianceScale,
    /// Shuffles a `magnitude` fraction of the interval's steps in time,
    /// independently per variable.
    CorrelationBreak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub start: usize,
    pub end: usize,
    pub variables: Vec<usize>,
    pub kind: AnomalyKind,
    pub magnitude: f64,
}

impl InjectedAnomaly {
    pub fn interval(&self) -> Interval {
        Interval {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    /// VAR coefficient matrices `A_1 .. A_p`, each `d` rows of `d` values.
    #[serde(default)]
    pub coefficients: Vec<Vec<Vec<f64>>>,
    /// Innovation covariance; identity when omitted.
    #[serde(default)]
    pub innovation_cov: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub anomalies: Vec<InjectedAnomaly>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub anomalies: Vec<InjectedAnomaly>,
    /// Per-variable standard deviation of the uninjected simulation.
    pub marginal_std: Vec<f64>,
    pub spectral_radius: f64,
    pub burn_in: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    fn matrix(&self, rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
        let d = self.d;
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Spec(format!("{what} must be {d}x{d}")));
        }
        Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    /// Largest eigenvalue modulus of the VAR companion matrix.
    pub fn spectral_radius(&self) -> Result<f64> {
        let (d, p) = (self.d, self.coefficients.len());
        if p == 0 {
            return Ok(0.0);
        }
        let mut companion = DMatrix::zeros(d * p, d * p);
        for (k, a) in self.coefficients.iter().enumerate() {
            let a = self.matrix(a, &format!("coefficient matrix {}", k + 1))?;
            companion.view_mut((0, k * d), (d, d)).copy_from(&a);
        }
        for i in d..d * p {
            companion[(i, i - d)] = 1.0;
        }
        Ok(companion
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max))
    }

    pub fn validate(&self) -> Result<f64> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Spec("n and d must be positive".into()));
        }
        if let Some(names) = &self.names {
            if names.len() != self.d {
                return Err(Error::Spec(format!("{} names for {} variables", names.len(), self.d)));
            }
        }
        let radius = self.spectral_radius()?;
        if radius.is_nan() || radius >= 1.0 {
            return Err(Error::Spec(format!(
                "VAR is not stable: spectral radius {radius:.6} >= 1"
            )));
        }
        if let Some(cov) = &self.innovation_cov {
            let cov = self.matrix(cov, "innovation_cov")?;
            if (&cov - cov.transpose()).amax() > 1e-12 || Cholesky::new(cov).is_none() {
                return Err(Error::Spec("innovation_cov must be symmetric positive definite".into()));
            }
        }
        for (i, a) in self.anomalies.iter().enumerate() {
            if a.start >= a.end || a.end > self.n {
                return Err(Error::Spec(format!(
                    "anomaly {i}: interval [{}, {}) not within [0, {})",
                    a.start, a.end, self.n
                )));
            }
            if a.variables.is_empty() || a.variables.iter().any(|&j| j >= self.d) {
                return Err(Error::Spec(format!(
                    "anomaly {i}: variables must be non-empty indices below {}",
                    self.d
                )));
            }
            if !a.magnitude.is_finite() || (a.kind != AnomalyKind::MeanShift && a.magnitude < 0.0) {
                return Err(Error::Spec(format!("anomaly {i}: invalid magnitude {}", a.magnitude)));
            }
        }
        Ok(radius)
    }
}

/// Simulates the spec and applies its injections.
pub fn generate(spec: &SynthSpec) -> Result<(MultivariateSeries, GroundTruth)> {
    let radius = spec.validate()?;
    let (n, d) = (spec.n, spec.d);
    let total = BURN_IN + n;

    let chol = match &spec.innovation_cov {
        Some(c) => Cholesky::new(spec.matrix(c, "innovation_cov")?)
            .expect("validated")
            .unpack(),
        None => DMatrix::identity(d, d),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut innovations = vec![0.0; total * d];
    let mut z = vec![0.0; d];
    for t in 0..total {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for i in 0..d {
            innovations[t * d + i] = (0..=i).map(|k| chol[(i, k)] * z[k]).sum();
        }
    }
    let coefficients: Vec<DMatrix<f64>> = spec
        .coefficients
        .iter()
        .map(|a| spec.matrix(a, "coefficient matrix"))
        .collect::<Result<_>>()?;

    let base = simulate(&coefficients, &innovations, d);
    let marginal_std: Vec<f64> = (0..d)
        .map(|j| {
            let col = base[BURN_IN * d..].iter().skip(j).step_by(d);
            let mean = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
            var.sqrt()
        })
        .collect();

    let scaled = spec.anomalies.iter().any(|a| a.kind == AnomalyKind::VarianceScale);
    let mut values = if scaled {
        let mut inn = innovations;
        for a in spec.anomalies.iter().filter(|a| a.kind == AnomalyKind::VarianceScale) {
            for t in a.start..a.end {
                for &j in &a.variables {
                    inn[(BURN_IN + t) * d + j] *= a.magnitude;
                }
            }
        }
        simulate(&coefficients, &inn, d)
    } else {
        base
    };
    values.drain(..BURN_IN * d);

    for (idx, a) in spec.anomalies.iter().enumerate() {
        match a.kind {
            AnomalyKind::VarianceScale => {}
            AnomalyKind::MeanShift => {
                for t in a.start..a.end {
                    for &j in &a.variables {
                        values[t * d + j] += a.magnitude * marginal_std[j];
                    }
                }
            }
            AnomalyKind::CorrelationBreak => {
                let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, idx as u64]));
                let len = a.end - a.start;
                let count = ((a.magnitude.min(1.0) * len as f64).round() as usize).min(len);
                if count < 2 {
                    continue;
                }
                for &j in &a.variables {
                    let mut positions: Vec<usize> = (a.start..a.end).collect();
                    positions.shuffle(&mut prng);
                    positions.truncate(count);
                    positions.sort_unstable();
                    let mut order = positions.clone();
                    order.shuffle(&mut prng);
                    let taken: Vec<f64> = order.iter().map(|&t| values[t * d + j]).collect();
                    for (&t, v) in positions.iter().zip(taken) {
                        values[t * d + j] = v;
                    }
                }
            }
        }
    }

    let names = spec.names.clone().unwrap_or_else(|| default_names(d));
    let series = MultivariateSeries::new(names, values, vec![false; n * d], 0)?;
    let truth = GroundTruth {
        anomalies: spec.anomalies.clone(),
        marginal_std,
        spectral_radius: radius,
        burn_in: BURN_IN,
        seed: spec.seed,
    };
    Ok((series, truth))
}

fn simulate(coefficients: &[DMatrix<f64>], innovations: &[f64], d: usize) -> Vec<f64> {
    let total = innovations.len() / d;
    let mut x = innovations.to_vec();
    for t in 0..total {
        for (k, a) in coefficients.iter().enumerate() {
            let lag = k + 1;
            if lag > t {
                break;
            }
            let (past, now) = x.split_at_mut(t * d);
            let prev = &past[(t - lag) * d..(t - lag + 1) * d];
            for i in 0..d {
                now[i] += (0..d).map(|j| a[(i, j)] * prev[j]).sum::<f64>();
            }
        }
    }
    x
}
