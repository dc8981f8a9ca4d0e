#![allow(dead_code)]

use anomaly_attribution::counterfactual::{
    assemble_joint, estimate_stationary, ConditionalReplacement, ReplacementWindow,
};
use anomaly_attribution::series::{zscore, Interval, MultivariateSeries};
use anomaly_attribution::synth::{generate, AnomalyKind, InjectedAnomaly, SynthSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn var_spec(
    n: usize,
    d: usize,
    coefficients: Vec<Vec<Vec<f64>>>,
    anomalies: Vec<InjectedAnomaly>,
    seed: u64,
) -> SynthSpec {
    SynthSpec {
        n,
        d,
        coefficients,
        innovation_cov: None,
        anomalies,
        seed,
        names: None,
    }
}

/// Weakly coupled 3-variable VAR(1) with a +4 sigma shift of length 50 on `variable`.
pub fn mean_shift_fixture(seed: u64, variable: usize) -> (MultivariateSeries, InjectedAnomaly) {
    let anomaly = InjectedAnomaly {
        start: 900,
        end: 950,
        variables: vec![variable],
        kind: AnomalyKind::MeanShift,
        magnitude: 4.0,
    };
    let coeff = vec![vec![vec![0.5, 0.1, 0.0], vec![0.0, 0.5, 0.1], vec![0.1, 0.0, 0.5]]];
    let (s, _) = generate(&var_spec(2000, 3, coeff, vec![anomaly.clone()], seed)).unwrap();
    (zscore(&s).unwrap().0, anomaly)
}

/// Correlated pair {0, 1} whose joint dynamics are scrambled over [1000, 1100);
/// variable 2 is a slow, near-unit-root series and variable 3 is fast noise.
pub fn corr_break_fixture(seed: u64) -> (MultivariateSeries, InjectedAnomaly) {
    let coeff = vec![vec![
        vec![0.85, 0.05, 0.0, 0.0],
        vec![0.05, 0.85, 0.0, 0.0],
        vec![0.0, 0.0, 0.98, 0.0],
        vec![0.0, 0.0, 0.0, 0.6],
    ]];
    let cov = vec![
        vec![1.0, 0.6, 0.0, 0.3],
        vec![0.6, 1.0, 0.3, 0.0],
        vec![0.0, 0.3, 1.0, 0.0],
        vec![0.3, 0.0, 0.0, 1.0],
    ];
    let anomaly = InjectedAnomaly {
        start: 1000,
        end: 1100,
        variables: vec![0, 1],
        kind: AnomalyKind::CorrelationBreak,
        magnitude: 1.0,
    };
    let spec = SynthSpec {
        innovation_cov: Some(cov),
        ..var_spec(2000, 4, coeff, vec![anomaly.clone()], seed)
    };
    let (s, _) = generate(&spec).unwrap();
    (zscore(&s).unwrap().0, anomaly)
}

/// n = 5000, d = 6 ring-coupled VAR(1) with a shift on {1, 4} over [2500, 2580).
pub fn perf_fixture() -> (MultivariateSeries, Interval) {
    let coeff = vec![(0..6)
        .map(|i| {
            (0..6)
                .map(|j| {
                    if i == j {
                        0.6
                    } else if j == (i + 1) % 6 {
                        0.1
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()];
    let anomaly = InjectedAnomaly {
        start: 2500,
        end: 2580,
        variables: vec![1, 4],
        kind: AnomalyKind::MeanShift,
        magnitude: 3.0,
    };
    let (s, _) = generate(&var_spec(5000, 6, coeff, vec![anomaly.clone()], 1)).unwrap();
    (zscore(&s).unwrap().0, anomaly.interval())
}

pub fn white_noise(n: usize, d: usize, seed: u64) -> MultivariateSeries {
    generate(&var_spec(n, d, vec![], vec![], seed)).unwrap().0
}

pub struct Instance {
    pub series: MultivariateSeries,
    pub window: ReplacementWindow,
    pub conditional: ConditionalReplacement,
    pub joint_mean: DVector<f64>,
    pub joint_cov: DMatrix<f64>,
}

/// Small conditioning problem: d <= 3, window of at most 4 steps, some
/// missing context cells, intervals often touching a series boundary.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=3);
    let kappa = rng.random_range(1..=2);
    let len = rng.random_range(1..=(4 - 2 * (kappa - 1)));
    let coeff: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if i == j {
                        rng.random_range(0.2..0.8)
                    } else {
                        rng.random_range(-0.15..0.15)
                    }
                })
                .collect()
        })
        .collect();
    let n = 200;
    let (clean, _) = generate(&var_spec(n, d, vec![coeff], vec![], seed)).unwrap();
    let start = match seed % 3 {
        0 => 0,
        1 => n - len,
        _ => rng.random_range(0..=n - len),
    };
    let interval = Interval::new(start, start + len).unwrap();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    for t in 0..n {
        for j in 0..d {
            let m = !interval.contains(t) && rng.random_bool(0.05);
            values.push(if m { f64::NAN } else { clean.value(t, j) });
            missing.push(m);
        }
    }
    let series = MultivariateSeries::new(clean.names().to_vec(), values, missing, 0).unwrap();
    let cap = d.div_ceil(2);
    let size = rng.random_range(1..=cap);
    let mut subset: Vec<usize> = (0..d).collect();
    while subset.len() > size {
        subset.remove(rng.random_range(0..subset.len()));
    }
    let window = ReplacementWindow::new(interval, kappa, &subset, d).unwrap();
    let (stat, mean) = estimate_stationary(&series, interval, window.length() - 1).unwrap();
    let joint = assemble_joint(&stat, &mean, window.length()).unwrap();
    let conditional = ConditionalReplacement::new(&joint, &window, &series).unwrap();
    Instance {
        series,
        window,
        conditional,
        joint_mean: joint.mean().clone(),
        joint_cov: joint.cov().clone(),
    }
}

/// Conditioning through the precision matrix of the marginal over query and
/// evidence coordinates.
pub fn precision_oracle(inst: &Instance) -> (DVector<f64>, DMatrix<f64>) {
    let d = inst.series.d();
    let n = inst.series.n() as i64;
    let mut query = Vec::new();
    let mut evidence = Vec::new();
    let mut values = Vec::new();
    for pos in 0..inst.window.length() {
        let t = inst.window.time_at(pos);
        if t < 0 || t >= n {
            continue;
        }
        for j in 0..d {
            let coord = pos * d + j;
            if inst.window.interval.contains(t as usize) && inst.window.subset().contains(&j) {
                query.push(coord);
            } else if !inst.series.is_missing(t as usize, j) {
                evidence.push(coord);
                values.push(inst.series.value(t as usize, j));
            }
        }
    }
    let all: Vec<usize> = query.iter().chain(&evidence).copied().collect();
    let q = query.len();
    let sub = DMatrix::from_fn(all.len(), all.len(), |r, c| inst.joint_cov[(all[r], all[c])]);
    let precision = sub.try_inverse().expect("invertible marginal");
    let p_qq = precision.view((0, 0), (q, q)).into_owned();
    let p_qe = precision.view((0, q), (q, all.len() - q)).into_owned();
    let cov = p_qq.try_inverse().expect("invertible precision block");
    let resid = DVector::from_iterator(
        evidence.len(),
        evidence.iter().zip(&values).map(|(&i, v)| v - inst.joint_mean[i]),
    );
    let mu_q = DVector::from_iterator(q, query.iter().map(|&i| inst.joint_mean[i]));
    let mean = mu_q - &cov * p_qe * resid;
    (mean, cov)
}
