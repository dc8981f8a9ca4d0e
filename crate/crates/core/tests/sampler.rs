mod common;

use anomaly_attribution::counterfactual::{
    assemble_joint, estimate_stationary, ConditionalReplacement, ReplacementWindow,
};
use anomaly_attribution::series::Interval;
use anomaly_attribution::synth::generate;
use nalgebra::DMatrix;

use common::{precision_oracle, random_instance, var_spec};

#[test]
fn schur_moments_match_precision_oracle() {
    for seed in 0..20 {
        let inst = random_instance(seed);
        let (mean, cov) = precision_oracle(&inst);
        let scale = inst.joint_cov.amax().max(1.0);
        let dm = (&mean - inst.conditional.mean()).amax();
        let dc = (&cov - inst.conditional.cov()).amax();
        assert!(
            dm < 1e-8 * scale && dc < 1e-8 * scale,
            "seed {seed}: mean diff {dm:e}, cov diff {dc:e}"
        );
    }
}

#[test]
fn draws_match_conditional_moments() {
    const DRAWS: usize = 50_000;
    for seed in 0..20 {
        let inst = random_instance(100 + seed);
        let c = &inst.conditional;
        let q = c.mean().len();
        let draws: Vec<Vec<f64>> = (0..DRAWS as u64).map(|i| c.sample(i * 7919 + seed).values).collect();
        let n = DRAWS as f64;
        let emp_mean: Vec<f64> = (0..q).map(|i| draws.iter().map(|x| x[i]).sum::<f64>() / n).collect();
        for i in 0..q {
            let se = (c.cov()[(i, i)] / n).sqrt();
            assert!((emp_mean[i] - c.mean()[i]).abs() < 4.0 * se, "seed {seed} mean {i}");
            for j in 0..=i {
                let emp = draws
                    .iter()
                    .map(|x| (x[i] - emp_mean[i]) * (x[j] - emp_mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                let s = c.cov();
                let se = ((s[(i, i)] * s[(j, j)] + s[(i, j)].powi(2)) / n).sqrt();
                assert!(
                    (emp - s[(i, j)]).abs() < 4.0 * se,
                    "seed {seed} cov ({i},{j}): {emp} vs {}",
                    s[(i, j)]
                );
            }
        }
    }
}

#[test]
fn conditioning_never_increases_variance() {
    for seed in 0..20 {
        let inst = random_instance(200 + seed);
        let c = &inst.conditional;
        let d = inst.series.d();
        let origin = inst.window.origin();
        let mut k = 0;
        for t in inst.window.interval.start..inst.window.interval.end {
            for &j in inst.window.subset() {
                let pos = (t as i64 - origin) as usize;
                let prior = inst.joint_cov[(pos * d + j, pos * d + j)];
                assert!(c.cov()[(k, k)] <= prior + 1e-9, "seed {seed}");
                k += 1;
            }
        }
    }
}

#[test]
fn ar1_blocks_match_theory() {
    let phi = 0.8;
    let (s, _) = generate(&var_spec(20_000, 1, vec![vec![vec![phi]]], vec![], 0)).unwrap();
    let (stat, mean) = estimate_stationary(&s, Interval::new(0, 1).unwrap(), 5).unwrap();
    assert!(mean[0].abs() < 0.1);
    for k in 0..=5 {
        let truth = phi.powi(k as i32) / (1.0 - phi * phi);
        let est = stat.block(k).unwrap()[(0, 0)];
        assert!((est - truth).abs() < 0.05 * truth, "lag {k}: {est} vs {truth}");
    }
}

#[test]
fn ar2_window_covariance_matches_yule_walker() {
    let (a1, a2) = (0.5, 0.3);
    let (s, _) = generate(&var_spec(20_000, 1, vec![vec![vec![a1]], vec![vec![a2]]], vec![], 12)).unwrap();
    let length = 5;
    let (stat, mean) = estimate_stationary(&s, Interval::new(0, 1).unwrap(), length - 1).unwrap();
    let joint = assemble_joint(&stat, &mean, length).unwrap();

    let mut gamma = vec![(1.0 - a2) / ((1.0 + a2) * ((1.0 - a2).powi(2) - a1 * a1))];
    gamma.push(a1 * gamma[0] / (1.0 - a2));
    for k in 2..length {
        gamma.push(a1 * gamma[k - 1] + a2 * gamma[k - 2]);
    }
    let truth = DMatrix::from_fn(length, length, |i, j| gamma[i.abs_diff(j)]);
    let rel = (joint.cov() - &truth).norm() / truth.norm();
    assert!(rel < 0.10, "relative Frobenius error {rel}");
}

#[test]
fn replacement_is_continuous_with_context() {
    let phi = 0.95;
    let (s, _) = generate(&var_spec(3000, 1, vec![vec![vec![phi]]], vec![], 13)).unwrap();
    let iv = Interval::new(1500, 1520).unwrap();
    let window = ReplacementWindow::new(iv, 3, &[0], 1).unwrap();
    let (stat, mean) = estimate_stationary(&s, iv, window.length() - 1).unwrap();
    let joint = assemble_joint(&stat, &mean, window.length()).unwrap();
    let c = ConditionalReplacement::new(&joint, &window, &s).unwrap();
    let marginal_sd = stat.block(0).unwrap()[(0, 0)].sqrt();
    let first_sd = c.cov()[(0, 0)].sqrt();
    let last_sd = c.cov()[(19, 19)].sqrt();
    let mid_sd = c.cov()[(10, 10)].sqrt();
    assert!(first_sd < 0.5 * marginal_sd && last_sd < 0.5 * marginal_sd);
    assert!(mid_sd > first_sd && mid_sd > last_sd);
    assert!((c.mean()[0] - s.value(iv.start - 1, 0)).abs() < 3.0 * first_sd);
    assert!((c.mean()[19] - s.value(iv.end, 0)).abs() < 3.0 * last_sd);
}
