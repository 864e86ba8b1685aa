use prte::dgp::{generate_sample, DgpParams};
use prte::estimator::{estimate, CrossFitted, EstimationConfig};
use prte::score::{m_hat_matrix, ThetaEstimate};
use prte::Policy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fitted(params: &DgpParams, n: usize, seed: u64) -> (prte::Dataset, EstimationConfig, CrossFitted) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate_sample(params, n, &mut rng);
    let config = EstimationConfig {
        seed: 11,
        ..EstimationConfig::new(Policy::proportional(0.5).unwrap())
    };
    let cf = CrossFitted::fit(&data, &config).unwrap();
    (data, config, cf)
}

#[test]
fn m_hat_matches_jacobian_of_mean_score() {
    let (_, _, cf) = fitted(&DgpParams::default(), 2000, 3);
    let theta = cf.theta();
    let p = theta.feature_dim();
    let k = 2 * p;
    let n = cf.decomposed().len() as f64;
    let mut mean_m32 = vec![0.0; k];
    for d in cf.decomposed() {
        for (a, v) in mean_m32.iter_mut().zip(&d.m32) {
            *a += v / n;
        }
    }
    let m_hat = m_hat_matrix(&mean_m32, &theta.theta1, 1e-5).unwrap();

    let flat = theta.to_flat();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for j in 0..flat.len() {
        let mut up = flat.clone();
        let mut dn = flat.clone();
        up[j] += h;
        dn[j] -= h;
        let ru = cf.residual(&ThetaEstimate::from_flat(p, &up).unwrap());
        let rd = cf.residual(&ThetaEstimate::from_flat(p, &dn).unwrap());
        for i in 0..flat.len() {
            let fd = -(ru[i] - rd[i]) / (2.0 * h);
            worst = worst.max((fd - m_hat[(i, j)]).abs());
        }
    }
    assert!(worst < 1e-5, "max |M̂ − FD| = {worst:e}");
}

#[test]
fn noiseless_design_matches_plug_in() {
    let params = DgpParams::default().without_outcome_noise();
    let (data, config, cf) = fitted(&params, 1000, 5);
    let theta = cf.theta();
    let (b0, b1) = params.outcome_slopes();
    for (est, truth) in theta.beta().iter().zip(b0.iter().chain(&b1)) {
        assert!((est - truth).abs() < 0.02, "β̂ {est} vs {truth}");
    }

    // With no outcome errors the MTE is x'(β1 − β0) plus the intercept gap,
    // so the effect is the sample mean of (P* − P) times it.
    let gap = params.treated.intercept - params.untreated.intercept;
    let plug_in: f64 = data
        .z()
        .iter()
        .zip(data.x())
        .map(|(z, x)| {
            let p = params.propensity(z);
            let effect: f64 = x.iter().zip(b1.iter().zip(&b0)).map(|(xi, (u, v))| xi * (u - v)).sum();
            0.5 * (1.0 - p) * (effect + gap)
        })
        .sum::<f64>()
        / data.len() as f64;
    let result = estimate(&data, &config).unwrap();
    assert!(
        (result.prte_hat - plug_in).abs() < 3.0 * result.se + 1e-3,
        "{} vs {plug_in} (se {})",
        result.prte_hat,
        result.se
    );

    // The θ2 term alone against the same plug-in with the fitted β̂.
    let p = theta.feature_dim();
    let theta2_term: f64 = theta.theta2[p..]
        .iter()
        .zip(&theta.beta1)
        .map(|(t, b)| t * b)
        .sum::<f64>()
        - theta.theta2[..p].iter().zip(&theta.beta0).map(|(t, b)| t * b).sum::<f64>();
    let direct: f64 = cf
        .inputs()
        .iter()
        .map(|w| {
            let d: f64 = w.mu1.iter().zip(&theta.beta1).map(|(m, b)| m * b).sum::<f64>()
                - w.mu0.iter().zip(&theta.beta0).map(|(m, b)| m * b).sum::<f64>();
            0.5 * (1.0 - w.p_hat) * d
        })
        .sum::<f64>()
        / data.len() as f64;
    assert!((theta2_term - direct).abs() < 0.01, "{theta2_term} vs {direct}");
}

#[test]
fn null_proportional_shift_has_zero_theta2() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = generate_sample(&DgpParams::default(), 300, &mut rng);
    let config = EstimationConfig::new(Policy::proportional(0.0).unwrap());
    let cf = CrossFitted::fit(&data, &config).unwrap();
    assert!(cf.theta().theta2.iter().all(|v| *v == 0.0));
    assert!(cf.decomposed().iter().all(|d| d.m32.iter().all(|v| *v == 0.0)));
    estimate(&data, &config).unwrap();
}

#[test]
fn single_run_covers_truth_within_three_se() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let data = generate_sample(&DgpParams::default(), 500, &mut rng);
    let config = EstimationConfig::new(Policy::proportional(0.5).unwrap());
    let r = estimate(&data, &config).unwrap();
    let truth = DgpParams::default().prte(0.5).unwrap();
    assert!((r.prte_hat - truth).abs() <= 3.0 * r.se, "{} ± {}", r.prte_hat, r.se);
    assert!(r.ci_lo < r.prte_hat && r.prte_hat < r.ci_hi);
}
