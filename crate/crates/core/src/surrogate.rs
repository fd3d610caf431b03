//! Gaussian-process surrogate with a Matérn-5/2 kernel and white noise, and
//! the expected-improvement acquisition for minimization.

use ndarray::{Array1, Array2};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower, solve_upper_t};

/// Length scale of attention-kind search coordinates.
pub const ATTENTION_LENGTHSCALE: f64 = 1.0;
/// Length scale of FFN-kind search coordinates.
pub const FFN_LENGTHSCALE: f64 = 0.8;
const DUPLICATE_TOL: f64 = 1e-12;
const TINY_SIGMA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    /// One per search coordinate.
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    /// White-noise variance on the standardized target scale.
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>) -> Self {
        Self { lengthscales, signal_variance: 1.0, noise_variance: 1e-3 }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidDimension("kernel needs at least one length scale".into()));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !self.lengthscales.iter().all(|&l| positive(l))
            || !positive(self.signal_variance)
            || !positive(self.noise_variance)
        {
            return Err(Error::InvalidConfig("kernel parameters must be strictly positive".into()));
        }
        Ok(())
    }
}

/// `σ² (1 + √5 d + 5d²/3) exp(-√5 d)` with `d` the length-scaled distance.
pub fn matern_kernel(x: &[f64], y: &[f64], p: &KernelParams) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: x.len() });
    }
    if y.len() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: y.len() });
    }
    Ok(matern_unchecked(x, y, p))
}

fn matern_unchecked(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    let d2: f64 = x.iter().zip(y).zip(&p.lengthscales).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    let r = (5.0 * d2).sqrt();
    p.signal_variance * (1.0 + r + 5.0 * d2 / 3.0) * (-r).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub point: Vec<f64>,
    pub value: f64,
}

impl Observation {
    pub fn new(point: Vec<f64>, value: f64) -> Self {
        Self { point, value }
    }
}

/// A fitted GP; immutable, queries are read-only.
#[derive(Debug, Clone)]
pub struct GpState {
    params: KernelParams,
    points: Vec<Vec<f64>>,
    values_standardized: Array1<f64>,
    target_mean: f64,
    target_std: f64,
    chol: Array2<f64>,
    alpha: Array1<f64>,
    noise_variance: f64,
}

impl GpState {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    pub fn target_std(&self) -> f64 {
        self.target_std
    }

    pub fn values_standardized(&self) -> &Array1<f64> {
        &self.values_standardized
    }

    /// Lower Cholesky factor of `K + η² I`.
    pub fn chol(&self) -> &Array2<f64> {
        &self.chol
    }

    /// The noise variance actually used (raised tenfold if the first
    /// factorization failed).
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        gp_posterior(self, x)
    }
}

/// Fits the GP to `observations`: targets are standardized, duplicate points
/// are merged by averaging, and `K + η² I` is Cholesky-factored (retrying
/// once with `10 η²`).
pub fn gp_fit(observations: &[Observation], params: &KernelParams) -> Result<GpState> {
    params.validate()?;
    if observations.is_empty() {
        return Err(Error::Empty("GP observations"));
    }
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for o in observations {
        if o.point.len() != params.dim() {
            return Err(Error::DimensionMismatch { expected: params.dim(), got: o.point.len() });
        }
        if !o.value.is_finite() || o.point.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GP observation"));
        }
        let dup = points
            .iter()
            .position(|p| p.iter().zip(&o.point).all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL));
        match dup {
            Some(i) => {
                sums[i].0 += o.value;
                sums[i].1 += 1;
            }
            None => {
                points.push(o.point.clone());
                sums.push((o.value, 1));
            }
        }
    }
    let values: Array1<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    let n = values.len() as f64;
    let target_mean = values.sum() / n;
    let var = values.iter().map(|v| (v - target_mean).powi(2)).sum::<f64>() / n;
    let target_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let standardized = values.mapv(|v| (v - target_mean) / target_std);

    let m = points.len();
    let kernel = Array2::from_shape_fn((m, m), |(i, j)| matern_unchecked(&points[i], &points[j], params));
    let mut noise = params.noise_variance;
    let chol = match cholesky(&(&kernel + &(Array2::<f64>::eye(m) * noise))) {
        Ok(l) => l,
        Err(_) => {
            noise *= 10.0;
            cholesky(&(&kernel + &(Array2::<f64>::eye(m) * noise)))?
        }
    };
    let alpha = solve_upper_t(&chol, solve_lower(&chol, standardized.view()).view());
    Ok(GpState {
        params: params.clone(),
        points,
        values_standardized: standardized,
        target_mean,
        target_std,
        chol,
        alpha,
        noise_variance: noise,
    })
}

/// Posterior mean and variance at `x`, on the original target scale.
pub fn gp_posterior(state: &GpState, x: &[f64]) -> Result<(f64, f64)> {
    if x.len() != state.params.dim() {
        return Err(Error::DimensionMismatch { expected: state.params.dim(), got: x.len() });
    }
    let k: Array1<f64> = state.points.iter().map(|p| matern_unchecked(x, p, &state.params)).collect();
    let mu = state.target_mean + state.target_std * k.dot(&state.alpha);
    let v = solve_lower(&state.chol, k.view());
    let var = (state.params.signal_variance - v.dot(&v)).max(0.0);
    Ok((mu, var * state.target_std * state.target_std))
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `E[max(0, best - H)]` for `H ~ N(mu, sigma²)`.
pub fn ei_closed_form(mu: f64, sigma: f64, best: f64) -> f64 {
    let gain = best - mu;
    if sigma < TINY_SIGMA {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// Expected improvement over the incumbent `best` (minimization).
pub fn expected_improvement(state: &GpState, x: &[f64], best: f64) -> Result<f64> {
    if !best.is_finite() {
        return Err(Error::NonFinite("incumbent value"));
    }
    let (mu, var) = gp_posterior(state, x)?;
    Ok(ei_closed_form(mu, var.sqrt(), best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded_obs(n: usize, dim: usize, seed: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
                let v = p.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum::<f64>() + rng.random::<f64>() * 0.1;
                Observation::new(p, v)
            })
            .collect()
    }

    #[test]
    fn kernel_values() {
        let p = KernelParams::new(vec![1.0]);
        assert_eq!(matern_kernel(&[0.3], &[0.3], &p).unwrap(), 1.0);
        // (1 + √5 + 5/3) e^{-√5}
        let expected = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        let k = matern_kernel(&[0.0], &[1.0], &p).unwrap();
        assert!((k - expected).abs() < 1e-15);
        assert!((k - 0.5241).abs() < 1e-3);
        let p3 = KernelParams::new(vec![1.0, 0.8, 0.8]);
        let (a, b) = ([0.1, 0.5, 0.2], [0.7, 0.0, 0.3]);
        assert_eq!(matern_kernel(&a, &b, &p3).unwrap(), matern_kernel(&b, &a, &p3).unwrap());
        assert!(matern_kernel(&[0.0], &[0.0, 1.0], &p).is_err());
    }

    #[test]
    fn single_observation() {
        let p = KernelParams::new(vec![1.0, 1.0]);
        let gp = gp_fit(&[Observation::new(vec![0.2, 0.4], 3.5)], &p).unwrap();
        let (mu, _) = gp.posterior(&[0.2, 0.4]).unwrap();
        assert!((mu - 3.5).abs() <= 1e-2);
        assert!(gp_fit(&[], &p).is_err());
    }

    #[test]
    fn duplicates_are_regularized() {
        let p = KernelParams::new(vec![1.0]);
        let obs = vec![Observation::new(vec![0.5], 1.0), Observation::new(vec![0.5], 1.0), Observation::new(vec![0.1], 2.0)];
        let gp = gp_fit(&obs, &p).unwrap();
        assert_eq!(gp.points().len(), 2);
        let l = gp.chol();
        let k = Array2::from_shape_fn((2, 2), |(i, j)| matern_kernel(&gp.points()[i], &gp.points()[j], &p).unwrap())
            + Array2::<f64>::eye(2) * gp.noise_variance();
        assert!((l.dot(&l.t()) - k).iter().all(|d| d.abs() < 1e-8));
    }

    #[test]
    fn far_query_recovers_prior() {
        let p = KernelParams::new(vec![0.1, 0.1, 0.1]);
        let obs = seeded_obs(5, 3, 9);
        let gp = gp_fit(&obs, &p).unwrap();
        let (mu, var) = gp.posterior(&[5.0, 5.0, 5.0]).unwrap();
        assert!((mu - gp.target_mean()).abs() < 1e-6);
        assert!((var - gp.target_std().powi(2)).abs() < 1e-6);
    }

    #[test]
    fn near_noiseless_interpolation() {
        let mut p = KernelParams::new(vec![0.5, 0.5]);
        p.noise_variance = 1e-12;
        let obs = vec![
            Observation::new(vec![0.0, 0.0], 1.0),
            Observation::new(vec![1.0, 0.0], 3.0),
            Observation::new(vec![0.0, 1.0], -2.0),
        ];
        let gp = gp_fit(&obs, &p).unwrap();
        for o in &obs {
            let (mu, _) = gp.posterior(&o.point).unwrap();
            assert!((mu - o.value).abs() < 1e-6);
        }
    }

    #[test]
    fn variance_never_negative() {
        let p = KernelParams::new(vec![1.0, 0.8]);
        let gp = gp_fit(&seeded_obs(12, 2, 4), &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let x = [rng.random::<f64>() * 1.4 - 0.2, rng.random::<f64>() * 1.4 - 0.2];
            assert!(gp.posterior(&x).unwrap().1 >= 0.0);
        }
    }

    #[test]
    fn ei_limits() {
        assert!((ei_closed_form(0.0, 1.0, 0.0) - 0.39894).abs() < 1e-5);
        assert_eq!(ei_closed_form(1.0, 0.0, 0.5), 0.0);
        assert!((ei_closed_form(0.0, 0.0, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ei_increases_with_sigma() {
        for &(mu, best) in &[(0.0, 0.0), (1.0, 0.5), (0.2, 0.9)] {
            let mut prev = 0.0;
            for i in 1..=50 {
                let e = ei_closed_form(mu, i as f64 * 0.05, best);
                assert!(e >= prev);
                prev = e;
            }
        }
    }

    #[test]
    fn cdf_accuracy() {
        // reference values of Φ
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-7);
        assert!((normal_cdf(-2.5) - 0.006_209_665_325_776_132).abs() < 1e-7);
    }

    #[test]
    fn ei_argmax_is_invariant_to_affine_targets() {
        let p = KernelParams::new(vec![1.0, 0.8, 0.8]);
        let obs = seeded_obs(8, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cands: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let argmax = |obs: &[Observation]| {
            let gp = gp_fit(obs, &p).unwrap();
            let best = obs.iter().map(|o| o.value).fold(f64::INFINITY, f64::min);
            let eis: Vec<f64> = cands.iter().map(|c| expected_improvement(&gp, c, best).unwrap()).collect();
            (0..eis.len()).fold(0, |b, i| if eis[i] > eis[b] { i } else { b })
        };
        let shifted: Vec<Observation> = obs.iter().map(|o| Observation::new(o.point.clone(), 3.0 * o.value - 7.0)).collect();
        assert_eq!(argmax(&obs), argmax(&shifted));
    }
}
