//! Diagonal-adapter post-training of factored layers.
//!
//! A layer with factors `B A + bias` gains the term
//! `diag(λ_b) · B_r' · diag(λ_d) · A_r'`, where `B_r'` and `A_r'` are the
//! leading `r'` columns of `B` and rows of `A`, held fixed. Only the two
//! diagonal vectors are trained, against the original layer's outputs.
//!
//! When the adapted layer sees exactly the inputs the target was computed
//! from, a fresh adapter sits at a stationary point: `Bᵀ (B A - W) = 0` for
//! both AFM and SVD factors, so every gradient vanishes. Training signal
//! comes from the input drift caused by compressing upstream layers, which
//! [`posttrain_to_target`] takes explicitly.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::LowRankFactors;
use crate::model::{LayerId, Tensor, TensorBundle};

/// Default adapter rank.
pub const DEFAULT_R_PRIME: usize = 8;
const LAMBDA_B_INIT: f64 = 0.1;
const MAX_HALVINGS: usize = 40;
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub r_prime: usize,
    /// `d2 × r'`
    pub b_sub: Array2<f64>,
    /// `r' × d1`
    pub a_sub: Array2<f64>,
    pub lambda_b: Array1<f64>,
    pub lambda_d: Array1<f64>,
}

/// Slices the leading `r_prime` directions of `f`; `λ_b = 0.1`, `λ_d = 0`,
/// so the adapter starts out contributing nothing.
pub fn init_adapters(f: &LowRankFactors, r_prime: usize) -> Result<Adapter> {
    if r_prime == 0 || r_prime > f.rank() {
        return Err(Error::RankOutOfRange { rank: r_prime, max: f.rank() });
    }
    Ok(Adapter {
        r_prime,
        b_sub: f.b.slice(s![.., ..r_prime]).to_owned(),
        a_sub: f.a.slice(s![..r_prime, ..]).to_owned(),
        lambda_b: Array1::from_elem(f.rows(), LAMBDA_B_INIT),
        lambda_d: Array1::zeros(r_prime),
    })
}

fn check_shapes(f: &LowRankFactors, ad: &Adapter, x: ArrayView2<'_, f64>) -> Result<()> {
    let ok = ad.b_sub.dim() == (f.rows(), ad.r_prime)
        && ad.a_sub.dim() == (ad.r_prime, f.cols())
        && ad.lambda_b.len() == f.rows()
        && ad.lambda_d.len() == ad.r_prime;
    if !ok {
        return Err(Error::ShapeMismatch(format!("adapter of rank {} does not fit {}x{} factors", ad.r_prime, f.rows(), f.cols())));
    }
    if x.nrows() != f.cols() {
        return Err(Error::ShapeMismatch(format!("input has {} rows, layer expects {}", x.nrows(), f.cols())));
    }
    Ok(())
}

struct Pass {
    out: Array2<f64>,
    /// `A_r' x`
    q: Array2<f64>,
    /// `B_r' diag(λ_d) A_r' x`
    p: Array2<f64>,
}

fn pass(f: &LowRankFactors, ad: &Adapter, x: ArrayView2<'_, f64>) -> Result<Pass> {
    check_shapes(f, ad, x)?;
    let q = ad.a_sub.dot(&x);
    let p = ad.b_sub.dot(&(&q * &ad.lambda_d.view().insert_axis(Axis(1))));
    let out = f.apply(x)? + &p * &ad.lambda_b.view().insert_axis(Axis(1));
    Ok(Pass { out, q, p })
}

/// Layer output with the adapter on column-stacked inputs (`d1 × n`).
pub fn adapter_forward(f: &LowRankFactors, ad: &Adapter, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(pass(f, ad, x)?.out)
}

/// `½ ‖adapter_forward − target‖²_F`.
pub fn adapter_loss(f: &LowRankFactors, ad: &Adapter, x: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    let out = adapter_forward(f, ad, x)?;
    if out.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!("target {:?} for output {:?}", target.dim(), out.dim())));
    }
    Ok(0.5 * (&out - &target).iter().map(|v| v * v).sum::<f64>())
}

/// Gradients of [`adapter_loss`] with respect to `λ_b` and `λ_d`.
pub fn adapter_grad(
    f: &LowRankFactors,
    ad: &Adapter,
    x: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let Pass { out, q, p } = pass(f, ad, x)?;
    if out.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!("target {:?} for output {:?}", target.dim(), out.dim())));
    }
    let r = out - target;
    let grad_b = (&r * &p).sum_axis(Axis(1));
    let scaled_b = &ad.b_sub * &ad.lambda_b.view().insert_axis(Axis(1));
    let grad_d = (scaled_b.t().dot(&r) * &q).sum_axis(Axis(1));
    Ok((grad_b, grad_d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub r_prime: usize,
    pub steps: usize,
    pub lr: f64,
    /// Halve the step size and retry whenever a step would raise the loss.
    pub backtracking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { r_prime: DEFAULT_R_PRIME, steps: 100, lr: 1e-2, backtracking: true }
    }
}

#[derive(Debug, Clone)]
pub struct Posttrained {
    /// The iterate with the lowest loss.
    pub adapter: Adapter,
    /// Loss before training, then after each step.
    pub losses: Vec<f64>,
}

impl Posttrained {
    pub fn best_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Gradient descent on the adapter diagonals so that the adapted factors
/// reproduce `w_original · x_calib`.
pub fn posttrain_layer(
    w_original: &Array2<f64>,
    f: &LowRankFactors,
    x_calib: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<Posttrained> {
    if w_original.dim() != (f.rows(), f.cols()) {
        return Err(Error::ShapeMismatch(format!("weight {:?} for {}x{} factors", w_original.dim(), f.rows(), f.cols())));
    }
    posttrain_to_target(f, x_calib, w_original.dot(&x_calib).view(), cfg)
}

/// Gradient descent on the adapter diagonals so that the adapted layer maps
/// `x_in` (inputs as seen inside the compressed model) onto `target`
/// (the original layer's outputs inside the original model).
pub fn posttrain_to_target(
    f: &LowRankFactors,
    x_in: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<Posttrained> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {} must be positive", cfg.lr)));
    }
    let mut ad = init_adapters(f, cfg.r_prime)?;
    let initial = adapter_loss(f, &ad, x_in, target)?;
    let mut losses = vec![initial];
    let mut best = (initial, ad.clone());
    let mut loss = initial;
    let mut lr = cfg.lr;
    for _ in 0..cfg.steps {
        let (gb, gd) = adapter_grad(f, &ad, x_in, target)?;
        let step = |lr: f64| Adapter { lambda_b: &ad.lambda_b - &(&gb * lr), lambda_d: &ad.lambda_d - &(&gd * lr), ..ad.clone() };
        let mut next = step(lr);
        let mut next_loss = adapter_loss(f, &next, x_in, target)?;
        if cfg.backtracking {
            let mut halvings = 0;
            while !(next_loss <= loss) && halvings < MAX_HALVINGS {
                lr *= 0.5;
                halvings += 1;
                next = step(lr);
                next_loss = adapter_loss(f, &next, x_in, target)?;
            }
            if !(next_loss <= loss) {
                break;
            }
        } else if !(next_loss <= DIVERGENCE_FACTOR * initial) {
            return Err(Error::Diverged(format!(
                "loss {next_loss:.3e} exceeds {DIVERGENCE_FACTOR}x the initial {initial:.3e}; try a smaller learning rate than {}",
                cfg.lr
            )));
        }
        ad = next;
        loss = next_loss;
        losses.push(loss);
        if loss < best.0 {
            best = (loss, ad.clone());
        }
    }
    Ok(Posttrained { adapter: best.1, losses })
}

/// Folds the adapter into wider factors:
/// `B' = [B | diag(λ_b) B_r']`, `A' = [A ; diag(λ_d) A_r']`.
pub fn merge_adapter(f: &LowRankFactors, ad: &Adapter) -> Result<LowRankFactors> {
    check_shapes(f, ad, Array2::<f64>::zeros((f.cols(), 0)).view())?;
    let extra_b = &ad.b_sub * &ad.lambda_b.view().insert_axis(Axis(1));
    let extra_a = &ad.a_sub * &ad.lambda_d.view().insert_axis(Axis(1));
    let b = concatenate(Axis(1), &[f.b.view(), extra_b.view()]).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let a = concatenate(Axis(0), &[f.a.view(), extra_a.view()]).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    LowRankFactors::new(b, a, f.bias.clone(), f.method)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct AdapterMeta {
    r_prime: usize,
}

/// Adds `<id>.lambda_b`, `<id>.lambda_d` and `<id>.adapter_meta`.
pub fn write_adapters(bundle: &mut TensorBundle, adapters: &BTreeMap<LayerId, Adapter>) -> Result<()> {
    for (id, ad) in adapters {
        bundle.insert(Tensor::from_vector(format!("{id}.lambda_b"), &ad.lambda_b));
        bundle.insert(Tensor::from_vector(format!("{id}.lambda_d"), &ad.lambda_d));
        bundle.insert(Tensor::from_json(format!("{id}.adapter_meta"), &AdapterMeta { r_prime: ad.r_prime })?);
    }
    Ok(())
}

/// Reads adapters back, re-slicing the fixed subspaces from `factors`.
pub fn read_adapters(
    bundle: &TensorBundle,
    factors: &BTreeMap<LayerId, LowRankFactors>,
) -> Result<BTreeMap<LayerId, Adapter>> {
    let mut out = BTreeMap::new();
    for (id, f) in factors {
        let Some(meta) = bundle.get(&format!("{id}.adapter_meta")) else { continue };
        let meta: AdapterMeta = meta.to_json()?;
        let mut ad = init_adapters(f, meta.r_prime)?;
        ad.lambda_b = bundle.require(&format!("{id}.lambda_b"))?.to_vector()?;
        ad.lambda_d = bundle.require(&format!("{id}.lambda_d"))?.to_vector()?;
        check_shapes(f, &ad, Array2::<f64>::zeros((f.cols(), 0)).view())?;
        out.insert(*id, ad);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::svd_truncate;
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, "posttrain-test");
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    fn case(d2: usize, d1: usize, rank: usize, seed: u64) -> (Array2<f64>, LowRankFactors, Array2<f64>) {
        let w = gaussian(d2, d1, seed);
        let f = svd_truncate(&w, rank).unwrap();
        (w, f, gaussian(d1, 20, seed + 1000))
    }

    fn randomized(f: &LowRankFactors, r_prime: usize, seed: u64) -> Adapter {
        let mut ad = init_adapters(f, r_prime).unwrap();
        ad.lambda_b = gaussian(f.rows(), 1, seed).column(0).to_owned();
        ad.lambda_d = gaussian(r_prime, 1, seed + 1).column(0).to_owned();
        ad
    }

    #[test]
    fn fresh_adapter_is_neutral() {
        let (_, f, x) = case(8, 6, 4, 1);
        let ad = init_adapters(&f, 2).unwrap();
        assert_eq!(adapter_forward(&f, &ad, x.view()).unwrap(), f.apply(x.view()).unwrap());
        assert_eq!(ad.b_sub, f.b.slice(s![.., ..2]));
        assert_eq!(ad.a_sub, f.a.slice(s![..2, ..]));
        let full = init_adapters(&f, 4).unwrap();
        assert_eq!(full.b_sub, f.b);
        assert_eq!(full.a_sub, f.a);
        assert!(init_adapters(&f, 5).is_err());
    }

    #[test]
    fn unit_diagonals_double_the_factor() {
        let (_, f, x) = case(8, 6, 4, 2);
        let mut ad = init_adapters(&f, 4).unwrap();
        ad.lambda_b.fill(1.0);
        ad.lambda_d.fill(1.0);
        let got = adapter_forward(&f, &ad, x.view()).unwrap();
        let want = f.b.dot(&(&f.a * 2.0)).dot(&x) + &f.bias.view().insert_axis(Axis(1));
        assert!((got - want).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn matches_dense_materialization() {
        let (_, f, x) = case(10, 7, 5, 3);
        let ad = randomized(&f, 3, 4);
        let dense = f.dense() + Array2::from_diag(&ad.lambda_b).dot(&ad.b_sub).dot(&Array2::from_diag(&ad.lambda_d)).dot(&ad.a_sub);
        let want = dense.dot(&x) + &f.bias.view().insert_axis(Axis(1));
        let got = adapter_forward(&f, &ad, x.view()).unwrap();
        assert!((got - want).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn gradient_special_cases() {
        let (_, f, x) = case(8, 6, 4, 5);
        let mut ad = randomized(&f, 3, 6);
        let out = adapter_forward(&f, &ad, x.view()).unwrap();
        let (gb, gd) = adapter_grad(&f, &ad, x.view(), out.view()).unwrap();
        assert!(gb.iter().chain(gd.iter()).all(|&g| g == 0.0));
        ad.lambda_d.fill(0.0);
        let (gb, _) = adapter_grad(&f, &ad, x.view(), Array2::zeros(out.dim()).view()).unwrap();
        assert!(gb.iter().all(|&g| g == 0.0));
        assert!(adapter_grad(&f, &ad, x.view(), Array2::zeros((3, 3)).view()).is_err());
    }

    /// Central differences of the loss, h = 1e-5.
    fn numeric_grad(f: &LowRankFactors, ad: &Adapter, x: &Array2<f64>, t: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
        let h = 1e-5;
        let loss = |a: &Adapter| adapter_loss(f, a, x.view(), t.view()).unwrap();
        let gb = (0..ad.lambda_b.len())
            .map(|i| {
                let (mut p, mut m) = (ad.clone(), ad.clone());
                p.lambda_b[i] += h;
                m.lambda_b[i] -= h;
                (loss(&p) - loss(&m)) / (2.0 * h)
            })
            .collect();
        let gd = (0..ad.lambda_d.len())
            .map(|i| {
                let (mut p, mut m) = (ad.clone(), ad.clone());
                p.lambda_d[i] += h;
                m.lambda_d[i] -= h;
                (loss(&p) - loss(&m)) / (2.0 * h)
            })
            .collect();
        (gb, gd)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (w, f, x) = case(8, 6, 4, 7);
        let ad = randomized(&f, 3, 8);
        let t = w.dot(&x);
        let (gb, gd) = adapter_grad(&f, &ad, x.view(), t.view()).unwrap();
        let (nb, nd) = numeric_grad(&f, &ad, &x, &t);
        for (a, n) in gb.iter().chain(gd.iter()).zip(nb.iter().chain(nd.iter())) {
            assert!((a - n).abs() <= 1e-4 * n.abs().max(1e-3), "{a} vs {n}");
        }
    }

    #[test]
    fn zero_steps_keeps_adapter() {
        let (w, f, x) = case(8, 6, 4, 9);
        let cfg = TrainConfig { r_prime: 2, steps: 0, ..TrainConfig::default() };
        let out = posttrain_layer(&w, &f, x.view(), &cfg).unwrap();
        assert_eq!(out.adapter, init_adapters(&f, 2).unwrap());
        let bare = 0.5 * (f.apply(x.view()).unwrap() - w.dot(&x)).iter().map(|v| v * v).sum::<f64>();
        assert_eq!(out.losses, vec![bare]);
    }

    #[test]
    fn matched_inputs_are_stationary() {
        let (w, f, x) = case(12, 9, 6, 21);
        let ad = init_adapters(&f, 4).unwrap();
        let (gb, gd) = adapter_grad(&f, &ad, x.view(), w.dot(&x).view()).unwrap();
        assert!(gb.iter().chain(gd.iter()).all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn backtracking_losses_never_increase() {
        for seed in 0..10 {
            let (w, f, x) = case(12, 9, 6, 100 + seed);
            let drifted = &x + &(gaussian(9, 20, 500 + seed) * 0.3);
            let cfg = TrainConfig { r_prime: 4, steps: 40, lr: 0.5, backtracking: true };
            let out = posttrain_to_target(&f, drifted.view(), w.dot(&x).view(), &cfg).unwrap();
            assert!(out.losses.windows(2).all(|p| p[1] <= p[0]), "seed {seed}");
            assert!(out.best_loss() < out.losses[0], "seed {seed}");
        }
    }

    #[test]
    fn plain_descent_reports_divergence() {
        let (w, f, x) = case(12, 9, 6, 3);
        let drifted = &x + &(gaussian(9, 20, 4) * 0.3);
        let cfg = TrainConfig { r_prime: 4, steps: 50, lr: 10.0, backtracking: false };
        let r = posttrain_to_target(&f, drifted.view(), w.dot(&x).view(), &cfg);
        assert!(matches!(r, Err(Error::Diverged(_))));
    }

    #[test]
    fn merge_is_forward_equivalent() {
        let (_, f, x) = case(10, 7, 5, 11);
        let ad = randomized(&f, 3, 12);
        let merged = merge_adapter(&f, &ad).unwrap();
        assert_eq!(merged.rank(), 8);
        assert_eq!(merged.param_count(), 8 * (10 + 7));
        let got = merged.apply(x.view()).unwrap();
        let want = adapter_forward(&f, &ad, x.view()).unwrap();
        assert!((got - want).iter().all(|d| d.abs() < 1e-9));

        let zero = init_adapters(&f, 3).unwrap();
        let merged = merge_adapter(&f, &zero).unwrap();
        let diff = merged.apply(x.view()).unwrap() - f.apply(x.view()).unwrap();
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn bundle_round_trip() {
        let (_, f, _) = case(8, 6, 4, 13);
        let id: LayerId = "layers.1.mlp_up".parse().unwrap();
        let ad = randomized(&f, 2, 14);
        let mut bundle = TensorBundle::new();
        write_adapters(&mut bundle, &BTreeMap::from([(id, ad.clone())])).unwrap();
        let back = read_adapters(&bundle, &BTreeMap::from([(id, f)])).unwrap();
        let got = &back[&id];
        assert_eq!(got.r_prime, 2);
        assert!((&got.lambda_b - &ad.lambda_b).iter().all(|d| d.abs() < 1e-6));
        assert!((&got.lambda_d - &ad.lambda_d).iter().all(|d| d.abs() < 1e-6));
    }
}
