use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::allocation::{project_budget, Allocation, AllocationSpace};
use super::evaluate::Evaluator;
use super::scheme::GroupKind;
use super::SearchConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::substream;
use crate::surrogate::{
    expected_improvement, gp_fit, KernelParams, Observation, ATTENTION_LENGTHSCALE, FFN_LENGTHSCALE,
};

/// Standard deviation of incumbent perturbations among the candidates.
pub const PERTURB_SIGMA: f64 = 0.05;
/// Epoch count applied by [`warm_start`].
pub const WARM_START_EPOCHS: usize = 20;

/// A feasible region the optimizer can sample from and map to GP
/// coordinates.
pub trait SearchSpace {
    type Point: Clone;

    fn lengthscales(&self) -> Vec<f64>;

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Self::Point>;

    /// A feasible point near `p`, from Gaussian noise on its coordinates.
    fn perturb(&self, p: &Self::Point, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Self::Point>;

    fn coords(&self, p: &Self::Point) -> Vec<f64>;
}

impl SearchSpace for AllocationSpace {
    type Point = Allocation;

    fn lengthscales(&self) -> Vec<f64> {
        self.active_groups()
            .iter()
            .map(|&g| match self.scheme().groups()[g].kind {
                GroupKind::Attention => ATTENTION_LENGTHSCALE,
                GroupKind::Ffn => FFN_LENGTHSCALE,
            })
            .collect()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Allocation> {
        AllocationSpace::sample(self, rng)
    }

    fn perturb(&self, p: &Allocation, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Allocation> {
        let raw = jitter(&self.coords(p), sigma, rng)?;
        self.repair(&raw)
    }

    fn coords(&self, p: &Allocation) -> Vec<f64> {
        AllocationSpace::coords(self, p)
    }
}

fn jitter(x: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(x.iter().map(|v| (v + noise.sample(rng)).max(0.0)).collect())
}

/// Continuous ratios on a weighted budget surface `Σ wᵢ λᵢ = ρ Σ wᵢ`,
/// each clipped to `[0, 0.95]`; no ranks involved.
#[derive(Debug, Clone)]
pub struct BudgetSimplex {
    pub weights: Vec<f64>,
    pub rho: f64,
    pub lengthscales: Vec<f64>,
}

impl BudgetSimplex {
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let raw: Vec<Option<f64>> = raw.iter().map(|&v| Some(v)).collect();
        let total = self.weights.iter().sum();
        Ok(project_budget(&raw, &self.weights, total, self.rho)?.into_iter().flatten().collect())
    }
}

impl SearchSpace for BudgetSimplex {
    type Point = Vec<f64>;

    fn lengthscales(&self) -> Vec<f64> {
        self.lengthscales.clone()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let raw: Vec<f64> = self.weights.iter().map(|_| rng.random::<f64>()).collect();
        self.project(&raw)
    }

    fn perturb(&self, p: &Vec<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.project(&jitter(p, sigma, rng)?)
    }

    fn coords(&self, p: &Vec<f64>) -> Vec<f64> {
        p.clone()
    }
}

/// One evaluated point.
#[derive(Debug, Clone)]
pub struct Trial<P, E> {
    pub point: P,
    pub value: f64,
    pub extra: E,
}

/// Index of the first minimal value.
fn argmin<P, E>(trials: &[Trial<P, E>]) -> usize {
    (0..trials.len()).fold(0, |b, i| if trials[i].value < trials[b].value { i } else { b })
}

/// Minimizes `eval` over `space` with `cfg.epochs` evaluations: the
/// `initial` points, random samples up to `cfg.init_points`, then one
/// expected-improvement argmax per remaining epoch.
pub fn bo_minimize<S, E, F>(
    space: &S,
    cfg: &SearchConfig,
    initial: Vec<S::Point>,
    mut eval: F,
) -> Result<Vec<Trial<S::Point, E>>>
where
    S: SearchSpace,
    F: FnMut(&S::Point) -> Result<(f64, E)>,
{
    cfg.validate()?;
    if initial.len() > cfg.epochs {
        return Err(Error::InvalidConfig(format!("{} initial points exceed {} epochs", initial.len(), cfg.epochs)));
    }
    let mut init_rng = substream(cfg.seed, "initial");
    let mut cand_rng = substream(cfg.seed, "candidates");
    let n_init = cfg.init_points.max(initial.len()).min(cfg.epochs);
    let mut trials: Vec<Trial<S::Point, E>> = Vec::with_capacity(cfg.epochs);
    let mut push = |point: S::Point, trials: &mut Vec<Trial<S::Point, E>>| -> Result<()> {
        let (value, extra) = eval(&point)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        trials.push(Trial { point, value, extra });
        Ok(())
    };
    for p in initial {
        push(p, &mut trials)?;
    }
    while trials.len() < n_init {
        let p = space.sample(&mut init_rng)?;
        push(p, &mut trials)?;
    }
    let params = KernelParams::new(space.lengthscales());
    while trials.len() < cfg.epochs {
        let obs: Vec<Observation> = trials.iter().map(|t| Observation::new(space.coords(&t.point), t.value)).collect();
        let gp = gp_fit(&obs, &params)?;
        let best = argmin(&trials);
        let incumbent = trials[best].point.clone();
        let best_value = trials[best].value;

        let n_perturbed = cfg.candidates_per_step / 4;
        let n_fresh = cfg.candidates_per_step - n_perturbed;
        let mut chosen: Option<(f64, S::Point)> = None;
        for i in 0..cfg.candidates_per_step {
            let cand = if i < n_fresh {
                space.sample(&mut cand_rng)
            } else {
                space.perturb(&incumbent, PERTURB_SIGMA, &mut cand_rng)
            };
            let cand = match cand {
                Ok(c) => c,
                Err(Error::Infeasible(_)) => continue,
                Err(e) => return Err(e),
            };
            let ei = expected_improvement(&gp, &space.coords(&cand), best_value)?;
            if chosen.as_ref().is_none_or(|(e, _)| ei > *e) {
                chosen = Some((ei, cand));
            }
        }
        let (_, next) = chosen.ok_or_else(|| Error::Infeasible("every acquisition candidate was infeasible".into()))?;
        push(next, &mut trials)?;
    }
    Ok(trials)
}

/// One line of the observation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    /// 1-based.
    pub epoch: usize,
    pub lambdas: Vec<Option<f64>>,
    #[serde(rename = "H")]
    pub h: f64,
    pub ppl: f64,
    pub rkl: f64,
    pub beta_rkl: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

impl ObservationRecord {
    /// Equal up to the wall-clock timestamp.
    pub fn same_result(&self, other: &Self) -> bool {
        Self { timestamp: 0.0, ..self.clone() } == Self { timestamp: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationLog {
    pub records: Vec<ObservationRecord>,
}

impl ObservationLog {
    /// First record with the minimal `H`.
    pub fn best(&self) -> Option<&ObservationRecord> {
        self.records.iter().fold(None, |b: Option<&ObservationRecord>, r| match b {
            Some(b) if b.h <= r.h => Some(b),
            _ => Some(r),
        })
    }

    pub fn best_allocation(&self, space: &AllocationSpace) -> Result<Allocation> {
        let best = self.best().ok_or(Error::Empty("observation log"))?;
        Allocation::from_lambdas(space.scheme().clone(), space.config(), space.rho(), best.lambdas.clone())
    }

    /// Running minimum of `H` after each record.
    pub fn running_best(&self) -> Vec<f64> {
        self.records
            .iter()
            .scan(f64::INFINITY, |m, r| {
                *m = m.min(r.h);
                Some(*m)
            })
            .collect()
    }

    pub fn same_results(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_result(b))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Searches `space` for the allocation minimizing the evaluator's
/// objective. A prior set by [`warm_start`] is evaluated first.
pub fn bo_search(
    evaluator: &Evaluator,
    space: &AllocationSpace,
    cfg: &SearchConfig,
) -> Result<(Allocation, ObservationLog)> {
    if let Some(prior) = &cfg.prior {
        space.check(prior)?;
    }
    let initial: Vec<Allocation> = cfg.prior.iter().cloned().collect();
    let mut log = ObservationLog::default();
    let trials = bo_minimize(space, cfg, initial, |alloc| {
        let e = evaluator.evaluate(alloc, cfg.beta_rkl)?;
        log.records.push(ObservationRecord {
            epoch: log.records.len() + 1,
            lambdas: alloc.lambdas().to_vec(),
            h: e.h,
            ppl: e.ppl,
            rkl: e.rkl,
            beta_rkl: cfg.beta_rkl,
            timestamp: now(),
        });
        Ok((e.h, ()))
    })?;
    let best = trials[argmin(&trials)].point.clone();
    Ok((best, log))
}

/// Seeds a search with `prior` as its first evaluated point and shortens
/// it to [`WARM_START_EPOCHS`] epochs.
pub fn warm_start(prior: &Allocation, space: &AllocationSpace, cfg: &SearchConfig) -> Result<SearchConfig> {
    space.check(prior)?;
    Ok(SearchConfig { prior: Some(prior.clone()), init_points: 1, epochs: WARM_START_EPOCHS, ..cfg.clone() })
}

/// Re-targets an allocation found for one model onto another of the same
/// shape, keeping its ranks.
pub fn transfer(prior: &Allocation, config: &ModelConfig) -> Result<Allocation> {
    Allocation::from_file(&prior.to_file(), config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic<'a>(weights: &'a [f64], centers: &[f64]) -> impl Fn(&Vec<f64>) -> Result<(f64, ())> + 'a {
        let centers = centers.to_vec();
        move |x: &Vec<f64>| Ok((x.iter().zip(&centers).zip(weights).map(|((x, c), w)| w * (x - c).powi(2)).sum(), ()))
    }

    fn small_cfg(epochs: usize, init: usize, seed: u64) -> SearchConfig {
        SearchConfig { epochs, init_points: init, candidates_per_step: 256, seed, ..SearchConfig::default() }
    }

    #[test]
    fn pure_random_design() {
        let space = BudgetSimplex { weights: vec![1.0; 3], rho: 0.3, lengthscales: vec![1.0; 3] };
        let f = quadratic(&[1.0, 1.0, 1.0], &[0.6, 0.1, 0.2]);
        let trials = bo_minimize(&space, &small_cfg(6, 6, 1), vec![], &f).unwrap();
        assert_eq!(trials.len(), 6);
        let min = trials.iter().map(|t| t.value).fold(f64::INFINITY, f64::min);
        assert_eq!(trials[argmin(&trials)].value, min);
    }

    #[test]
    fn deterministic_and_improving() {
        let space = BudgetSimplex { weights: vec![2.0, 1.0, 1.0, 3.0], rho: 0.25, lengthscales: vec![1.0, 1.0, 0.8, 0.8] };
        let f = quadratic(&[1.0, 2.0, 1.0, 1.0], &[0.5, 0.0, 0.3, 0.1]);
        let a = bo_minimize(&space, &small_cfg(20, 5, 3), vec![], &f).unwrap();
        let b = bo_minimize(&space, &small_cfg(20, 5, 3), vec![], &f).unwrap();
        let va: Vec<f64> = a.iter().map(|t| t.value).collect();
        let vb: Vec<f64> = b.iter().map(|t| t.value).collect();
        assert_eq!(va, vb);
        // BO steps improve on the random design here
        let init_best = va[..5].iter().copied().fold(f64::INFINITY, f64::min);
        let final_best = va.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(final_best < init_best);
        for t in &a {
            let mean: f64 = t.point.iter().zip(&space.weights).map(|(x, w)| x * w).sum::<f64>() / 7.0;
            assert!((mean - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn initial_points_come_first() {
        let space = BudgetSimplex { weights: vec![1.0; 3], rho: 0.3, lengthscales: vec![1.0; 3] };
        let f = quadratic(&[1.0, 1.0, 1.0], &[0.6, 0.1, 0.2]);
        let prior = vec![0.3, 0.3, 0.3];
        let trials = bo_minimize(&space, &small_cfg(1, 1, 1), vec![prior.clone()], &f).unwrap();
        assert_eq!(trials.len(), 1);
        assert_eq!(trials[0].point, prior);
        assert!(bo_minimize(&space, &small_cfg(1, 1, 1), vec![prior.clone(), prior], &f).is_err());
    }

    #[test]
    fn log_round_trip() {
        let log = ObservationLog {
            records: vec![
                ObservationRecord { epoch: 1, lambdas: vec![Some(0.25), None], h: 2.5, ppl: 12.0, rkl: 0.01, beta_rkl: 1.0, timestamp: 1.5 },
                ObservationRecord { epoch: 2, lambdas: vec![Some(0.5), None], h: 2.25, ppl: 9.0, rkl: 0.05, beta_rkl: 1.0, timestamp: 2.5 },
            ],
        };
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"H\":2.5"));
        let back = ObservationLog::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.best().unwrap().epoch, 2);
        assert_eq!(back.running_best(), vec![2.5, 2.25]);
    }
}
