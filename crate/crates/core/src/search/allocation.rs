use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scheme::{Group, GroupingScheme, SchemeName};
use crate::error::{Error, Result};
use crate::factorize::{rank_budget, rank_from_ratio, RankDecision, MIN_RANK, RANK_MULTIPLE};
use crate::model::{Category, LayerId, ModelConfig};
use crate::rng::substream;

/// Upper clip for a group's nominal ratio during budget projection.
pub const MAX_LAMBDA: f64 = 0.95;
/// Allowed gap between the achieved and the target overall ratio.
pub const BUDGET_TOLERANCE: f64 = 0.01;
/// The rank search stops once inside this band, leaving float headroom.
const SNAP_TARGET: f64 = 0.009;
const PROJECTION_ROUNDS: usize = 20;

/// Per-group compression ratios with the ranks they induce.
///
/// `lambdas[g]` is `None` for an NA group (never compressed), `Some(0.0)`
/// for a group left dense because no rank would save parameters, and
/// otherwise the ratio whose rank rule yields exactly the group's rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    scheme: GroupingScheme,
    rho: f64,
    lambdas: Vec<Option<f64>>,
    decisions: Vec<Option<RankDecision>>,
}

impl Allocation {
    /// Ratios converted with the rank rule; `0.0` marks a dense group.
    pub fn from_lambdas(
        scheme: GroupingScheme,
        config: &ModelConfig,
        rho: f64,
        lambdas: Vec<Option<f64>>,
    ) -> Result<Self> {
        scheme.check_config(config)?;
        if lambdas.len() != scheme.len() {
            return Err(Error::DimensionMismatch { expected: scheme.len(), got: lambdas.len() });
        }
        let decisions = lambdas
            .iter()
            .enumerate()
            .map(|(g, l)| match *l {
                None => Ok(None),
                Some(l) if l == 0.0 => Ok(Some(RankDecision::Skip)),
                Some(l) => {
                    let (d2, d1) = scheme.group_shape(g, config);
                    rank_from_ratio(d1, d2, l).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scheme, rho, lambdas, decisions })
    }

    /// Explicit per-group decisions (`None` = NA); the target ratio is set to
    /// the achieved one.
    pub fn from_decisions(
        scheme: GroupingScheme,
        config: &ModelConfig,
        decisions: Vec<Option<RankDecision>>,
    ) -> Result<Self> {
        scheme.check_config(config)?;
        if decisions.len() != scheme.len() {
            return Err(Error::DimensionMismatch { expected: scheme.len(), got: decisions.len() });
        }
        let mut lambdas = Vec::with_capacity(decisions.len());
        for (g, d) in decisions.iter().enumerate() {
            let (d2, d1) = scheme.group_shape(g, config);
            lambdas.push(match d {
                None => None,
                Some(RankDecision::Skip) => Some(0.0),
                Some(RankDecision::Rank(r)) => {
                    if *r == 0 || r * (d1 + d2) >= d1 * d2 {
                        return Err(Error::RankOutOfRange { rank: *r, max: (d1 * d2 - 1) / (d1 + d2) });
                    }
                    Some(representative_lambda(*r, d1, d2))
                }
            });
        }
        let mut alloc = Self { scheme, rho: 0.0, lambdas, decisions };
        alloc.rho = alloc.effective_ratio(config);
        Ok(alloc)
    }

    /// One rank (or `None` for NA) per group, in scheme order.
    pub fn from_rank_vector(scheme: GroupingScheme, config: &ModelConfig, ranks: &[Option<usize>]) -> Result<Self> {
        Self::from_decisions(scheme, config, ranks.iter().map(|r| r.map(RankDecision::Rank)).collect())
    }

    pub fn scheme(&self) -> &GroupingScheme {
        &self.scheme
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn lambdas(&self) -> &[Option<f64>] {
        &self.lambdas
    }

    pub fn decisions(&self) -> &[Option<RankDecision>] {
        &self.decisions
    }

    /// Every linear layer with its rank; `None` means it stays dense.
    pub fn ranks(&self) -> BTreeMap<LayerId, Option<usize>> {
        let mut out: BTreeMap<LayerId, Option<usize>> = (0..self.scheme.n_layers())
            .flat_map(|l| Category::ALL.into_iter().map(move |c| (LayerId::new(l, c), None)))
            .collect();
        for (g, group) in self.scheme.groups().iter().enumerate() {
            let rank = self.decisions[g].and_then(RankDecision::rank);
            for id in &group.members {
                out.insert(*id, rank);
            }
        }
        out
    }

    /// Only the layers that get factored.
    pub fn compressed_ranks(&self) -> BTreeMap<LayerId, usize> {
        self.ranks().into_iter().filter_map(|(id, r)| r.map(|r| (id, r))).collect()
    }

    /// Ranks per group with NA and dense groups as `None`.
    pub fn rank_vector(&self) -> Vec<Option<usize>> {
        self.decisions.iter().map(|d| d.and_then(RankDecision::rank)).collect()
    }

    /// Parameter-weighted mean over all linear layers of
    /// `1 - stored / dense`, counting the factored bias as stored.
    pub fn effective_ratio(&self, config: &ModelConfig) -> f64 {
        let removed: f64 = (0..self.scheme.len()).map(|g| group_removal(&self.scheme, config, g, self.decisions[g])).sum();
        removed / config.linear_params() as f64
    }

    pub fn to_file(&self) -> AllocationFile {
        AllocationFile {
            scheme: self.scheme.name(),
            rho: self.rho,
            lambdas: self.lambdas.clone(),
            ranks: self.ranks(),
            groups: (self.scheme.name() == SchemeName::Custom).then(|| self.scheme.groups().to_vec()),
        }
    }

    /// Rebuilds an allocation; explicit ranks take precedence over ratios.
    pub fn from_file(file: &AllocationFile, config: &ModelConfig) -> Result<Self> {
        let scheme = match (&file.scheme, &file.groups) {
            (SchemeName::Custom, Some(groups)) => GroupingScheme::custom(config, groups.clone())?,
            (SchemeName::Custom, None) => return Err(Error::Format("custom allocation without groups".into())),
            (name, _) => GroupingScheme::preset(*name, config.n_layers)?,
        };
        if file.lambdas.len() != scheme.len() {
            return Err(Error::DimensionMismatch { expected: scheme.len(), got: file.lambdas.len() });
        }
        if file.ranks.is_empty() {
            return Self::from_lambdas(scheme, config, file.rho, file.lambdas.clone());
        }
        let mut decisions = Vec::with_capacity(scheme.len());
        for (g, group) in scheme.groups().iter().enumerate() {
            let rank_of = |id: &LayerId| file.ranks.get(id).copied().flatten();
            let r = rank_of(&group.members[0]);
            if group.members.iter().any(|id| rank_of(id) != r) {
                return Err(Error::Format(format!("group {} has unequal ranks", group.label)));
            }
            decisions.push(match (r, file.lambdas[g]) {
                (Some(r), _) => Some(RankDecision::Rank(r)),
                (None, None) => None,
                (None, Some(_)) => Some(RankDecision::Skip),
            });
        }
        let mut alloc = Self::from_decisions(scheme, config, decisions)?;
        alloc.rho = file.rho;
        alloc.lambdas = file.lambdas.clone();
        Ok(alloc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_file())?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let file: AllocationFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(&file, config)
    }
}

/// On-disk allocation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub scheme: SchemeName,
    pub rho: f64,
    pub lambdas: Vec<Option<f64>>,
    #[serde(default)]
    pub ranks: BTreeMap<LayerId, Option<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Group>>,
}

/// Ratio whose rank rule gives exactly `rank`.
pub fn representative_lambda(rank: usize, d1: usize, d2: usize) -> f64 {
    1.0 - rank as f64 / rank_budget(d1, d2)
}

/// Parameters saved by group `g` under `decision` (negative if the factored
/// form is larger).
fn group_removal(scheme: &GroupingScheme, config: &ModelConfig, g: usize, decision: Option<RankDecision>) -> f64 {
    match decision {
        Some(RankDecision::Rank(r)) => {
            let (d2, d1) = scheme.group_shape(g, config);
            let stored = r * (d1 + d2) + d2;
            scheme.groups()[g].members.len() as f64 * (d1 as f64 * d2 as f64 - stored as f64)
        }
        _ => 0.0,
    }
}

/// Formats a rank vector as `[744, 1616, null]`.
pub fn format_rank_vector(ranks: &[Option<usize>]) -> String {
    let items: Vec<String> = ranks.iter().map(|r| r.map_or_else(|| "null".to_string(), |r| r.to_string())).collect();
    format!("[{}]", items.join(", "))
}

/// Parses a rank vector; `null`, `NA` and `"NA"` all mark an NA group.
pub fn parse_rank_vector(text: &str) -> Result<Vec<Option<usize>>> {
    let bad = || Error::Format(format!("bad rank vector {text:?}"));
    let inner = text.trim().strip_prefix('[').and_then(|t| t.strip_suffix(']')).ok_or_else(bad)?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|item| match item.trim() {
            "null" | "NA" | "\"NA\"" => Ok(None),
            v => v.parse().map(Some).map_err(|_| bad()),
        })
        .collect()
}

/// Scales the non-NA entries of `raw` by a common factor so that
/// `Σ wᵢ λᵢ = ρ · total_weight`, clipping at [`MAX_LAMBDA`] and handing the
/// clipped mass to the rest. Entries whose raw value is zero only receive
/// mass (evenly) once no positive entry remains unclipped.
pub fn project_budget(raw: &[Option<f64>], weights: &[f64], total_weight: f64, rho: f64) -> Result<Vec<Option<f64>>> {
    if raw.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: weights.len(), got: raw.len() });
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidRatio(rho));
    }
    if raw.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidConfig("raw ratios must be finite and non-negative".into()));
    }
    let target = rho * total_weight;
    let capacity: f64 = raw.iter().zip(weights).filter(|(r, _)| r.is_some()).map(|(_, w)| MAX_LAMBDA * w).sum();
    if capacity < target * (1.0 - 1e-12) {
        return Err(Error::Infeasible(format!("ratio {rho} exceeds what the searchable groups can remove")));
    }
    let mut clipped = vec![false; raw.len()];
    let mut out: Vec<Option<f64>> = raw.iter().map(|r| r.map(|_| 0.0)).collect();
    for _ in 0..PROJECTION_ROUNDS {
        let free = |i: usize| raw[i].is_some() && !clipped[i];
        let free_now: Vec<bool> = (0..raw.len()).map(free).collect();
        let free = |i: usize| free_now[i];
        let fixed: f64 = (0..raw.len()).filter(|&i| clipped[i]).map(|i| MAX_LAMBDA * weights[i]).sum();
        let need = target - fixed;
        let mass: f64 = (0..raw.len()).filter(|&i| free(i)).map(|i| weights[i] * raw[i].unwrap_or(0.0)).sum();
        let free_weight: f64 = (0..raw.len()).filter(|&i| free(i)).map(|i| weights[i]).sum();
        for i in 0..raw.len() {
            if free(i) {
                let v = if mass > 0.0 { need / mass * raw[i].unwrap_or(0.0) } else { need / free_weight };
                out[i] = Some(v);
            } else if clipped[i] {
                out[i] = Some(MAX_LAMBDA);
            }
        }
        let mut changed = false;
        for i in 0..raw.len() {
            if free(i) && out[i].unwrap_or(0.0) > MAX_LAMBDA {
                clipped[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(out);
        }
    }
    Err(Error::Infeasible("budget projection did not settle".into()))
}

/// A scheme at a target ratio with some groups held out as NA; produces
/// budget-feasible allocations.
#[derive(Debug, Clone)]
pub struct AllocationSpace {
    scheme: GroupingScheme,
    config: ModelConfig,
    rho: f64,
    na: Vec<bool>,
    weights: Vec<f64>,
    /// Per group: `(decision, parameters removed)`, strictly increasing in
    /// removal, starting with the dense option.
    options: Vec<Vec<(RankDecision, f64)>>,
}

impl AllocationSpace {
    pub fn new(scheme: GroupingScheme, config: &ModelConfig, rho: f64) -> Result<Self> {
        let na = vec![false; scheme.len()];
        Self::with_na(scheme, config, rho, na)
    }

    /// `na[g]` excludes group `g` from compression and from the search.
    pub fn with_na(scheme: GroupingScheme, config: &ModelConfig, rho: f64, na: Vec<bool>) -> Result<Self> {
        scheme.check_config(config)?;
        if na.len() != scheme.len() {
            return Err(Error::DimensionMismatch { expected: scheme.len(), got: na.len() });
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidRatio(rho));
        }
        if na.iter().all(|&n| n) {
            return Err(Error::Infeasible("every group is NA".into()));
        }
        let weights = (0..scheme.len()).map(|g| scheme.group_params(g, config) as f64).collect();
        let options = (0..scheme.len())
            .map(|g| {
                let (d2, d1) = scheme.group_shape(g, config);
                let mut opts = vec![(RankDecision::Skip, 0.0)];
                let mut ranks: Vec<usize> =
                    (MIN_RANK..).step_by(RANK_MULTIPLE).take_while(|r| r * (d1 + d2) < d1 * d2).collect();
                ranks.reverse();
                for r in ranks {
                    let removal = group_removal(&scheme, config, g, Some(RankDecision::Rank(r)));
                    if removal > 0.0 {
                        opts.push((RankDecision::Rank(r), removal));
                    }
                }
                opts
            })
            .collect();
        Ok(Self { scheme, config: config.clone(), rho, na, weights, options })
    }

    pub fn scheme(&self) -> &GroupingScheme {
        &self.scheme
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn na(&self) -> &[bool] {
        &self.na
    }

    /// Indices of the searchable groups, which are the GP coordinates.
    pub fn active_groups(&self) -> Vec<usize> {
        (0..self.scheme.len()).filter(|&g| !self.na[g]).collect()
    }

    /// Projects `raw` (one value per active group) onto the budget, then
    /// picks multiple-of-eight ranks whose exact parameter count lands
    /// within [`BUDGET_TOLERANCE`] of the target.
    pub fn repair(&self, raw: &[f64]) -> Result<Allocation> {
        let active = self.active_groups();
        if raw.len() != active.len() {
            return Err(Error::DimensionMismatch { expected: active.len(), got: raw.len() });
        }
        let mut full = vec![None; self.scheme.len()];
        for (&g, &v) in active.iter().zip(raw) {
            full[g] = Some(v);
        }
        let total = self.config.linear_params() as f64;
        let projected = project_budget(&full, &self.weights, total, self.rho)?;
        let target = self.rho * total;

        // start from the option nearest each group's continuous share
        let mut choice: Vec<usize> = vec![0; self.scheme.len()];
        for &g in &active {
            let want = projected[g].unwrap_or(0.0) * self.weights[g];
            choice[g] = (0..self.options[g].len())
                .min_by(|&a, &b| {
                    let da = (self.options[g][a].1 - want).abs();
                    let db = (self.options[g][b].1 - want).abs();
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
        }
        let removed = |choice: &[usize]| active.iter().map(|&g| self.options[g][choice[g]].1).sum::<f64>();
        let mut gap = removed(&choice) - target;
        while gap.abs() > SNAP_TARGET * total {
            let mut best: Option<(f64, Vec<(usize, isize)>)> = None;
            let mut consider = |moves: Vec<(usize, isize)>, choice: &[usize]| {
                let mut delta = 0.0;
                for &(g, step) in &moves {
                    let next = choice[g] as isize + step;
                    if next < 0 || next as usize >= self.options[g].len() {
                        return;
                    }
                    delta += self.options[g][next as usize].1 - self.options[g][choice[g]].1;
                }
                let new_gap = (gap + delta).abs();
                if best.as_ref().is_none_or(|(b, _)| new_gap < *b) {
                    best = Some((new_gap, moves));
                }
            };
            for &g in &active {
                consider(vec![(g, 1)], &choice);
                consider(vec![(g, -1)], &choice);
                for &h in &active {
                    if h != g {
                        consider(vec![(g, 1), (h, -1)], &choice);
                    }
                }
            }
            match best {
                Some((new_gap, moves)) if new_gap < gap.abs() => {
                    for (g, step) in moves {
                        choice[g] = (choice[g] as isize + step) as usize;
                    }
                    gap = removed(&choice) - target;
                }
                _ => break,
            }
        }
        if gap.abs() > BUDGET_TOLERANCE * total {
            return Err(Error::Infeasible(format!(
                "no multiple-of-{RANK_MULTIPLE} ranks reach ratio {} within {BUDGET_TOLERANCE}",
                self.rho
            )));
        }
        let decisions = (0..self.scheme.len()).map(|g| (!self.na[g]).then(|| self.options[g][choice[g]].0)).collect();
        let mut alloc = Allocation::from_decisions(self.scheme.clone(), &self.config, decisions)?;
        alloc.rho = self.rho;
        Ok(alloc)
    }

    /// Uniform(0, 1) raw ratios per active group, repaired.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Allocation> {
        let raw: Vec<f64> = self.active_groups().iter().map(|_| rng.random::<f64>()).collect();
        self.repair(&raw)
    }

    /// Every active group at the same raw ratio.
    pub fn uniform(&self) -> Result<Allocation> {
        self.repair(&vec![1.0; self.active_groups().len()])
    }

    /// Search coordinates of an allocation: its ratios on the active groups.
    pub fn coords(&self, alloc: &Allocation) -> Vec<f64> {
        self.active_groups().iter().map(|&g| alloc.lambdas()[g].unwrap_or(0.0)).collect()
    }

    /// Checks that `alloc` uses this space's scheme and NA pattern.
    pub fn check(&self, alloc: &Allocation) -> Result<()> {
        if alloc.scheme() != &self.scheme {
            return Err(Error::InvalidConfig(format!(
                "allocation uses scheme {}, search uses {}",
                alloc.scheme().name(),
                self.scheme.name()
            )));
        }
        let na: Vec<bool> = alloc.lambdas().iter().map(Option::is_none).collect();
        if na != self.na {
            return Err(Error::InvalidConfig("allocation NA groups differ from the search space".into()));
        }
        Ok(())
    }
}

/// Repairs raw per-group ratios (`None` = NA) for `scheme` at ratio `rho`.
pub fn repair_allocation(
    raw: &[Option<f64>],
    scheme: &GroupingScheme,
    config: &ModelConfig,
    rho: f64,
) -> Result<Allocation> {
    let na = raw.iter().map(Option::is_none).collect();
    let space = AllocationSpace::with_na(scheme.clone(), config, rho, na)?;
    let active: Vec<f64> = raw.iter().flatten().copied().collect();
    space.repair(&active)
}

/// A random feasible allocation, reproducible from `seed`.
pub fn sample_allocation(scheme: &GroupingScheme, config: &ModelConfig, rho: f64, seed: u64) -> Result<Allocation> {
    AllocationSpace::new(scheme.clone(), config, rho)?.sample(&mut substream(seed, "allocation"))
}
