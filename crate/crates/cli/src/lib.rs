//! Pipeline glue behind the `bolaco` binary: configuration, file layout and
//! one `run_*` function per subcommand.
//!
//! Every `run_*` returns the line to print on success. Failures carry the
//! process exit code: 2 for missing or unreadable input, 3 for invalid
//! configuration, 4 for numerical failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bolaco_core::model::{
    capture_compressed_inputs, capture_grouped, capture_inputs, finalize_pooled, perplexity, rkl, sample_corpus,
    synth_weights, TensorBundle,
};
use bolaco_core::posttrain::{merge_adapter, posttrain_to_target, read_adapters, write_adapters, TrainConfig};
use bolaco_core::rng::substream;
use bolaco_core::search::{
    bo_search, build_bases, select_validation, sensitivity_sweep, sweep_csv, warm_start, AllocationSpace, Bases,
    Evaluator, Group, SchemeName, WARM_START_EPOCHS,
};
use bolaco_core::{
    Allocation, Category, CompressedModel, CovarianceStats, Error, GroupingScheme, LayerId, Model, ModelConfig,
    SearchConfig, TokenDataset,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Json(_) | Error::Format(_) | Error::MissingStats(_) => EXIT_INPUT,
            Error::NonFinite(_)
            | Error::NoConvergence(_)
            | Error::NotPositiveDefinite
            | Error::NotSymmetric(_)
            | Error::Diverged(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Settings shared by all subcommands. Loaded from a JSON file when given,
/// then overridden field by field from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model_path: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/stats`.
    pub stats_dir: Option<PathBuf>,
    pub allocation_path: Option<PathBuf>,
    pub compressed_path: Option<PathBuf>,
    pub posttrained_path: Option<PathBuf>,
    pub sweep_path: Option<PathBuf>,
    pub scheme: SchemeName,
    /// JSON list of groups, required for the custom scheme.
    pub groups_path: Option<PathBuf>,
    pub rho: f64,
    /// Calibration groups pooled into each covariance.
    pub groups: usize,
    /// Tokens per sequence when splitting text files.
    pub window: usize,
    pub seed: u64,
    /// Unset means 50, or 20 when warm-starting.
    pub epochs: Option<usize>,
    pub init_points: usize,
    pub candidates_per_step: usize,
    pub beta_rkl: f64,
    pub n_probe: usize,
    pub top_k: usize,
    pub warm_start: Option<PathBuf>,
    pub sweep_ratios: Vec<f64>,
    pub r_prime: usize,
    pub steps: usize,
    pub lr: f64,
    /// Token positions per layer used for post-training.
    pub max_tokens: usize,
    /// Shapes for `synth`.
    pub model_config: ModelConfig,
    pub corpus_sequences: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        let train = TrainConfig::default();
        Self {
            model_path: None,
            data_path: None,
            output_dir: PathBuf::from("out"),
            stats_dir: None,
            allocation_path: None,
            compressed_path: None,
            posttrained_path: None,
            sweep_path: None,
            scheme: SchemeName::FiveByOne,
            groups_path: None,
            rho: 0.2,
            groups: 32,
            window: 128,
            seed: 0,
            epochs: None,
            init_points: search.init_points,
            candidates_per_step: search.candidates_per_step,
            beta_rkl: search.beta_rkl,
            n_probe: search.n_probe,
            top_k: search.top_k,
            warm_start: None,
            sweep_ratios: (0..10).map(|i| f64::from(i) / 10.0).collect(),
            r_prime: train.r_prime,
            steps: train.steps,
            lr: train.lr,
            max_tokens: 2048,
            model_config: ModelConfig::default(),
            corpus_sequences: 64,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("bad config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(CliError::config(format!("rho {} must lie in (0, 1)", self.rho)));
        }
        if self.groups == 0 {
            return Err(CliError::config("groups must be at least 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::config("output directory must be non-empty"));
        }
        if self.window < 2 {
            return Err(CliError::config(format!("window {} must be at least 2", self.window)));
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            epochs: self.epochs.unwrap_or(SearchConfig::default().epochs),
            init_points: self.init_points,
            candidates_per_step: self.candidates_per_step,
            beta_rkl: self.beta_rkl,
            seed: self.seed,
            n_probe: self.n_probe,
            top_k: self.top_k,
            prior: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { r_prime: self.r_prime, steps: self.steps, lr: self.lr, ..TrainConfig::default() }
    }

    fn required<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
        path.as_deref()
            .filter(|p| !p.as_os_str().is_empty())
            .ok_or_else(|| CliError::config(format!("--{flag} is required")))
    }

    pub fn model_path(&self) -> CliResult<&Path> {
        self.required(&self.model_path, "model")
    }

    pub fn data_path(&self) -> CliResult<&Path> {
        self.required(&self.data_path, "data")
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.stats_dir.clone().unwrap_or_else(|| self.output_dir.join("stats"))
    }

    pub fn allocation_path(&self) -> PathBuf {
        self.allocation_path.clone().unwrap_or_else(|| self.output_dir.join("allocation.json"))
    }

    pub fn compressed_path(&self) -> PathBuf {
        self.compressed_path.clone().unwrap_or_else(|| self.output_dir.join("compressed.btns"))
    }

    pub fn posttrained_path(&self) -> PathBuf {
        self.posttrained_path.clone().unwrap_or_else(|| self.output_dir.join("posttrained.btns"))
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.sweep_path.clone().unwrap_or_else(|| self.output_dir.join("sweep.csv"))
    }

    pub fn scheme(&self, config: &ModelConfig) -> CliResult<GroupingScheme> {
        if self.scheme != SchemeName::Custom {
            return Ok(GroupingScheme::preset(self.scheme, config.n_layers)?);
        }
        let path = self.required(&self.groups_path, "groups-path")?;
        let groups: Vec<Group> = serde_json::from_str(&read_text(path, "group list")?)
            .map_err(|e| CliError::input(format!("bad group list {}: {e}", path.display())))?;
        Ok(GroupingScheme::custom(config, groups)?)
    }
}

/// Written next to the `.cov` files by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsManifest {
    /// `scm` for one group, `pcm` for the pooled estimate.
    pub estimator: String,
    pub groups: usize,
    pub sequences: usize,
    pub window: usize,
    pub seed: u64,
    pub layers: Vec<LayerId>,
}

fn missing(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input(format!("cannot read {what} {}: {e}", path.display()))
}

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| missing(what, path, e))
}

fn load_model(path: &Path) -> CliResult<Arc<Model>> {
    let bundle = TensorBundle::load(path).map_err(|e| missing("model", path, e))?;
    Ok(Arc::new(Model::from_bundle(&bundle).map_err(|e| missing("model", path, e))?))
}

/// A checkpoint of any kind: base, compressed, or compressed with adapters
/// (merged into the factors for evaluation).
pub fn load_checkpoint(path: &Path) -> CliResult<CompressedModel> {
    let bundle = TensorBundle::load(path).map_err(|e| missing("checkpoint", path, e))?;
    let mut model = CompressedModel::from_bundle(&bundle).map_err(|e| missing("checkpoint", path, e))?;
    let adapters = read_adapters(&bundle, model.factors())?;
    for (id, ad) in adapters {
        let merged = merge_adapter(&model.factors()[&id], &ad)?;
        model.factors_mut().insert(id, merged);
    }
    Ok(model)
}

fn load_data(path: &Path, window: usize) -> CliResult<TokenDataset> {
    let bytes = fs::read(path).map_err(|e| missing("data", path, e))?;
    TokenDataset::from_bytes(&bytes, window).map_err(|e| missing("data", path, e))
}

fn load_stats(dir: &Path, config: &ModelConfig) -> CliResult<BTreeMap<LayerId, CovarianceStats>> {
    let manifest_path = dir.join("manifest.json");
    let manifest: StatsManifest = serde_json::from_str(&read_text(&manifest_path, "statistics manifest")?)
        .map_err(|e| missing("statistics manifest", &manifest_path, e))?;
    let mut stats = BTreeMap::new();
    for id in manifest.layers {
        let path = dir.join(format!("{id}.cov"));
        let s = CovarianceStats::load(&path).map_err(|e| missing("covariance", &path, e))?;
        let (d2, _) = id.shape(config);
        if s.dim() != d2 {
            return Err(CliError::input(format!("{}: dimension {} but {id} has {d2} outputs", path.display(), s.dim())));
        }
        stats.insert(id, s);
    }
    Ok(stats)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display()))),
        None => Ok(()),
    }
}

/// Writes a synthetic base model plus calibration and held-out corpora
/// sampled from it.
pub fn run_synth(cfg: &PipelineConfig) -> CliResult<String> {
    cfg.model_config.validate()?;
    let model = synth_weights(&cfg.model_config, cfg.seed)?;
    let model_path = cfg.model_path.clone().unwrap_or_else(|| cfg.output_dir.join("model.btns"));
    ensure_parent(&model_path)?;
    model.save(&model_path)?;
    let corpus = sample_corpus(&model, cfg.corpus_sequences, cfg.window, 1.0, cfg.seed)?;
    let heldout = sample_corpus(&model, cfg.corpus_sequences, cfg.window, 1.0, cfg.seed.wrapping_add(1))?;
    write_file(&cfg.output_dir.join("corpus.txt"), corpus.to_bytes())?;
    write_file(&cfg.output_dir.join("heldout.txt"), heldout.to_bytes())?;
    Ok(format!(
        "wrote {} and {} sequences of {} tokens to corpus.txt and heldout.txt",
        model_path.display(),
        cfg.corpus_sequences,
        cfg.window
    ))
}

/// Captures every linear layer's output statistics over the data, pooled
/// across `groups` equal, seeded partitions of the sequences.
pub fn run_calibrate(cfg: &PipelineConfig) -> CliResult<String> {
    cfg.validate()?;
    let model = load_model(cfg.model_path()?)?;
    let data = load_data(cfg.data_path()?, cfg.window)?;
    let m = cfg.groups;
    if data.len() % m != 0 {
        return Err(CliError::config(format!("{} sequences do not split into {m} equal groups", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut substream(cfg.seed, "calibration"));
    let groups: Vec<Vec<usize>> = order.chunks(data.len() / m).map(<[usize]>::to_vec).collect();
    let layers: BTreeSet<LayerId> = LayerId::all(model.config()).into_iter().collect();
    let stats = finalize_pooled(&capture_grouped(&model, &data, &layers, &groups)?)?;

    let dir = cfg.stats_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    for (id, s) in &stats {
        s.save(dir.join(format!("{id}.cov")))?;
    }
    let manifest = StatsManifest {
        estimator: if m == 1 { "scm" } else { "pcm" }.into(),
        groups: m,
        sequences: data.len(),
        window: cfg.window,
        seed: cfg.seed,
        layers: stats.keys().copied().collect(),
    };
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n")?;
    Ok(format!("wrote {} covariance files to {}", stats.len(), dir.display()))
}

fn all_bases(cfg: &PipelineConfig, model: &Model) -> CliResult<Bases> {
    let stats = load_stats(&cfg.stats_dir(), model.config())?;
    Ok(build_bases(&stats, &LayerId::all(model.config()))?)
}

/// Perplexity as each category alone is compressed at each sweep ratio.
pub fn run_sweep(cfg: &PipelineConfig) -> CliResult<String> {
    let model = load_model(cfg.model_path()?)?;
    let data = load_data(cfg.data_path()?, cfg.window)?;
    let bases = all_bases(cfg, &model)?;
    let curves = Category::ALL
        .into_iter()
        .map(|c| Ok((c, sensitivity_sweep(&model, c, &cfg.sweep_ratios, &data, &bases)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let path = cfg.sweep_path();
    write_file(&path, sweep_csv(&curves))?;
    Ok(format!("wrote {} sweep points to {}", curves.len() * cfg.sweep_ratios.len(), path.display()))
}

#[derive(Debug, Serialize)]
struct ValidationRecord<'a> {
    indices: &'a [usize],
    sensitivity: &'a [f64],
}

/// Selects the validation set, runs the search, and writes
/// `allocation.json`, `observations.jsonl` and `validation.json`.
pub fn run_search(cfg: &PipelineConfig) -> CliResult<String> {
    cfg.validate()?;
    let model = load_model(cfg.model_path()?)?;
    let pool = load_data(cfg.data_path()?, cfg.window)?;
    let stats = load_stats(&cfg.stats_dir(), model.config())?;
    let scheme = cfg.scheme(model.config())?;
    let members: Vec<LayerId> = scheme.groups().iter().flat_map(|g| g.members.iter().copied()).collect();
    let bases = build_bases(&stats, &members)?;
    let space = AllocationSpace::new(scheme, model.config(), cfg.rho)?;

    let mut search = cfg.search_config();
    if let Some(path) = &cfg.warm_start {
        if !path.exists() {
            return Err(CliError::input(format!("cannot read warm-start allocation {}: not found", path.display())));
        }
        let prior = Allocation::load(path, model.config()).map_err(|e| missing("warm-start allocation", path, e))?;
        search = warm_start(&prior, &space, &search)?;
        search.epochs = cfg.epochs.unwrap_or(WARM_START_EPOCHS);
    }
    search.validate()?;

    let val = select_validation(&model, &pool, &space, search.n_probe, search.top_k, &bases, cfg.seed)?;
    let evaluator = Evaluator::new(Arc::clone(&model), bases, val.data.clone())?;
    let (best, log) = bo_search(&evaluator, &space, &search)?;

    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    let alloc_path = cfg.allocation_path();
    ensure_parent(&alloc_path)?;
    best.save(&alloc_path)?;
    log.save(cfg.output_dir.join("observations.jsonl"))?;
    let record = ValidationRecord { indices: &val.indices, sensitivity: &val.sensitivity };
    write_file(&cfg.output_dir.join("validation.json"), serde_json::to_string_pretty(&record).map_err(Error::from)? + "\n")?;

    let top = log.best().ok_or_else(|| CliError { code: EXIT_NUMERIC, message: "search produced no observations".into() })?;
    Ok(format!("best H={} ppl={} rkl={} at epoch {}", top.h, top.ppl, top.rkl, top.epoch))
}

/// Applies an allocation to the base model and writes the checkpoint.
pub fn run_compress(cfg: &PipelineConfig) -> CliResult<String> {
    let model = load_model(cfg.model_path()?)?;
    let alloc_path = cfg.allocation_path();
    let alloc = Allocation::load(&alloc_path, model.config()).map_err(|e| match e {
        Error::Io(_) | Error::Json(_) | Error::Format(_) => missing("allocation", &alloc_path, e),
        other => other.into(),
    })?;
    let ranks = alloc.compressed_ranks();
    let stats = load_stats(&cfg.stats_dir(), model.config())?;
    let bases = build_bases(&stats, ranks.keys())?;
    let compressed = bolaco_core::model::compress_with_ranks(&model, &ranks, &bases)?.with_allocation(alloc);
    let path = cfg.compressed_path();
    ensure_parent(&path)?;
    compressed.save(&path)?;
    let before = model.config().linear_params();
    let after = compressed.param_count().linear;
    Ok(format!(
        "compressed {} layers: {before} -> {after} linear parameters (ratio {:.4}), wrote {}",
        ranks.len(),
        1.0 - after as f64 / before as f64,
        path.display()
    ))
}

/// Trains one diagonal adapter per factored layer so that, on the inputs it
/// sees inside the compressed model, it reproduces the original layer's
/// outputs inside the original model.
pub fn run_posttrain(cfg: &PipelineConfig) -> CliResult<String> {
    let model = load_model(cfg.model_path()?)?;
    let data = load_data(cfg.data_path()?, cfg.window)?;
    let compressed_path = cfg.compressed_path();
    let bundle = TensorBundle::load(&compressed_path).map_err(|e| missing("compressed checkpoint", &compressed_path, e))?;
    let compressed =
        CompressedModel::from_bundle(&bundle).map_err(|e| missing("compressed checkpoint", &compressed_path, e))?;
    if compressed.base().config() != model.config() {
        return Err(CliError::input("compressed checkpoint and base model have different shapes"));
    }
    let layers: BTreeSet<LayerId> = compressed.factors().keys().copied().collect();
    let originals = capture_inputs(&model, &data, &layers, cfg.max_tokens)?;
    let inputs = capture_compressed_inputs(&compressed, &data, &layers, cfg.max_tokens)?;

    let mut adapters = BTreeMap::new();
    let (mut before, mut after) = (0.0, 0.0);
    for (id, f) in compressed.factors() {
        let target = model.weight(*id).dot(&originals[id]);
        let train = TrainConfig { r_prime: cfg.r_prime.min(f.rank()), ..cfg.train_config() };
        let out = posttrain_to_target(f, inputs[id].view(), target.view(), &train)?;
        before += out.losses[0];
        after += out.best_loss();
        adapters.insert(*id, out.adapter);
    }
    let mut bundle = compressed.to_bundle()?;
    write_adapters(&mut bundle, &adapters)?;
    let path = cfg.posttrained_path();
    ensure_parent(&path)?;
    bundle.save(&path)?;
    Ok(format!(
        "post-trained {} layers: reconstruction loss {before:.6} -> {after:.6}, wrote {}",
        adapters.len(),
        path.display()
    ))
}

/// Perplexity of a checkpoint, and reverse KL against the base model when
/// the checkpoint is not the base itself.
pub fn run_eval(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> CliResult<String> {
    let base_path = cfg.model_path()?;
    let data = load_data(cfg.data_path()?, cfg.window)?;
    let target = load_checkpoint(checkpoint.unwrap_or(base_path))?;
    let ppl = perplexity(&target, &data)?;
    let params = target.param_count().linear;
    match checkpoint {
        Some(path) if path != base_path => {
            let base = load_model(base_path)?;
            let divergence = rkl(base.as_ref(), &target, &data)?;
            Ok(format!("ppl={ppl} rkl={divergence} linear_params={params}"))
        }
        _ => Ok(format!("ppl={ppl} linear_params={params}")),
    }
}

/// Writes `report.csv` with columns `section,item,ratio,value`; see the
/// README for the rows.
pub fn run_report(cfg: &PipelineConfig) -> CliResult<String> {
    let model_path = cfg.model_path()?;
    let data_path = cfg.data_path()?;
    let compressed_path = cfg.compressed_path();
    let absent: Vec<String> = [model_path, data_path, compressed_path.as_path()]
        .into_iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !absent.is_empty() {
        return Err(CliError::input(format!("missing artifacts: {}", absent.join(", "))));
    }
    let explicit = |p: &Option<PathBuf>, default: PathBuf| match p {
        Some(p) if !p.exists() => Err(CliError::input(format!("missing artifacts: {}", p.display()))),
        Some(p) => Ok(Some(p.clone())),
        None => Ok(default.exists().then_some(default)),
    };
    let posttrained_path = explicit(&cfg.posttrained_path, cfg.posttrained_path())?;
    let sweep_path = explicit(&cfg.sweep_path, cfg.sweep_path())?;

    let base = load_model(model_path)?;
    let data = load_data(data_path, cfg.window)?;
    let compressed = load_checkpoint(&compressed_path)?;
    if compressed.base().config() != base.config() {
        return Err(CliError::input("compressed checkpoint and base model have different shapes"));
    }

    let before = base.config().linear_params();
    let after = compressed.param_count().linear;
    let mut rows: Vec<(&str, String, String, String)> = vec![
        ("summary", "params_before".into(), String::new(), before.to_string()),
        ("summary", "params_after".into(), String::new(), after.to_string()),
        ("summary", "param_ratio".into(), String::new(), (1.0 - after as f64 / before as f64).to_string()),
        ("summary", "ppl_base".into(), String::new(), perplexity(base.as_ref(), &data)?.to_string()),
        ("summary", "ppl_compressed".into(), String::new(), perplexity(&compressed, &data)?.to_string()),
        ("summary", "rkl_compressed".into(), String::new(), rkl(base.as_ref(), &compressed, &data)?.to_string()),
    ];
    if let Some(path) = &posttrained_path {
        let post = load_checkpoint(path)?;
        rows.push(("summary", "ppl_posttrained".into(), String::new(), perplexity(&post, &data)?.to_string()));
        rows.push(("summary", "rkl_posttrained".into(), String::new(), rkl(base.as_ref(), &post, &data)?.to_string()));
    }
    for id in LayerId::all(base.config()) {
        let rank = compressed.factors().get(&id).map_or_else(|| "dense".to_string(), |f| f.rank().to_string());
        rows.push(("rank", id.to_string(), String::new(), rank));
    }
    if let Some(path) = &sweep_path {
        let text = read_text(path, "sweep")?;
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let mut fields = line.splitn(3, ',');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(c), Some(r), Some(p)) => rows.push(("sweep", c.into(), r.into(), p.into())),
                _ => return Err(CliError::input(format!("bad sweep row {line:?} in {}", path.display()))),
            }
        }
    }

    let mut csv = String::from("section,item,ratio,value\n");
    for (section, item, ratio, value) in &rows {
        let _ = writeln!(csv, "{section},{item},{ratio},{value}");
    }
    let path = cfg.output_dir.join("report.csv");
    write_file(&path, csv)?;
    Ok(format!("wrote {} rows to {}", rows.len(), path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let cfg = PipelineConfig { rho: 0.3, epochs: Some(7), ..PipelineConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"scheme": "5x4", "groups": 4}"#).unwrap();
        assert_eq!(partial.scheme, SchemeName::FiveByFour);
        assert_eq!(partial.groups, 4);
        assert_eq!(partial.top_k, 16);
        assert_eq!(partial.stats_dir(), PathBuf::from("out/stats"));
    }

    #[test]
    fn validation_rejects_out_of_range_settings() {
        for bad in [
            PipelineConfig { rho: 0.0, ..Default::default() },
            PipelineConfig { rho: 1.0, ..Default::default() },
            PipelineConfig { groups: 0, ..Default::default() },
            PipelineConfig { output_dir: PathBuf::new(), ..Default::default() },
        ] {
            assert_eq!(bad.validate().unwrap_err().code, EXIT_CONFIG);
        }
        PipelineConfig::default().validate().unwrap();
        assert_eq!(PipelineConfig::default().model_path().unwrap_err().code, EXIT_CONFIG);
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"));
        assert_eq!(CliError::from(io).code, EXIT_INPUT);
        assert_eq!(CliError::from(Error::MissingStats("layers.0.attn_q".into())).code, EXIT_INPUT);
        assert_eq!(CliError::from(Error::Infeasible("budget".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(Error::Diverged("lr".into())).code, EXIT_NUMERIC);
        assert_eq!(CliError::from(Error::NotPositiveDefinite).code, EXIT_NUMERIC);
    }

    #[test]
    fn search_config_follows_pipeline_settings() {
        let cfg = PipelineConfig { seed: 9, beta_rkl: 0.0, ..Default::default() };
        let search = cfg.search_config();
        assert_eq!(search.epochs, 50);
        assert_eq!(search.seed, 9);
        assert_eq!(search.beta_rkl, 0.0);
        search.validate().unwrap();
    }
}
