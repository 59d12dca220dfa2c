//! The active learning loop: initial pool, then per cycle score, select,
//! annotate, retrain from scratch and evaluate. Results are persisted after
//! every cycle so interrupted runs resume where they stopped.
//!
//! Layout of one experiment under `output_dir/<experiment id>/`:
//! `manifest.json`, `results.jsonl` (one [`CycleResult`] per line),
//! `timings.jsonl`, `scores/cycle_NNN.tsv` and the checkpoint of the latest
//! cycle. Cycle 0 depends only on the seed and the training setup, so it is
//! computed once per seed under `output_dir/shared-cycle0/` and reused by
//! every strategy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbal_nn::checkpoint::{load_checkpoint, save_checkpoint};
use sbal_nn::{LossPredictor, LossPredictorConfig, Mode, SegModelConfig, UNet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{init_pool, oracle_annotate, DatasetSplit, PoolState, SampleId, SliceSample};
use crate::error::{CoreError, Result};
use crate::evaluation::{evaluate_model, paired_permutation_test, Evaluation, Metric, Scope, DEFAULT_PERMUTATIONS};
use crate::selection::{
    build_stochastic_pool, coreset_select, random_select, stochastic_batch_select, topk_select, CandidateBatch,
    SelectionConfig, Strategy,
};
use crate::stats::{derive_seed, mean, std_dev};
use crate::storage::load_dataset;
use crate::synthetic::generate_synthetic_dataset;
use crate::trainer::{images_batch, train, TrainConfig};
use crate::uncertainty::{score_pool, ScorerKind, ScoringConfig};

pub const SCHEMA_VERSION: u32 = 1;
const SHARED_DIR: &str = "shared-cycle0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated blob volumes, preprocessed at their native size.
    Synthetic { seed: u64, volumes: usize, slices_per_volume: usize, size: (usize, usize), class_count: usize },
    /// A dataset root in the on-disk layout of [`crate::storage`].
    Directory { root: PathBuf, spacing: f64, size: (usize, usize) },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DatasetSplit> {
        match self {
            DatasetSpec::Synthetic { seed, volumes, slices_per_volume, size, class_count } => {
                generate_synthetic_dataset(*seed, *volumes, *slices_per_volume, *size, *class_count)
            }
            DatasetSpec::Directory { root, spacing, size } => load_dataset(root, *spacing, *size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: SegModelConfig,
    /// `train.seed` is ignored: every cycle trains with a seed derived from
    /// the experiment seed and the cycle index.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    /// Required by `topk` and `stochastic_batch`, ignored otherwise.
    #[serde(default)]
    pub scorer: Option<ScorerKind>,
    #[serde(default)]
    pub scoring: ScoringConfig,
    /// Loss predictor trained jointly when the scorer is `learnloss`.
    #[serde(default)]
    pub loss_module: LossPredictorConfig,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    pub cycles: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn default_n_init() -> usize {
    10
}

/// Name of a strategy/scorer combination, e.g. `entropy+sb`.
pub fn method_name(strategy: Strategy, scorer: Option<ScorerKind>) -> String {
    match (strategy, scorer) {
        (Strategy::Random, _) => "random".into(),
        (Strategy::Coreset, _) => "coreset".into(),
        (Strategy::Topk, Some(s)) => s.to_string(),
        (Strategy::StochasticBatch, Some(s)) => format!("{s}+sb"),
        (s, None) => s.to_string(),
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn uses_scorer(&self) -> bool {
        matches!(self.selection.strategy, Strategy::Topk | Strategy::StochasticBatch)
    }

    /// Scorer actually in effect.
    pub fn active_scorer(&self) -> Option<ScorerKind> {
        if self.uses_scorer() {
            self.scorer
        } else {
            None
        }
    }

    pub fn loss_module(&self) -> Option<&LossPredictorConfig> {
        (self.active_scorer() == Some(ScorerKind::LearnLoss)).then_some(&self.loss_module)
    }

    pub fn method(&self) -> String {
        method_name(self.selection.strategy, self.active_scorer())
    }

    pub fn experiment_id(&self, seed: u64) -> String {
        format!("{}-s{seed}", self.method())
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.selection.validate()?;
        self.scoring.validate()?;
        if self.cycles == 0 {
            return Err(CoreError::Config("cycles must be >= 1".into()));
        }
        if self.n_init == 0 {
            return Err(CoreError::Config("n_init must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CoreError::Config("seeds must list at least one seed".into()));
        }
        if self.uses_scorer() && self.scorer.is_none() {
            return Err(CoreError::Config(format!("strategy {} needs a scorer", self.selection.strategy)));
        }
        if self.active_scorer() == Some(ScorerKind::LearnLoss) {
            self.loss_module.validate()?;
        }
        Ok(())
    }

    /// Checks the config against a loaded dataset.
    pub fn validate_for(&self, split: &DatasetSplit) -> Result<()> {
        self.validate()?;
        let available = split.train.len();
        let needed = self.n_init + self.selection.budget * self.cycles;
        if needed > available {
            return Err(CoreError::Config(format!(
                "n_init + budget * cycles = {needed} exceeds the {available} training slices"
            )));
        }
        if split.class_count != self.model.class_count {
            return Err(CoreError::Config(format!(
                "model.class_count = {} but the dataset has {} classes",
                self.model.class_count, split.class_count
            )));
        }
        let (h, w) = split.train[0].shape();
        let m = self.model.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(CoreError::Config(format!("image size {h}x{w} is not a multiple of {m} for depth {}", self.model.depth)));
        }
        Ok(())
    }

    /// Digest of everything that determines the results of one seed.
    pub fn digest(&self, seed: u64) -> String {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.output_dir = PathBuf::new();
        c.train.seed = 0;
        c.selection.seed = 0;
        if !self.uses_scorer() {
            c.scorer = None;
        }
        sha_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Digest of the inputs of cycle 0 for one seed.
    fn cycle0_digest(&self, seed: u64) -> String {
        let mut train = self.train.clone();
        train.seed = 0;
        let key = serde_json::json!({
            "dataset": self.dataset,
            "model": self.model,
            "train": train,
            "loss_module": self.loss_module(),
            "n_init": self.n_init,
            "seed": seed,
            "eval_batch": self.scoring.batch_size,
        });
        sha_hex(key.to_string().as_bytes())
    }
}

/// One completed cycle. Cycle 0 has an empty `queried` list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleResult {
    pub cycle: usize,
    pub queried: Vec<SampleId>,
    pub batch_score: Option<f64>,
    pub batch_index: Option<usize>,
    /// Number of candidate batches when selecting with stochastic batches.
    pub pool_batches: Option<usize>,
    pub labelled_size: usize,
    /// Distinct volumes among the queried slices.
    pub distinct_volumes: usize,
    pub optimizer_steps: usize,
    pub train_digest: String,
    pub model_digest: String,
    pub evaluation: Evaluation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    /// Stopped early because the unlabelled pool ran out.
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment_id: String,
    pub method: String,
    pub strategy: Strategy,
    pub scorer: Option<ScorerKind>,
    pub seed: u64,
    pub cycles: usize,
    pub budget: usize,
    pub config_digest: String,
    pub initial_labelled: Vec<SampleId>,
    pub status: RunStatus,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop once this cycle is persisted, as if the process were killed.
    pub stop_after_cycle: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub results: Vec<CycleResult>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{line}\n").as_bytes())?;
    f.sync_data()?;
    Ok(())
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(m)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| CoreError::Integrity(format!("{}: unreadable manifest: {e}", dir.display())))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Integrity(format!("{}: schema version {} unsupported", dir.display(), m.schema_version)));
    }
    Ok(m)
}

/// Parses `results.jsonl`; any malformed line or out-of-order cycle is an integrity error.
pub fn read_results(dir: &Path) -> Result<Vec<CycleResult>> {
    let path = dir.join("results.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path)?;
    let mut out: Vec<CycleResult> = Vec::new();
    for (i, line) in text.split_terminator('\n').enumerate() {
        let r: CycleResult = serde_json::from_str(line)
            .map_err(|e| CoreError::Integrity(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if r.cycle != i {
            return Err(CoreError::Integrity(format!("{} line {}: cycle {} out of order", path.display(), i + 1, r.cycle)));
        }
        out.push(r);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(CoreError::Integrity(format!("{}: truncated last line", path.display())));
    }
    Ok(out)
}

const CHECKPOINT: &str = "latest.ckpt";

struct Networks {
    model: UNet<f32>,
    predictor: Option<LossPredictor<f32>>,
}

fn distinct_volumes(ids: &[SampleId], split_index: &BTreeMap<SampleId, usize>, train: &[SliceSample]) -> usize {
    ids.iter().map(|id| &train[split_index[id]].volume_id).collect::<BTreeSet<_>>().len()
}

struct Cycle0 {
    pool: PoolState,
    result: CycleResult,
    nets: Networks,
}

#[derive(Serialize, Deserialize)]
struct SharedCycle0 {
    initial_labelled: Vec<SampleId>,
    result: CycleResult,
}

fn train_and_evaluate(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    labelled: &BTreeSet<SampleId>,
    seed: u64,
    cycle: usize,
) -> Result<(Networks, CycleResult, f64)> {
    let index = split.train_index();
    let samples: Vec<&SliceSample> = labelled.iter().map(|id| &split.train[index[id]]).collect();
    let train_cfg = TrainConfig { seed: derive_seed(seed, &format!("cycle-{cycle}")), ..cfg.train.clone() };
    let mut trained = train(&cfg.model, &samples, &train_cfg, cfg.loss_module())?;
    let test: Vec<&SliceSample> = split.test.iter().collect();
    let evaluation = evaluate_model(&mut trained.model, &test, cfg.scoring.batch_size)?;
    let result = CycleResult {
        cycle,
        queried: Vec::new(),
        batch_score: None,
        batch_index: None,
        pool_batches: None,
        labelled_size: labelled.len(),
        distinct_volumes: 0,
        optimizer_steps: trained.history.steps,
        train_digest: trained.history.digest(),
        model_digest: trained.model.digest(),
        evaluation,
    };
    let secs = trained.history.wall_time_s;
    Ok((Networks { model: trained.model, predictor: trained.predictor }, result, secs))
}

/// Cycle 0 for one seed, from the shared cache when possible.
fn cycle0(cfg: &ExperimentConfig, split: &DatasetSplit, seed: u64) -> Result<Cycle0> {
    let pool = init_pool(split, cfg.n_init, derive_seed(seed, "initial-pool"))?;
    let dir = cfg.output_dir.join(SHARED_DIR).join(&cfg.cycle0_digest(seed)[..16]);
    let (meta_path, ckpt_path) = (dir.join("cycle0.json"), dir.join("model.ckpt"));
    if meta_path.exists() && ckpt_path.exists() {
        let shared: SharedCycle0 = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| CoreError::Integrity(format!("{}: {e}", meta_path.display())))?;
        let (model, predictor) = load_checkpoint(&ckpt_path)?;
        if model.digest() != shared.result.model_digest
            || shared.initial_labelled != pool.labelled.iter().cloned().collect::<Vec<_>>()
        {
            return Err(CoreError::Integrity(format!("{} does not match its checkpoint", dir.display())));
        }
        log::info!("seed {seed}: reusing cycle 0 from {}", dir.display());
        return Ok(Cycle0 { pool, result: shared.result, nets: Networks { model, predictor } });
    }
    let (nets, result, secs) = train_and_evaluate(cfg, split, &pool.labelled, seed, 0)?;
    log::info!("seed {seed}: cycle 0 trained in {secs:.1}s");
    fs::create_dir_all(&dir)?;
    let tmp_ckpt = dir.join("model.ckpt.tmp");
    save_checkpoint(&tmp_ckpt, &nets.model, nets.predictor.as_ref())?;
    fs::rename(&tmp_ckpt, &ckpt_path)?;
    let shared = SharedCycle0 { initial_labelled: pool.labelled.iter().cloned().collect(), result: result.clone() };
    write_atomic(&meta_path, &serde_json::to_vec(&shared)?)?;
    Ok(Cycle0 { pool, result, nets })
}

/// Bottleneck features of `samples`, one row each.
fn latent_features(model: &mut UNet<f32>, samples: &[&SliceSample], batch: usize) -> Result<Array2<f64>> {
    let dim = model.config().latent_dim();
    let mut out = Array2::<f64>::zeros((samples.len(), dim));
    let mut row = 0;
    for chunk in samples.chunks(batch.max(1)) {
        let fwd = model.forward(&images_batch(chunk)?, Mode::Eval, None)?;
        for n in 0..chunk.len() {
            for (j, v) in fwd.image_latent(n).into_iter().enumerate() {
                out[[row, j]] = f64::from(v);
            }
            row += 1;
        }
    }
    Ok(out)
}

fn select(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    pool: &PoolState,
    nets: &mut Networks,
    seed: u64,
    cycle: usize,
    dir: &Path,
) -> Result<(CandidateBatch, Option<usize>)> {
    let sel: &SelectionConfig = &cfg.selection;
    let budget = sel.budget;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("select-{cycle}")));
    let index = split.train_index();
    let unlabelled: Vec<&SliceSample> = pool.unlabelled.iter().map(|id| &split.train[index[id]]).collect();
    match sel.strategy {
        Strategy::Random => Ok((random_select(pool, budget, &mut rng)?, None)),
        Strategy::Coreset => {
            let labelled: Vec<&SliceSample> = pool.labelled.iter().map(|id| &split.train[index[id]]).collect();
            let lf = latent_features(&mut nets.model, &labelled, cfg.scoring.batch_size)?;
            let uf = latent_features(&mut nets.model, &unlabelled, cfg.scoring.batch_size)?;
            let ids: Vec<SampleId> = pool.unlabelled.iter().cloned().collect();
            Ok((coreset_select(lf.view(), &ids, uf.view(), budget)?, None))
        }
        Strategy::Topk | Strategy::StochasticBatch => {
            let scorer = cfg.scorer.expect("validated");
            let table = score_pool(
                &mut nets.model,
                nets.predictor.as_mut(),
                &unlabelled,
                scorer,
                &cfg.scoring,
                derive_seed(seed, &format!("score-{cycle}")),
                cycle,
            )?;
            fs::create_dir_all(dir.join("scores"))?;
            table.save(&dir.join("scores").join(format!("cycle_{cycle:03}.tsv")))?;
            if sel.strategy == Strategy::Topk {
                return Ok((topk_select(&table.scores, budget)?, None));
            }
            let batches = build_stochastic_pool(&pool.unlabelled, budget, sel.pool_mode, sel.q, &mut rng)?;
            Ok((stochastic_batch_select(&table.scores, &batches)?, Some(batches.len())))
        }
    }
}

/// Runs (or resumes) one experiment for one seed. Completed cycles found on
/// disk are never recomputed; a finished run returns its stored results.
pub fn run_experiment(cfg: &ExperimentConfig, split: &DatasetSplit, seed: u64, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate_for(split)?;
    let id = cfg.experiment_id(seed);
    let dir = cfg.output_dir.join(&id);
    let digest = cfg.digest(seed);
    let index = split.train_index();
    let results_path = dir.join("results.jsonl");

    let mut manifest;
    let mut results;
    let mut pool;
    let mut nets;
    if dir.join("manifest.json").exists() {
        manifest = read_manifest(&dir)?;
        if manifest.config_digest != digest {
            return Err(CoreError::DigestMismatch { stored: manifest.config_digest, requested: digest });
        }
        results = read_results(&dir)?;
        if manifest.status != RunStatus::Running || results.len() == cfg.cycles + 1 {
            return Ok(RunOutcome { manifest, results });
        }
        let Some(last) = results.last() else {
            return Err(CoreError::Integrity(format!("{}: manifest without results", dir.display())));
        };
        let (model, predictor) = load_checkpoint(&dir.join(CHECKPOINT))?;
        if model.digest() != last.model_digest {
            return Err(CoreError::Integrity(format!("{}: checkpoint does not match cycle {}", dir.display(), last.cycle)));
        }
        nets = Networks { model, predictor };
        pool = PoolState {
            labelled: manifest.initial_labelled.iter().cloned().collect(),
            unlabelled: BTreeSet::new(),
            cycle: 0,
        };
        pool.unlabelled = split.train_ids().difference(&pool.labelled).cloned().collect();
        for r in &results[1..] {
            pool = oracle_annotate(&pool, &r.queried)?;
        }
        if pool.labelled.len() != last.labelled_size {
            return Err(CoreError::Integrity(format!("{}: replayed labelled set disagrees with results", dir.display())));
        }
        log::info!("{id}: resuming after cycle {}", last.cycle);
    } else {
        fs::create_dir_all(&dir)?;
        let c0 = cycle0(cfg, split, seed)?;
        manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            experiment_id: id.clone(),
            method: cfg.method(),
            strategy: cfg.selection.strategy,
            scorer: cfg.active_scorer(),
            seed,
            cycles: cfg.cycles,
            budget: cfg.selection.budget,
            config_digest: digest,
            initial_labelled: c0.pool.labelled.iter().cloned().collect(),
            status: RunStatus::Running,
        };
        write_manifest(&dir, &manifest)?;
        save_checkpoint(&dir.join(CHECKPOINT), &c0.nets.model, c0.nets.predictor.as_ref())?;
        append_line(&results_path, &serde_json::to_string(&c0.result)?)?;
        pool = c0.pool;
        nets = c0.nets;
        results = vec![c0.result];
    }

    while results.len() <= cfg.cycles {
        if opts.stop_after_cycle.is_some_and(|s| results.len() > s) {
            return Ok(RunOutcome { manifest, results });
        }
        let cycle = results.len();
        let start = Instant::now();
        if pool.unlabelled.len() < cfg.selection.budget {
            log::warn!("{id}: pool exhausted before cycle {cycle}");
            manifest.status = RunStatus::Exhausted;
            write_manifest(&dir, &manifest)?;
            return Ok(RunOutcome { manifest, results });
        }
        let (batch, pool_batches) = select(cfg, split, &pool, &mut nets, seed, cycle, &dir)?;
        pool = oracle_annotate(&pool, &batch.sample_ids)?;
        let (new_nets, mut result, train_s) = train_and_evaluate(cfg, split, &pool.labelled, seed, cycle)?;
        result.distinct_volumes = distinct_volumes(&batch.sample_ids, &index, &split.train);
        result.queried = batch.sample_ids;
        result.batch_score = batch.batch_score;
        result.batch_index = batch.batch_index;
        result.pool_batches = pool_batches;
        nets = new_nets;
        // checkpoint first: a crash in between only repeats this cycle
        save_checkpoint(&dir.join(CHECKPOINT), &nets.model, nets.predictor.as_ref())?;
        append_line(&results_path, &serde_json::to_string(&result)?)?;
        let timing = serde_json::json!({ "cycle": cycle, "train_s": train_s, "total_s": start.elapsed().as_secs_f64() });
        append_line(&dir.join("timings.jsonl"), &timing.to_string())?;
        log::info!(
            "{id}: cycle {cycle} labelled {} 3D DSC {:.2}",
            result.labelled_size,
            result.evaluation.value(Scope::ThreeD, Metric::Dsc).unwrap_or(f64::NAN)
        );
        results.push(result);
    }
    manifest.status = RunStatus::Complete;
    write_manifest(&dir, &manifest)?;
    Ok(RunOutcome { manifest, results })
}

/// Runs every seed of `cfg` in order.
pub fn run_all(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let split = cfg.dataset.load()?;
    cfg.seeds.iter().map(|&s| run_experiment(cfg, &split, s, opts)).collect()
}

/// Every experiment directory under `root` (anything holding a manifest), in name order.
pub fn load_runs(root: &Path) -> Result<Vec<RunOutcome>> {
    if !root.is_dir() {
        return Err(CoreError::Invalid(format!("{} is not a directory", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| Ok(RunOutcome { manifest: read_manifest(d)?, results: read_results(d)? }))
        .collect()
}

/// Metrics summarized in reports, in display order.
pub const REPORT_METRICS: [(Scope, Metric); 3] = [(Scope::ThreeD, Metric::Dsc), (Scope::TwoD, Metric::Dsc), (Scope::ThreeD, Metric::Hd95)];

pub fn metric_key(scope: Scope, metric: Metric) -> String {
    format!("{scope}_{metric}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| Self { mean: mean(values), std: std_dev(values), n: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cycle: usize,
    pub labelled_size: usize,
    /// Over seeds.
    pub value: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    /// Cycles shared by every run of the method (including cycle 0).
    pub cycles: usize,
    /// Metric key -> mean over cycles >= 1 per seed, then mean and std over seeds.
    pub overall: BTreeMap<String, MeanStd>,
    /// Metric key -> learning curve over all shared cycles.
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    pub mean_distinct_volumes: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub a: String,
    pub b: String,
    pub metric: String,
    /// Pairs of (seed, cycle >= 1) values compared.
    pub pairs: usize,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub methods: Vec<MethodSummary>,
    pub p_values: Vec<PValue>,
    pub warnings: Vec<String>,
}

fn value_of(r: &CycleResult, scope: Scope, metric: Metric) -> Option<f64> {
    r.evaluation.value(scope, metric)
}

/// Mean and std per method and cycle over seeds, overall means over cycles
/// >= 1, and paired permutation p-values between methods that cover exactly
/// the same seeds. Runs of one method with different lengths are cut to their
/// common prefix.
pub fn aggregate_runs(runs: &[RunOutcome]) -> Result<Summary> {
    if runs.iter().all(|r| r.results.is_empty()) {
        return Err(CoreError::Invalid("no completed cycles to aggregate".into()));
    }
    let mut warnings = Vec::new();
    let mut by_method: BTreeMap<&str, Vec<&RunOutcome>> = BTreeMap::new();
    for r in runs.iter().filter(|r| !r.results.is_empty()) {
        by_method.entry(&r.manifest.method).or_default().push(r);
    }
    let mut methods = Vec::new();
    for (name, group) in &by_method {
        let lengths: BTreeSet<usize> = group.iter().map(|r| r.results.len()).collect();
        let cycles = *lengths.iter().next().expect("non-empty group");
        if lengths.len() > 1 {
            let w = format!("{name}: runs cover different cycle counts {lengths:?}, using the first {cycles}");
            log::warn!("{w}");
            warnings.push(w);
        }
        let mut overall = BTreeMap::new();
        let mut curves = BTreeMap::new();
        for (scope, metric) in REPORT_METRICS {
            let per_seed: Vec<f64> = group
                .iter()
                .filter_map(|r| {
                    let v: Vec<f64> = r.results[1..cycles].iter().filter_map(|c| value_of(c, scope, metric)).collect();
                    (!v.is_empty()).then(|| mean(&v))
                })
                .collect();
            if let Some(ms) = MeanStd::of(&per_seed) {
                overall.insert(metric_key(scope, metric), ms);
            }
            let curve = (0..cycles)
                .filter_map(|c| {
                    let v: Vec<f64> = group.iter().filter_map(|r| value_of(&r.results[c], scope, metric)).collect();
                    MeanStd::of(&v).map(|value| CurvePoint { cycle: c, labelled_size: group[0].results[c].labelled_size, value })
                })
                .collect();
            curves.insert(metric_key(scope, metric), curve);
        }
        let dv: Vec<f64> = group.iter().flat_map(|r| r.results[1..cycles].iter().map(|c| c.distinct_volumes as f64)).collect();
        let mut seeds: Vec<u64> = group.iter().map(|r| r.manifest.seed).collect();
        seeds.sort_unstable();
        methods.push(MethodSummary {
            method: name.to_string(),
            seeds,
            cycles,
            overall,
            curves,
            mean_distinct_volumes: (!dv.is_empty()).then(|| mean(&dv)),
        });
    }

    let mut p_values = Vec::new();
    let names: Vec<&str> = by_method.keys().copied().collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (ga, gb) = (&by_method[a], &by_method[b]);
            let seeds = |g: &Vec<&RunOutcome>| g.iter().map(|r| (r.manifest.seed, r.manifest.initial_labelled.clone())).collect::<Vec<_>>();
            let (mut sa, mut sb) = (seeds(ga), seeds(gb));
            sa.sort();
            sb.sort();
            let unique = sa.windows(2).all(|w| w[0].0 != w[1].0);
            if sa != sb || !unique {
                continue;
            }
            let cycles = ga.iter().chain(gb.iter()).map(|r| r.results.len()).min().expect("non-empty");
            for (scope, metric) in REPORT_METRICS {
                let (mut xa, mut xb) = (Vec::new(), Vec::new());
                for ra in ga {
                    let rb = gb.iter().find(|r| r.manifest.seed == ra.manifest.seed).expect("same seeds");
                    for c in 1..cycles {
                        if let (Some(x), Some(y)) = (value_of(&ra.results[c], scope, metric), value_of(&rb.results[c], scope, metric)) {
                            xa.push(x);
                            xb.push(y);
                        }
                    }
                }
                if xa.len() < 2 {
                    continue;
                }
                let key = metric_key(scope, metric);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, &format!("{a}|{b}|{key}")));
                let p = paired_permutation_test(&xa, &xb, DEFAULT_PERMUTATIONS, &mut rng)?;
                p_values.push(PValue { a: a.to_string(), b: b.to_string(), metric: key, pairs: xa.len(), p });
            }
        }
    }
    Ok(Summary { methods, p_values, warnings })
}

/// Human-readable cycle plan of one experiment: labelled-set size and
/// optimizer steps per cycle, for every seed.
pub fn describe_plan(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<String> {
    cfg.validate_for(split)?;
    let mut out = format!(
        "{}: {} training slices, {} test slices, {} steps per cycle\n",
        cfg.method(),
        split.train.len(),
        split.test.len(),
        cfg.train.total_steps()
    );
    for &seed in &cfg.seeds {
        let sizes: Vec<String> = (0..=cfg.cycles).map(|c| (cfg.n_init + c * cfg.selection.budget).to_string()).collect();
        out.push_str(&format!("  {} -> {}: labelled {}\n", cfg.experiment_id(seed), cfg.output_dir.join(cfg.experiment_id(seed)).display(), sizes.join(" ")));
    }
    Ok(out)
}

/// Re-runs selection on a stored score table, treating its ids as the
/// unlabelled pool. The stochastic pool is drawn from `sel.seed`.
pub fn reselect_offline(table: &crate::uncertainty::ScoreTable, sel: &SelectionConfig) -> Result<CandidateBatch> {
    sel.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sel.seed);
    match sel.strategy {
        Strategy::Topk => topk_select(&table.scores, sel.budget),
        Strategy::StochasticBatch => {
            let ids: BTreeSet<SampleId> = table.scores.keys().cloned().collect();
            let batches = build_stochastic_pool(&ids, sel.budget, sel.pool_mode, sel.q, &mut rng)?;
            stochastic_batch_select(&table.scores, &batches)
        }
        Strategy::Random => {
            let pool = PoolState { labelled: BTreeSet::new(), unlabelled: table.scores.keys().cloned().collect(), cycle: table.cycle };
            random_select(&pool, sel.budget, &mut rng)
        }
        Strategy::Coreset => Err(CoreError::Config("coreset needs model features, not scores".into())),
    }
}
