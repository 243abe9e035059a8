//! Config-driven pipelines behind the `fedleak` commands.
//!
//! Every command reads an [`ExperimentConfig`], writes into an output
//! directory and records what it wrote, with checksums, in
//! `manifest.json`. Synthetic data is regenerated from the master seed, so
//! commands can run in separate processes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedleak_tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{infer_update_gradient, recover_label, run_attack, to_pixels, AttackConfig, ReconstructionResult};
use crate::data::{
    generate_synthetic, import_grayscale_dir, partition, to_batch, unassigned, ClientPartition, ClientSchedule, LabeledImage, PartitionManifest,
    ScheduleGroup,
};
use crate::dp::{default_alpha_grid, delta_for_client, estimate_clip_bound, ClipBound, PrivacyLedger};
use crate::error::{CoreError, Result};
use crate::eval::{
    auc, greedy_match, norm_summary, random_baseline_psnr, read_metrics, train_probe, write_metrics, MatchAssignment, MetricRow, ProbeConfig,
    ProbeTask,
};
use crate::fed::{local_train, plan_client_dp, run_federation, write_round_csv, ClientData, DpConfig, FederationHistory, Snapshot, TrainConfig};
use crate::models::{build_model, load_tensor, predict, save_tensor, Architecture, ModelSpec, ParamSet};

const ROOT_LABEL: &str = "fedleak";
pub const MANIFEST: &str = "manifest.json";

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedSchedule {
    Full,
    Desk12,
    SmallSource,
    TinySource,
    LargeSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleChoice {
    Named(NamedSchedule),
    Custom(Vec<ScheduleGroup>),
}

impl ScheduleChoice {
    pub fn resolve(&self) -> ClientSchedule {
        match self {
            ScheduleChoice::Named(n) => match n {
                NamedSchedule::Full => ClientSchedule::full(),
                NamedSchedule::Desk12 => ClientSchedule::desk12(),
                NamedSchedule::SmallSource => ClientSchedule::small_source(),
                NamedSchedule::TinySource => ClientSchedule::tiny_source(),
                NamedSchedule::LargeSource => ClientSchedule::large_source(),
            },
            ScheduleChoice::Custom(groups) => ClientSchedule { groups: groups.clone() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Import,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub side: usize,
    pub class_balance: f64,
    pub schedule: ScheduleChoice,
    /// Synthetic images generated beyond the schedule. They belong to no
    /// client and serve as the auxiliary pool (clip estimation, probes).
    pub holdout: usize,
    pub import_dir: Option<PathBuf>,
    pub labels_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            side: 16,
            class_balance: 0.5,
            schedule: ScheduleChoice::Named(NamedSchedule::Full),
            holdout: 400,
            import_dir: None,
            labels_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub widths: Vec<usize>,
    pub norm_mean: f32,
    pub norm_std: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelSpec::small_cnn(16);
        Self {
            architecture: s.architecture,
            widths: s.widths,
            norm_mean: s.norm_mean,
            norm_std: s.norm_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSection {
    pub epsilons: Vec<f64>,
    /// Fixed clipping bound; estimated on the auxiliary pool when absent.
    pub clip: Option<ClipBound>,
    pub clip_epochs: usize,
    pub calibrate: bool,
    /// Noise multiplier used for every client when `calibrate` is off.
    pub sigma: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub include_nonprivate: bool,
}

impl Default for DpSection {
    fn default() -> Self {
        Self {
            epsilons: vec![1.0, 3.0, 6.0, 10.0],
            clip: None,
            clip_epochs: 3,
            calibrate: true,
            sigma: None,
            alphas: None,
            include_nonprivate: true,
        }
    }
}

impl DpSection {
    pub fn alphas(&self) -> Vec<f64> {
        self.alphas.clone().unwrap_or_else(default_alpha_grid)
    }

    pub fn dp_config(&self, epsilon: f64, clip: ClipBound) -> DpConfig {
        DpConfig {
            target_epsilon: epsilon,
            clip,
            sigma: if self.calibrate { None } else { self.sigma },
            alphas: self.alphas(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub optimizer: AttackConfig,
    /// Client ids whose updates are snapshotted and attacked.
    pub targets: Vec<usize>,
    pub round: usize,
    /// Training variants to attack; all when empty.
    pub variants: Vec<String>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            optimizer: AttackConfig::default(),
            targets: Vec::new(),
            round: 4,
            variants: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_i: f64,
    pub baseline_draws: usize,
    pub probes: bool,
    /// Auxiliary images attacked as single-image clients for the probes.
    pub probe_samples: usize,
    pub probe_variants: Vec<String>,
    pub probe_tasks: Vec<ProbeTask>,
    pub probe_attack_trials: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_i: 1.0,
            baseline_draws: 200,
            probes: false,
            probe_samples: 64,
            probe_variants: vec!["nonprivate".into(), "eps_10".into()],
            probe_tasks: vec![ProbeTask::AttrBinary, ProbeTask::AttrScalar],
            probe_attack_trials: 1,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Further run directories merged into the summary tables.
    pub runs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub dp: Option<DpSection>,
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub report: ReportSection,
}

/// A training run: non-private or DP at one target epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub epsilon: Option<f64>,
}

impl Variant {
    pub fn nonprivate() -> Self {
        Self {
            name: "nonprivate".into(),
            epsilon: None,
        }
    }

    pub fn private(epsilon: f64) -> Self {
        Self {
            name: format!("eps_{epsilon}"),
            epsilon: Some(epsilon),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CoreError::at(path))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.train.dp.is_some() {
            return bad("put privacy settings in the [dp] section, not [train.dp]".into());
        }
        self.train.validate()?;
        self.data.schedule.resolve().validate().map_err(|e| CoreError::Config(e.to_string()))?;
        self.spec().validate().map_err(|e| CoreError::Config(e.to_string()))?;
        if !(self.data.class_balance > 0.0 && self.data.class_balance < 1.0) {
            return bad(format!("class_balance {} outside (0,1)", self.data.class_balance));
        }
        if self.data.source == DataSource::Import && (self.data.import_dir.is_none() || self.data.labels_csv.is_none()) {
            return bad("import source needs import_dir and labels_csv".into());
        }
        if let Some(dp) = &self.dp {
            if dp.epsilons.iter().any(|e| !(*e > 0.0)) {
                return bad("every target epsilon must be positive".into());
            }
            if !dp.calibrate && dp.sigma.is_none_or(|s| !(s >= 0.0)) {
                return bad("calibrate = false needs a non-negative sigma".into());
            }
            if self.train.freeze_mode == crate::models::FreezeMode::None {
                return bad("DP training needs frozen batch normalization (freeze_mode batch_norm or all_but_last)".into());
            }
        }
        if let Some(a) = &self.attack {
            if a.round == 0 || a.round > self.rounds_for(self.dp.is_some()) {
                return bad(format!("attack round {} outside the training rounds", a.round));
            }
            let n = self.data.schedule.resolve().num_clients();
            if let Some(t) = a.targets.iter().find(|&&t| t >= n) {
                return bad(format!("attack target {t} but only {n} clients"));
            }
        }
        if !(self.eval.max_i > 0.0) {
            return bad("max_i must be positive".into());
        }
        Ok(())
    }

    fn rounds_for(&self, dp: bool) -> usize {
        self.train.max_rounds.unwrap_or(if dp { 10 } else { 20 })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            architecture: self.model.architecture,
            side: self.data.side,
            widths: self.model.widths.clone(),
            norm_mean: self.model.norm_mean,
            norm_std: self.model.norm_std,
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        match &self.dp {
            None => vec![Variant::nonprivate()],
            Some(dp) => {
                let mut v = Vec::new();
                if dp.include_nonprivate {
                    v.push(Variant::nonprivate());
                }
                v.extend(dp.epsilons.iter().map(|&e| Variant::private(e)));
                v
            }
        }
    }

    /// Training settings for one variant, with attack snapshots wired in.
    pub fn train_config(&self, dp: Option<DpConfig>) -> TrainConfig {
        let mut t = self.train.clone();
        t.dp = dp;
        if let Some(a) = &self.attack {
            for &c in &a.targets {
                if !t.attackable.contains(&c) {
                    t.attackable.push(c);
                }
            }
            if !t.snapshot_rounds.is_empty() && !t.snapshot_rounds.contains(&a.round) {
                t.snapshot_rounds.push(a.round);
            }
            if t.snapshot_rounds.is_empty() {
                t.snapshot_rounds.push(a.round);
            }
        }
        t
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn root_rng(&self) -> RngStream {
        RngStream::new(self.seed, ROOT_LABEL)
    }
}

// ---------------------------------------------------------------- data

/// The dataset, its client partition and the auxiliary pool.
pub struct Prepared {
    pub spec: ModelSpec,
    pub images: Vec<LabeledImage>,
    pub clients: Vec<ClientPartition>,
    /// Indices held by no client, ascending.
    pub auxiliary: Vec<usize>,
    probe_samples: usize,
}

impl Prepared {
    /// Normalized batch and labels for `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<f32>)> {
        let imgs: Vec<&LabeledImage> = idx.iter().map(|&i| &self.images[i]).collect();
        let (x, y) = to_batch(&imgs)?;
        Ok((self.spec.normalize(&x), y))
    }

    pub fn client_data(&self) -> Result<Vec<ClientData>> {
        self.clients
            .iter()
            .map(|p| {
                let (train_x, train_y) = self.batch(&p.train)?;
                let val = if p.val.is_empty() { None } else { Some(self.batch(&p.val)?) };
                Ok(ClientData {
                    id: p.id,
                    train_x,
                    train_y,
                    val,
                })
            })
            .collect()
    }

    /// Auxiliary images attacked for the attribute probes.
    pub fn probe_eval(&self) -> &[usize] {
        &self.auxiliary[..self.probe_samples.min(self.auxiliary.len())]
    }

    /// Auxiliary images used for clip estimation and probe training.
    pub fn auxiliary_train(&self) -> &[usize] {
        &self.auxiliary[self.probe_samples.min(self.auxiliary.len())..]
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let root = cfg.root_rng();
    let schedule = cfg.data.schedule.resolve();
    let images = match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(
            schedule.total_images() + cfg.data.holdout,
            cfg.data.side,
            cfg.data.class_balance,
            &root.child("data"),
        )?,
        DataSource::Import => {
            let dir = cfg.data.import_dir.as_deref().expect("validated");
            let imgs = import_grayscale_dir(dir, cfg.data.labels_csv.as_deref().expect("validated"))?;
            let want = [cfg.data.side, cfg.data.side];
            if let Some(bad) = imgs.iter().find(|i| i.image.shape() != want) {
                return Err(CoreError::Data(format!("imported image {:?}, expected {want:?}", bad.image.shape())));
            }
            imgs
        }
    };
    let clients = partition(images.len(), &schedule, &root.child("split"))?;
    let auxiliary = unassigned(images.len(), &clients);
    let probe_samples = if cfg.eval.probes { cfg.eval.probe_samples } else { 0 };
    Ok(Prepared {
        spec: cfg.spec(),
        images,
        clients,
        auxiliary,
        probe_samples,
    })
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub variant: String,
    pub epsilon: Option<f64>,
    pub freeze_mode: crate::models::FreezeMode,
    pub clip: Option<ClipBound>,
    pub rounds: usize,
    pub best_round: usize,
    pub best_mean_val_auc: Option<f64>,
    pub mean_val_auc: Vec<Option<f64>>,
    pub lr: Vec<f64>,
    /// Mean over layers of the per-layer mean-of-medians gradient norm, per round.
    pub grad_norm_overall: Vec<(usize, f64)>,
}

/// Clipping bound for DP variants: configured, or the median per-sample
/// gradient norm of a few epochs of centralized training on the auxiliary pool.
pub fn clip_bound(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ClipBound> {
    let dp = cfg.dp.as_ref().ok_or_else(|| CoreError::Config("no [dp] section".into()))?;
    if let Some(c) = &dp.clip {
        return Ok(c.clone());
    }
    let aux = prepared.auxiliary_train();
    if aux.is_empty() {
        return Err(CoreError::Data("clip estimation needs auxiliary images (data.holdout)".into()));
    }
    let (x, y) = prepared.batch(aux)?;
    let root = cfg.root_rng();
    let init = build_model(&prepared.spec, &root.child("init"))?.apply_freeze(cfg.train.freeze_mode);
    let c = estimate_clip_bound(&init, &x, &y, dp.clip_epochs, cfg.train.batch_size, cfg.train.lr, &root.child("clip"))?;
    Ok(ClipBound::Global(c))
}

pub fn train_variant(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    clients: &[ClientData],
    variant: &Variant,
    clip: Option<&ClipBound>,
) -> Result<FederationHistory> {
    let root = cfg.root_rng();
    let dp = match (variant.epsilon, &cfg.dp) {
        (None, _) => None,
        (Some(e), Some(d)) => {
            let clip = clip.ok_or_else(|| CoreError::Config("DP variant without a clipping bound".into()))?;
            Some(d.dp_config(e, clip.clone()))
        }
        (Some(_), None) => return Err(CoreError::Config("DP variant without a [dp] section".into())),
    };
    let tcfg = cfg.train_config(dp);
    let init = build_model(&prepared.spec, &root.child("init"))?;
    run_federation(clients, &init, &tcfg, &root.child("train"))
}

// ---------------------------------------------------------------- attack

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSummary {
    pub config_hash: String,
    pub variant: String,
    pub client_id: usize,
    pub round: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub labels_recovered: bool,
    pub labels_correct: usize,
    pub best_trial: usize,
    pub best_loss: f64,
    pub max_i: f64,
    /// Mean matched PSNR of the best trial.
    pub psnr_mean: f64,
    /// Best matched image of the best trial.
    pub psnr_best: f64,
    /// Mean over finished trials of their mean matched PSNR.
    pub psnr_trial_mean: f64,
    pub pair_psnr: Vec<f64>,
    pub pair_original: Vec<usize>,
    /// PSNR of uniform-noise images against the same originals.
    pub baseline_psnr: f64,
}

pub struct AttackOutcome {
    pub summary: AttackSummary,
    pub result: ReconstructionResult,
    pub matching: MatchAssignment,
}

fn output_bias_grad(model: &ParamSet, grads: &[Tensor]) -> Result<f32> {
    let bias = model.last_layer()[1];
    let pos = model
        .trainable_indices()
        .iter()
        .position(|&i| i == bias)
        .ok_or_else(|| CoreError::Attack("output bias is frozen".into()))?;
    Ok(grads[pos].data()[0])
}

/// Attack one snapshot. `originals` are only used for scoring and, for
/// multi-image clients, to supply labels.
pub fn attack_snapshot(
    snap: &Snapshot,
    originals: &[&LabeledImage],
    attack: &AttackConfig,
    eval: &EvalSection,
    variant: &str,
    config_hash: &str,
    rng: &RngStream,
) -> Result<AttackOutcome> {
    let grads = infer_update_gradient(&snap.before, &snap.after, snap.lr)?;
    let truth: Vec<f32> = originals.iter().map(|i| i.label as f32).collect();
    let single = snap.n_train == 1 && snap.steps == 1;
    let labels = if single {
        vec![recover_label(output_bias_grad(&snap.before, &grads)?)? as f32]
    } else {
        truth.clone()
    };
    let result = run_attack(&snap.before, &grads, &labels, attack, rng)?;
    let origs: Vec<Tensor> = originals.iter().map(|i| i.image.clone()).collect();
    let matching = greedy_match(&origs, &result.images, eval.max_i)?;
    let mut trial_means = Vec::new();
    for t in result.trials.iter().filter(|t| t.final_loss.is_some()) {
        let imgs = to_pixels(snap.before.spec(), &t.dummy)?;
        trial_means.push(greedy_match(&origs, &imgs, eval.max_i)?.mean_psnr());
    }
    let baseline_psnr = random_baseline_psnr(&origs, eval.baseline_draws, eval.max_i, &mut rng.child("baseline"))?;
    let summary = AttackSummary {
        config_hash: config_hash.to_string(),
        variant: variant.to_string(),
        client_id: snap.client_id,
        round: snap.round,
        batch_size: snap.batch_size,
        n_train: snap.n_train,
        labels_recovered: single,
        labels_correct: labels.iter().zip(&truth).filter(|(a, b)| a == b).count(),
        best_trial: result.best_trial,
        best_loss: result.best_loss,
        max_i: eval.max_i,
        psnr_mean: matching.mean_psnr(),
        psnr_best: matching.best_psnr(),
        psnr_trial_mean: trial_means.iter().sum::<f64>() / trial_means.len() as f64,
        pair_psnr: matching.pairs.iter().map(|p| p.psnr).collect(),
        pair_original: matching.pairs.iter().map(|p| p.original).collect(),
        baseline_psnr,
    };
    Ok(AttackOutcome { summary, result, matching })
}

/// Simulate a single-image client update from `before` for each image and
/// reconstruct it. Returns one `[S, S]` reconstruction per image.
pub fn probe_reconstructions(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    before: &ParamSet,
    lr: f64,
    dp: Option<&DpConfig>,
    rng: &RngStream,
) -> Result<Vec<Tensor>> {
    let attack = cfg.attack.as_ref().map(|a| a.optimizer.clone()).unwrap_or_default();
    let attack = AttackConfig {
        trials: cfg.eval.probe_attack_trials,
        ..attack
    };
    let tcfg = cfg.train_config(dp.cloned());
    let client_dp = match dp {
        Some(d) => Some(plan_client_dp(d, &tcfg, 1)?),
        None => None,
    };
    prepared
        .probe_eval()
        .iter()
        .map(|&i| {
            let (x, y) = prepared.batch(&[i])?;
            let client = ClientData {
                id: i,
                train_x: x,
                train_y: y,
                val: None,
            };
            let crng = rng.child(format!("image{i}"));
            let after = match &client_dp {
                Some(l) => {
                    let mut ledger = l.ledger.clone();
                    local_train(&client, before, &tcfg, lr, Some((&l.dp, &mut ledger)), &crng)?.params
                }
                None => local_train(&client, before, &tcfg, lr, None, &crng)?.params,
            };
            let grads = infer_update_gradient(before, &after, lr)?;
            let label = recover_label(output_bias_grad(before, &grads)?)?;
            let res = run_attack(before, &grads, &[label as f32], &attack, &crng.child("attack"))?;
            Ok(res.images.into_iter().next().expect("one image"))
        })
        .collect()
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub config_hash: String,
    /// Component name to RNG label path under the master seed.
    pub seeds: BTreeMap<String, String>,
    pub wall_clock_s: f64,
    /// Output path relative to the run directory, to SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub commands: BTreeMap<String, CommandRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(&p).map_err(CoreError::at(&p))?)?))
    }

    /// Every file listed by any command.
    pub fn inventory(&self) -> BTreeSet<String> {
        self.commands.values().flat_map(|c| c.files.keys().cloned()).collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(CoreError::at(path))?)))
}

/// Files written by one command, relative to the run directory.
pub struct Outputs {
    root: PathBuf,
    files: BTreeSet<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: BTreeSet::new(),
        }
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(CoreError::at(parent))?;
        }
        Ok(p)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        fs::create_dir_all(&p).map_err(CoreError::at(&p))?;
        Ok(p)
    }

    fn add(&mut self, written: impl IntoIterator<Item = PathBuf>) {
        self.files.extend(written);
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(rel)?;
        fs::write(&p, serde_json::to_vec_pretty(value)?).map_err(CoreError::at(&p))?;
        self.files.insert(p.clone());
        Ok(p)
    }

    fn csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        let mut w = csv::Writer::from_path(&p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.files.insert(p.clone());
        Ok(p)
    }

    fn tensor(&mut self, rel: &str, t: &Tensor) -> Result<PathBuf> {
        let p = save_tensor(&self.path(rel)?, t)?;
        self.files.insert(p.clone());
        Ok(p)
    }

    fn record(&self) -> Result<BTreeMap<String, String>> {
        self.files
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(&self.root).unwrap_or(p);
                Ok((rel.to_string_lossy().replace('\\', "/"), sha256_file(p)?))
            })
            .collect()
    }
}

// ---------------------------------------------------------------- commands

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Command {
    Partition,
    Train,
    Attack,
    Account,
    Evaluate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Partition => "partition",
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Account => "account",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }

    /// Subdirectory owned by the command, cleared before it runs.
    fn dir(self) -> &'static str {
        match self {
            Command::Partition => "partition",
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Account => "account",
            Command::Evaluate => "eval",
            Command::Report => "report",
        }
    }

    fn seeds(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Command::Partition => &[("data", "data"), ("split", "split")],
            Command::Train => &[
                ("data", "data"),
                ("split", "split"),
                ("init", "init"),
                ("clip", "clip"),
                ("train", "train"),
            ],
            Command::Attack => &[("attack", "attack"), ("probe", "probe")],
            Command::Account => &[],
            Command::Evaluate => &[("probe_train", "probe_train"), ("noise", "noise")],
            Command::Report => &[],
        }
    }
}

/// Run one command and update `out/manifest.json`.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<CommandRecord> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(CoreError::at(out))?;
    let own = out.join(cmd.dir());
    if own.exists() {
        fs::remove_dir_all(&own).map_err(CoreError::at(&own))?;
    }
    let hash = cfg.hash()?;
    let mut o = Outputs::new(out);
    match cmd {
        Command::Partition => cmd_partition(cfg, &mut o)?,
        Command::Train => cmd_train(cfg, &hash, out, &mut o)?,
        Command::Attack => cmd_attack(cfg, &hash, out, &mut o)?,
        Command::Account => cmd_account(cfg, &mut o)?,
        Command::Evaluate => cmd_evaluate(cfg, out, &mut o)?,
        Command::Report => cmd_report(cfg, out, &mut o)?,
    }
    let record = CommandRecord {
        config_hash: hash.clone(),
        seeds: cmd.seeds().iter().map(|(k, l)| (k.to_string(), format!("{ROOT_LABEL}/{l}"))).collect(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        files: o.record()?,
    };
    let mut manifest = RunManifest::load(out)?.unwrap_or_default();
    manifest.seed = cfg.seed;
    manifest.config_hash = hash;
    manifest.versions.insert("fedleak-core".into(), env!("CARGO_PKG_VERSION").into());
    manifest.versions.insert("fedleak-tensor".into(), fedleak_tensor::VERSION.into());
    manifest.commands.insert(cmd.name().into(), record.clone());
    let p = out.join(MANIFEST);
    fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(CoreError::at(&p))?;
    Ok(record)
}

#[derive(Serialize)]
struct IndexRow {
    client_id: usize,
    split: &'static str,
    index: usize,
    label: u8,
}

fn cmd_partition(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let prepared = prepare(cfg)?;
    o.json(
        "partition/partition.json",
        &PartitionManifest {
            dataset_len: prepared.images.len(),
            clients: prepared.clients.clone(),
        },
    )?;
    for p in &prepared.clients {
        let mut rows = Vec::new();
        for (split, idx) in [("train", &p.train), ("val", &p.val), ("test", &p.test)] {
            rows.extend(idx.iter().map(|&i| IndexRow {
                client_id: p.id,
                split,
                index: i,
                label: prepared.images[i].label,
            }));
        }
        o.csv(&format!("partition/clients/client_{:03}.csv", p.id), &rows)?;
    }
    o.json("partition/auxiliary.json", &prepared.auxiliary)?;
    Ok(())
}

/// Load the partition written by `partition` and check it against the config.
fn load_prepared(cfg: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    let p = out.join("partition/partition.json");
    let stored: PartitionManifest =
        serde_json::from_slice(&fs::read(&p).map_err(|_| CoreError::Data(format!("{} missing; run partition first", p.display())))?)?;
    let prepared = prepare(cfg)?;
    if stored.clients != prepared.clients || stored.dataset_len != prepared.images.len() {
        return Err(CoreError::Data("stored partition does not match the config; rerun partition".into()));
    }
    Ok(prepared)
}

#[derive(Serialize)]
struct NormCsvRow<'a> {
    round: usize,
    layer: &'a str,
    mean_of_medians: f64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    round: usize,
    client_id: usize,
    lr: f64,
    n_train: usize,
    batch_size: usize,
    steps: usize,
}

fn cmd_train(cfg: &ExperimentConfig, hash: &str, out: &Path, o: &mut Outputs) -> Result<()> {
    let prepared = load_prepared(cfg, out)?;
    let clients = prepared.client_data()?;
    let clip = if cfg.dp.is_some() && cfg.variants().iter().any(|v| v.epsilon.is_some()) {
        Some(clip_bound(cfg, &prepared)?)
    } else {
        None
    };
    for v in cfg.variants() {
        let h = train_variant(cfg, &prepared, &clients, &v, clip.as_ref())?;
        let base = format!("train/{}", v.name);
        let csv_path = o.path(&format!("{base}/rounds.csv"))?;
        write_round_csv(&csv_path, &h)?;
        o.add([csv_path]);
        o.add(h.best.save(&o.dir(&format!("{base}/best_model"))?)?);
        let norms = norm_summary(&h.reports, &h.layer_names);
        let rows: Vec<NormCsvRow> = norms
            .rows
            .iter()
            .map(|r| NormCsvRow {
                round: r.round,
                layer: &r.layer,
                mean_of_medians: r.mean_of_medians,
            })
            .collect();
        o.csv(&format!("{base}/grad_norms.csv"), &rows)?;
        for s in &h.snapshots {
            let sd = format!("{base}/snapshots/round_{}_client_{}", s.round, s.client_id);
            o.add(s.before.save(&o.dir(&format!("{sd}/before"))?)?);
            o.add(s.after.save(&o.dir(&format!("{sd}/after"))?)?);
            o.json(
                &format!("{sd}/snapshot.json"),
                &SnapshotMeta {
                    round: s.round,
                    client_id: s.client_id,
                    lr: s.lr,
                    n_train: s.n_train,
                    batch_size: s.batch_size,
                    steps: s.steps,
                },
            )?;
        }
        for (id, l) in &h.ledgers {
            o.json(&format!("{base}/ledgers/client_{id:03}.json"), &l.report(*id)?)?;
        }
        o.json(
            &format!("{base}/summary.json"),
            &TrainSummary {
                config_hash: hash.to_string(),
                variant: v.name.clone(),
                epsilon: v.epsilon,
                freeze_mode: cfg.train.freeze_mode,
                clip: v.epsilon.and(clip.clone()),
                rounds: h.reports.len(),
                best_round: h.best_round,
                best_mean_val_auc: h.best_mean_auc(),
                mean_val_auc: h.reports.iter().map(|r| r.mean_val_auc).collect(),
                lr: h.reports.iter().map(|r| r.lr).collect(),
                grad_norm_overall: norms.overall.clone(),
            },
        )?;
    }
    Ok(())
}

fn load_snapshot(dir: &Path) -> Result<Snapshot> {
    let p = dir.join("snapshot.json");
    let meta: SnapshotMeta = serde_json::from_slice(&fs::read(&p).map_err(|_| CoreError::Attack(format!("missing snapshot {}", dir.display())))?)?;
    Ok(Snapshot {
        round: meta.round,
        client_id: meta.client_id,
        before: ParamSet::load(&dir.join("before"))?,
        after: ParamSet::load(&dir.join("after"))?,
        lr: meta.lr,
        n_train: meta.n_train,
        batch_size: meta.batch_size,
        steps: meta.steps,
    })
}

fn load_summary(out: &Path, variant: &str) -> Result<TrainSummary> {
    let p = out.join(format!("train/{variant}/summary.json"));
    Ok(serde_json::from_slice(
        &fs::read(&p).map_err(|_| CoreError::Data(format!("{} missing; run train first", p.display())))?,
    )?)
}

fn cmd_attack(cfg: &ExperimentConfig, hash: &str, out: &Path, o: &mut Outputs) -> Result<()> {
    let a = cfg.attack.as_ref().ok_or_else(|| CoreError::Config("no [attack] section".into()))?;
    let prepared = load_prepared(cfg, out)?;
    let root = cfg.root_rng().child("attack");
    let variants: Vec<Variant> = cfg
        .variants()
        .into_iter()
        .filter(|v| a.variants.is_empty() || a.variants.contains(&v.name))
        .collect();
    for v in &variants {
        for &c in &a.targets {
            let snap = load_snapshot(&out.join(format!("train/{}/snapshots/round_{}_client_{c}", v.name, a.round)))?;
            let originals: Vec<&LabeledImage> = prepared.clients[c].train.iter().map(|&i| &prepared.images[i]).collect();
            let rng = root.child(format!("{}/client{c}/round{}", v.name, a.round));
            let outcome = attack_snapshot(&snap, &originals, &a.optimizer, &cfg.eval, &v.name, hash, &rng)?;
            let dir = format!("attack/{}/client_{c}_round_{}", v.name, a.round);
            o.add(outcome.result.export(&o.dir(&dir.to_string())?)?);
            o.json(&format!("{dir}/psnr.json"), &outcome.summary)?;
        }
    }
    if cfg.eval.probes {
        let probe_rng = cfg.root_rng().child("probe");
        for v in variants.iter().filter(|v| cfg.eval.probe_variants.contains(&v.name)) {
            let snap = load_snapshot(&out.join(format!(
                "train/{}/snapshots/round_{}_client_{}",
                v.name,
                a.round,
                a.targets.first().ok_or_else(|| CoreError::Config("probes need at least one attack target".into()))?
            )))?;
            let summary = load_summary(out, &v.name)?;
            let dp = match (v.epsilon, &cfg.dp, summary.clip) {
                (Some(e), Some(d), Some(clip)) => Some(d.dp_config(e, clip)),
                (None, _, _) => None,
                _ => return Err(CoreError::Data(format!("{}: DP variant without a recorded clip bound", v.name))),
            };
            let recon = probe_reconstructions(cfg, &prepared, &snap.before, snap.lr, dp.as_ref(), &probe_rng.child(&v.name))?;
            o.tensor(&format!("attack/{}/probe/recon.ftn", v.name), &Tensor::stack(&recon)?)?;
            o.json(&format!("attack/{}/probe/indices.json", v.name), &prepared.probe_eval())?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetRow {
    pub target_epsilon: f64,
    pub client_id: usize,
    pub n_train: usize,
    pub sample_rate: f64,
    pub steps: u64,
    pub sigma: f64,
    pub delta: f64,
    pub alpha_star: f64,
    pub epsilon: f64,
}

/// Planned per-client budgets for every target epsilon, without training.
pub fn budget_table(cfg: &ExperimentConfig) -> Result<Vec<BudgetRow>> {
    let dp = cfg.dp.as_ref().ok_or_else(|| CoreError::Config("account needs a [dp] section".into()))?;
    let schedule = cfg.data.schedule.resolve();
    let mut rows = Vec::new();
    for &e in &dp.epsilons {
        let dcfg = dp.dp_config(e, ClipBound::Global(1.0));
        let tcfg = cfg.train_config(Some(dcfg.clone()));
        for (id, (size, _)) in schedule.clients().into_iter().enumerate() {
            let n_train = crate::data::split_sizes(size).0;
            let plan = plan_client_dp(&dcfg, &tcfg, n_train)?;
            let b = tcfg.batch_size.min(n_train);
            let steps = (tcfg.rounds() * tcfg.local_epochs * n_train.div_ceil(b)) as u64;
            let mut ledger = PrivacyLedger::new(dp.alphas())?;
            ledger.record(plan.sample_rate, plan.dp.sigma, steps)?;
            let delta = delta_for_client(n_train);
            let (alpha_star, epsilon) = ledger.epsilon(delta)?;
            rows.push(BudgetRow {
                target_epsilon: e,
                client_id: id,
                n_train,
                sample_rate: plan.sample_rate,
                steps,
                sigma: plan.dp.sigma,
                delta,
                alpha_star,
                epsilon,
            });
        }
    }
    Ok(rows)
}

fn cmd_account(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<()> {
    let rows = budget_table(cfg)?;
    o.csv("account/budget.csv", &rows)?;
    o.json("account/sampling.json", &crate::dp::SAMPLING_NOTE)?;
    Ok(())
}

fn experiment_id(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn freeze_name(cfg: &ExperimentConfig) -> String {
    serde_json::to_value(cfg.train.freeze_mode)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub variant: String,
    pub task: ProbeTask,
    pub metric: String,
    pub samples: usize,
    pub original: f64,
    pub reconstruction: f64,
    pub noise: f64,
}

/// Mean test AUC of `model` over clients whose test split has both classes.
pub fn mean_test_auc(model: &ParamSet, prepared: &Prepared) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for p in prepared.clients.iter().filter(|p| !p.test.is_empty()) {
        let (x, y) = prepared.batch(&p.test)?;
        let labels: Vec<u8> = y.iter().map(|&v| v as u8).collect();
        if let Ok(a) = auc(&predict(model, &x)?, &labels) {
            vals.push(a);
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, o: &mut Outputs) -> Result<()> {
    let prepared = load_prepared(cfg, out)?;
    let freeze = freeze_name(cfg);
    let mut rows = Vec::new();
    for v in cfg.variants() {
        let s = load_summary(out, &v.name)?;
        let id = experiment_id(&[("freeze", freeze.clone()), ("privacy", v.name.clone())]);
        if let Some(a) = s.best_mean_val_auc {
            rows.push(MetricRow::new(&id, "val_auc", "best_round_mean", a));
        }
        let best = ParamSet::load(&out.join(format!("train/{}/best_model", v.name)))?;
        if let Some(a) = mean_test_auc(&best, &prepared)? {
            rows.push(MetricRow::new(&id, "test_auc", "client_mean", a));
        }
        for (round, value) in &s.grad_norm_overall {
            rows.push(MetricRow::new(&id, "grad_norm", &format!("round{round}_mean_of_medians"), *value));
        }
        if let Some(a) = &cfg.attack {
            for &c in &a.targets {
                let p = out.join(format!("attack/{}/client_{c}_round_{}/psnr.json", v.name, a.round));
                if !p.exists() {
                    continue;
                }
                let s: AttackSummary = serde_json::from_slice(&fs::read(&p).map_err(CoreError::at(&p))?)?;
                let id = experiment_id(&[
                    ("freeze", freeze.clone()),
                    ("privacy", v.name.clone()),
                    ("client", c.to_string()),
                    ("round", a.round.to_string()),
                    ("batch", s.batch_size.to_string()),
                ]);
                rows.push(MetricRow::new(&id, "psnr", "best_trial_image_mean", s.psnr_mean));
                rows.push(MetricRow::new(&id, "psnr", "best_trial_best_image", s.psnr_best));
                rows.push(MetricRow::new(&id, "psnr", "trial_mean", s.psnr_trial_mean));
                rows.push(MetricRow::new(&id, "baseline_psnr", "uniform_noise", s.baseline_psnr));
                rows.push(MetricRow::new(
                    &id,
                    "label_accuracy",
                    "batch",
                    s.labels_correct as f64 / s.n_train.max(1) as f64,
                ));
            }
        }
    }
    let mut probes = Vec::new();
    if cfg.eval.probes {
        let aux: Vec<LabeledImage> = prepared.auxiliary_train().iter().map(|&i| prepared.images[i].clone()).collect();
        let eval_imgs: Vec<&LabeledImage> = prepared.probe_eval().iter().map(|&i| &prepared.images[i]).collect();
        let originals: Vec<&Tensor> = eval_imgs.iter().map(|i| &i.image).collect();
        let mut nrng = cfg.root_rng().child("noise");
        let s = cfg.data.side;
        let noise: Vec<Tensor> = eval_imgs
            .iter()
            .map(|_| Tensor::new(vec![s, s], (0..s * s).map(|_| nrng.uniform() as f32).collect()))
            .collect::<fedleak_tensor::Result<_>>()?;
        for &task in &cfg.eval.probe_tasks {
            let probe = train_probe(
                &aux,
                task,
                &prepared.spec,
                &cfg.eval.probe,
                &cfg.root_rng().child(format!("probe_train/{task:?}")),
            )?;
            let original = probe.score(&originals, &eval_imgs)?;
            let noise_score = probe.score(&noise.iter().collect::<Vec<_>>(), &eval_imgs)?;
            for v in cfg.variants().iter().filter(|v| cfg.eval.probe_variants.contains(&v.name)) {
                let p = out.join(format!("attack/{}/probe/recon.ftn", v.name));
                if !p.exists() {
                    continue;
                }
                let stacked = load_tensor(&p)?;
                let recon = (0..stacked.shape()[0])
                    .map(|i| stacked.select(i))
                    .collect::<fedleak_tensor::Result<Vec<_>>>()?;
                let reconstruction = probe.score(&recon.iter().collect::<Vec<_>>(), &eval_imgs)?;
                let metric = match task {
                    ProbeTask::AttrBinary => "auc",
                    ProbeTask::AttrScalar => "mae",
                };
                let task_name = match task {
                    ProbeTask::AttrBinary => "attr_binary",
                    ProbeTask::AttrScalar => "attr_scalar",
                };
                let id = experiment_id(&[("freeze", freeze.clone()), ("privacy", v.name.clone()), ("task", task_name.into())]);
                let m = format!("probe_{metric}");
                rows.push(MetricRow::new(&id, &m, "original", original));
                rows.push(MetricRow::new(&id, &m, "reconstruction", reconstruction));
                rows.push(MetricRow::new(&id, &m, "noise", noise_score));
                probes.push(ProbeResult {
                    variant: v.name.clone(),
                    task,
                    metric: metric.into(),
                    samples: eval_imgs.len(),
                    original,
                    reconstruction,
                    noise: noise_score,
                });
            }
        }
    }
    let p = o.path("eval/metrics.csv")?;
    write_metrics(&p, &rows)?;
    o.add([p]);
    if !probes.is_empty() {
        o.json("eval/probes.json", &probes)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- report

/// One summary table: rows keyed by experiment dimensions, one column per
/// metric/reduction that has at least one value.
pub struct Table {
    pub keys: Vec<&'static str>,
    pub columns: Vec<String>,
    pub rows: Vec<(Vec<String>, Vec<Option<f64>>)>,
}

fn parse_id(id: &str) -> BTreeMap<String, String> {
    id.split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

struct TableSpec {
    name: &'static str,
    keys: &'static [&'static str],
    metrics: &'static [&'static str],
    filter: fn(&BTreeMap<String, String>) -> bool,
}

const TABLES: &[TableSpec] = &[
    TableSpec {
        name: "freeze_auc",
        keys: &["freeze"],
        metrics: &["val_auc", "test_auc"],
        filter: |m| m.get("privacy").is_some_and(|p| p == "nonprivate") && !m.contains_key("client"),
    },
    TableSpec {
        name: "freeze_psnr",
        keys: &["freeze", "client", "round"],
        metrics: &["psnr", "baseline_psnr"],
        filter: |m| m.get("privacy").is_some_and(|p| p == "nonprivate") && m.get("batch").is_some_and(|b| b == "1"),
    },
    TableSpec {
        name: "batch_psnr",
        keys: &["freeze", "batch", "client", "round"],
        metrics: &["psnr", "baseline_psnr"],
        filter: |m| m.get("privacy").is_some_and(|p| p == "nonprivate") && m.contains_key("batch"),
    },
    TableSpec {
        name: "epsilon_auc",
        keys: &["freeze", "privacy"],
        metrics: &["val_auc", "test_auc"],
        filter: |m| !m.contains_key("client") && !m.contains_key("task"),
    },
    TableSpec {
        name: "epsilon_psnr",
        keys: &["freeze", "privacy", "client", "round"],
        metrics: &["psnr", "baseline_psnr"],
        filter: |m| m.contains_key("client"),
    },
    TableSpec {
        name: "probe",
        keys: &["freeze", "privacy", "task"],
        metrics: &["probe_auc", "probe_mae"],
        filter: |m| m.contains_key("task"),
    },
];

fn build_table(spec: &TableSpec, rows: &[MetricRow]) -> Table {
    let mut cols = BTreeSet::new();
    let mut cells: BTreeMap<Vec<String>, BTreeMap<String, f64>> = BTreeMap::new();
    for r in rows {
        if !spec.metrics.contains(&r.metric.as_str()) {
            continue;
        }
        let id = parse_id(&r.experiment);
        if !(spec.filter)(&id) {
            continue;
        }
        let key: Vec<String> = spec.keys.iter().map(|k| id.get(*k).cloned().unwrap_or_default()).collect();
        let col = format!("{}:{}", r.metric, r.reduction);
        cols.insert(col.clone());
        cells.entry(key).or_default().insert(col, r.value);
    }
    let columns: Vec<String> = cols.into_iter().collect();
    let rows = cells
        .into_iter()
        .map(|(k, m)| {
            let vals = columns.iter().map(|c| m.get(c).copied()).collect();
            (k, vals)
        })
        .collect();
    Table {
        keys: spec.keys.to_vec(),
        columns,
        rows,
    }
}

/// Summary tables over the metrics of several run directories.
pub fn summary_tables(run_dirs: &[PathBuf]) -> Result<Vec<(&'static str, Table)>> {
    let mut all = Vec::new();
    for d in run_dirs {
        let p = d.join("eval/metrics.csv");
        if !p.exists() {
            return Err(CoreError::Data(format!("{} missing; run evaluate first", p.display())));
        }
        all.extend(read_metrics(&p)?);
    }
    Ok(TABLES.iter().map(|t| (t.name, build_table(t, &all))).collect())
}

fn write_table(path: &Path, t: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = t.keys.iter().map(|k| k.to_string()).chain(t.columns.iter().cloned()).collect();
    w.write_record(&header)?;
    for (k, vals) in &t.rows {
        let rec: Vec<String> = k
            .iter()
            .cloned()
            .chain(vals.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig, out: &Path, o: &mut Outputs) -> Result<()> {
    let mut dirs = vec![out.to_path_buf()];
    dirs.extend(cfg.report.runs.iter().cloned());
    for (name, table) in summary_tables(&dirs)? {
        let p = o.path(&format!("report/{name}.csv"))?;
        write_table(&p, &table)?;
        o.add([p]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
seed = 3
[data]
schedule = "desk12"
holdout = 40
[train]
max_rounds = 2
freeze_mode = "batch_norm"
[attack]
targets = [10]
round = 2
[attack.optimizer]
max_steps = 5
"#;

    #[test]
    fn defaults_describe_the_full_federation() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.data.schedule.resolve().num_clients(), 36);
        assert_eq!(cfg.variants(), vec![Variant::nonprivate()]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nrounds = 3").is_err());
        assert!(ExperimentConfig::from_toml("[attack.optimizer]\nsteps = 3").is_err());
    }

    #[test]
    fn dp_with_batch_statistics_is_a_config_error() {
        let e = ExperimentConfig::from_toml("[train]\nfreeze_mode = \"none\"\n[dp]\n").unwrap_err();
        assert!(matches!(e, CoreError::Config(_)));
    }

    #[test]
    fn variants_follow_epsilons() {
        let cfg = ExperimentConfig::from_toml("[dp]\nepsilons = [10.0, 1.0]").unwrap();
        let names: Vec<String> = cfg.variants().into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["nonprivate", "eps_10", "eps_1"]);
    }

    #[test]
    fn attack_targets_become_snapshots() {
        let cfg = ExperimentConfig::from_toml(DESK).unwrap();
        let t = cfg.train_config(None);
        assert_eq!(t.attackable, vec![10]);
        assert_eq!(t.snapshot_rounds, vec![2]);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::from_toml(DESK).unwrap();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
    }

    #[test]
    fn budget_rows_meet_targets() {
        let cfg = ExperimentConfig::from_toml("[data]\nschedule = \"desk12\"\n[dp]\nepsilons = [1.0, 10.0]").unwrap();
        let rows = budget_table(&cfg).unwrap();
        assert_eq!(rows.len(), 24);
        for r in &rows {
            assert!(r.epsilon <= r.target_epsilon, "{r:?}");
            assert_eq!(r.delta, (0.9 / r.n_train as f64).min(1e-2));
        }
    }

    #[test]
    fn table_columns_only_for_present_metrics() {
        let rows = vec![
            MetricRow::new("freeze=batch_norm;privacy=nonprivate", "val_auc", "best_round_mean", 0.7),
            MetricRow::new("freeze=none;privacy=nonprivate", "val_auc", "best_round_mean", 0.8),
        ];
        let t = build_table(&TABLES[0], &rows);
        assert_eq!(t.columns, vec!["val_auc:best_round_mean"]);
        assert_eq!(t.rows.len(), 2);
    }
}
