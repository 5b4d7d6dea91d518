//! Config-driven experiments: split, train target and shadows, wrap the
//! target, tune every attack on shadows, evaluate on the balanced target
//! split and score.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{
    augmentation_attack, augmentation_bits, boundary_walks, combined_attack, confidence_features,
    confidence_vector_attack, gap_attack, max_confidences, noise_scores, threshold_predictions,
    train_shadow_attack, tune_threshold, AttackTrainConfig, MembershipPrediction, ShadowFeatureSpec,
    ShadowModel,
};
use crate::boundary::{whitebox_distance, FeatureBox, HsjaConfig, NoiseRobustnessConfig};
use crate::data::{
    load_idx_images, load_tabular, AugmentationSpec, Dataset, ExampleRecord, FeatureKind, FeatureSchema,
    NoiseKind, PointId, TabularSchema,
};
use crate::error::{Error, Result};
use crate::model::{
    fine_tune, train_adv_reg, train_classifier, train_dpsgd, Activation, AdvRegConfig, Architecture,
    Classifier, DpConfig, TrainConfig, TrainingMeta,
};
use crate::numerics::{digest_json, json_f64, RngStream};
use crate::oracle::{ConfidenceOracle, DefenseWrapperSpec, LabelOracle};
use crate::outlier::{calibrate_delta, embed, find_outliers, outlier_precision, Calibration, DEFAULT_GAMMA};

/// Pipeline stage, used to tag failures and pick process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Data,
    Train,
    Attack,
    Outlier,
    Score,
    Emit,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Data => 3,
            Stage::Train => 4,
            Stage::Attack => 5,
            Stage::Outlier => 6,
            Stage::Score => 7,
            Stage::Emit => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Outlier => "outlier",
            Stage::Score => "score",
            Stage::Emit => "emit",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub context: String,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.context.is_empty() {
            write!(f, "[{}] {}", self.stage.name(), self.error)
        } else {
            write!(f, "[{}] {}: {}", self.stage.name(), self.context, self.error)
        }
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage, context: impl Into<String>) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage, context: impl Into<String>) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError {
            stage,
            context: context.into(),
            error,
        })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX image/label pair, optionally truncated to the first `limit` records.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// Headed CSV with a JSON column sidecar.
    Tabular { path: PathBuf, schema: PathBuf },
    /// Binary class prototypes with independent bit flips.
    Synthetic {
        num_classes: usize,
        num_features: usize,
        num_records: usize,
        /// Per-bit flip probability applied to a record's class prototype.
        flip: f64,
        /// Probability that a prototype bit is set.
        #[serde(default = "half")]
        density: f64,
        data_seed: u64,
    },
}

fn half() -> f64 {
    0.5
}

impl DatasetSpec {
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetSpec::Idx { images, labels, .. } => vec![images, labels],
            DatasetSpec::Tabular { path, schema } => vec![path, schema],
            DatasetSpec::Synthetic { .. } => vec![],
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Idx {
                images,
                labels,
                limit,
            } => {
                let mut d = load_idx_images(images, labels)?;
                if let Some(n) = limit {
                    d.records.truncate(*n);
                }
                Ok(d)
            }
            DatasetSpec::Tabular { path, schema } => {
                let s = TabularSchema::load(schema)?;
                let records = load_tabular(path, &s)?;
                Ok(Dataset {
                    schema: s.features,
                    records,
                })
            }
            DatasetSpec::Synthetic {
                num_classes,
                num_features,
                num_records,
                flip,
                density,
                data_seed,
            } => synthetic_prototypes(
                *num_classes,
                *num_features,
                *num_records,
                *flip,
                *density,
                *data_seed,
            ),
        }
    }
}

/// Records drawn by picking a class uniformly and flipping each bit of its
/// prototype with probability `flip`.
pub fn synthetic_prototypes(
    num_classes: usize,
    num_features: usize,
    num_records: usize,
    flip: f64,
    density: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || num_features == 0 {
        return Err(Error::Config(
            "synthetic data needs ≥ 2 classes and ≥ 1 feature".into(),
        ));
    }
    if !(0.0..=0.5).contains(&flip) || !(0.0..=1.0).contains(&density) {
        return Err(Error::Config(format!(
            "synthetic flip {flip} or density {density} out of range"
        )));
    }
    let mut rng = RngStream::new(seed, 0);
    let prototypes: Vec<Vec<bool>> = (0..num_classes)
        .map(|_| (0..num_features).map(|_| rng.uniform() < density).collect())
        .collect();
    let records = (0..num_records)
        .map(|i| {
            let y = rng.below(num_classes);
            let x = prototypes[y]
                .iter()
                .map(|&b| if b != (rng.uniform() < flip) { 1.0 } else { 0.0 })
                .collect();
            ExampleRecord {
                id: i as PointId,
                x,
                y,
            }
        })
        .collect();
    Ok(Dataset {
        schema: FeatureSchema::tabular(vec![FeatureKind::Binary; num_features], num_classes)?,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArchitectureSpec {
    Logistic,
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "tanh")]
        activation: Activation,
    },
    Cnn {
        filters: Vec<usize>,
        /// Number of convolutions between 2×2 max-pools.
        pool_after: usize,
        hidden: Vec<usize>,
    },
    ReferenceCnn,
}

fn tanh() -> Activation {
    Activation::Tanh
}

impl ArchitectureSpec {
    pub fn resolve(&self, schema: &FeatureSchema) -> Result<Architecture> {
        let k = schema.num_classes;
        let arch = match self {
            ArchitectureSpec::Logistic => Architecture::logistic(schema.dim(), k),
            ArchitectureSpec::Mlp { hidden, activation } => {
                Architecture::mlp(schema.dim(), k, hidden.clone(), *activation)
            }
            ArchitectureSpec::Cnn {
                filters,
                pool_after,
                hidden,
            } => Architecture::cnn(
                image_shape(schema)?,
                k,
                filters.clone(),
                *pool_after,
                hidden.clone(),
            ),
            ArchitectureSpec::ReferenceCnn => Architecture::reference_cnn(image_shape(schema)?, k),
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn image_shape(schema: &FeatureSchema) -> Result<crate::data::ImageShape> {
    schema
        .image_shape
        .ok_or_else(|| Error::UnsupportedArchitecture("convolutional models need image data".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Size of target-train, target-test and of each shadow's train and test.
    pub size: usize,
    /// Non-member reference records for adversarial regularization.
    #[serde(default)]
    pub reference: usize,
    /// Public records used to pretrain before fine-tuning.
    #[serde(default)]
    pub pretrain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub architecture: ArchitectureSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub adv_reg: Option<AdvRegConfig>,
    /// Pretraining on the public split before fine-tuning with `train`.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackKind {
    Gap,
    ConfidenceThreshold,
    ConfidenceVector {
        #[serde(default)]
        train: AttackTrainConfig,
    },
    Augmentation {
        spec: AugmentationSpec,
        #[serde(default)]
        train: AttackTrainConfig,
        #[serde(default)]
        rule: AugmentationRule,
    },
    Boundary {
        #[serde(default)]
        walk: HsjaConfig,
        /// Extra evaluation budgets, read off the same walks.
        #[serde(default)]
        budgets: Vec<u64>,
        #[serde(default)]
        tune_points: Option<usize>,
    },
    Noise {
        /// Noise settings tried on the shadows; the best one is used.
        candidates: Vec<NoiseKind>,
        num_queries: usize,
        #[serde(default)]
        tune_points: Option<usize>,
    },
    Combined {
        aug: AugmentationSpec,
        #[serde(default)]
        walk: HsjaConfig,
        #[serde(default)]
        train: AttackTrainConfig,
        #[serde(default)]
        tune_points: Option<usize>,
    },
    /// Gradient-based boundary distance with full model access.
    WhiteBox {
        #[serde(default = "whitebox_steps")]
        steps: usize,
        #[serde(default)]
        tune_points: Option<usize>,
    },
}

fn whitebox_steps() -> usize {
    100
}

impl AttackKind {
    pub fn default_name(&self) -> &'static str {
        match self {
            AttackKind::Gap => "gap",
            AttackKind::ConfidenceThreshold => "confidence-threshold",
            AttackKind::ConfidenceVector { .. } => "confidence-vector",
            AttackKind::Augmentation { .. } => "augmentation",
            AttackKind::Boundary { .. } => "boundary",
            AttackKind::Noise { .. } => "noise",
            AttackKind::Combined { .. } => "combined",
            AttackKind::WhiteBox { .. } => "white-box",
        }
    }

    pub fn label_only(&self) -> bool {
        !matches!(
            self,
            AttackKind::ConfidenceThreshold
                | AttackKind::ConfidenceVector { .. }
                | AttackKind::WhiteBox { .. }
        )
    }
}

/// How perturbation bits become a membership decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationRule {
    /// Per-class networks over the bit vector.
    #[default]
    Network,
    /// Global threshold on the number of correctly classified augmentations.
    Count,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: AttackKind,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self { name: None, kind }
    }

    pub fn named(name: &str, kind: AttackKind) -> Self {
        Self {
            name: Some(name.into()),
            kind,
        }
    }

    pub fn name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.default_name().into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: usize,
}

fn default_beta() -> f64 {
    0.02
}

fn default_gamma() -> usize {
    DEFAULT_GAMMA
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            gamma: default_gamma(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub defense: Vec<DefenseWrapperSpec>,
    /// Route shadow queries through `defense` too. Off by default: attack
    /// models are then tuned on unmasked shadows, the non-adaptive setting
    /// under which masking defenses are usually evaluated.
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "one")]
    pub shadows: usize,
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub outlier: Option<OutlierConfig>,
}

fn default_name() -> String {
    "experiment".into()
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// Parses a config and resolves dataset paths against `base`.
    pub fn from_value(value: Value, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_value(value)?;
        for p in cfg.dataset.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value = read_json(path)?;
        Self::from_value(value, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut dataset = self.dataset.clone();
        for p in dataset.paths_mut() {
            if !p.exists() {
                return Err(Error::Config(format!("missing file {}", p.display())));
            }
        }
        if self.split.size == 0 {
            return Err(Error::Config("split size must be positive".into()));
        }
        if self.shadows == 0 {
            return Err(Error::Config("at least one shadow model is required".into()));
        }
        if self.target.dp.is_some() && self.target.adv_reg.is_some() {
            return Err(Error::Config(
                "dp and adversarial regularization are exclusive".into(),
            ));
        }
        if self.target.adv_reg.is_some() && self.split.reference == 0 {
            return Err(Error::Config(
                "adversarial regularization needs split.reference > 0".into(),
            ));
        }
        if self.target.pretrain.is_some() && self.split.pretrain == 0 {
            return Err(Error::Config("pretraining needs split.pretrain > 0".into()));
        }
        self.target.train.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for a in &self.attacks {
            if !names.insert(a.name()) {
                return Err(Error::Config(format!("duplicate attack name {}", a.name())));
            }
            match &a.kind {
                AttackKind::Augmentation { spec, .. } | AttackKind::Combined { aug: spec, .. } => {
                    spec.validate()?
                }
                AttackKind::Noise { candidates, .. } if candidates.is_empty() => {
                    return Err(Error::Config("noise attack needs at least one candidate".into()))
                }
                _ => {}
            }
            if let AttackKind::Boundary { walk, .. } | AttackKind::Combined { walk, .. } = &a.kind {
                walk.validate()?;
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        digest_json(self)
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Zero when nothing is predicted a member.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy, precision, recall and F1 with members as the positive class.
///
/// Returns a warning alongside the metrics when the truth set is unbalanced.
pub fn score(
    predictions: &[MembershipPrediction],
    truth: &BTreeMap<PointId, bool>,
) -> Result<(Metrics, Option<String>)> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let mut members = 0usize;
    for p in predictions {
        let m = *truth
            .get(&p.point)
            .ok_or_else(|| Error::InvalidInput(format!("no ground truth for point {}", p.point)))?;
        members += usize::from(m);
        match (p.member, m) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = predictions.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let warning = (2 * members != n).then(|| format!("unbalanced truth: {members} members of {n}"));
    Ok((
        Metrics {
            accuracy: (tp + tn) as f64 / n as f64,
            precision,
            recall,
            f1,
        },
        warning,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub attack: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub queries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc_train: f64,
    pub acc_test: f64,
    pub attacks: Vec<AttackMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: u64,
    #[serde(with = "json_f64")]
    pub tau: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    pub attack: AttackKind,
    pub label_only: bool,
    #[serde(with = "json_f64::option", default)]
    pub threshold: Option<f64>,
    /// Balanced accuracy of the tuned rule on the shadow data it was tuned on.
    #[serde(default)]
    pub shadow_accuracy: Option<f64>,
    #[serde(default)]
    pub selected_noise: Option<NoiseKind>,
    pub queries: u64,
    #[serde(default)]
    pub budget_curve: Vec<BudgetPoint>,
    pub predictions: Vec<MembershipPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub acc_train: f64,
    pub acc_test: f64,
    pub meta: TrainingMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTruth {
    pub point: PointId,
    pub member: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierPrecision {
    pub attack: String,
    /// Absent when no outlier is predicted a member.
    pub outlier_precision: Option<f64>,
    pub full_precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub calibration: Calibration,
    pub outliers: Vec<PointId>,
    pub members_among_outliers: usize,
    pub precision: Vec<OutlierPrecision>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub features: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub target: ModelSummary,
    pub shadows: Vec<ModelSummary>,
    pub metrics: MetricSet,
    pub truth: Vec<PointTruth>,
    pub attacks: Vec<AttackResult>,
    #[serde(default)]
    pub outliers: Option<OutlierReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn attack(&self, name: &str) -> Option<&AttackResult> {
        self.attacks.iter().find(|a| a.name == name)
    }

    pub fn metrics_for(&self, name: &str) -> Option<&AttackMetrics> {
        self.metrics.attacks.iter().find(|a| a.attack == name)
    }

    pub fn truth_map(&self) -> BTreeMap<PointId, bool> {
        self.truth.iter().map(|t| (t.point, t.member)).collect()
    }

    /// Recomputes every aggregate from the per-point records.
    pub fn rescore(&self) -> Result<MetricSet> {
        let truth = self.truth_map();
        let attacks = self
            .attacks
            .iter()
            .map(|a| {
                Ok(AttackMetrics {
                    attack: a.name.clone(),
                    metrics: score(&a.predictions, &truth)?.0,
                    queries: a.queries,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricSet {
            acc_train: self.metrics.acc_train,
            acc_test: self.metrics.acc_test,
            attacks,
        })
    }
}

/// Wall-clock seconds per stage; kept out of the report so reports stay
/// byte-identical across runs.
pub type Timings = BTreeMap<String, f64>;

pub struct Experiment {
    pub report: EvaluationReport,
    pub timings: Timings,
    pub target: Arc<Classifier>,
    pub shadows: Vec<Arc<Classifier>>,
}

struct Splits {
    target_train: Vec<ExampleRecord>,
    target_test: Vec<ExampleRecord>,
    reference: Vec<ExampleRecord>,
    pretrain: Vec<ExampleRecord>,
    /// Adversary-side records, disjoint from every target split.
    pool: Vec<ExampleRecord>,
}

fn make_splits(records: &[ExampleRecord], split: &SplitConfig, rng: &mut RngStream) -> Result<Splits> {
    let n = split.size;
    let fixed = 2 * n + split.reference + split.pretrain;
    let needed = fixed + 2 * n + split.reference;
    if needed > records.len() {
        return Err(Error::Size {
            needed,
            available: records.len(),
        });
    }
    let perm = rng.permutation(records.len());
    let take = |a: usize, b: usize| -> Vec<ExampleRecord> {
        perm[a..b].iter().map(|&i| records[i].clone()).collect()
    };
    Ok(Splits {
        target_train: take(0, n),
        target_test: take(n, 2 * n),
        reference: take(2 * n, 2 * n + split.reference),
        pretrain: take(2 * n + split.reference, fixed),
        pool: take(fixed, records.len()),
    })
}

fn train_model(
    cfg: &TargetConfig,
    arch: &Architecture,
    train: &[ExampleRecord],
    reference: &[ExampleRecord],
    pretrain: &[ExampleRecord],
    rng: &mut RngStream,
) -> Result<Classifier> {
    if let Some(pre) = &cfg.pretrain {
        let base = train_classifier(arch, pretrain, pre, &mut rng.derive_named("pretrain"))?;
        return fine_tune(&base, train, &cfg.train, rng);
    }
    match (&cfg.dp, &cfg.adv_reg) {
        (Some(dp), _) => train_dpsgd(arch, train, &cfg.train, dp, rng),
        (None, Some(adv)) => train_adv_reg(arch, train, reference, &cfg.train, adv, rng),
        (None, None) => train_classifier(arch, train, &cfg.train, rng),
    }
}

fn summarize(model: &Classifier, train: &[ExampleRecord], test: &[ExampleRecord]) -> Result<ModelSummary> {
    Ok(ModelSummary {
        acc_train: model.accuracy(train)?,
        acc_test: model.accuracy(test)?,
        meta: model.meta().clone(),
    })
}

fn wrapped(model: &Arc<Classifier>, defense: &[DefenseWrapperSpec]) -> Result<ConfidenceOracle> {
    defense
        .iter()
        .try_fold(ConfidenceOracle::new(model.clone()), |o, w| o.wrap(*w))
}

/// Shadow member and non-member scores from a per-shadow scoring function.
fn shadow_scores(
    shadows: &[ShadowModel],
    tune_points: Option<usize>,
    mut f: impl FnMut(usize, &ShadowModel, &[ExampleRecord]) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut m, mut n) = (Vec::new(), Vec::new());
    for (i, sh) in shadows.iter().enumerate() {
        let sh = tune_points.map_or_else(|| sh.clone(), |t| sh.truncated(t));
        m.extend(f(i, &sh, &sh.members)?);
        n.extend(f(i, &sh, &sh.nonmembers)?);
    }
    Ok((m, n))
}

struct AttackContext<'a> {
    schema: &'a FeatureSchema,
    target: &'a Arc<Classifier>,
    defense: &'a [DefenseWrapperSpec],
    shadows: &'a [ShadowModel],
    points: &'a [ExampleRecord],
    bounds: &'a FeatureBox,
    truth: &'a BTreeMap<PointId, bool>,
}

fn run_attack(ctx: &AttackContext<'_>, attack: &AttackConfig, rng: &RngStream) -> Result<AttackResult> {
    let name = attack.name();
    let oracle = wrapped(ctx.target, ctx.defense)?;
    let labels = oracle.labels();
    let shadow_rng = rng.derive_named("shadow");
    let target_rng = rng.derive_named("target");
    let num_classes = ctx.schema.num_classes;
    let mut threshold = None;
    let mut shadow_accuracy = None;
    let mut selected_noise = None;
    let mut budget_curve = Vec::new();

    let predictions = match &attack.kind {
        AttackKind::Gap => gap_attack(&labels, ctx.points)?,
        AttackKind::ConfidenceThreshold => {
            let (m, n) = shadow_scores(ctx.shadows, None, |_, sh, pts| {
                max_confidences(&sh.oracle()?, pts)
            })?;
            let t = tune_threshold(&m, &n)?;
            threshold = Some(t.tau);
            shadow_accuracy = Some(t.accuracy);
            threshold_predictions(ctx.points, &max_confidences(&oracle, ctx.points)?, t.tau)
        }
        AttackKind::ConfidenceVector { train } => {
            let f = train_shadow_attack(
                ctx.shadows,
                &ShadowFeatureSpec::Confidence,
                num_classes,
                train,
                &rng.derive_named("classifier"),
            )?;
            shadow_accuracy = Some(shadow_fit_accuracy(ctx.shadows, &f, |sh, pts| {
                confidence_features(&sh.oracle()?, pts)
            })?);
            confidence_vector_attack(&oracle, ctx.points, &f)?
        }
        AttackKind::Augmentation {
            spec,
            rule: AugmentationRule::Count,
            ..
        } => {
            let count = |o: &LabelOracle, pts: &[ExampleRecord]| -> Result<Vec<f64>> {
                Ok(augmentation_bits(o, pts, ctx.schema, spec)?
                    .iter()
                    .map(|b| b.0.iter().filter(|&&c| c).count() as f64)
                    .collect())
            };
            let (m, n) = shadow_scores(ctx.shadows, None, |_, sh, pts| count(&sh.oracle()?.labels(), pts))?;
            let t = tune_threshold(&m, &n)?;
            threshold = Some(t.tau);
            shadow_accuracy = Some(t.accuracy);
            threshold_predictions(ctx.points, &count(&labels, ctx.points)?, t.tau)
        }
        AttackKind::Augmentation {
            spec,
            train,
            rule: AugmentationRule::Network,
        } => {
            let f = train_shadow_attack(
                ctx.shadows,
                &ShadowFeatureSpec::AugmentationBits {
                    schema: ctx.schema,
                    spec: *spec,
                },
                num_classes,
                train,
                &rng.derive_named("classifier"),
            )?;
            shadow_accuracy = Some(shadow_fit_accuracy(ctx.shadows, &f, |sh, pts| {
                Ok(augmentation_bits(&sh.oracle()?.labels(), pts, ctx.schema, spec)?
                    .iter()
                    .map(|b| b.features())
                    .collect())
            })?);
            augmentation_attack(&labels, ctx.points, ctx.schema, spec, &f)?
        }
        AttackKind::Boundary {
            walk,
            budgets,
            tune_points,
        } => {
            let mut shadow_walks = (Vec::new(), Vec::new());
            for (i, sh) in ctx.shadows.iter().enumerate() {
                let sh = tune_points.map_or_else(|| sh.clone(), |t| sh.truncated(t));
                let o = sh.oracle()?.labels();
                let r = shadow_rng.derive(i as u64);
                shadow_walks
                    .0
                    .extend(boundary_walks(&o, &sh.members, walk, ctx.bounds, &r)?);
                shadow_walks
                    .1
                    .extend(boundary_walks(&o, &sh.nonmembers, walk, ctx.bounds, &r)?);
            }
            let target_walks = boundary_walks(&labels, ctx.points, walk, ctx.bounds, &target_rng)?;
            for &b in budgets {
                let m: Vec<f64> = shadow_walks.0.iter().map(|w| w.distance_at_budget(b)).collect();
                let n: Vec<f64> = shadow_walks.1.iter().map(|w| w.distance_at_budget(b)).collect();
                let t = tune_threshold(&m, &n)?;
                let d: Vec<f64> = target_walks.iter().map(|w| w.distance_at_budget(b)).collect();
                let p = threshold_predictions(ctx.points, &d, t.tau);
                budget_curve.push(BudgetPoint {
                    budget: b,
                    tau: t.tau,
                    metrics: score(&p, ctx.truth)?.0,
                });
            }
            let value =
                |ws: &[crate::boundary::Walk]| ws.iter().map(|w| w.estimate.value).collect::<Vec<_>>();
            let t = tune_threshold(&value(&shadow_walks.0), &value(&shadow_walks.1))?;
            threshold = Some(t.tau);
            shadow_accuracy = Some(t.accuracy);
            threshold_predictions(ctx.points, &value(&target_walks), t.tau)
        }
        AttackKind::Noise {
            candidates,
            num_queries,
            tune_points,
        } => {
            let mut best: Option<(NoiseKind, crate::attacks::DecisionThreshold)> = None;
            for (c, noise) in candidates.iter().enumerate() {
                let cfg = NoiseRobustnessConfig {
                    noise: *noise,
                    num_queries: *num_queries,
                };
                let r = shadow_rng.derive(c as u64);
                let (m, n) = shadow_scores(ctx.shadows, *tune_points, |i, sh, pts| {
                    noise_scores(&sh.oracle()?.labels(), pts, ctx.schema, &cfg, &r.derive(i as u64))
                })?;
                let t = tune_threshold(&m, &n)?;
                if best.as_ref().is_none_or(|(_, b)| t.accuracy > b.accuracy) {
                    best = Some((*noise, t));
                }
            }
            let (noise, t) = best.expect("candidates validated nonempty");
            selected_noise = Some(noise);
            threshold = Some(t.tau);
            shadow_accuracy = Some(t.accuracy);
            let cfg = NoiseRobustnessConfig {
                noise,
                num_queries: *num_queries,
            };
            let s = noise_scores(&labels, ctx.points, ctx.schema, &cfg, &target_rng)?;
            threshold_predictions(ctx.points, &s, t.tau)
        }
        AttackKind::Combined {
            aug,
            walk,
            train,
            tune_points,
        } => {
            let tuned: Vec<ShadowModel> = ctx
                .shadows
                .iter()
                .map(|s| tune_points.map_or_else(|| s.clone(), |t| s.truncated(t)))
                .collect();
            let f = train_shadow_attack(
                &tuned,
                &ShadowFeatureSpec::Combined {
                    schema: ctx.schema,
                    spec: *aug,
                    walk,
                    bounds: ctx.bounds,
                    base: &shadow_rng,
                },
                num_classes,
                train,
                &rng.derive_named("classifier"),
            )?;
            combined_attack(
                &labels,
                ctx.points,
                ctx.schema,
                aug,
                walk,
                ctx.bounds,
                &f,
                &target_rng,
            )?
        }
        AttackKind::WhiteBox { steps, tune_points } => {
            let dist = |m: &Classifier, pts: &[ExampleRecord]| -> Result<Vec<f64>> {
                pts.iter()
                    .map(|p| Ok(whitebox_distance(m, &p.x, p.y, *steps)?.value))
                    .collect()
            };
            let (m, n) = shadow_scores(ctx.shadows, *tune_points, |_, sh, pts| dist(&sh.model, pts))?;
            let t = tune_threshold(&m, &n)?;
            threshold = Some(t.tau);
            shadow_accuracy = Some(t.accuracy);
            threshold_predictions(ctx.points, &dist(ctx.target, ctx.points)?, t.tau)
        }
    };
    Ok(AttackResult {
        name,
        attack: attack.kind.clone(),
        label_only: attack.kind.label_only(),
        threshold,
        shadow_accuracy,
        selected_noise,
        queries: oracle.counter().total(),
        budget_curve,
        predictions,
    })
}

/// Accuracy of a trained attack classifier on the shadow data it was fit on.
fn shadow_fit_accuracy(
    shadows: &[ShadowModel],
    f: &crate::attacks::AttackClassifier,
    features: impl Fn(&ShadowModel, &[ExampleRecord]) -> Result<Vec<Vec<f64>>>,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for sh in shadows {
        let (pts, flags) = sh.labeled_points();
        let preds = f.predict(&pts, &features(sh, &pts)?)?;
        hits += preds.iter().zip(&flags).filter(|(p, &m)| p.member == m).count();
        total += pts.len();
    }
    Ok(hits as f64 / total as f64)
}

fn timed<T>(timings: &mut Timings, key: &str, f: impl FnOnce() -> StageResult<T>) -> StageResult<T> {
    let start = Instant::now();
    let out = f();
    timings.insert(key.into(), start.elapsed().as_secs_f64());
    out
}

/// Runs the full pipeline; deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> StageResult<Experiment> {
    cfg.validate().at(Stage::Config, "validation")?;
    let config_hash = cfg.hash().at(Stage::Config, "hash")?;
    let mut timings = Timings::new();
    let root = RngStream::new(cfg.seed, 0);

    let data = timed(&mut timings, "data", || {
        cfg.dataset.load().at(Stage::Data, "loading dataset")
    })?;
    let schema = &data.schema;
    let splits = make_splits(&data.records, &cfg.split, &mut root.derive_named("split"))
        .at(Stage::Data, "splitting")?;
    let arch = cfg
        .target
        .architecture
        .resolve(schema)
        .at(Stage::Config, "architecture")?;

    let (target, shadow_models) = timed(&mut timings, "train", || {
        let target = train_model(
            &cfg.target,
            &arch,
            &splits.target_train,
            &splits.reference,
            &splits.pretrain,
            &mut root.derive_named("target"),
        )
        .at(Stage::Train, "target")?;
        let mut shadows = Vec::with_capacity(cfg.shadows);
        let n = cfg.split.size;
        for s in 0..cfg.shadows {
            let mut r = root.derive_named("shadow").derive(s as u64);
            let perm = r.derive_named("split").permutation(splits.pool.len());
            let take = |a: usize, b: usize| -> Vec<ExampleRecord> {
                perm[a..b].iter().map(|&i| splits.pool[i].clone()).collect()
            };
            let (train, test) = (take(0, n), take(n, 2 * n));
            let reference = take(2 * n, 2 * n + cfg.split.reference);
            let model = train_model(&cfg.target, &arch, &train, &reference, &splits.pretrain, &mut r)
                .at(Stage::Train, format!("shadow {s}"))?;
            shadows.push(ShadowModel {
                model: Arc::new(model),
                members: train,
                nonmembers: test,
                defense: if cfg.adaptive {
                    cfg.defense.clone()
                } else {
                    Vec::new()
                },
            });
        }
        Ok((Arc::new(target), shadows))
    })?;

    let target_summary =
        summarize(&target, &splits.target_train, &splits.target_test).at(Stage::Score, "target")?;
    let shadow_summaries = shadow_models
        .iter()
        .map(|s| summarize(&s.model, &s.members, &s.nonmembers))
        .collect::<Result<Vec<_>>>()
        .at(Stage::Score, "shadows")?;

    let mut points = splits.target_train.clone();
    points.extend(splits.target_test.iter().cloned());
    let truth: Vec<PointTruth> = splits
        .target_train
        .iter()
        .map(|r| PointTruth {
            point: r.id,
            member: true,
        })
        .chain(splits.target_test.iter().map(|r| PointTruth {
            point: r.id,
            member: false,
        }))
        .collect();
    let truth_map: BTreeMap<PointId, bool> = truth.iter().map(|t| (t.point, t.member)).collect();

    // The adversary knows the feature domain from its own data.
    let bounds = FeatureBox(schema.feature_box(&splits.pool));
    let ctx = AttackContext {
        schema,
        target: &target,
        defense: &cfg.defense,
        shadows: &shadow_models,
        points: &points,
        bounds: &bounds,
        truth: &truth_map,
    };
    let attack_root = root.derive_named("attack");
    let mut attacks = Vec::with_capacity(cfg.attacks.len());
    let mut warnings = Vec::new();
    for a in &cfg.attacks {
        let name = a.name();
        let result = timed(&mut timings, &format!("attack/{name}"), || {
            run_attack(&ctx, a, &attack_root.derive_named(&name)).at(Stage::Attack, name.clone())
        })?;
        attacks.push(result);
    }

    let mut metric_rows = Vec::with_capacity(attacks.len());
    for a in &attacks {
        let (metrics, warning) = score(&a.predictions, &truth_map).at(Stage::Score, a.name.clone())?;
        if let Some(w) = warning {
            warnings.push(format!("{}: {w}", a.name));
        }
        metric_rows.push(AttackMetrics {
            attack: a.name.clone(),
            metrics,
            queries: a.queries,
        });
    }
    for (c, n) in class_gaps(&shadow_models, schema.num_classes) {
        warnings.push(format!(
            "class {c} has {n} shadow examples; attack classifiers use the global predictor"
        ));
    }

    let outliers = match &cfg.outlier {
        None => None,
        Some(oc) => Some(timed(&mut timings, "outlier", || {
            outlier_report(
                oc,
                &shadow_models[0].model,
                &points,
                &attacks,
                &truth_map,
                &metric_rows,
                &mut warnings,
            )
            .at(Stage::Outlier, "outlier analysis")
        })?),
    };

    let report = EvaluationReport {
        name: cfg.name.clone(),
        config_hash,
        seed: cfg.seed,
        config: cfg.clone(),
        dataset: DatasetSummary {
            records: data.records.len(),
            features: schema.dim(),
            classes: schema.num_classes,
        },
        metrics: MetricSet {
            acc_train: target_summary.acc_train,
            acc_test: target_summary.acc_test,
            attacks: metric_rows,
        },
        target: target_summary,
        shadows: shadow_summaries,
        truth,
        attacks,
        outliers,
        warnings,
    };
    Ok(Experiment {
        report,
        timings,
        target,
        shadows: shadow_models.into_iter().map(|s| s.model).collect(),
    })
}

/// Classes with too few shadow examples for a dedicated attack predictor.
fn class_gaps(shadows: &[ShadowModel], num_classes: usize) -> Vec<(usize, usize)> {
    let mut counts = vec![0usize; num_classes];
    for s in shadows {
        for r in s.members.iter().chain(&s.nonmembers) {
            counts[r.y] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .filter(|&(_, n)| n > 0 && n < crate::attacks::MIN_CLASS_EXAMPLES)
        .collect()
}

fn outlier_report(
    oc: &OutlierConfig,
    shadow: &Classifier,
    points: &[ExampleRecord],
    attacks: &[AttackResult],
    truth: &BTreeMap<PointId, bool>,
    metrics: &[AttackMetrics],
    warnings: &mut Vec<String>,
) -> Result<OutlierReport> {
    let emb = embed(shadow, points)?;
    let calibration = calibrate_delta(&emb, oc.beta, oc.gamma)?;
    if !calibration.within_tolerance {
        warnings.push(format!(
            "outlier calibration reached fraction {} for target {}",
            calibration.achieved_fraction, oc.beta
        ));
    }
    let set = find_outliers(&emb, &calibration.params)?;
    let precision = if set.is_empty() {
        warnings.push("no outliers found".into());
        Vec::new()
    } else {
        attacks
            .iter()
            .zip(metrics)
            .map(|(a, m)| {
                Ok(OutlierPrecision {
                    attack: a.name.clone(),
                    outlier_precision: outlier_precision(&a.predictions, truth, &set)?,
                    full_precision: m.metrics.precision,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(OutlierReport {
        calibration,
        members_among_outliers: set.iter().filter(|p| truth.get(p) == Some(&true)).count(),
        outliers: set.into_iter().collect(),
        precision,
    })
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "precision", "recall", "f1", "queries"];

fn metric_values(m: &AttackMetrics) -> [f64; 5] {
    [
        m.metrics.accuracy,
        m.metrics.precision,
        m.metrics.recall,
        m.metrics.f1,
        m.queries as f64,
    ]
}

/// Writes `report.json` and `metrics.csv` (one row per attack and metric).
pub fn emit_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    w.write_record(["attack", "metric", "value"])
        .map_err(|e| csv_error(&csv_path, e))?;
    for m in &report.metrics.attacks {
        for (name, v) in METRIC_NAMES.iter().zip(metric_values(m)) {
            w.write_record([m.attack.as_str(), name, &v.to_string()])
                .map_err(|e| csv_error(&csv_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn load_report(path: &Path) -> Result<EvaluationReport> {
    Ok(serde_json::from_value(read_json(path)?)?)
}

pub fn write_timings(timings: &Timings, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("timings.json");
    std::fs::write(&path, serde_json::to_string_pretty(timings)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Saves the target and shadow checkpoints under `dir/models/`.
pub fn write_models(exp: &Experiment, dir: &Path) -> Result<()> {
    let models = dir.join("models");
    std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    exp.target.save(&models.join("target.json"))?;
    for (i, s) in exp.shadows.iter().enumerate() {
        s.save(&models.join(format!("shadow-{i}.json")))?;
    }
    Ok(())
}

/// Replaces the value at a dotted path (`target.train.l2`, `attacks.1.spec.d`).
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).into(), value);
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("axis {path}: no field {part}")))?
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("axis {path}: {part} is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("axis {path}: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::Config(format!(
                    "axis {path}: {part} is not inside an object or array"
                )))
            }
        };
    }
    Err(Error::Config("empty axis".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub attack: String,
    pub metric: String,
    pub value: f64,
}

pub struct SweepRun {
    pub value: Value,
    pub outcome: std::result::Result<Experiment, StageError>,
}

pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

pub fn axis_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Long-form rows for one report: every attack metric, budget-curve point,
/// and the target's train/test accuracy.
pub fn sweep_rows(axis_value: &str, report: &EvaluationReport) -> Vec<SweepRow> {
    let row = |attack: &str, metric: String, value: f64| SweepRow {
        axis_value: axis_value.into(),
        attack: attack.into(),
        metric,
        value,
    };
    let mut rows = vec![
        row("target", "acc_train".into(), report.metrics.acc_train),
        row("target", "acc_test".into(), report.metrics.acc_test),
    ];
    for m in &report.metrics.attacks {
        for (name, v) in METRIC_NAMES.iter().zip(metric_values(m)) {
            rows.push(row(&m.attack, (*name).into(), v));
        }
    }
    for a in &report.attacks {
        for b in &a.budget_curve {
            rows.push(row(&a.name, format!("accuracy@{}", b.budget), b.metrics.accuracy));
        }
    }
    rows
}

/// One experiment per axis value; failures are kept per value and the
/// sweep moves on.
pub fn sweep(template: &Value, base: &Path, axis: &str, values: &[Value]) -> SweepOutcome {
    let mut runs = Vec::with_capacity(values.len());
    let mut rows = Vec::new();
    for v in values {
        let outcome = (|| {
            let mut cfg = template.clone();
            set_path(&mut cfg, axis, v.clone()).at(Stage::Config, format!("axis {axis}"))?;
            let cfg = ExperimentConfig::from_value(cfg, base)
                .at(Stage::Config, format!("{axis}={}", axis_label(v)))?;
            run_experiment(&cfg)
        })();
        if let Ok(exp) = &outcome {
            rows.extend(sweep_rows(&axis_label(v), &exp.report));
        }
        runs.push(SweepRun {
            value: v.clone(),
            outcome,
        });
    }
    SweepOutcome { runs, rows }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["axis_value", "attack", "metric", "value"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.axis_value.as_str(), &r.attack, &r.metric, &r.value.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn preds(flags: &[bool]) -> Vec<MembershipPrediction> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &m)| MembershipPrediction {
                point: i as PointId,
                member: m,
                score: 0.0,
            })
            .collect()
    }

    fn balanced_truth(n: usize) -> BTreeMap<PointId, bool> {
        (0..n).map(|i| (i as PointId, i < n / 2)).collect()
    }

    #[test]
    fn score_trivial_predictors() {
        let truth = balanced_truth(10);
        let (all, w) = score(&preds(&[true; 10]), &truth).unwrap();
        assert!(w.is_none());
        assert_eq!((all.accuracy, all.recall, all.precision), (0.5, 1.0, 0.5));
        let perfect: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let (p, _) = score(&preds(&perfect), &truth).unwrap();
        assert_eq!((p.accuracy, p.precision, p.recall, p.f1), (1.0, 1.0, 1.0, 1.0));
        let skewed: BTreeMap<PointId, bool> = (0..10).map(|i| (i, i < 3)).collect();
        assert!(score(&preds(&perfect), &skewed).unwrap().1.is_some());
    }

    proptest! {
        #[test]
        fn score_matches_confusion_matrix(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let p = preds(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let truth: BTreeMap<PointId, bool> = bits.iter().enumerate().map(|(i, b)| (i as PointId, b.1)).collect();
            let (m, _) = score(&p, &truth).unwrap();
            let mut cm = [[0f64; 2]; 2];
            for (pred, actual) in &bits {
                cm[usize::from(*pred)][usize::from(*actual)] += 1.0;
            }
            let n = bits.len() as f64;
            prop_assert_eq!(m.accuracy, (cm[1][1] + cm[0][0]) / n);
            let prec = if cm[1][1] + cm[1][0] > 0.0 { cm[1][1] / (cm[1][1] + cm[1][0]) } else { 0.0 };
            let rec = if cm[1][1] + cm[0][1] > 0.0 { cm[1][1] / (cm[1][1] + cm[0][1]) } else { 0.0 };
            prop_assert_eq!(m.precision, prec);
            prop_assert_eq!(m.recall, rec);
            if prec + rec > 0.0 {
                prop_assert!((m.f1 - 2.0 * prec * rec / (prec + rec)).abs() < 1e-15);
            }
            prop_assert!([m.accuracy, m.precision, m.recall, m.f1].iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn set_path_objects_and_arrays() {
        let mut v = json!({"a": {"b": 1}, "xs": [{"d": 1}, {"d": 2}]});
        set_path(&mut v, "a.b", json!(5)).unwrap();
        set_path(&mut v, "xs.1.d", json!(9)).unwrap();
        set_path(&mut v, "a.c", json!("new")).unwrap();
        assert_eq!(v, json!({"a": {"b": 5, "c": "new"}, "xs": [{"d": 1}, {"d": 9}]}));
        assert!(set_path(&mut v, "xs.7.d", json!(0)).is_err());
        assert!(set_path(&mut v, "missing.x", json!(0)).is_err());
    }

    #[test]
    fn synthetic_prototypes_are_deterministic() {
        let a = synthetic_prototypes(5, 30, 100, 0.1, 0.5, 7).unwrap();
        let b = synthetic_prototypes(5, 30, 100, 0.1, 0.5, 7).unwrap();
        assert_eq!(a.records, b.records);
        assert!(a.records.iter().all(|r| a.schema.check(r).is_ok()));
        assert!(synthetic_prototypes(1, 30, 100, 0.1, 0.5, 7).is_err());
    }

    pub(crate) fn small_config() -> ExperimentConfig {
        serde_json::from_value(json!({
            "name": "small",
            "seed": 3,
            "dataset": {"kind": "synthetic", "num_classes": 3, "num_features": 20, "num_records": 400, "flip": 0.2, "data_seed": 1},
            "split": {"size": 60},
            "target": {"architecture": {"kind": "mlp", "hidden": [16]}, "train": {"epochs": 30}},
            "attacks": [
                {"kind": "gap"},
                {"kind": "confidence-threshold"},
                {"kind": "confidence-vector", "train": {"epochs": 20}},
                {"kind": "boundary", "walk": {"budget": 150}, "budgets": [50, 150], "tune_points": 20},
                {"kind": "noise", "candidates": [{"kind": "bernoulli", "p": 0.1}, {"kind": "bernoulli", "p": 0.3}], "num_queries": 40, "tune_points": 20}
            ],
            "outlier": {"beta": 0.1, "gamma": 3}
        }))
        .unwrap()
    }

    #[test]
    fn small_experiment_is_consistent() {
        let cfg = small_config();
        let exp = run_experiment(&cfg).unwrap();
        let r = &exp.report;
        assert_eq!(r.truth.len(), 120);
        assert_eq!(r.rescore().unwrap(), r.metrics);
        let gap = r.metrics_for("gap").unwrap().metrics.accuracy;
        assert_eq!(gap, 0.5 + (r.metrics.acc_train - r.metrics.acc_test) / 2.0);
        assert_eq!(r.attack("boundary").unwrap().budget_curve.len(), 2);
        assert!(r.attack("noise").unwrap().selected_noise.is_some());
        assert!(r.outliers.as_ref().is_some_and(|o| !o.outliers.is_empty()));

        let text = serde_json::to_string(r).unwrap();
        let back: EvaluationReport = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);

        let again = run_experiment(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&again.report).unwrap(), text);
    }

    #[test]
    fn defense_leaves_label_only_rows_unchanged() {
        let plain = small_config();
        let mut guarded = plain.clone();
        guarded.defense = vec![DefenseWrapperSpec::Memguard];
        let a = run_experiment(&plain).unwrap().report;
        let b = run_experiment(&guarded).unwrap().report;
        for x in a.attacks.iter().filter(|x| x.label_only) {
            assert_eq!(Some(x), b.attack(&x.name));
        }
        assert_ne!(a.config_hash, b.config_hash);
        // Tuned on unmasked shadows, the threshold sits above the canonical
        // top score, so nothing is called a member.
        assert_eq!(
            b.metrics_for("confidence-threshold").unwrap().metrics.accuracy,
            0.5
        );

        guarded.adaptive = true;
        let c = run_experiment(&guarded).unwrap().report;
        for x in a.attacks.iter().filter(|x| x.label_only) {
            assert_eq!(Some(x), c.attack(&x.name));
        }
        assert_ne!(b.attack("confidence-vector"), c.attack("confidence-vector"));
    }

    #[test]
    fn stage_errors() {
        let mut cfg = small_config();
        cfg.split.size = 1000;
        let e = run_experiment(&cfg).err().unwrap();
        assert_eq!(e.stage, Stage::Data);
        let mut cfg = small_config();
        cfg.target.architecture = ArchitectureSpec::ReferenceCnn;
        assert_eq!(run_experiment(&cfg).err().unwrap().stage, Stage::Config);
        let bad = json!({"seed": 1});
        assert!(ExperimentConfig::from_value(bad, Path::new(".")).is_err());
    }

    #[test]
    fn emit_round_trip_and_csv_shape() {
        let exp = run_experiment(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&exp.report, dir.path()).unwrap();
        let back = load_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, exp.report);
        let mut rdr = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(
            rdr.records().count(),
            exp.report.attacks.len() * METRIC_NAMES.len()
        );
        let file = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(
            emit_report(&exp.report, &file.path().join("sub")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let template = serde_json::to_value(small_config()).unwrap();
        let out = sweep(
            &template,
            Path::new("."),
            "split.size",
            &[json!(40), json!(100_000)],
        );
        assert_eq!(out.runs.len(), 2);
        assert!(out.runs[0].outcome.is_ok());
        assert_eq!(out.runs[1].outcome.as_ref().err().unwrap().stage, Stage::Data);
        assert!(out.rows.iter().all(|r| r.axis_value == "40"));
        assert!(sweep(&template, Path::new("."), "split.size", &[])
            .rows
            .is_empty());
    }
}
