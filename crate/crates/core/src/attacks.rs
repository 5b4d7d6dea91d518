//! Membership-inference decision rules and their shadow-model tuning.
//!
//! Attacks receive target points as plain [`ExampleRecord`]s, which carry no
//! membership information; ground truth only ever reaches the scoring code.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::boundary::{
    combined_walks, noise_robustness, walk_or_sentinel, FeatureBox, HsjaConfig, NoiseRobustnessConfig, Walk,
};
use crate::data::{augmentation_set, AugmentationSpec, ExampleRecord, FeatureSchema, PointId};
use crate::error::{Error, Result};
use crate::model::{
    fine_tune, train_classifier, Activation, Architecture, Classifier, FineTuneMode, TrainConfig,
};
use crate::numerics::{json_f64, Matrix, RngStream};
use crate::oracle::{ConfidenceOracle, DefenseWrapperSpec, LabelOracle};

/// Classes with fewer shadow examples than this share the global predictor.
pub const MIN_CLASS_EXAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipPrediction {
    pub point: PointId,
    pub member: bool,
    #[serde(with = "json_f64")]
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionThreshold {
    #[serde(with = "json_f64")]
    pub tau: f64,
    /// Balanced accuracy on the tuning scores.
    pub accuracy: f64,
}

/// Correctness bits over an augmentation set; `true` means the query was
/// labeled correctly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationBits(pub Vec<bool>);

impl PerturbationBits {
    pub fn features(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Member iff `score > tau`.
pub fn threshold_predictions(
    points: &[ExampleRecord],
    scores: &[f64],
    tau: f64,
) -> Vec<MembershipPrediction> {
    points
        .iter()
        .zip(scores)
        .map(|(p, &s)| MembershipPrediction {
            point: p.id,
            member: s > tau,
            score: s,
        })
        .collect()
}

/// Predicts exactly the correctly classified points as members.
pub fn gap_attack(o: &LabelOracle, points: &[ExampleRecord]) -> Result<Vec<MembershipPrediction>> {
    let scores = points
        .iter()
        .map(|p| Ok(if o.query(p.id, &p.x)? == p.y { 1.0 } else { 0.0 }))
        .collect::<Result<Vec<_>>>()?;
    Ok(threshold_predictions(points, &scores, 0.5))
}

/// Threshold maximizing balanced accuracy over all midpoints between
/// consecutive distinct scores (and the maximum score itself); ties go to
/// the smaller threshold.
pub fn tune_threshold(members: &[f64], nonmembers: &[f64]) -> Result<DecisionThreshold> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::InvalidInput("threshold tuning needs both classes".into()));
    }
    if members.iter().chain(nonmembers).any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);

    // Sweep upward: below the first score everything is predicted member.
    let mut tp = nm;
    let mut tn = 0.0;
    let mut best = DecisionThreshold {
        tau: f64::NAN,
        accuracy: f64::NEG_INFINITY,
    };
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp -= 1.0;
            } else {
                tn += 1.0;
            }
            i += 1;
        }
        let tau = if i < all.len() { midpoint(v, all[i].0) } else { v };
        let acc = 0.5 * (tp / nm + tn / nn);
        if acc > best.accuracy {
            best = DecisionThreshold { tau, accuracy: acc };
        }
    }
    Ok(best)
}

fn midpoint(a: f64, b: f64) -> f64 {
    if b.is_infinite() {
        if a.is_finite() {
            // Any finite value above `a` separates it from the sentinel.
            a.abs().mul_add(2.0, 1.0)
        } else {
            a
        }
    } else {
        0.5 * (a + b)
    }
}

/// Member iff the top confidence score exceeds `tau`.
pub fn confidence_threshold_attack(
    o: &ConfidenceOracle,
    points: &[ExampleRecord],
    tau: f64,
) -> Result<Vec<MembershipPrediction>> {
    let scores = max_confidences(o, points)?;
    Ok(threshold_predictions(points, &scores, tau))
}

pub fn max_confidences(o: &ConfidenceOracle, points: &[ExampleRecord]) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|p| Ok(o.query(p.id, &p.x)?.max_score()))
        .collect()
}

pub fn confidence_features(o: &ConfidenceOracle, points: &[ExampleRecord]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|p| Ok(o.query(p.id, &p.x)?.into_inner()))
        .collect()
}

pub fn augmentation_bits(
    o: &LabelOracle,
    points: &[ExampleRecord],
    schema: &FeatureSchema,
    spec: &AugmentationSpec,
) -> Result<Vec<PerturbationBits>> {
    points
        .iter()
        .map(|p| {
            let queries = Matrix::from_rows(&augmentation_set(&p.x, schema, spec)?)?;
            let labels = o.query_batch(p.id, &queries)?;
            Ok(PerturbationBits(labels.into_iter().map(|l| l == p.y).collect()))
        })
        .collect()
}

/// Per-point walk stream: independent of evaluation order and of any other attack.
pub fn point_stream(base: &RngStream, point: PointId) -> RngStream {
    base.derive(point)
}

/// One boundary walk per point, starting from the point itself.
pub fn boundary_walks(
    o: &LabelOracle,
    points: &[ExampleRecord],
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    base: &RngStream,
) -> Result<Vec<Walk>> {
    points
        .iter()
        .map(|p| {
            let mut r = point_stream(base, p.id).derive(0);
            walk_or_sentinel(o, p.id, &p.x, p.y, cfg, bounds, &mut r)
        })
        .collect()
}

/// Member iff the estimated boundary distance exceeds `tau`. Points whose
/// walk finds no starting point get an infinite distance and count as members.
pub fn boundary_distance_attack(
    o: &LabelOracle,
    points: &[ExampleRecord],
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    tau: f64,
    base: &RngStream,
) -> Result<Vec<MembershipPrediction>> {
    let d: Vec<f64> = boundary_walks(o, points, cfg, bounds, base)?
        .iter()
        .map(|w| w.estimate.value)
        .collect();
    Ok(threshold_predictions(points, &d, tau))
}

pub fn noise_scores(
    o: &LabelOracle,
    points: &[ExampleRecord],
    schema: &FeatureSchema,
    cfg: &NoiseRobustnessConfig,
    base: &RngStream,
) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            let mut r = point_stream(base, p.id);
            Ok(noise_robustness(o, p.id, &p.x, p.y, schema, cfg, &mut r)?.score)
        })
        .collect()
}

/// Member iff the noise-robustness score exceeds `tau`.
pub fn noise_attack(
    o: &LabelOracle,
    points: &[ExampleRecord],
    schema: &FeatureSchema,
    cfg: &NoiseRobustnessConfig,
    tau: f64,
    base: &RngStream,
) -> Result<Vec<MembershipPrediction>> {
    let s = noise_scores(o, points, schema, cfg, base)?;
    Ok(threshold_predictions(points, &s, tau))
}

/// Walks from each point and each of its augmentations.
pub fn combined_point_walks(
    o: &LabelOracle,
    points: &[ExampleRecord],
    schema: &FeatureSchema,
    aug: &AugmentationSpec,
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    base: &RngStream,
) -> Result<Vec<Vec<Walk>>> {
    points
        .iter()
        .map(|p| {
            let r = point_stream(base, p.id);
            combined_walks(o, p.id, &p.x, p.y, schema, aug, cfg, bounds, &r)
        })
        .collect()
}

pub fn combined_attack(
    o: &LabelOracle,
    points: &[ExampleRecord],
    schema: &FeatureSchema,
    aug: &AugmentationSpec,
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    f: &AttackClassifier,
    base: &RngStream,
) -> Result<Vec<MembershipPrediction>> {
    f.expect(AttackFeatures::Combined, Some(aug))?;
    let walks = combined_point_walks(o, points, schema, aug, cfg, bounds, base)?;
    let feats: Vec<Vec<f64>> = walks
        .iter()
        .map(|ws| ws.iter().map(|w| w.estimate.value).collect())
        .collect();
    f.predict(points, &feats)
}

pub fn augmentation_attack(
    o: &LabelOracle,
    points: &[ExampleRecord],
    schema: &FeatureSchema,
    spec: &AugmentationSpec,
    f: &AttackClassifier,
) -> Result<Vec<MembershipPrediction>> {
    f.expect(AttackFeatures::AugmentationBits, Some(spec))?;
    let feats: Vec<Vec<f64>> = augmentation_bits(o, points, schema, spec)?
        .iter()
        .map(PerturbationBits::features)
        .collect();
    f.predict(points, &feats)
}

/// Shadow-network attack on full confidence vectors.
pub fn confidence_vector_attack(
    o: &ConfidenceOracle,
    points: &[ExampleRecord],
    f: &AttackClassifier,
) -> Result<Vec<MembershipPrediction>> {
    f.expect(AttackFeatures::Confidence, None)?;
    f.predict(points, &confidence_features(o, points)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFeatures {
    Confidence,
    AugmentationBits,
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackTrainConfig {
    /// Epochs for the predictor shared by all classes.
    pub epochs: usize,
    /// Epochs each per-class predictor is fine-tuned from the shared one.
    pub class_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            class_epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
        }
    }
}

/// Feature standardization. Infinite entries are first capped; distance
/// features are then log-compressed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Scaler {
    cap: Vec<f64>,
    log_offset: Option<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Scaler {
    fn fit(rows: &[Vec<f64>], log: bool) -> Scaler {
        let dim = rows[0].len();
        let cap: Vec<f64> = (0..dim)
            .map(|j| {
                let m = rows
                    .iter()
                    .map(|r| r[j])
                    .filter(|v| v.is_finite())
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                2.0 * m + 1.0
            })
            .collect();
        // Offset keeps zero distances (misclassified queries) finite and distinct.
        let log_offset = log.then(|| {
            (0..dim)
                .map(|j| {
                    let mut pos: Vec<f64> = rows
                        .iter()
                        .map(|r| r[j])
                        .filter(|v| v.is_finite() && *v > 0.0)
                        .collect();
                    if pos.is_empty() {
                        return 1e-3;
                    }
                    pos.sort_by(f64::total_cmp);
                    0.01 * pos[pos.len() / 2]
                })
                .collect()
        });
        let pre = Scaler {
            cap: cap.clone(),
            log_offset: log_offset.clone(),
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        };
        let capped: Vec<Vec<f64>> = rows.iter().map(|r| pre.apply(r)).collect();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| capped.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let std = (0..dim)
            .map(|j| {
                let v = capped.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Scaler {
            cap,
            log_offset,
            mean,
            std,
        }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut v = cap_row(r, &self.cap);
        if let Some(off) = &self.log_offset {
            for (x, o) in v.iter_mut().zip(off) {
                *x = (x.max(0.0) + o).ln();
            }
        }
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

fn cap_row(r: &[f64], cap: &[f64]) -> Vec<f64> {
    r.iter().zip(cap).map(|(&v, &c)| v.clamp(-c, c)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Predictor {
    Networks {
        scaler: Scaler,
        per_class: Vec<Option<Classifier>>,
        global: Classifier,
    },
    /// Member iff `features[feature] > tau`.
    Threshold { feature: usize, tau: f64 },
}

/// Per-class membership predictors over attack feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackClassifier {
    pub features: AttackFeatures,
    pub spec: Option<AugmentationSpec>,
    pub feature_dim: usize,
    /// Classes served by the global predictor for lack of shadow examples.
    pub fallback_classes: Vec<usize>,
    predictor: Predictor,
}

/// Labeled attack-training examples gathered from shadow models.
#[derive(Clone, Debug, Default)]
pub struct AttackDataset {
    pub features: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub member: Vec<bool>,
}

impl AttackDataset {
    pub fn push(&mut self, features: Vec<f64>, class: usize, member: bool) {
        self.features.push(features);
        self.classes.push(class);
        self.member.push(member);
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn attack_arch(features: AttackFeatures, dim: usize) -> Architecture {
    match features {
        AttackFeatures::Confidence => Architecture::mlp(dim, 2, vec![64], Activation::Relu),
        AttackFeatures::AugmentationBits | AttackFeatures::Combined => {
            Architecture::mlp(dim, 2, vec![10, 10], Activation::LeakyRelu)
        }
    }
}

fn attack_records(rows: &[Vec<f64>], member: &[bool]) -> Vec<ExampleRecord> {
    rows.iter()
        .zip(member)
        .enumerate()
        .map(|(i, (x, &m))| ExampleRecord {
            id: i as PointId,
            x: x.clone(),
            y: usize::from(m),
        })
        .collect()
}

fn attack_train_config(cfg: &AttackTrainConfig, epochs: usize, fine: FineTuneMode) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        fine_tune: fine,
        ..TrainConfig::default()
    }
}

impl AttackClassifier {
    /// Trains a shared predictor on every example, then one predictor per class
    /// fine-tuned from it on that class alone. Classes with too few examples
    /// keep the shared predictor.
    pub fn train(
        data: &AttackDataset,
        features: AttackFeatures,
        spec: Option<AugmentationSpec>,
        num_classes: usize,
        cfg: &AttackTrainConfig,
        rng: &RngStream,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Coverage("no shadow examples".into()));
        }
        let dim = data.features[0].len();
        if data.features.iter().any(|f| f.len() != dim) {
            return Err(Error::InvalidInput("ragged attack features".into()));
        }
        let mut counts = vec![0usize; num_classes];
        for &c in &data.classes {
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Coverage(format!("class {c} has no shadow examples")));
        }
        let scaler = Scaler::fit(&data.features, features == AttackFeatures::Combined);
        let scaled: Vec<Vec<f64>> = data.features.iter().map(|r| scaler.apply(r)).collect();
        let arch = attack_arch(features, dim);
        let global = train_classifier(
            &arch,
            &attack_records(&scaled, &data.member),
            &attack_train_config(cfg, cfg.epochs, FineTuneMode::None),
            &mut rng.derive_named("global"),
        )?;
        let class_cfg = attack_train_config(cfg, cfg.class_epochs, FineTuneMode::Full);
        let mut per_class = Vec::with_capacity(num_classes);
        let mut fallback_classes = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            if n < MIN_CLASS_EXAMPLES {
                fallback_classes.push(c);
                per_class.push(None);
                continue;
            }
            let idx: Vec<usize> = (0..data.len()).filter(|&i| data.classes[i] == c).collect();
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| scaled[i].clone()).collect();
            let m: Vec<bool> = idx.iter().map(|&i| data.member[i]).collect();
            let net = if cfg.class_epochs == 0 {
                global.clone()
            } else {
                fine_tune(
                    &global,
                    &attack_records(&rows, &m),
                    &class_cfg,
                    &mut rng.derive(c as u64),
                )?
            };
            per_class.push(Some(net));
        }
        Ok(Self {
            features,
            spec,
            feature_dim: dim,
            fallback_classes,
            predictor: Predictor::Networks {
                scaler,
                per_class,
                global,
            },
        })
    }

    /// Decision rule thresholding a single feature; with `feature = 0` on
    /// combined features this ignores every augmentation.
    pub fn threshold(
        features: AttackFeatures,
        spec: Option<AugmentationSpec>,
        feature_dim: usize,
        feature: usize,
        tau: f64,
    ) -> Self {
        Self {
            features,
            spec,
            feature_dim,
            fallback_classes: vec![],
            predictor: Predictor::Threshold { feature, tau },
        }
    }

    fn expect(&self, features: AttackFeatures, spec: Option<&AugmentationSpec>) -> Result<()> {
        if self.features != features || self.spec.as_ref() != spec {
            return Err(Error::Config(format!(
                "attack classifier trained for {:?} {:?}, used for {:?} {:?}",
                self.features, self.spec, features, spec
            )));
        }
        Ok(())
    }

    /// Member probability for one feature vector of a point with label `class`.
    pub fn member_score(&self, class: usize, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim {
            return Err(Error::InvalidInput(format!(
                "attack features have length {}, expected {}",
                features.len(),
                self.feature_dim
            )));
        }
        match &self.predictor {
            Predictor::Threshold { feature, tau } => Ok(if features[*feature] > *tau { 1.0 } else { 0.0 }),
            Predictor::Networks {
                scaler,
                per_class,
                global,
            } => {
                let net = per_class.get(class).and_then(Option::as_ref).unwrap_or(global);
                Ok(net.predict_confidences(&scaler.apply(features))?.scores()[1])
            }
        }
    }

    pub fn predict(
        &self,
        points: &[ExampleRecord],
        features: &[Vec<f64>],
    ) -> Result<Vec<MembershipPrediction>> {
        points
            .iter()
            .zip(features)
            .map(|(p, f)| {
                let s = self.member_score(p.y, f)?;
                Ok(MembershipPrediction {
                    point: p.id,
                    member: s > 0.5,
                    score: s,
                })
            })
            .collect()
    }
}

/// A shadow model with its known member and non-member sets.
#[derive(Clone, Debug)]
pub struct ShadowModel {
    pub model: Arc<Classifier>,
    pub members: Vec<ExampleRecord>,
    pub nonmembers: Vec<ExampleRecord>,
    /// Wrappers mirroring the target's deployment.
    pub defense: Vec<DefenseWrapperSpec>,
}

impl ShadowModel {
    pub fn oracle(&self) -> Result<ConfidenceOracle> {
        self.defense
            .iter()
            .try_fold(ConfidenceOracle::new(self.model.clone()), |o, w| o.wrap(*w))
    }

    /// Keeps the first `n` members and the first `n` non-members.
    pub fn truncated(&self, n: usize) -> ShadowModel {
        ShadowModel {
            model: self.model.clone(),
            members: self.members.iter().take(n).cloned().collect(),
            nonmembers: self.nonmembers.iter().take(n).cloned().collect(),
            defense: self.defense.clone(),
        }
    }

    /// Members then non-members, with their membership flags.
    pub fn labeled_points(&self) -> (Vec<ExampleRecord>, Vec<bool>) {
        let mut pts = self.members.clone();
        pts.extend(self.nonmembers.iter().cloned());
        let mut flags = vec![true; self.members.len()];
        flags.extend(std::iter::repeat_n(false, self.nonmembers.len()));
        (pts, flags)
    }
}

/// Shadow-side features for each attack family.
#[derive(Clone, Debug)]
pub enum ShadowFeatureSpec<'a> {
    Confidence,
    AugmentationBits {
        schema: &'a FeatureSchema,
        spec: AugmentationSpec,
    },
    Combined {
        schema: &'a FeatureSchema,
        spec: AugmentationSpec,
        walk: &'a HsjaConfig,
        bounds: &'a FeatureBox,
        base: &'a RngStream,
    },
}

/// Builds the attack dataset from shadow models and trains the classifier.
pub fn train_shadow_attack(
    shadows: &[ShadowModel],
    mode: &ShadowFeatureSpec<'_>,
    num_classes: usize,
    cfg: &AttackTrainConfig,
    rng: &RngStream,
) -> Result<AttackClassifier> {
    let mut data = AttackDataset::default();
    for (i, sh) in shadows.iter().enumerate() {
        let (pts, flags) = sh.labeled_points();
        let conf = sh.oracle()?;
        let labels = conf.labels();
        let feats: Vec<Vec<f64>> = match mode {
            ShadowFeatureSpec::Confidence => confidence_features(&conf, &pts)?,
            ShadowFeatureSpec::AugmentationBits { schema, spec } => {
                augmentation_bits(&labels, &pts, schema, spec)?
                    .iter()
                    .map(PerturbationBits::features)
                    .collect()
            }
            ShadowFeatureSpec::Combined {
                schema,
                spec,
                walk,
                bounds,
                base,
            } => combined_point_walks(&labels, &pts, schema, spec, walk, bounds, &base.derive(i as u64))?
                .iter()
                .map(|ws| ws.iter().map(|w| w.estimate.value).collect())
                .collect(),
        };
        for ((f, p), m) in feats.into_iter().zip(&pts).zip(flags) {
            data.push(f, p.y, m);
        }
    }
    let (features, spec) = match mode {
        ShadowFeatureSpec::Confidence => (AttackFeatures::Confidence, None),
        ShadowFeatureSpec::AugmentationBits { spec, .. } => (AttackFeatures::AugmentationBits, Some(*spec)),
        ShadowFeatureSpec::Combined { spec, .. } => (AttackFeatures::Combined, Some(*spec)),
    };
    AttackClassifier::train(&data, features, spec, num_classes, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use proptest::prelude::*;

    fn balanced_accuracy(members: &[f64], nonmembers: &[f64], tau: f64) -> f64 {
        let tp = members.iter().filter(|&&s| s > tau).count() as f64;
        let tn = nonmembers.iter().filter(|&&s| s <= tau).count() as f64;
        0.5 * (tp / members.len() as f64 + tn / nonmembers.len() as f64)
    }

    fn pts(n: usize) -> Vec<ExampleRecord> {
        (0..n)
            .map(|i| ExampleRecord {
                id: i as PointId,
                x: vec![0.0],
                y: 0,
            })
            .collect()
    }

    #[test]
    fn separable_threshold() {
        let t = tune_threshold(&[2.0, 3.0], &[0.0, 1.0]).unwrap();
        assert_eq!(t.tau, 1.5);
        assert_eq!(t.accuracy, 1.0);
        let same = tune_threshold(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.accuracy, 0.5);
        assert_eq!(
            balanced_accuracy(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], same.tau),
            0.5
        );
        assert!(tune_threshold(&[], &[1.0]).is_err());
    }

    #[test]
    fn infinite_sentinel_is_member() {
        let t = tune_threshold(&[f64::INFINITY, 5.0], &[1.0, 0.0]).unwrap();
        assert!(t.tau.is_finite());
        let p = threshold_predictions(&pts(1), &[f64::INFINITY], t.tau);
        assert!(p[0].member);
    }

    proptest! {
        #[test]
        fn threshold_matches_brute_force(seed in any::<u64>(), n in 2usize..60) {
            let mut rng = RngStream::new(seed, 0);
            // Coarse values create ties.
            let m: Vec<f64> = (0..n).map(|_| (rng.normal() * 4.0 + 1.0).round() / 2.0).collect();
            let nm: Vec<f64> = (0..n + 3).map(|_| (rng.normal() * 4.0).round() / 2.0).collect();
            let t = tune_threshold(&m, &nm).unwrap();
            prop_assert_eq!(balanced_accuracy(&m, &nm, t.tau), t.accuracy);

            // Quadratic oracle over every score and midpoint.
            let mut cands: Vec<f64> = m.iter().chain(&nm).copied().collect();
            cands.sort_by(f64::total_cmp);
            let mids: Vec<f64> = cands.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            cands.extend(mids);
            let best = cands.iter().map(|&c| balanced_accuracy(&m, &nm, c)).fold(f64::MIN, f64::max);
            prop_assert!((best - t.accuracy).abs() < 1e-12);

            // Dense grid over the score range never beats the sweep.
            let lo = cands.iter().copied().fold(f64::MAX, f64::min) - 1.0;
            let hi = cands.iter().copied().fold(f64::MIN, f64::max) + 1.0;
            let grid = (0..10_000).map(|k| lo + (hi - lo) * k as f64 / 9_999.0);
            let grid_best = grid.map(|c| balanced_accuracy(&m, &nm, c)).fold(f64::MIN, f64::max);
            prop_assert!(grid_best <= t.accuracy + 1e-12);
            prop_assert!((grid_best - t.accuracy).abs() < 1e-12);
        }

        #[test]
        fn raising_tau_never_adds_members(scores in prop::collection::vec(0.0f64..10.0, 1..40), a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p = pts(scores.len());
            let low = threshold_predictions(&p, &scores, lo);
            let high = threshold_predictions(&p, &scores, hi);
            for (l, h) in low.iter().zip(&high) {
                prop_assert!(!h.member || l.member);
            }
        }
    }

    fn dataset(seed: u64, separable: bool) -> AttackDataset {
        let mut rng = RngStream::new(seed, 0);
        let mut d = AttackDataset::default();
        for i in 0..400 {
            let member = i % 2 == 0;
            let class = (i / 2) % 2;
            let a = rng.normal();
            let f0 = match (separable, member) {
                (true, true) => 1.0 + a.abs(),
                (true, false) => -1.0 - a.abs(),
                _ => a,
            };
            d.push(vec![f0, rng.normal()], class, member);
        }
        d
    }

    fn shadow_accuracy(f: &AttackClassifier, d: &AttackDataset) -> f64 {
        let hits = (0..d.len())
            .filter(|&i| (f.member_score(d.classes[i], &d.features[i]).unwrap() > 0.5) == d.member[i])
            .count();
        hits as f64 / d.len() as f64
    }

    #[test]
    fn attack_classifier_extremes() {
        let cfg = AttackTrainConfig {
            epochs: 60,
            ..AttackTrainConfig::default()
        };
        let sep = dataset(1, true);
        let f = AttackClassifier::train(
            &sep,
            AttackFeatures::Combined,
            None,
            2,
            &cfg,
            &RngStream::new(0, 0),
        )
        .unwrap();
        assert!(shadow_accuracy(&f, &sep) > 0.99);
        assert!(f.fallback_classes.is_empty());

        let noise = dataset(2, false);
        let g = AttackClassifier::train(
            &noise,
            AttackFeatures::Combined,
            None,
            2,
            &cfg,
            &RngStream::new(0, 0),
        )
        .unwrap();
        let held = dataset(3, false);
        assert!((shadow_accuracy(&g, &held) - 0.5).abs() < 0.05);
    }

    #[test]
    fn coverage_and_fallback() {
        let mut d = dataset(4, true);
        d.push(vec![0.0, 0.0], 2, true);
        let cfg = AttackTrainConfig {
            epochs: 5,
            ..AttackTrainConfig::default()
        };
        let f = AttackClassifier::train(&d, AttackFeatures::Combined, None, 3, &cfg, &RngStream::new(0, 0))
            .unwrap();
        assert_eq!(f.fallback_classes, vec![2]);
        assert!(matches!(
            AttackClassifier::train(&d, AttackFeatures::Combined, None, 4, &cfg, &RngStream::new(0, 0)),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn spec_mismatch_is_config_error() {
        let shape = ImageShape {
            height: 4,
            width: 4,
            channels: 1,
        };
        let schema = FeatureSchema::image(shape, 2);
        let m = Arc::new(
            Classifier::init(
                &Architecture::mlp(16, 2, vec![3], Activation::Tanh),
                &mut RngStream::new(0, 0),
            )
            .unwrap(),
        );
        let o = LabelOracle::new(m);
        let f = AttackClassifier::threshold(
            AttackFeatures::AugmentationBits,
            Some(AugmentationSpec::Translation { d: 1 }),
            5,
            0,
            0.5,
        );
        let p = vec![ExampleRecord {
            id: 0,
            x: vec![0.5; 16],
            y: 0,
        }];
        assert!(augmentation_attack(&o, &p, &schema, &AugmentationSpec::Translation { d: 1 }, &f).is_ok());
        assert_eq!(o.counter().total(), 5);
        assert!(matches!(
            augmentation_attack(&o, &p, &schema, &AugmentationSpec::Translation { d: 2 }, &f),
            Err(Error::Config(_))
        ));
    }

    fn toy_task(seed: u64) -> (Arc<Classifier>, Vec<ExampleRecord>, Vec<ExampleRecord>) {
        let mut rng = RngStream::new(seed, 0);
        let mut gen = |n: usize, off: u64| -> Vec<ExampleRecord> {
            (0..n)
                .map(|i| {
                    let y = i % 2;
                    let c = if y == 0 { 0.35 } else { 0.65 };
                    ExampleRecord {
                        id: off + i as u64,
                        x: (0..4)
                            .map(|_| (c + 0.25 * rng.normal()).clamp(0.0, 1.0))
                            .collect(),
                        y,
                    }
                })
                .collect()
        };
        let train = gen(40, 0);
        let test = gen(40, 1000);
        let arch = Architecture::mlp(4, 2, vec![32], Activation::Tanh);
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let m = train_classifier(&arch, &train, &cfg, &mut RngStream::new(seed, 1)).unwrap();
        (Arc::new(m), train, test)
    }

    #[test]
    fn gap_identity_is_exact() {
        let (m, train, test) = toy_task(5);
        let o = LabelOracle::new(m.clone());
        let mut pts = train.clone();
        pts.extend(test.iter().cloned());
        let pred = gap_attack(&o, &pts).unwrap();
        let hits = pred
            .iter()
            .enumerate()
            .filter(|(i, p)| p.member == (*i < train.len()))
            .count();
        let acc = hits as f64 / pts.len() as f64;
        let expected = 0.5 + (m.accuracy(&train).unwrap() - m.accuracy(&test).unwrap()) / 2.0;
        assert!((acc - expected).abs() < 1e-12);
        assert_eq!(o.counter().total(), pts.len() as u64);
    }

    #[test]
    fn one_hot_confidence_is_member() {
        let m = Arc::new(Classifier::from_linear(&[1000.0], 0.0).unwrap());
        let o = ConfidenceOracle::new(m);
        let p = vec![ExampleRecord {
            id: 0,
            x: vec![1.0],
            y: 1,
        }];
        assert!(confidence_threshold_attack(&o, &p, 0.99).unwrap()[0].member);
    }

    #[test]
    fn label_only_attacks_ignore_wrappers() {
        let (m, train, test) = toy_task(6);
        let mut pts = train;
        pts.truncate(6);
        pts.extend(test.into_iter().take(6));
        let schema = FeatureSchema::tabular(vec![crate::data::FeatureKind::Continuous; 4], 2).unwrap();
        let bounds = FeatureBox::unit(4);
        let walk = HsjaConfig {
            budget: 300,
            ..HsjaConfig::default()
        };
        let noise = NoiseRobustnessConfig {
            noise: crate::data::NoiseKind::Gaussian { sigma: 0.2 },
            num_queries: 50,
        };
        let base = RngStream::new(9, 3);
        let plain = ConfidenceOracle::new(m.clone());
        let specs = [
            DefenseWrapperSpec::Memguard,
            DefenseWrapperSpec::TopK { k: 1 },
            DefenseWrapperSpec::Round { digits: 1 },
        ];
        let run = |o: &LabelOracle| {
            (
                gap_attack(o, &pts).unwrap(),
                boundary_distance_attack(o, &pts, &walk, &bounds, 0.1, &base).unwrap(),
                noise_attack(o, &pts, &schema, &noise, 0.7, &base).unwrap(),
            )
        };
        let reference = run(&plain.labels());
        for s in specs {
            let o = ConfidenceOracle::new(m.clone()).wrap(s).unwrap().labels();
            assert_eq!(run(&o), reference);
        }
    }

    #[test]
    fn misclassified_points_are_nonmembers() {
        let m = Arc::new(Classifier::from_linear(&[1.0, 0.0], -0.5).unwrap());
        let o = LabelOracle::new(m);
        let p = vec![ExampleRecord {
            id: 0,
            x: vec![0.9, 0.5],
            y: 0,
        }];
        let base = RngStream::new(0, 0);
        let bounds = FeatureBox::unit(2);
        for tau in [0.0, 0.5, 10.0] {
            let pred = boundary_distance_attack(&o, &p, &HsjaConfig::default(), &bounds, tau, &base).unwrap();
            assert!(!pred[0].member);
            assert_eq!(pred[0].score, 0.0);
        }
    }

    #[test]
    fn feature_zero_combined_matches_boundary() {
        let shape = ImageShape {
            height: 3,
            width: 3,
            channels: 1,
        };
        let schema = FeatureSchema::image(shape, 2);
        let mut rng = RngStream::new(11, 0);
        let w: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let m = Arc::new(Classifier::from_linear(&w, 0.1).unwrap());
        let pts: Vec<ExampleRecord> = (0..8)
            .map(|i| {
                let x: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
                let y = m.predict_label(&x).unwrap();
                ExampleRecord {
                    id: i,
                    x,
                    y: if i % 3 == 0 { 1 - y } else { y },
                }
            })
            .collect();
        let cfg = HsjaConfig {
            budget: 200,
            ..HsjaConfig::default()
        };
        let bounds = FeatureBox::unit(9);
        let base = RngStream::new(4, 4);
        let aug = AugmentationSpec::Translation { d: 1 };
        let tau = 0.2;
        let o = LabelOracle::new(m);
        let f = AttackClassifier::threshold(AttackFeatures::Combined, Some(aug), 5, 0, tau);
        let c = combined_attack(&o, &pts, &schema, &aug, &cfg, &bounds, &f, &base).unwrap();
        let b = boundary_distance_attack(&o, &pts, &cfg, &bounds, tau, &base).unwrap();
        let cm: Vec<bool> = c.iter().map(|p| p.member).collect();
        let bm: Vec<bool> = b.iter().map(|p| p.member).collect();
        assert_eq!(cm, bm);
    }
}
