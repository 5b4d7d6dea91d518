//! Distance to the decision boundary: label-only walk, noise-robustness
//! proxy, white-box gradient search and the closed form for linear models.

use serde::{Deserialize, Serialize};

use crate::data::{augmentation_set, AugmentationSpec, FeatureSchema, NoiseKind, PointId};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::{dot, json_f64, l2_distance, l2_norm, Matrix, RngStream};
use crate::oracle::LabelOracle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMethod {
    Walk,
    NoiseProxy,
    WhiteBox,
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    /// L2 distance; `+∞` when no misclassified point could be reached.
    #[serde(with = "json_f64")]
    pub value: f64,
    pub method: DistanceMethod,
    pub queries: u64,
    #[serde(default = "yes")]
    pub converged: bool,
}

fn yes() -> bool {
    true
}

impl DistanceEstimate {
    fn new(value: f64, method: DistanceMethod, queries: u64) -> Self {
        Self {
            value,
            method,
            queries,
            converged: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsjaConfig {
    pub budget: u64,
    pub max_iterations: usize,
    /// Gradient probes in the first iteration; iteration `t` uses `b0·√t`.
    pub b0: usize,
    /// Bracket width of every binary search, as a fraction of the segment length.
    pub theta: f64,
    pub init_attempts: usize,
}

impl Default for HsjaConfig {
    fn default() -> Self {
        Self {
            budget: 2500,
            max_iterations: 64,
            b0: 25,
            theta: 1e-3,
            init_attempts: 100,
        }
    }
}

impl HsjaConfig {
    pub fn validate(&self) -> Result<()> {
        // The initial check plus at least one initialization attempt.
        if self.budget < 2 {
            return Err(Error::Config(format!("walk budget {} below 2", self.budget)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) || self.b0 == 0 || self.init_attempts == 0 {
            return Err(Error::Config("walk: bad theta, b0 or init attempts".into()));
        }
        Ok(())
    }
}

/// Per-coordinate sampling range for the walk's random initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureBox(pub Vec<(f64, f64)>);

impl FeatureBox {
    pub fn unit(dim: usize) -> Self {
        Self(vec![(0.0, 1.0); dim])
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.0
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.uniform())
            .collect()
    }
}

/// Outcome of one label-only walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Walk {
    pub estimate: DistanceEstimate,
    /// `(queries used, best distance so far)` at every improvement.
    pub trajectory: Vec<(u64, f64)>,
}

impl Walk {
    /// Best distance the same walk would have returned with a smaller budget.
    pub fn distance_at_budget(&self, budget: u64) -> f64 {
        self.trajectory
            .iter()
            .take_while(|(q, _)| *q <= budget)
            .last()
            .map_or(f64::INFINITY, |&(_, d)| d)
    }

    fn zero(queries: u64) -> Self {
        Walk {
            estimate: DistanceEstimate::new(0.0, DistanceMethod::Walk, queries),
            trajectory: vec![(queries, 0.0)],
        }
    }
}

/// `|wᵀx + b| / ‖w‖₂`.
pub fn analytic_linear_distance(w: &[f64], b: f64, x: &[f64]) -> Result<DistanceEstimate> {
    let norm = l2_norm(w);
    if norm == 0.0 {
        return Err(Error::Degenerate("zero weight vector".into()));
    }
    if w.len() != x.len() {
        return Err(Error::InvalidInput("weight and input lengths differ".into()));
    }
    Ok(DistanceEstimate::new(
        (dot(w, x) + b).abs() / norm,
        DistanceMethod::Analytic,
        0,
    ))
}

/// Query-counting label probe used inside one walk.
struct Probe<'a> {
    oracle: &'a LabelOracle,
    point: PointId,
    y: usize,
    used: u64,
    budget: u64,
}

impl Probe<'_> {
    fn left(&self) -> u64 {
        self.budget - self.used
    }

    /// `Some(true)` when `x` is misclassified; `None` once the budget is spent.
    fn adversarial(&mut self, x: &[f64]) -> Result<Option<bool>> {
        if self.left() == 0 {
            return Ok(None);
        }
        self.used += 1;
        Ok(Some(self.oracle.query(self.point, x)? != self.y))
    }

    fn adversarial_batch(&mut self, xs: &Matrix) -> Result<Option<Vec<bool>>> {
        if self.left() < xs.rows() as u64 {
            return Ok(None);
        }
        self.used += xs.rows() as u64;
        let labels = self.oracle.query_batch(self.point, xs)?;
        Ok(Some(labels.into_iter().map(|l| l != self.y).collect()))
    }
}

fn lerp(x: &[f64], target: &[f64], a: f64) -> Vec<f64> {
    x.iter().zip(target).map(|(&p, &q)| p + a * (q - p)).collect()
}

/// Shrinks `[x, adv]` to a bracket of relative width `theta`. Returns the
/// adversarial end and whether the bracket closed before the budget ran out.
fn bisect(probe: &mut Probe<'_>, x: &[f64], adv: &[f64], theta: f64) -> Result<(Vec<f64>, bool)> {
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > theta {
        let mid = 0.5 * (lo + hi);
        match probe.adversarial(&lerp(x, adv, mid))? {
            Some(true) => hi = mid,
            Some(false) => lo = mid,
            None => return Ok((lerp(x, adv, hi), false)),
        }
    }
    Ok((lerp(x, adv, hi), true))
}

/// Label-only boundary walk with its improvement trajectory.
#[allow(clippy::too_many_arguments)]
pub fn hsja_walk(
    oracle: &LabelOracle,
    point: PointId,
    x: &[f64],
    y: usize,
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    rng: &mut RngStream,
) -> Result<Walk> {
    cfg.validate()?;
    if bounds.0.len() != x.len() {
        return Err(Error::InvalidInput("feature box does not match input".into()));
    }
    let mut probe = Probe {
        oracle,
        point,
        y,
        used: 0,
        budget: cfg.budget,
    };
    if probe.adversarial(x)? == Some(true) {
        return Ok(Walk::zero(probe.used));
    }

    let mut start = None;
    for _ in 0..cfg.init_attempts {
        let cand = bounds.sample(rng);
        if probe.adversarial(&cand)? == Some(true) {
            start = Some(cand);
            break;
        }
    }
    let Some(start) = start else {
        return Err(Error::NoAdversarialFound {
            attempts: cfg.init_attempts,
        });
    };

    let mut trajectory = Vec::new();
    let (mut cur, _) = bisect(&mut probe, x, &start, cfg.theta)?;
    let mut best = l2_distance(&cur, x);
    trajectory.push((probe.used, best));
    let dim = x.len();

    'walk: for t in 1..=cfg.max_iterations {
        let probes = ((cfg.b0 as f64) * (t as f64).sqrt()).round() as usize;
        let delta = best / dim as f64;
        let dirs: Vec<Vec<f64>> = (0..probes).map(|_| rng.unit_vector(dim)).collect();
        let mut rows = Vec::with_capacity(probes * dim);
        for u in &dirs {
            rows.extend(cur.iter().zip(u).map(|(c, ui)| c + delta * ui));
        }
        let Some(signs) = probe.adversarial_batch(&Matrix::from_vec_unchecked(probes, dim, rows))? else {
            break;
        };
        let phi: Vec<f64> = signs.iter().map(|&a| if a { 1.0 } else { -1.0 }).collect();
        let mean = phi.iter().sum::<f64>() / probes as f64;
        let baseline = if mean.abs() == 1.0 { 0.0 } else { mean };
        let mut grad = vec![0.0; dim];
        for (u, p) in dirs.iter().zip(&phi) {
            let w = p - baseline;
            for (g, ui) in grad.iter_mut().zip(u) {
                *g += w * ui;
            }
        }
        let gn = l2_norm(&grad);
        if gn == 0.0 {
            continue;
        }
        for g in &mut grad {
            *g /= gn;
        }

        let mut xi = best / (t as f64).sqrt();
        let stepped = loop {
            let cand: Vec<f64> = cur.iter().zip(&grad).map(|(c, g)| c + xi * g).collect();
            match probe.adversarial(&cand)? {
                Some(true) => break cand,
                Some(false) => {
                    xi /= 2.0;
                    if xi < best * 1e-9 {
                        continue 'walk;
                    }
                }
                None => break 'walk,
            }
        };
        let (proj, complete) = bisect(&mut probe, x, &stepped, cfg.theta)?;
        let d = l2_distance(&proj, x);
        if d < best {
            best = d;
            cur = proj;
            trajectory.push((probe.used, best));
        }
        if !complete {
            break;
        }
    }

    Ok(Walk {
        estimate: DistanceEstimate::new(best, DistanceMethod::Walk, probe.used),
        trajectory,
    })
}

pub fn hsja_distance(
    oracle: &LabelOracle,
    point: PointId,
    x: &[f64],
    y: usize,
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    rng: &mut RngStream,
) -> Result<DistanceEstimate> {
    Ok(hsja_walk(oracle, point, x, y, cfg, bounds, rng)?.estimate)
}

/// Walks from `x` and from each augmentation of it, in augmentation order.
///
/// A walk that finds no starting point yields an infinite distance rather
/// than an error.
#[allow(clippy::too_many_arguments)]
pub fn combined_walks(
    oracle: &LabelOracle,
    point: PointId,
    x: &[f64],
    y: usize,
    schema: &FeatureSchema,
    aug: &AugmentationSpec,
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    rng: &RngStream,
) -> Result<Vec<Walk>> {
    augmentation_set(x, schema, aug)?
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut r = rng.derive(i as u64);
            walk_or_sentinel(oracle, point, q, y, cfg, bounds, &mut r)
        })
        .collect()
}

pub fn combined_distances(
    oracle: &LabelOracle,
    point: PointId,
    x: &[f64],
    y: usize,
    schema: &FeatureSchema,
    aug: &AugmentationSpec,
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    rng: &RngStream,
) -> Result<Vec<DistanceEstimate>> {
    Ok(
        combined_walks(oracle, point, x, y, schema, aug, cfg, bounds, rng)?
            .into_iter()
            .map(|w| w.estimate)
            .collect(),
    )
}

/// Maps a failed initialization to the `+∞` sentinel.
pub fn walk_or_sentinel(
    oracle: &LabelOracle,
    point: PointId,
    x: &[f64],
    y: usize,
    cfg: &HsjaConfig,
    bounds: &FeatureBox,
    rng: &mut RngStream,
) -> Result<Walk> {
    let before = oracle.counter().for_point(point);
    match hsja_walk(oracle, point, x, y, cfg, bounds, rng) {
        Err(Error::NoAdversarialFound { .. }) => {
            let used = oracle.counter().for_point(point) - before;
            Ok(Walk {
                estimate: DistanceEstimate {
                    value: f64::INFINITY,
                    method: DistanceMethod::Walk,
                    queries: used,
                    converged: false,
                },
                trajectory: vec![],
            })
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRobustnessConfig {
    pub noise: NoiseKind,
    pub num_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEstimate {
    /// Fraction of perturbed copies that keep the true label.
    pub score: f64,
    pub queries: u64,
}

const NOISE_CHUNK: usize = 1000;

pub fn noise_robustness(
    oracle: &LabelOracle,
    point: PointId,
    x: &[f64],
    y: usize,
    schema: &FeatureSchema,
    cfg: &NoiseRobustnessConfig,
    rng: &mut RngStream,
) -> Result<RobustnessEstimate> {
    if cfg.num_queries == 0 {
        return Err(Error::Config("noise robustness needs at least one query".into()));
    }
    if oracle.query(point, x)? != y {
        return Ok(RobustnessEstimate {
            score: 0.0,
            queries: 1,
        });
    }
    let mut correct = 0usize;
    let mut left = cfg.num_queries;
    while left > 0 {
        let n = left.min(NOISE_CHUNK);
        let batch = cfg.noise.perturb(x, schema, n, rng)?;
        correct += oracle
            .query_batch(point, &batch)?
            .iter()
            .filter(|&&l| l == y)
            .count();
        left -= n;
    }
    Ok(RobustnessEstimate {
        score: correct as f64 / cfg.num_queries as f64,
        queries: 1 + cfg.num_queries as u64,
    })
}

const WHITEBOX_BISECT_TOL: f64 = 1e-5;
const DEEPFOOL_OVERSHOOT: f64 = 0.02;

fn whitebox_bisect(model: &Classifier, x: &[f64], adv: &[f64], y: usize) -> Result<Vec<f64>> {
    let len = l2_distance(x, adv);
    let (mut lo, mut hi) = (0.0, 1.0);
    while (hi - lo) * len > WHITEBOX_BISECT_TOL {
        let mid = 0.5 * (lo + hi);
        if model.predict_label(&lerp(x, adv, mid))? != y {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lerp(x, adv, hi))
}

/// Gradient-based upper bound on the boundary distance: margin-linearized
/// steps until misclassified, bisection back toward `x`, then walk updates
/// driven by exact margin gradients. Reports `converged = false` with an
/// infinite value if no misclassified point is reached in `steps`.
pub fn whitebox_distance(model: &Classifier, x: &[f64], y: usize, steps: usize) -> Result<DistanceEstimate> {
    if model.predict_label(x)? != y {
        return Ok(DistanceEstimate::new(0.0, DistanceMethod::WhiteBox, 0));
    }
    let mut cur = x.to_vec();
    let mut adv = None;
    for _ in 0..steps {
        let m = model.margin(&cur, y)?;
        if m < 0.0 {
            adv = Some(cur.clone());
            break;
        }
        let g = model.input_gradient(&cur, y)?;
        let gg = dot(&g, &g);
        if gg == 0.0 {
            break;
        }
        let k = (m + 1e-12) / gg * (1.0 + DEEPFOOL_OVERSHOOT);
        for (c, gi) in cur.iter_mut().zip(&g) {
            *c -= k * gi;
        }
    }
    if adv.is_none() && model.predict_label(&cur)? != y {
        adv = Some(cur);
    }
    let Some(adv) = adv else {
        return Ok(DistanceEstimate {
            value: f64::INFINITY,
            method: DistanceMethod::WhiteBox,
            queries: 0,
            converged: false,
        });
    };

    let mut best_pt = whitebox_bisect(model, x, &adv, y)?;
    let mut best = l2_distance(&best_pt, x);
    for t in 1..=steps {
        let g = model.input_gradient(&best_pt, y)?;
        let gn = l2_norm(&g);
        if gn == 0.0 || best == 0.0 {
            break;
        }
        let mut xi = best / (t as f64).sqrt();
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = best_pt.iter().zip(&g).map(|(b, gi)| b - xi * gi / gn).collect();
            if model.predict_label(&cand)? != y {
                let proj = whitebox_bisect(model, x, &cand, y)?;
                let d = l2_distance(&proj, x);
                if d < best {
                    best = d;
                    best_pt = proj;
                    improved = true;
                }
                break;
            }
            xi /= 2.0;
        }
        if !improved && t > 3 {
            break;
        }
    }
    Ok(DistanceEstimate::new(best, DistanceMethod::WhiteBox, 0))
}
