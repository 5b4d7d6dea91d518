//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line
//! straight to stderr, so the lines show up even when output is captured.
//!
//! The full suite trains a few dozen models and runs several million label
//! queries; expect roughly an hour on one core. Set `MIAUDIT_CRITERIA=2,9`
//! to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use miaudit_core::attacks::tune_threshold;
use miaudit_core::boundary::{analytic_linear_distance, hsja_distance, whitebox_distance};
use miaudit_core::data::{augmentation_set, split_disjoint, ImageShape};
use miaudit_core::harness::{emit_report, load_report, run_experiment, AttackResult};
use miaudit_core::model::{train_classifier, Activation};
use miaudit_core::numerics::{argmax, softmax};
use miaudit_core::outlier::{find_outliers, neighbor_counts};
use miaudit_core::{
    Architecture, AugmentationSpec, Classifier, ConfidenceOracle, DefenseWrapperSpec, EvaluationReport,
    ExampleRecord, ExperimentConfig, FeatureBox, FeatureEmbedding, FeatureSchema, HsjaConfig, OutlierParams,
    RngStream, TrainConfig,
};

/// Gap-attack identity tolerance: a few ulps around 1/2.
const GAP_EPS: f64 = 1e-12;
const LINEAR_MODELS: usize = 50;
const LINEAR_POINTS: usize = 20;
const LINEAR_REL_ERR: f64 = 0.02;
const LINEAR_MIN_FRACTION: f64 = 0.95;
const WHITEBOX_ABS_ERR: f64 = 1e-4;
/// Half-width of the band around each published accuracy.
const TABLE_TOL: f64 = 0.04;
const SURROGATE_TOL: f64 = 0.05;
const MASKED_TOL: f64 = 0.02;
const DEFENDED_BAND: f64 = 0.03;
/// Smallest test-accuracy drop that counts as a measurable utility cost.
const MIN_UTILITY_LOSS: f64 = 0.02;
const OUTLIER_VANISH: f64 = 0.02;
const DP_CLIP: f64 = 2.0;
const DP_NOISE: f64 = 8.0;
const STRONG_L2: f64 = 1.0;
const WEAK_L2: f64 = 1e-4;
const DROPOUT: f64 = 0.5;

/// Published attack accuracies each reproduction is held to.
const MNIST_TABLE: [(&str, f64); 5] = [
    ("gap", 0.532),
    ("confidence-vector", 0.557),
    ("augmentation", 0.539),
    ("boundary", 0.578),
    ("combined", 0.587),
];
const ADULT_TABLE: [(&str, f64); 3] = [("gap", 0.587), ("confidence-vector", 0.599), ("noise", 0.587)];
const SURROGATES: [(&str, f64); 2] = [
    ("purchase-surrogate.json", 0.874),
    ("location-surrogate.json", 0.892),
];
const CONFIDENCE_ATTACKS: [&str; 2] = ["confidence-threshold", "confidence-vector"];

fn emit(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Criterion {
    id: u8,
    title: &'static str,
    checks: Vec<(bool, String)>,
    error: Option<String>,
}

impl Criterion {
    fn new(id: u8, title: &'static str) -> Self {
        Self {
            id,
            title,
            checks: Vec::new(),
            error: None,
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.checks.push((ok, what.into()));
    }

    fn note(&mut self, what: impl Into<String>) {
        self.checks.push((true, format!("note: {}", what.into())));
    }

    fn passed(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.0)
    }

    fn status_line(&self) -> String {
        format!(
            "criterion {} {}: {}",
            self.id,
            if self.passed() { "PASS" } else { "FAIL" },
            self.title
        )
    }

    fn print(&self) {
        emit(&self.status_line());
        for (ok, what) in &self.checks {
            emit(&format!("    {} {what}", if *ok { "ok  " } else { "MISS" }));
        }
        if let Some(e) = &self.error {
            emit(&format!("    error: {e}"));
        }
    }
}

type Res<T> = Result<T, String>;

fn in_band(x: f64, centre: f64, tol: f64) -> bool {
    (x - centre).abs() <= tol
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Experiments shared between criteria, run at most once each.
#[derive(Default)]
struct Runs {
    all: Vec<EvaluationReport>,
    cache: BTreeMap<String, EvaluationReport>,
}

impl Runs {
    fn get(&mut self, key: &str, cfg: impl FnOnce() -> Res<ExperimentConfig>) -> Res<EvaluationReport> {
        if let Some(r) = self.cache.get(key) {
            return Ok(r.clone());
        }
        let cfg = cfg()?;
        emit(&format!("  running {key}"));
        let start = std::time::Instant::now();
        let exp = run_experiment(&cfg).map_err(|e| format!("{key}: {e}"))?;
        emit(&format!(
            "  finished {key} in {:.0}s",
            start.elapsed().as_secs_f64()
        ));
        self.all.push(exp.report.clone());
        self.cache.insert(key.to_string(), exp.report.clone());
        Ok(exp.report)
    }
}

fn load(name: &str) -> Res<ExperimentConfig> {
    ExperimentConfig::load(&configs_dir().join(name)).map_err(|e| format!("{name}: {e}"))
}

fn with_memguard(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.name.push_str("+memguard");
    cfg.defense = vec![DefenseWrapperSpec::Memguard];
    cfg
}

fn accuracy(r: &EvaluationReport, attack: &str) -> Res<f64> {
    r.metrics_for(attack)
        .map(|m| m.metrics.accuracy)
        .ok_or_else(|| format!("{}: no attack `{attack}`", r.name))
}

fn attack<'a>(r: &'a EvaluationReport, name: &str) -> Res<&'a AttackResult> {
    r.attack(name)
        .ok_or_else(|| format!("{}: no attack `{name}`", r.name))
}

/// Label-only rows compared as serialized bytes.
fn label_only_rows_identical(c: &mut Criterion, plain: &EvaluationReport, masked: &EvaluationReport) {
    for a in plain.attacks.iter().filter(|a| a.label_only) {
        let same = masked
            .attack(&a.name)
            .is_some_and(|b| serde_json::to_string(a).unwrap() == serde_json::to_string(b).unwrap());
        c.check(
            same,
            format!("{}: `{}` bit-identical under memguard", plain.name, a.name),
        );
    }
}

fn masked_confidence_attacks(c: &mut Criterion, masked: &EvaluationReport) -> Res<()> {
    for name in CONFIDENCE_ATTACKS {
        if masked.attack(name).is_none() {
            continue;
        }
        let acc = accuracy(masked, name)?;
        c.check(
            in_band(acc, 0.5, MASKED_TOL),
            format!(
                "{}: {name} {} within 50 ± {}",
                masked.name,
                pct(acc),
                pct(MASKED_TOL)
            ),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 1

fn gap_identity(c: &mut Criterion, r: &EvaluationReport) {
    let members = r.truth.iter().filter(|t| t.member).count();
    c.check(
        2 * members == r.truth.len(),
        format!(
            "{}: balanced evaluation set ({members} of {})",
            r.name,
            r.truth.len()
        ),
    );
    match r.metrics_for("gap") {
        Some(m) => {
            let expect = 0.5 + (r.metrics.acc_train - r.metrics.acc_test) / 2.0;
            let err = (m.metrics.accuracy - expect).abs();
            c.check(
                err <= GAP_EPS,
                format!(
                    "{}: gap {} vs identity, |err| = {err:.1e}",
                    r.name,
                    pct(m.metrics.accuracy)
                ),
            );
        }
        None => c.note(format!("{}: no gap attack configured", r.name)),
    }
}

fn synthetic_gap_configs() -> Vec<ExperimentConfig> {
    let archs = [
        serde_json::json!({"kind": "logistic"}),
        serde_json::json!({"kind": "mlp", "hidden": [16]}),
        serde_json::json!({"kind": "mlp", "hidden": [32, 16], "activation": "relu"}),
    ];
    let mut out = Vec::new();
    for (i, arch) in archs.iter().enumerate() {
        for (j, size) in [40, 150].into_iter().enumerate() {
            let v = serde_json::json!({
                "name": format!("gap-{i}-{j}"),
                "seed": 10 + (3 * i + j) as u64,
                "dataset": {"kind": "synthetic", "num_classes": 4, "num_features": 24, "num_records": 1200, "flip": 0.25, "data_seed": i as u64},
                "split": {"size": size},
                "target": {"architecture": arch, "train": {"epochs": 25}},
                "attacks": [{"kind": "gap"}]
            });
            out.push(ExperimentConfig::from_value(v, Path::new(".")).unwrap());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Criterion 2

fn linear_equivalence(c: &mut Criterion) -> Res<()> {
    let root = RngStream::new(2024, 0);
    let (mut walks, mut close) = (0usize, 0usize);
    let (mut worst_wb, mut worst_rel) = (0.0f64, 0.0f64);
    for m in 0..LINEAR_MODELS {
        let dim = 2 + m % 19;
        let mut rng = root.derive(m as u64);
        let normal: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let records: Vec<ExampleRecord> = (0..200)
            .map(|i| {
                let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                let s: f64 = x.iter().zip(&normal).map(|(a, b)| a * b).sum::<f64>() + 0.3 * rng.normal();
                ExampleRecord {
                    id: i,
                    x,
                    y: usize::from(s > 0.0),
                }
            })
            .collect();
        let model = train_classifier(
            &Architecture::logistic(dim, 2),
            &records,
            &TrainConfig::default(),
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let (w, b) = model
            .linear_params()
            .ok_or("logistic model without linear parameters")?;
        let bounds = FeatureBox(
            (0..dim)
                .map(|j| {
                    let col = records.iter().map(|r| r.x[j]);
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    (lo - 1.0, hi + 1.0)
                })
                .collect(),
        );
        let model = Arc::new(model);
        let labels = ConfidenceOracle::new(model.clone()).labels();
        let correct: Vec<&ExampleRecord> = records
            .iter()
            .filter(|r| model.predict_label(&r.x).unwrap() == r.y)
            .take(LINEAR_POINTS)
            .collect();
        for r in correct {
            let truth = analytic_linear_distance(&w, b, &r.x)
                .map_err(|e| e.to_string())?
                .value;
            let walk = hsja_distance(
                &labels,
                r.id,
                &r.x,
                r.y,
                &HsjaConfig::default(),
                &bounds,
                &mut rng.derive(r.id),
            )
            .map_err(|e| e.to_string())?;
            let rel = (walk.value - truth).abs() / truth;
            walks += 1;
            if rel <= LINEAR_REL_ERR {
                close += 1;
            }
            worst_rel = worst_rel.max(rel);
            let wb = whitebox_distance(&model, &r.x, r.y, 100).map_err(|e| e.to_string())?;
            worst_wb = worst_wb.max((wb.value - truth).abs());
        }
    }
    let frac = close as f64 / walks as f64;
    c.check(
        frac >= LINEAR_MIN_FRACTION,
        format!(
            "walk within {}% of analytic distance for {close}/{walks} points ({}%), worst {:.3}",
            pct(LINEAR_REL_ERR),
            pct(frac),
            worst_rel
        ),
    );
    c.check(
        worst_wb <= WHITEBOX_ABS_ERR,
        format!("white-box max |err| {worst_wb:.2e} ≤ {WHITEBOX_ABS_ERR:.0e}"),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 3

fn mnist_table(c: &mut Criterion, runs: &mut Runs) -> Res<()> {
    let plain = runs.get("mnist-1000", || load("mnist-1000.json"))?;
    c.note(format!(
        "target acc_train {} acc_test {}",
        pct(plain.metrics.acc_train),
        pct(plain.metrics.acc_test)
    ));
    for (name, published) in MNIST_TABLE {
        let acc = accuracy(&plain, name)?;
        c.check(
            in_band(acc, published, TABLE_TOL),
            format!("{name} {} vs {} ± {}", pct(acc), pct(published), pct(TABLE_TOL)),
        );
    }
    let masked = runs.get("mnist-1000+memguard", || {
        load("mnist-1000.json").map(with_memguard)
    })?;
    let acc = accuracy(&masked, "confidence-vector")?;
    c.check(
        in_band(acc, 0.5, MASKED_TOL),
        format!(
            "memguard confidence-vector {} within 50 ± {}",
            pct(acc),
            pct(MASKED_TOL)
        ),
    );
    label_only_rows_identical(c, &plain, &masked);
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 4

fn tabular_tables(c: &mut Criterion, runs: &mut Runs) -> Res<()> {
    let adult = load("adult.json")?;
    if adult.validate().is_ok() {
        let plain = runs.get("adult", || Ok(adult.clone()))?;
        c.note(format!(
            "adult acc_train {} acc_test {}",
            pct(plain.metrics.acc_train),
            pct(plain.metrics.acc_test)
        ));
        for (name, published) in ADULT_TABLE {
            let acc = accuracy(&plain, name)?;
            c.check(
                in_band(acc, published, TABLE_TOL),
                format!(
                    "adult {name} {} vs {} ± {}",
                    pct(acc),
                    pct(published),
                    pct(TABLE_TOL)
                ),
            );
        }
        let masked = runs.get("adult+memguard", || Ok(with_memguard(adult)))?;
        masked_confidence_attacks(c, &masked)?;
        label_only_rows_identical(c, &plain, &masked);
    } else {
        c.check(false, "adult data files missing");
    }

    // Purchase-100 and Location are not bundled: synthetic stand-ins get the
    // property checks and a recorded generalization gap.
    for (file, published_noise) in SURROGATES {
        let cfg = load(file)?;
        let plain = runs.get(&cfg.name.clone(), || Ok(cfg.clone()))?;
        gap_identity(c, &plain);
        let gap = plain.metrics.acc_train - plain.metrics.acc_test;
        c.note(format!(
            "{}: train-test gap {} (acc_train {}, acc_test {})",
            plain.name,
            pct(gap),
            pct(plain.metrics.acc_train),
            pct(plain.metrics.acc_test)
        ));
        let noise = accuracy(&plain, "noise")?;
        c.note(format!(
            "{}: noise robustness {}, {} the ±{} band around {} published for the real data",
            plain.name,
            pct(noise),
            if in_band(noise, published_noise, SURROGATE_TOL) {
                "inside"
            } else {
                "outside"
            },
            pct(SURROGATE_TOL),
            pct(published_noise)
        ));
        let masked = runs.get(&format!("{}+memguard", cfg.name), || Ok(with_memguard(cfg)))?;
        masked_confidence_attacks(c, &masked)?;
        label_only_rows_identical(c, &plain, &masked);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 5

fn augmented_training(c: &mut Criterion, runs: &mut Runs) -> Res<()> {
    let variant = |d: usize| {
        move || {
            let mut cfg = load("cnn-augmentation.json")?;
            cfg.name = format!("cnn-augmentation-d{d}");
            cfg.target.train.augmentation = (d > 0).then_some(AugmentationSpec::Translation { d });
            Ok(cfg)
        }
    };
    let base = runs.get("cnn-augmentation-d0", variant(0))?;
    for d in [1, 3] {
        let r = runs.get(&format!("cnn-augmentation-d{d}"), variant(d))?;
        let aug = format!("augmentation-d{d}");
        c.check(
            r.metrics.acc_test > base.metrics.acc_test,
            format!(
                "d={d}: acc_test {} > {} without augmentation",
                pct(r.metrics.acc_test),
                pct(base.metrics.acc_test)
            ),
        );
        let (now, before) = (accuracy(&r, &aug)?, accuracy(&base, &aug)?);
        c.check(
            now > before,
            format!("d={d}: {aug} {} > {} on the d=0 model", pct(now), pct(before)),
        );
        let cv = accuracy(&r, "confidence-vector")?;
        c.check(
            now > cv,
            format!("d={d}: {aug} {} > confidence-vector {}", pct(now), pct(cv)),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 6

fn query_budget_shape(c: &mut Criterion, runs: &mut Runs) -> Res<()> {
    let r = runs.get("augmentation-sweep", || load("augmentation-sweep.json"))?;
    let gap = accuracy(&r, "gap")?;
    c.note(format!("gap baseline {}", pct(gap)));
    let families: [(&str, &[u32], &[u32]); 2] = [
        ("rotation", &[1, 2, 4, 8], &[12, 15]),
        ("translation", &[1, 2], &[3, 4]),
    ];
    for (family, inside, outside) in families {
        let mut best = f64::NEG_INFINITY;
        for m in inside {
            let acc = accuracy(&r, &format!("{family}-{m}"))?;
            best = best.max(acc);
            c.check(acc > gap, format!("{family} {m}: {} > gap", pct(acc)));
        }
        for m in outside {
            let acc = accuracy(&r, &format!("{family}-{m}"))?;
            c.check(
                acc < best,
                format!("{family} {m}: {} below in-range best {}", pct(acc), pct(best)),
            );
        }
    }

    let mnist = runs.get("mnist-1000", || load("mnist-1000.json"))?;
    let curve = &attack(&mnist, "boundary")?.budget_curve;
    let points: Vec<String> = curve
        .iter()
        .map(|p| format!("{}:{}", p.budget, pct(p.metrics.accuracy)))
        .collect();
    let monotone = curve
        .windows(2)
        .all(|w| w[0].budget < w[1].budget && w[1].metrics.accuracy >= w[0].metrics.accuracy);
    c.check(
        monotone && curve.last().is_some_and(|p| p.budget == 2500),
        format!("boundary accuracy non-decreasing in budget: {}", points.join(" ")),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 7

fn defense_variant(name: &'static str) -> impl FnOnce() -> Res<ExperimentConfig> {
    move || {
        let mut cfg = load("mnist-defenses.json")?;
        cfg.name = format!("mnist-{name}");
        let t = &mut cfg.target;
        match name {
            "undefended" => {}
            "strong-l2" => t.train.l2 = STRONG_L2,
            "dp-sgd" => {
                t.dp = Some(miaudit_core::model::DpConfig {
                    clip_norm: DP_CLIP,
                    noise_multiplier: DP_NOISE,
                })
            }
            "dropout" => t.train.dropout = DROPOUT,
            "weak-l2" => t.train.l2 = WEAK_L2,
            other => return Err(format!("unknown defense {other}")),
        }
        Ok(cfg)
    }
}

fn defense_monotonicity(c: &mut Criterion, runs: &mut Runs) -> Res<()> {
    let base = runs.get("mnist-undefended", defense_variant("undefended"))?;
    c.note(format!("undefended acc_test {}", pct(base.metrics.acc_test)));
    for name in ["strong-l2", "dp-sgd"] {
        let r = runs.get(&format!("mnist-{name}"), defense_variant(name))?;
        for m in &r.metrics.attacks {
            c.check(
                in_band(m.metrics.accuracy, 0.5, DEFENDED_BAND),
                format!(
                    "{name}: {} {} within 50 ± {}",
                    m.attack,
                    pct(m.metrics.accuracy),
                    pct(DEFENDED_BAND)
                ),
            );
        }
        let loss = base.metrics.acc_test - r.metrics.acc_test;
        c.check(
            loss >= MIN_UTILITY_LOSS,
            format!(
                "{name}: acc_test {} (loss {})",
                pct(r.metrics.acc_test),
                pct(loss)
            ),
        );
    }
    for name in ["dropout", "weak-l2"] {
        let r = runs.get(&format!("mnist-{name}"), defense_variant(name))?;
        let top = r
            .metrics
            .attacks
            .iter()
            .max_by(|a, b| a.metrics.accuracy.total_cmp(&b.metrics.accuracy))
            .ok_or("no attacks")?;
        c.check(
            !in_band(top.metrics.accuracy, 0.5, DEFENDED_BAND),
            format!(
                "{name}: {} still reaches {}",
                top.attack,
                pct(top.metrics.accuracy)
            ),
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 8

fn boundary_precisions(r: &EvaluationReport) -> Res<(Option<f64>, f64, usize)> {
    let o = r
        .outliers
        .as_ref()
        .ok_or_else(|| format!("{}: no outlier analysis", r.name))?;
    let p = o
        .precision
        .iter()
        .find(|p| p.attack == "boundary")
        .ok_or_else(|| format!("{}: no boundary precision", r.name))?;
    Ok((p.outlier_precision, p.full_precision, o.outliers.len()))
}

fn outlier_uplift(c: &mut Criterion, runs: &mut Runs) -> Res<()> {
    let plain = runs.get("mnist-1000", || load("mnist-1000.json"))?;
    let (out, full, n) = boundary_precisions(&plain)?;
    c.check(
        out.is_some_and(|p| p >= full),
        format!(
            "undefended: boundary precision on {n} outliers {} ≥ {} overall",
            out.map_or("undefined".into(), pct),
            pct(full)
        ),
    );
    for name in ["strong-l2", "dp-sgd"] {
        let r = runs.get(&format!("mnist-{name}"), defense_variant(name))?;
        let (out, full, n) = boundary_precisions(&r)?;
        let msg = match out {
            Some(p) => format!(
                "{name}: outlier precision {} vs {} overall on {n} outliers",
                pct(p),
                pct(full)
            ),
            None => format!("{name}: no outlier predicted a member ({n} outliers)"),
        };
        c.check(out.is_none_or(|p| p - full <= OUTLIER_VANISH), msg);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Criterion 9

fn finite_difference_gradients(c: &mut Criterion) {
    let mut rng = RngStream::new(9, 0);
    let shape = ImageShape {
        height: 8,
        width: 8,
        channels: 1,
    };
    let models = [
        ("logistic", Architecture::logistic(64, 2)),
        ("mlp tanh", Architecture::mlp(64, 4, vec![8, 5], Activation::Tanh)),
        (
            "mlp leaky",
            Architecture::mlp(64, 4, vec![7], Activation::LeakyRelu),
        ),
        ("cnn", Architecture::cnn(shape, 3, vec![2, 3], 1, vec![6])),
    ];
    for (name, arch) in models {
        let model = Classifier::init(&arch, &mut rng).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let x: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
            let y = model.predict_label(&x).unwrap();
            let g = model.input_gradient(&x, y).unwrap();
            let h = 1e-6;
            for (j, gj) in g.iter().enumerate() {
                let (mut up, mut down) = (x.clone(), x.clone());
                up[j] += h;
                down[j] -= h;
                let fd = (model.margin(&up, y).unwrap() - model.margin(&down, y).unwrap()) / (2.0 * h);
                worst = worst.max((fd - gj).abs() / (1.0 + gj.abs()));
            }
        }
        c.check(
            worst < 1e-5,
            format!("{name}: input gradient vs central differences, worst {worst:.1e}"),
        );
    }
}

fn softmax_and_wrappers(c: &mut Criterion) {
    let mut rng = RngStream::new(19, 0);
    let (mut sums, mut shifts, mut argmaxes, mut wrapped) = (true, true, true, true);
    for _ in 0..200 {
        let k = 2 + rng.below(12);
        let v: Vec<f64> = (0..k).map(|_| 5.0 * rng.normal()).collect();
        let p = softmax(&v).unwrap();
        sums &= (p.scores().iter().sum::<f64>() - 1.0).abs() < 1e-12;
        let shifted: Vec<f64> = v.iter().map(|x| x + 100.0).collect();
        let q = softmax(&shifted).unwrap();
        shifts &= p
            .scores()
            .iter()
            .zip(q.scores())
            .all(|(a, b)| (a - b).abs() < 1e-12);
        argmaxes &= p.argmax() == argmax(&v);
        for spec in [
            DefenseWrapperSpec::Memguard,
            DefenseWrapperSpec::TopK { k: 1 + rng.below(k) },
            DefenseWrapperSpec::Round {
                digits: rng.below(4) as u32,
            },
        ] {
            wrapped &= argmax(&spec.apply(p.scores())) == p.argmax();
        }
    }
    c.check(sums, "softmax sums to one");
    c.check(shifts, "softmax invariant to logit shifts");
    c.check(argmaxes, "argmax of softmax equals argmax of logits");
    c.check(wrapped, "memguard, top-k and rounding preserve the argmax");
    let canonical = DefenseWrapperSpec::Memguard.apply(&[0.0, 0.1, 0.0, 0.5, 0.1, 0.1, 0.1, 0.05, 0.05, 0.0]);
    c.check(
        (canonical[3] - 0.11).abs() < 1e-15
            && canonical
                .iter()
                .enumerate()
                .all(|(j, &s)| j == 3 || (s - 0.89 / 9.0).abs() < 1e-15),
        "memguard K=10, class 3: 0.11 at the label, 0.89/9 elsewhere",
    );
}

fn augmentation_counts(c: &mut Criterion) {
    let schema = FeatureSchema::image(
        ImageShape {
            height: 9,
            width: 9,
            channels: 1,
        },
        2,
    );
    let x: Vec<f64> = (0..81).map(|i| i as f64 / 81.0).collect();
    let rot = augmentation_set(&x, &schema, &AugmentationSpec::Rotation { r: 7.0 }).unwrap();
    c.check(rot.len() == 3 && rot[0] == x, "rotation: N = 3, source first");
    let ok = (1..=4).all(|d| {
        let set = augmentation_set(&x, &schema, &AugmentationSpec::Translation { d }).unwrap();
        set.len() == 4 * d + 1 && set[0] == x
    });
    c.check(ok, "translation: N = 4d + 1 for d = 1..4, source first");
}

fn label_only_invariance(c: &mut Criterion) {
    let mut rng = RngStream::new(29, 0);
    let model =
        Arc::new(Classifier::init(&Architecture::mlp(10, 5, vec![12], Activation::Tanh), &mut rng).unwrap());
    let raw = ConfidenceOracle::new(model.clone());
    let specs = [
        DefenseWrapperSpec::Memguard,
        DefenseWrapperSpec::TopK { k: 2 },
        DefenseWrapperSpec::Round { digits: 1 },
    ];
    let mut same = true;
    for spec in specs {
        let labels = raw.wrap(spec).unwrap().labels();
        for i in 0..300 {
            let x: Vec<f64> = (0..10).map(|_| 3.0 * rng.normal()).collect();
            same &= labels.query(i, &x).unwrap() == model.predict_label(&x).unwrap();
        }
    }
    c.check(
        same,
        "label oracle behind every wrapper returns the model's labels",
    );
}

fn threshold_grid_oracle(c: &mut Criterion) {
    let mut rng = RngStream::new(39, 0);
    let bal = |m: &[f64], n: &[f64], t: f64| {
        let tpr = m.iter().filter(|&&s| s > t).count() as f64 / m.len() as f64;
        let tnr = n.iter().filter(|&&s| s <= t).count() as f64 / n.len() as f64;
        (tpr + tnr) / 2.0
    };
    let mut ok = true;
    for _ in 0..30 {
        let n = 5 + rng.below(40);
        // Coarse values force ties.
        let m: Vec<f64> = (0..n).map(|_| (rng.normal() * 4.0 + 1.0).round() / 4.0).collect();
        let nm: Vec<f64> = (0..n).map(|_| (rng.normal() * 4.0).round() / 4.0).collect();
        let t = tune_threshold(&m, &nm).unwrap();
        let lo = m.iter().chain(&nm).fold(f64::INFINITY, |a, &b| a.min(b)) - 1.0;
        let hi = m.iter().chain(&nm).fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 1.0;
        let grid = (0..10_000).map(|i| lo + (hi - lo) * i as f64 / 9_999.0);
        let best = grid.map(|g| bal(&m, &nm, g)).fold(f64::MIN, f64::max);
        ok &= (best - t.accuracy).abs() < 1e-12 && bal(&m, &nm, t.tau) == t.accuracy;
    }
    c.check(ok, "tuned threshold matches a 10⁴-point grid search");
}

fn outlier_oracle(c: &mut Criterion) {
    let mut rng = RngStream::new(49, 0);
    let emb: Vec<FeatureEmbedding> = (0..60)
        .map(|i| FeatureEmbedding {
            point: i,
            z: (0..5)
                .map(|_| rng.normal() + if i % 7 == 0 { 3.0 } else { 0.0 })
                .collect(),
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let cos =
        |a: &[f64], b: &[f64]| (1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())).clamp(0.0, 2.0);
    let mut ok = true;
    for delta in [0.05, 0.2, 0.5, 1.0] {
        let gamma = 4;
        let brute: BTreeSet<u64> = emb
            .iter()
            .filter(|a| {
                emb.iter()
                    .filter(|b| b.point != a.point && cos(&a.z, &b.z) <= delta)
                    .count()
                    < gamma
            })
            .map(|a| a.point)
            .collect();
        let found = find_outliers(
            &emb,
            &OutlierParams {
                delta,
                gamma,
                beta: 0.1,
            },
        )
        .unwrap();
        let counts = neighbor_counts(&emb, delta).unwrap();
        ok &= found == brute
            && counts
                .iter()
                .zip(&emb)
                .all(|(&k, a)| (k < gamma) == brute.contains(&a.point));
    }
    c.check(ok, "outlier sets match a brute-force cosine scan");
}

fn splits_and_determinism(c: &mut Criterion) {
    let records: Vec<ExampleRecord> = (0..500)
        .map(|i| ExampleRecord {
            id: i,
            x: vec![i as f64],
            y: (i % 3) as usize,
        })
        .collect();
    let s = split_disjoint(&records, 100, &mut RngStream::new(59, 0)).unwrap();
    let mut seen = BTreeSet::new();
    let all = [
        &s.target_train,
        &s.target_test,
        &s.shadow_train,
        &s.shadow_test,
        &s.remainder,
    ];
    let disjoint = all.iter().flat_map(|p| p.iter()).all(|r| seen.insert(r.id));
    c.check(
        disjoint && seen.len() == 500,
        "split_disjoint partitions the records",
    );

    let cfg = synthetic_gap_configs().remove(3);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    let text = serde_json::to_string(&a.report).unwrap();
    c.check(
        text == serde_json::to_string(&b.report).unwrap(),
        "same config and seed give byte-identical reports",
    );
    let dir = tempfile::tempdir().unwrap();
    emit_report(&a.report, dir.path()).unwrap();
    c.check(
        load_report(&dir.path().join("report.json")).unwrap() == a.report,
        "report JSON round trip",
    );
    let path = dir.path().join("model.json");
    a.target.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    let same = (0..50).all(|i| {
        let x: Vec<f64> = (0..24).map(|j| ((i * 31 + j * 7) % 2) as f64).collect();
        back.predict_confidences(&x).unwrap() == a.target.predict_confidences(&x).unwrap()
    });
    c.check(same, "model checkpoint round trip preserves predictions");
    let members: BTreeSet<u64> = a
        .report
        .truth
        .iter()
        .filter(|t| t.member)
        .map(|t| t.point)
        .collect();
    let all_ids: BTreeSet<u64> = a.report.truth.iter().map(|t| t.point).collect();
    c.check(
        all_ids.len() == a.report.truth.len() && members.len() * 2 == all_ids.len(),
        "evaluation points distinct and balanced",
    );
}

fn property_suite(c: &mut Criterion) {
    finite_difference_gradients(c);
    softmax_and_wrappers(c);
    augmentation_counts(c);
    label_only_invariance(c);
    threshold_grid_oracle(c);
    outlier_oracle(c);
    splits_and_determinism(c);
}

// ---------------------------------------------------------------------------

fn selected() -> BTreeSet<u8> {
    match std::env::var("MIAUDIT_CRITERIA") {
        Ok(list) if !list.trim().is_empty() => {
            list.split(',').filter_map(|s| s.trim().parse().ok()).collect()
        }
        _ => (1..=9).collect(),
    }
}

#[test]
fn acceptance_criteria() {
    let wanted = selected();
    let mut runs = Runs::default();
    let mut done: BTreeMap<u8, Criterion> = BTreeMap::new();

    type Body = fn(&mut Criterion, &mut Runs) -> Res<()>;
    let plan: [(u8, &'static str, Body); 8] = [
        (9, "property suites", |c, _| {
            property_suite(c);
            Ok(())
        }),
        (
            2,
            "walk distance equals the analytic distance on linear models",
            |c, _| linear_equivalence(c),
        ),
        (
            5,
            "augmented training amplifies the matching augmentation attack",
            augmented_training,
        ),
        (
            6,
            "augmentation magnitude window and budget monotonicity",
            query_budget_shape,
        ),
        (
            7,
            "only strong regularization and DP-SGD neutralize the attacks",
            defense_monotonicity,
        ),
        (4, "tabular reproduction and masking invariance", tabular_tables),
        (3, "MNIST reproduction and masking invariance", mnist_table),
        (8, "outlier precision uplift", outlier_uplift),
    ];
    for (id, title, body) in plan {
        if !wanted.contains(&id) {
            continue;
        }
        let mut c = Criterion::new(id, title);
        if let Err(e) = body(&mut c, &mut runs) {
            c.error = Some(e);
        }
        c.print();
        done.insert(id, c);
    }

    if wanted.contains(&1) {
        let mut c = Criterion::new(1, "gap accuracy equals 1/2 + (acc_train - acc_test)/2");
        for cfg in synthetic_gap_configs() {
            match run_experiment(&cfg) {
                Ok(exp) => gap_identity(&mut c, &exp.report),
                Err(e) => c.check(false, format!("{}: {e}", cfg.name)),
            }
        }
        for r in &runs.all {
            gap_identity(&mut c, r);
        }
        c.print();
        done.insert(1, c);
    }

    emit("acceptance summary:");
    for c in done.values() {
        emit(&format!("  {}", c.status_line()));
    }
    let failed: Vec<u8> = done.values().filter(|c| !c.passed()).map(|c| c.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
