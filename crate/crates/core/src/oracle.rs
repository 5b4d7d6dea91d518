//! Counted black-box query interfaces and confidence-masking wrappers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::data::PointId;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::{argmax, ConfidenceVector, Matrix};

/// Score margin given to the predicted class by the MemGuard wrapper.
pub const MEMGUARD_MARGIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseWrapperSpec {
    /// Replaces every vector with the canonical one for its predicted label.
    Memguard,
    /// Keeps the `k` largest scores, zeroes the rest.
    TopK { k: usize },
    /// Reduces scores to `digits` decimals, rounding the predicted class up
    /// and every other class down.
    Round { digits: u32 },
}

impl DefenseWrapperSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match *self {
            DefenseWrapperSpec::Memguard if num_classes < 2 => {
                Err(Error::Config("memguard needs at least two classes".into()))
            }
            DefenseWrapperSpec::TopK { k } if k == 0 || k > num_classes => Err(Error::Config(format!(
                "top-k with k={k} outside [1, {num_classes}]"
            ))),
            _ => Ok(()),
        }
    }

    /// Applies the wrapper to one confidence vector.
    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        let pred = argmax(scores);
        let k = scores.len();
        match *self {
            DefenseWrapperSpec::Memguard => {
                let top = 1.0 / k as f64 + MEMGUARD_MARGIN;
                let rest = (1.0 - top) / (k - 1) as f64;
                (0..k).map(|j| if j == pred { top } else { rest }).collect()
            }
            DefenseWrapperSpec::TopK { k: keep } => {
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut out = vec![0.0; k];
                for &j in &order[..keep] {
                    out[j] = scores[j];
                }
                out
            }
            DefenseWrapperSpec::Round { digits } => {
                let scale = 10f64.powi(digits as i32);
                scores
                    .iter()
                    .enumerate()
                    .map(|(j, &s)| {
                        if j == pred {
                            (s * scale).ceil() / scale
                        } else {
                            (s * scale).floor() / scale
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Thread-safe query accounting: a running total plus counts per target point.
#[derive(Debug, Default)]
pub struct QueryCounter {
    total: AtomicU64,
    per_point: Mutex<BTreeMap<PointId, u64>>,
}

impl QueryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, point: PointId, n: u64) {
        let mut map = self.per_point.lock().expect("counter lock poisoned");
        *map.entry(point).or_insert(0) += n;
        self.total.fetch_add(n, Ordering::SeqCst);
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }

    pub fn for_point(&self, point: PointId) -> u64 {
        self.per_point
            .lock()
            .expect("counter lock poisoned")
            .get(&point)
            .copied()
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<PointId, u64> {
        self.per_point.lock().expect("counter lock poisoned").clone()
    }
}

/// Full confidence-vector access to a (possibly defended) model.
#[derive(Clone, Debug)]
pub struct ConfidenceOracle {
    model: Arc<Classifier>,
    wrappers: Vec<DefenseWrapperSpec>,
    counter: Arc<QueryCounter>,
}

impl ConfidenceOracle {
    pub fn new(model: Arc<Classifier>) -> Self {
        Self {
            model,
            wrappers: Vec::new(),
            counter: Arc::new(QueryCounter::new()),
        }
    }

    /// Adds a wrapper on top of the current pipeline; the counter is shared.
    pub fn wrap(&self, spec: DefenseWrapperSpec) -> Result<Self> {
        spec.validate(self.num_classes())?;
        let mut out = self.clone();
        out.wrappers.push(spec);
        Ok(out)
    }

    pub fn wrap_memguard(&self) -> Result<Self> {
        self.wrap(DefenseWrapperSpec::Memguard)
    }

    pub fn wrap_topk(&self, k: usize) -> Result<Self> {
        self.wrap(DefenseWrapperSpec::TopK { k })
    }

    pub fn wrap_round(&self, digits: u32) -> Result<Self> {
        self.wrap(DefenseWrapperSpec::Round { digits })
    }

    pub fn wrappers(&self) -> &[DefenseWrapperSpec] {
        &self.wrappers
    }

    pub fn counter(&self) -> &QueryCounter {
        &self.counter
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    /// One row of (defended) scores per input row; counts one query per row.
    pub fn query_batch(&self, point: PointId, x: &Matrix) -> Result<Matrix> {
        let mut p = self.model.predict_batch(x)?;
        self.counter.record(point, x.rows() as u64);
        if !self.wrappers.is_empty() {
            let k = p.cols();
            for row in p.as_mut_slice().chunks_exact_mut(k) {
                for w in &self.wrappers {
                    let out = w.apply(row);
                    row.copy_from_slice(&out);
                }
            }
        }
        Ok(p)
    }

    pub fn query(&self, point: PointId, x: &[f64]) -> Result<ConfidenceVector> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let p = self.query_batch(point, &m)?;
        Ok(ConfidenceVector::from_raw(p.into_vec()))
    }

    /// Label-only view sharing this oracle's pipeline and counter.
    pub fn labels(&self) -> LabelOracle {
        LabelOracle { inner: self.clone() }
    }
}

/// Hard-label access: only the argmax of the wrapped confidence vector.
#[derive(Clone, Debug)]
pub struct LabelOracle {
    inner: ConfidenceOracle,
}

impl LabelOracle {
    pub fn new(model: Arc<Classifier>) -> Self {
        ConfidenceOracle::new(model).labels()
    }

    pub fn counter(&self) -> &QueryCounter {
        self.inner.counter()
    }

    pub fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    pub fn query_batch(&self, point: PointId, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self
            .inner
            .query_batch(point, x)?
            .iter_rows()
            .map(argmax)
            .collect())
    }

    pub fn query(&self, point: PointId, x: &[f64]) -> Result<usize> {
        Ok(self.inner.query(point, x)?.argmax())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Architecture};
    use crate::numerics::{argmax_label, RngStream};
    use proptest::prelude::*;

    fn model(seed: u64, dim: usize, k: usize) -> Arc<Classifier> {
        let arch = Architecture::mlp(dim, k, vec![6], Activation::Tanh);
        Arc::new(Classifier::init(&arch, &mut RngStream::new(seed, 0)).unwrap())
    }

    #[test]
    fn undefended_matches_model_and_counts() {
        let m = model(1, 3, 4);
        let o = ConfidenceOracle::new(m.clone());
        let x = [0.1, 0.5, -0.3];
        assert_eq!(o.query(7, &x).unwrap(), m.predict_confidences(&x).unwrap());
        o.query(7, &x).unwrap();
        assert_eq!(o.counter().total(), 2);
        assert!(matches!(o.query(7, &[1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn memguard_canonical_vector() {
        let mut s = vec![0.05; 10];
        s[3] = 0.55;
        let out = DefenseWrapperSpec::Memguard.apply(&s);
        assert!((out[3] - 0.11).abs() < 1e-15);
        for (j, v) in out.iter().enumerate() {
            if j != 3 {
                assert!((v - 0.89 / 9.0).abs() < 1e-15);
            }
        }
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_and_round_formulas() {
        let s = [0.6, 0.3, 0.1];
        assert_eq!(DefenseWrapperSpec::TopK { k: 1 }.apply(&s), vec![0.6, 0.0, 0.0]);
        assert_eq!(DefenseWrapperSpec::TopK { k: 3 }.apply(&s), s.to_vec());
        assert_eq!(
            DefenseWrapperSpec::Round { digits: 0 }.apply(&[0.2, 0.45, 0.35]),
            vec![0.0, 1.0, 0.0]
        );
        assert!(DefenseWrapperSpec::TopK { k: 4 }.validate(3).is_err());
    }

    #[test]
    fn label_oracle_shares_counter_and_pipeline() {
        let m = model(2, 3, 5);
        let o = ConfidenceOracle::new(m.clone()).wrap_memguard().unwrap();
        let l = o.labels();
        let x = [0.3, 0.3, 0.9];
        assert_eq!(l.query(1, &x).unwrap(), argmax_label(&o.query(1, &x).unwrap()));
        assert_eq!(l.query(1, &x).unwrap(), m.predict_label(&x).unwrap());
        assert_eq!(o.counter().total(), 3);
        assert_eq!(l.counter().for_point(1), 3);
    }

    #[test]
    fn concurrent_counts_sum() {
        let o = ConfidenceOracle::new(model(3, 2, 3)).labels();
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let o = &o;
                s.spawn(move || {
                    for i in 0..50 {
                        o.query(t, &[i as f64 * 0.01, 0.2]).unwrap();
                    }
                });
            }
        });
        let snap = o.counter().snapshot();
        assert_eq!(o.counter().total(), 200);
        assert_eq!(snap.values().sum::<u64>(), 200);
        assert!(snap.values().all(|&c| c == 50));
    }

    proptest! {
        #[test]
        fn wrappers_preserve_argmax(seed in any::<u64>(), k in 2usize..12, keep in 1usize..12, digits in 0u32..4) {
            let m = model(seed, 4, k);
            let base = ConfidenceOracle::new(m.clone());
            let specs = [
                DefenseWrapperSpec::Memguard,
                DefenseWrapperSpec::TopK { k: keep.min(k) },
                DefenseWrapperSpec::Round { digits },
            ];
            let mut rng = RngStream::new(seed, 1);
            let rows: Vec<Vec<f64>> = (0..16).map(|_| (0..4).map(|_| 3.0 * rng.normal()).collect()).collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let raw = base.query_batch(0, &x).unwrap();
            for spec in specs {
                let o = base.wrap(spec).unwrap();
                let def = o.query_batch(0, &x).unwrap();
                let labels = o.labels().query_batch(0, &x).unwrap();
                for i in 0..rows.len() {
                    prop_assert_eq!(argmax(def.row(i)), argmax(raw.row(i)));
                    prop_assert_eq!(labels[i], argmax(raw.row(i)));
                }
                if spec == DefenseWrapperSpec::Memguard {
                    for r in def.iter_rows() {
                        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
