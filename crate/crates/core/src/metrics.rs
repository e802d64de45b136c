//! Occupancy metrics, memory accounting and kernel timing.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{shape_err, Error, Result};

/// Semantic classes with a dynamic flag. Exactly one class is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub dynamic: Vec<bool>,
    pub empty: usize,
}

impl ClassTable {
    pub fn new(names: Vec<String>, dynamic: Vec<bool>, empty: usize) -> Result<Self> {
        if names.len() != dynamic.len() || names.len() < 2 || empty >= names.len() {
            return Err(Error::Argument("class table needs ≥ 2 classes and a valid empty index".into()));
        }
        if dynamic[empty] {
            return Err(Error::Argument("the empty class cannot be dynamic".into()));
        }
        Ok(Self { names, dynamic, empty })
    }

    /// empty, ground, building (static) and vehicle (dynamic).
    pub fn default_four() -> Self {
        Self::new(
            ["empty", "ground", "building", "vehicle"].map(String::from).to_vec(),
            vec![false, false, false, true],
            0,
        )
        .expect("valid table")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(pred: &[usize], gt: &[usize], classes: usize) -> Result<Self> {
        let mut m = Self::new(classes);
        m.accumulate(pred, gt)?;
        Ok(m)
    }

    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err("ConfusionMatrix", gt.len(), pred.len()));
        }
        if let Some(&l) = pred.iter().chain(gt).find(|&&l| l >= self.classes) {
            return Err(Error::Argument(format!("label {l} out of range for {} classes", self.classes)));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let gt: u64 = (0..self.classes).map(|p| self.get(class, p)).sum();
        let pred: u64 = (0..self.classes).map(|g| self.get(g, class)).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    fn mean_over(&self, include: impl Fn(usize) -> bool) -> Option<f64> {
        let ious: Vec<f64> = (0..self.classes).filter(|&c| include(c)).filter_map(|c| self.iou(c)).collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn miou(&self, table: &ClassTable) -> Option<f64> {
        self.mean_over(|c| c != table.empty)
    }

    pub fn miou_dynamic(&self, table: &ClassTable) -> Option<f64> {
        self.mean_over(|c| table.dynamic[c])
    }

    /// Occupied-versus-empty IoU.
    pub fn iou_binary(&self, empty: usize) -> Option<f64> {
        let mut tp = 0;
        let mut union = 0;
        for g in 0..self.classes {
            for p in 0..self.classes {
                let n = self.get(g, p);
                let (go, po) = (g != empty, p != empty);
                if go && po {
                    tp += n;
                }
                if go || po {
                    union += n;
                }
            }
        }
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

/// `(mIoU, per-class IoU)`; the empty class is excluded from the mean and
/// classes absent from both inputs are skipped.
pub fn miou(pred: &[usize], gt: &[usize], table: &ClassTable) -> Result<(Option<f64>, Vec<Option<f64>>)> {
    let m = ConfusionMatrix::from_labels(pred, gt, table.len())?;
    let per_class = (0..table.len()).map(|c| m.iou(c)).collect();
    Ok((m.miou(table), per_class))
}

pub fn miou_dynamic(pred: &[usize], gt: &[usize], table: &ClassTable) -> Result<Option<f64>> {
    Ok(ConfusionMatrix::from_labels(pred, gt, table.len())?.miou_dynamic(table))
}

pub fn iou_binary(pred: &[usize], gt: &[usize], table: &ClassTable) -> Result<Option<f64>> {
    Ok(ConfusionMatrix::from_labels(pred, gt, table.len())?.iou_binary(table.empty))
}

/// Serialized bytes per state component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryReport {
    pub frame: usize,
    pub components: Vec<(String, usize)>,
}

impl MemoryReport {
    pub fn total(&self) -> usize {
        self.components.iter().map(|(_, b)| b).sum()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.components.iter().find(|(n, _)| n == name).map(|&(_, b)| b)
    }
}

/// Median wall time of one timed operation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub name: String,
    pub median_ms: f64,
    pub share: f64,
}

pub const WARMUP_RUNS: usize = 3;
pub const TIMED_RUNS: usize = 11;

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median wall time in milliseconds of `f` after `warmup` untimed runs.
pub fn time_median(f: &mut dyn FnMut(), warmup: usize, repeats: usize) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    median(&mut samples)
}

/// Time every named closure; shares are relative to the sum of medians.
pub fn runtime_profile(ops: &mut [(String, Box<dyn FnMut() + '_>)], repeats: usize) -> Vec<ProfileRow> {
    let medians: Vec<(String, f64)> = ops
        .iter_mut()
        .map(|(name, f)| (name.clone(), time_median(f.as_mut(), WARMUP_RUNS, repeats)))
        .collect();
    let total: f64 = medians.iter().map(|(_, m)| m).sum();
    medians
        .into_iter()
        .map(|(name, median_ms)| ProfileRow {
            share: if total > 0.0 { median_ms / total } else { 0.0 },
            name,
            median_ms,
        })
        .collect()
}

/// One `run_id, frame, metric, value` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub frame: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run_id: impl Into<String>, frame: impl ToString, metric: impl Into<String>, value: f64) -> Self {
        Self {
            run_id: run_id.into(),
            frame: frame.to_string(),
            metric: metric.into(),
            value,
        }
    }
}

pub const CSV_HEADER: &str = "run_id,frame,metric,value";

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.run_id, r.frame, r.metric, r.value).unwrap();
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("missing metrics CSV header".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let value = f.get(3).and_then(|v| v.parse().ok());
            match (f.len(), value) {
                (4, Some(value)) => Ok(MetricRow::new(f[0], f[1], f[2], value)),
                _ => Err(Error::Format(format!("bad CSV row {}: {l:?}", i + 2))),
            }
        })
        .collect()
}
