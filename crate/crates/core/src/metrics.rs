//! Confusion matrices and the headline binary scores.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

/// Rows are the true class, columns the predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::usage(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Confusion {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::usage(format!(
                "class pair ({truth}, {pred}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Counts of another matrix added in (confusions are additive).
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::usage("cannot merge confusions of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::new(classes)?;
    for (&p, &t) in preds.iter().zip(labels) {
        c.record(t, p)?;
    }
    Ok(c)
}

/// Scores relative to a positive class. `None` marks a 0/0 ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    /// Percent.
    pub error_rate: f64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One-vs-rest reduction around `positive`, then the four ratios.
pub fn binary_metrics(c: &Confusion, positive: usize) -> Result<BinaryMetrics> {
    if positive >= c.classes {
        return Err(Error::usage(format!(
            "positive class {positive} out of range for {} classes",
            c.classes
        )));
    }
    let n = c.total();
    if n == 0 {
        return Err(Error::usage("confusion matrix is empty"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for t in 0..c.classes {
        for p in 0..c.classes {
            let k = c.get(t, p);
            match (t == positive, p == positive) {
                (true, true) => tp += k,
                (false, true) => fp += k,
                (true, false) => fn_ += k,
                (false, false) => tn += k,
            }
        }
    }
    let accuracy = (tp + tn) as f64 / n as f64;
    Ok(BinaryMetrics {
        tp,
        fp,
        fn_,
        tn,
        accuracy,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        error_rate: 100.0 * (1.0 - accuracy),
    })
}

pub struct Report<'a> {
    pub confusion: &'a Confusion,
    pub metrics: BinaryMetrics,
    pub class_names: &'a [String],
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl Report<'_> {
    pub fn key_values(&self) -> String {
        let m = &self.metrics;
        format!(
            "accuracy={:.6}\nprecision={}\nrecall={}\nspecificity={}\nerror_rate={:.6}\nn={}\n",
            m.accuracy,
            show(m.precision),
            show(m.recall),
            show(m.specificity),
            m.error_rate,
            self.confusion.total()
        )
    }

    pub fn table(&self) -> String {
        let k = self.confusion.classes;
        let name = |i: usize| self.class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
        let width = (0..k)
            .map(|i| name(i).len())
            .chain([10, self.confusion.total().to_string().len()])
            .max()
            .unwrap_or(10);
        let mut s = format!("{:<width$}", "true\\pred");
        for p in 0..k {
            write!(s, "  {:>width$}", name(p)).unwrap();
        }
        s.push('\n');
        for t in 0..k {
            write!(s, "{:<width$}", name(t)).unwrap();
            for p in 0..k {
                write!(s, "  {:>width$}", self.confusion.get(t, p)).unwrap();
            }
            s.push('\n');
        }
        s.push('\n');
        let m = &self.metrics;
        for (label, value) in [
            ("accuracy", format!("{:.6}", m.accuracy)),
            ("precision", show(m.precision)),
            ("recall", show(m.recall)),
            ("specificity", show(m.specificity)),
            ("error_rate", format!("{:.3}%", m.error_rate)),
        ] {
            writeln!(s, "{label:<12} {value:>12}").unwrap();
        }
        s
    }
}

impl fmt::Display for Report<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\n{}", self.table(), self.key_values())
    }
}

/// Parse a `key=value` metrics block back into pairs.
pub fn parse_key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
