use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    /// Counts at `score >= threshold` predicted positive.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn check(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Contract("confusion counts are all zero".into()));
        }
        Ok(())
    }

    /// `2 TP / (2 TP + FP + FN)`; 0 when nothing is predicted or present.
    pub fn f1(&self) -> Result<f64> {
        self.check()?;
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            log::warn!("F1 undefined without positives; scored as 0");
            return Ok(0.0);
        }
        Ok(2.0 * self.tp as f64 / den as f64)
    }

    pub fn acc(&self) -> Result<f64> {
        self.check()?;
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }

    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }

    /// Mean of TPR and TNR; when one class is absent, the rate of the other.
    pub fn bacc(&self) -> Result<f64> {
        self.check()?;
        Ok(match (self.tpr(), self.tnr()) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("total checked above"),
        })
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> Result<f64> {
        self.check()?;
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return Ok(0.0);
        }
        Ok((tp * tn - fp * fn_) / den.sqrt())
    }
}
