use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Defective,
    Nominal,
}

impl Label {
    pub fn is_defective(self) -> bool {
        self == Label::Defective
    }
}

/// Confusion counts with defective as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// `decisions[i]` is true when item `i` is flagged defective.
    pub fn from_decisions(decisions: &[bool], labels: &[Label]) -> Result<Self, EvalError> {
        if decisions.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                decisions: decisions.len(),
                labels: labels.len(),
            });
        }
        let mut c = Confusion::default();
        for (d, l) in decisions.iter().zip(labels) {
            match (*d, l.is_defective()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn capture_rate(&self) -> Result<f64, EvalError> {
        let defective = self.tp + self.fn_;
        if defective == 0 {
            return Err(EvalError::NoDefectiveItems);
        }
        Ok(self.tp as f64 / defective as f64)
    }

    pub fn filter_rate(&self) -> Result<f64, EvalError> {
        let nominal = self.tn + self.fp;
        if nominal == 0 {
            return Err(EvalError::NoNominalItems);
        }
        Ok(self.tn as f64 / nominal as f64)
    }

    pub fn f_score(&self) -> Result<f64, EvalError> {
        if self.tp + self.fp == 0 {
            return Err(EvalError::DegenerateFScore("tp + fp (no item flagged defective)"));
        }
        if self.tp + self.fn_ == 0 {
            return Err(EvalError::DegenerateFScore("tp + fn (no defective items)"));
        }
        // Harmonic mean of precision and recall, in one rounding.
        Ok((2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64)
    }
}

/// Recall over defective items.
pub fn capture_rate(decisions: &[bool], labels: &[Label]) -> Result<f64, EvalError> {
    Confusion::from_decisions(decisions, labels)?.capture_rate()
}

/// Recall over nominal items.
pub fn filter_rate(decisions: &[bool], labels: &[Label]) -> Result<f64, EvalError> {
    Confusion::from_decisions(decisions, labels)?.filter_rate()
}

/// F1 with defective as the positive class.
pub fn f_score(decisions: &[bool], labels: &[Label]) -> Result<f64, EvalError> {
    Confusion::from_decisions(decisions, labels)?.f_score()
}
