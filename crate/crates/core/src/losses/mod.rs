//! The registration objective and each of its terms.
//!
//! `L = w1 L_sim + w2 L_smooth + w3 L_seg + w4 L_prototype + w5 L_contour`,
//! where the prototype term is itself `L_contrast + L_align`.

mod contour;
mod dice;
mod lncc;
mod objective;
mod prototype;
mod smooth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contour::{chamfer, extract_contour_points, extract_contour_points_labels, ContourPointSet};
pub use dice::{dice_loss, DICE_EPS};
pub use lncc::{lncc, validate_window, VARIANCE_EPS};
pub use objective::{effective_window, total_loss, LevelProblem, MaskContext};
pub use prototype::{
    align_loss, compute_features, contrast_loss, cosine, extract_prototypes, prototype_loss, AlignOutcome,
    FeatureVolume, PrototypeSet, PrototypeTerms,
};
pub use smooth::smoothness;

pub(crate) use contour::nearest;
pub(crate) use objective::{evaluate_terms, evaluate_weighted, transport};

/// Weights of the five objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sim: f64,
    pub smooth: f64,
    pub seg: f64,
    pub prototype: f64,
    pub contour: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sim: 1.0,
            smooth: 4.0,
            seg: 1.0,
            prototype: 1.0,
            contour: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        sim: 0.0,
        smooth: 0.0,
        seg: 0.0,
        prototype: 0.0,
        contour: 0.0,
    };

    pub fn from_array(w: [f64; 5]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be non-negative, got {w:?}")));
        }
        Ok(LossWeights {
            sim: w[0],
            smooth: w[1],
            seg: w[2],
            prototype: w[3],
            contour: w[4],
        })
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.sim, self.smooth, self.seg, self.prototype, self.contour]
    }

    pub fn validate(&self) -> Result<()> {
        Self::from_array(self.to_array()).map(|_| ())
    }

    pub fn uses_masks(&self) -> bool {
        self.seg > 0.0 || self.prototype > 0.0 || self.contour > 0.0
    }

    /// Same weights with every mask-dependent term switched off.
    pub fn without_masks(&self) -> Self {
        LossWeights {
            seg: 0.0,
            prototype: 0.0,
            contour: 0.0,
            ..*self
        }
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Sim => self.sim,
            Term::Smooth => self.smooth,
            Term::Seg => self.seg,
            Term::Contrast | Term::Align => self.prototype,
            Term::Contour => self.contour,
        }
    }
}

/// Individually differentiable pieces of the objective; the prototype
/// weight applies to both `Contrast` and `Align`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Sim,
    Smooth,
    Seg,
    Contrast,
    Align,
    Contour,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Sim, Term::Smooth, Term::Seg, Term::Contrast, Term::Align, Term::Contour];

    pub fn name(&self) -> &'static str {
        match self {
            Term::Sim => "sim",
            Term::Smooth => "smooth",
            Term::Seg => "seg",
            Term::Contrast => "contrast",
            Term::Align => "align",
            Term::Contour => "contour",
        }
    }

    pub fn from_name(name: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn needs_masks(&self) -> bool {
        !matches!(self, Term::Sim | Term::Smooth)
    }
}

/// A term's value (absent when it was not evaluated) and its weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub value: Option<f64>,
    pub weight: f64,
}

impl TermValue {
    fn weighted(&self) -> f64 {
        self.value.map_or(0.0, |v| self.weight * v)
    }
}

/// Objective value with each term broken out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: TermValue,
    pub smooth: TermValue,
    pub seg: TermValue,
    pub prototype: TermValue,
    pub contrast: Option<f64>,
    pub align: Option<f64>,
    pub contour: TermValue,
}

impl LossBreakdown {
    /// Assembles a breakdown from term values; `total` is their weighted sum.
    pub fn from_terms(values: [Option<f64>; 5], weights: &LossWeights) -> Self {
        let w = weights.to_array();
        let tv = |i: usize| TermValue {
            value: values[i],
            weight: w[i],
        };
        let mut b = LossBreakdown {
            total: 0.0,
            sim: tv(0),
            smooth: tv(1),
            seg: tv(2),
            prototype: tv(3),
            contrast: None,
            align: None,
            contour: tv(4),
        };
        b.total = b.recompute_total();
        b
    }

    pub fn recompute_total(&self) -> f64 {
        self.terms().iter().map(|(_, t)| t.weighted()).sum()
    }

    pub fn terms(&self) -> [(&'static str, TermValue); 5] {
        [
            ("sim", self.sim),
            ("smooth", self.smooth),
            ("seg", self.seg),
            ("prototype", self.prototype),
            ("contour", self.contour),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("breakdown serializes")
    }
}
