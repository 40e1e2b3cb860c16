//! Adam and the coarse-to-fine registration driver.

use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::gradients::{grad_total, FieldGradient};
use crate::grid::Dims;
use crate::losses::{total_loss, LevelProblem, LossBreakdown, LossWeights};
use crate::volume::{build_pyramid, one_hot, LabelVolume, Volume};
use crate::warp::{sdlogj, superpose, upsample_field, DisplacementField, SdLogJ};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over the components of a displacement field.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    m: Vec<[f64; 3]>,
    v: Vec<[f64; 3]>,
    t: u64,
}

impl Adam {
    pub fn new(dims: Dims, params: AdamParams) -> Self {
        Adam {
            params,
            m: vec![[0.0; 3]; dims.len()],
            v: vec![[0.0; 3]; dims.len()],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[[f64; 3]], &[[f64; 3]]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, field: &mut DisplacementField, grad: &FieldGradient) -> Result<()> {
        check_dims("adam step", field.dims(), grad.dims())?;
        if self.m.len() != grad.vectors().len() {
            return Err(Error::InvalidArgument("optimizer state was built for another grid".into()));
        }
        let AdamParams {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.params;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((u, g), m), v) in field
            .vectors_mut()
            .iter_mut()
            .zip(grad.vectors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for c in 0..3 {
                m[c] = b1 * m[c] + (1.0 - b1) * g[c];
                v[c] = b2 * v[c] + (1.0 - b2) * g[c] * g[c];
                u[c] -= lr * (m[c] / c1) / ((v[c] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub levels: usize,
    /// Iterations per level, coarsest first.
    pub iterations: Vec<usize>,
    pub adam: AdamParams,
    pub weights: LossWeights,
    pub lncc_window: usize,
    pub contour_max_points: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 4,
            iterations: vec![300, 200, 150, 100],
            adam: AdamParams::default(),
            weights: LossWeights::default(),
            lncc_window: 9,
            contour_max_points: 2048,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    /// Settings tuned for synthetic phantoms around 32 voxels a side, where
    /// the displacement is measured in voxels and needs far larger steps.
    pub fn phantom() -> Self {
        RegistrationConfig {
            levels: 3,
            iterations: vec![300, 200, 120],
            adam: AdamParams {
                learning_rate: 0.05,
                ..AdamParams::default()
            },
            lncc_window: 7,
            contour_max_points: 1024,
            temperature: 1.0,
            ..RegistrationConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RegistrationConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.iterations.len() != self.levels {
            return bad(format!(
                "iterations lists {} levels but levels is {}",
                self.iterations.len(),
                self.levels
            ));
        }
        if self.iterations.contains(&0) {
            return bad("every level needs at least one iteration".into());
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", a.learning_rate));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad("Adam needs 0 <= beta < 1 and epsilon > 0".into());
        }
        if self.lncc_window < 3 || self.lncc_window % 2 == 0 {
            return bad(format!("LNCC window {} must be odd and at least 3", self.lncc_window));
        }
        if self.contour_max_points == 0 {
            return bad("contour_max_points must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        self.weights.validate()
    }

    /// Same schedule with the per-level iteration counts rescaled.
    pub fn with_iteration_scale(mut self, s: f64) -> Self {
        for it in &mut self.iterations {
            *it = ((*it as f64 * s).round() as usize).max(1);
        }
        self
    }
}

/// Where a registration gets a segmentation from. Masks are only loaded
/// when some mask-dependent loss weight is positive.
pub trait LabelSource {
    fn load(&self) -> Result<LabelVolume>;
}

impl LabelSource for LabelVolume {
    fn load(&self) -> Result<LabelVolume> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelTrace {
    /// 0 is full resolution.
    pub level: usize,
    pub dims: Dims,
    pub iterations: usize,
    /// Objective total before each step, followed by the value at the kept iterate.
    pub totals: Vec<f64>,
    pub start_total: f64,
    pub end_total: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub field: DisplacementField,
    /// Coarsest level first.
    pub levels: Vec<LevelTrace>,
    pub final_loss: LossBreakdown,
    pub sdlogj: SdLogJ,
    /// True when mask-dependent terms were off for lack of masks.
    pub unsupervised: bool,
}

fn level_problem(
    fixed: &Volume,
    moving: &Volume,
    masks: Option<(&crate::volume::OneHotMask, &crate::volume::OneHotMask)>,
    config: &RegistrationConfig,
    level: usize,
) -> Result<LevelProblem> {
    let p = LevelProblem::new(fixed.clone(), moving.clone(), config.lncc_window)?;
    match masks {
        Some((f, m)) => p.with_masks(
            f.clone(),
            m.clone(),
            config.temperature,
            config.contour_max_points,
            config.seed.wrapping_add(level as u64),
        ),
        None => Ok(p),
    }
}

fn tag(err: Error, level: usize, iteration: usize) -> Error {
    match err {
        Error::NonFinite { term, .. } => Error::NonFinite { term, level, iteration },
        e => e,
    }
}

/// Registers `moving` onto `fixed`, coarse to fine.
///
/// At each finer level the previous field is upsampled and a fresh
/// zero-initialized delta is optimized on `upsampled + delta`. The best
/// iterate seen at each level is kept.
pub fn register_pair(
    fixed: &Volume,
    moving: &Volume,
    fixed_mask: Option<&dyn LabelSource>,
    moving_mask: Option<&dyn LabelSource>,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    check_dims("register_pair", fixed.dims(), moving.dims())?;
    let mut weights = config.weights;
    let mut unsupervised = false;
    let masks = match (fixed_mask, moving_mask) {
        (Some(_), Some(_)) if !weights.uses_masks() => None,
        (Some(f), Some(m)) => {
            let (f, m) = (f.load()?, m.load()?);
            if f.num_classes() != m.num_classes() {
                return Err(Error::ClassMismatch {
                    left: f.num_classes(),
                    right: m.num_classes(),
                });
            }
            check_dims("fixed mask", fixed.dims(), f.dims())?;
            check_dims("moving mask", fixed.dims(), m.dims())?;
            Some((one_hot(&f), one_hot(&m)))
        }
        (None, None) => {
            if weights.uses_masks() {
                warn!("unsupervised mode: seg, prototype and contour weights disabled");
                weights = weights.without_masks();
                unsupervised = true;
            }
            None
        }
        _ => return Err(Error::InvalidArgument("give both masks or neither".into())),
    };

    let fixed_pyr = build_pyramid(fixed, config.levels)?;
    let moving_pyr = build_pyramid(moving, config.levels)?;
    let mask_pyr = match &masks {
        Some((f, m)) => Some((build_pyramid(f, config.levels)?, build_pyramid(m, config.levels)?)),
        None => None,
    };

    let mut field: Option<DisplacementField> = None;
    let mut traces = Vec::with_capacity(config.levels);
    let mut last_problem = None;
    for (step, level) in (0..config.levels).rev().enumerate() {
        let started = Instant::now();
        let (f, m) = (fixed_pyr.level(level), moving_pyr.level(level));
        let level_masks = mask_pyr.as_ref().map(|(a, b)| (a.level(level), b.level(level)));
        let problem = level_problem(f, m, level_masks, config, level)?;
        let base = match &field {
            None => DisplacementField::zeros(f.dims(), f.spacing()),
            Some(prev) => upsample_field(prev, f.dims())?,
        };
        let iterations = config.iterations[step];
        let mut delta = DisplacementField::zeros(f.dims(), f.spacing());
        let mut best = (f64::INFINITY, delta.clone());
        let mut adam = Adam::new(f.dims(), config.adam);
        let mut totals = Vec::with_capacity(iterations + 1);
        for it in 0..iterations {
            let current = superpose(&base, &delta)?;
            let (b, g) = grad_total(&problem, &current, &weights).map_err(|e| tag(e, level, it))?;
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    term: "gradient",
                    level,
                    iteration: it,
                });
            }
            totals.push(b.total);
            if b.total < best.0 {
                best = (b.total, delta.clone());
            }
            adam.step(&mut delta, &g)?;
        }
        let last = superpose(&base, &delta)?;
        let last_total = total_loss(&problem, &last, &weights).map_err(|e| tag(e, level, iterations))?.total;
        if last_total < best.0 {
            best = (last_total, delta);
        }
        totals.push(best.0);
        let result = superpose(&base, &best.1)?;
        let trace = LevelTrace {
            level,
            dims: f.dims(),
            iterations,
            start_total: totals[0],
            end_total: best.0,
            totals,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "level {level} {:?}: {} iterations, loss {:.5} -> {:.5} in {:.2}s",
            trace.dims, iterations, trace.start_total, trace.end_total, trace.seconds
        );
        debug!("level {level} mean |u| {:.4}", result.mean_norm());
        traces.push(trace);
        field = Some(result);
        last_problem = Some(problem);
    }

    let field = field.expect("at least one level");
    let final_loss = total_loss(last_problem.as_ref().expect("at least one level"), &field, &weights)?;
    Ok(RegistrationResult {
        sdlogj: sdlogj(&field),
        field,
        levels: traces,
        final_loss,
        unsupervised,
    })
}
