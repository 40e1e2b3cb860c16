//! Overlap and smoothness metrics, and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::volume::{one_hot, LabelVolume};
use crate::warp::{norm3, sdlogj, warp_onehot, DisplacementField};

/// `2|A∩B| / (|A| + |B|)` for one class, or `None` when neither side has it.
pub fn dsc(a: &LabelVolume, b: &LabelVolume, class: u16) -> Result<Option<f64>> {
    check_dims("dsc", a.dims(), b.dims())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == class, y == class);
        na += usize::from(ia);
        nb += usize::from(ib);
        inter += usize::from(ia && ib);
    }
    if na + nb == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * inter as f64 / (na + nb) as f64))
}

/// Hard labels carried by a field: one-hot warp, then argmax with a 0.5
/// background threshold.
pub fn warp_labels(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    Ok(warp_onehot(&one_hot(labels), field)?.argmax())
}

/// Mean endpoint error between two fields over voxels where `region` is non-zero.
pub fn endpoint_error(estimate: &DisplacementField, truth: &DisplacementField, region: &LabelVolume) -> Result<f64> {
    check_dims("endpoint_error", estimate.dims(), truth.dims())?;
    check_dims("endpoint_error", estimate.dims(), region.dims())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for ((a, b), &l) in estimate.vectors().iter().zip(truth.vectors()).zip(region.labels()) {
        if l > 0 {
            total += norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("endpoint error over an empty region".into()));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u16,
    pub name: String,
    /// `None` when the class is empty on both sides.
    pub dsc: Option<f64>,
}

/// Scores for one pair at one stage (before or after registration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub pair_id: String,
    pub stage: String,
    pub classes: Vec<ClassScore>,
    pub avg_dsc: Option<f64>,
    /// Population spread of the present per-class scores.
    pub dsc_std: Option<f64>,
    pub sdlogj: f64,
    pub sdlogj_excluded: usize,
}

impl EvalRow {
    fn csv_id(&self) -> String {
        format!("{}:{}", self.pair_id, self.stage)
    }
}

pub fn class_name(names: &[String], class: u16) -> String {
    names
        .get(class as usize - 1)
        .cloned()
        .unwrap_or_else(|| format!("class_{class}"))
}

/// Scores `warped` against `fixed` and measures the field.
pub fn evaluate(
    pair_id: &str,
    stage: &str,
    fixed: &LabelVolume,
    warped: &LabelVolume,
    field: &DisplacementField,
    names: &[String],
) -> Result<EvalRow> {
    check_dims("evaluate", fixed.dims(), warped.dims())?;
    check_dims("evaluate", fixed.dims(), field.dims())?;
    if fixed.num_classes() != warped.num_classes() {
        return Err(Error::ClassMismatch {
            left: fixed.num_classes(),
            right: warped.num_classes(),
        });
    }
    let mut classes = Vec::with_capacity(fixed.num_classes());
    for k in 1..=fixed.num_classes() as u16 {
        classes.push(ClassScore {
            class: k,
            name: class_name(names, k),
            dsc: dsc(fixed, warped, k)?,
        });
    }
    let present: Vec<f64> = classes.iter().filter_map(|c| c.dsc).collect();
    let (avg_dsc, dsc_std) = if present.is_empty() {
        (None, None)
    } else {
        let m = present.iter().sum::<f64>() / present.len() as f64;
        let v = present.iter().map(|d| (d - m).powi(2)).sum::<f64>() / present.len() as f64;
        (Some(m), Some(v.sqrt()))
    };
    let s = sdlogj(field);
    Ok(EvalRow {
        pair_id: pair_id.to_string(),
        stage: stage.to_string(),
        classes,
        avg_dsc,
        dsc_std,
        sdlogj: s.value,
        sdlogj_excluded: s.excluded,
    })
}

/// Before/after rows for a set of pairs, laid out like a results table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per (row, class); `pair_id` is `<pair>:<stage>` and
    /// classes empty on both sides read `absent`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["pair_id", "class_name", "dsc", "avg_dsc", "sdlogj"])
            .expect("in-memory write");
        for row in &self.rows {
            for c in &row.classes {
                w.write_record([
                    row.csv_id(),
                    c.name.clone(),
                    cell(c.dsc),
                    cell(row.avg_dsc),
                    row.sdlogj.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    pub fn summary(&self, stage: &str) -> Option<BatchSummary> {
        BatchSummary::of(self.rows.iter().filter(|r| r.stage == stage))
    }
}

/// Spreads over many pairs. Result tables quote a single ± without saying
/// over what, so both populations are kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub pairs: usize,
    pub mean_dsc: f64,
    /// Spread of per-pair average DSC.
    pub std_across_pairs: f64,
    /// Spread of per-class DSC, pooled over all pairs.
    pub std_across_classes: f64,
    pub mean_sdlogj: f64,
}

impl BatchSummary {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> Option<Self> {
        let rows: Vec<&EvalRow> = rows.into_iter().filter(|r| r.avg_dsc.is_some()).collect();
        if rows.is_empty() {
            return None;
        }
        let avgs: Vec<f64> = rows.iter().filter_map(|r| r.avg_dsc).collect();
        let classes: Vec<f64> = rows.iter().flat_map(|r| r.classes.iter().filter_map(|c| c.dsc)).collect();
        let sds: Vec<f64> = rows.iter().map(|r| r.sdlogj).collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let std = |x: &[f64]| {
            let m = mean(x);
            (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
        };
        Some(BatchSummary {
            pairs: rows.len(),
            mean_dsc: mean(&avgs),
            std_across_pairs: std(&avgs),
            std_across_classes: std(&classes),
            mean_sdlogj: mean(&sds),
        })
    }
}
