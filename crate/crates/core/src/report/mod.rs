//! Seed aggregation and efficiency summaries over evaluation curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation curve of one run (or a seed mean), sorted by step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub method: String,
    pub points: Vec<CurvePoint>,
    /// Steps spent before policy training (pre-training, distillation).
    pub offset_steps: usize,
    pub offset_wall_clock_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub wall_clock_s: f64,
    pub mean: f64,
    pub std: f64,
}

impl Curve {
    pub fn new(method: impl Into<String>, points: Vec<CurvePoint>) -> Self {
        Curve {
            method: method.into(),
            points,
            offset_steps: 0,
            offset_wall_clock_s: 0.0,
        }
    }

    pub fn final_mean(&self) -> Option<f64> {
        self.points.last().map(|p| p.mean)
    }
}

/// `(step, wall_clock_s, eval_mean)` triples of one seed.
pub type SeedCurve = Vec<(usize, f64, f64)>;

/// Pointwise mean and population std over seeds. All seeds must log the
/// same steps.
pub fn aggregate(method: &str, seeds: &[SeedCurve]) -> Result<Curve> {
    let first = seeds.first().ok_or_else(|| Error::Config(format!("no runs to aggregate for {method}")))?;
    for s in seeds {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(Error::Incompatible(format!("runs of {method} log different steps")));
        }
    }
    let k = seeds.len() as f64;
    let points = (0..first.len())
        .map(|i| {
            let mean = seeds.iter().map(|s| s[i].2).sum::<f64>() / k;
            let var = seeds.iter().map(|s| (s[i].2 - mean).powi(2)).sum::<f64>() / k;
            let wall = seeds.iter().map(|s| s[i].1).sum::<f64>() / k;
            CurvePoint {
                step: first[i].0,
                wall_clock_s: wall,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(Curve::new(method, points))
}

/// Mean evaluation return over the final 10% of the curve's steps.
pub fn asymptote(curve: &Curve) -> Result<f64> {
    let last = curve
        .points
        .last()
        .ok_or_else(|| Error::Config(format!("curve of {} is empty", curve.method)))?;
    let from = last.step as f64 * 0.9;
    let tail: Vec<f64> = curve.points.iter().filter(|p| p.step as f64 >= from).map(|p| p.mean).collect();
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Trailing mean over up to `window` points ending at each index.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub const SMOOTHING_WINDOW: usize = 3;
pub const TARGET_FRACTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeToTarget {
    pub method: String,
    pub target_method: String,
    pub threshold: f64,
    /// Policy-training step of the crossing plus the method's offset.
    pub steps: Option<usize>,
    pub wall_clock_s: Option<f64>,
}

impl TimeToTarget {
    pub fn reached(&self) -> bool {
        self.steps.is_some()
    }
}

/// First point whose smoothed return reaches 95% of the target method's
/// asymptote, charged with each method's offset.
pub fn compute_time_to_target(curves: &[Curve], target_method: &str) -> Result<Vec<TimeToTarget>> {
    let target = find(curves, target_method)?;
    let threshold = TARGET_FRACTION * asymptote(target)?;
    Ok(curves
        .iter()
        .map(|c| {
            let means: Vec<f64> = c.points.iter().map(|p| p.mean).collect();
            let hit = trailing_mean(&means, SMOOTHING_WINDOW).iter().position(|&v| v >= threshold);
            TimeToTarget {
                method: c.method.clone(),
                target_method: target_method.to_string(),
                threshold,
                steps: hit.map(|i| c.points[i].step + c.offset_steps),
                wall_clock_s: hit.map(|i| c.points[i].wall_clock_s + c.offset_wall_clock_s),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyAdaptation {
    pub method: String,
    pub target_method: String,
    pub checkpoint_step: usize,
    /// Step actually read: the first logged step at or after the checkpoint.
    pub step: Option<usize>,
    /// Return at `step` as a percentage of the target asymptote.
    pub percent_of_target: Option<f64>,
}

pub fn compute_early_adaptation(curves: &[Curve], target_method: &str, checkpoint_step: usize) -> Result<Vec<EarlyAdaptation>> {
    let target = find(curves, target_method)?;
    let asym = asymptote(target)?;
    Ok(curves
        .iter()
        .map(|c| {
            let point = c.points.iter().find(|p| p.step >= checkpoint_step);
            EarlyAdaptation {
                method: c.method.clone(),
                target_method: target_method.to_string(),
                checkpoint_step,
                step: point.map(|p| p.step),
                percent_of_target: point.map(|p| 100.0 * p.mean / asym),
            }
        })
        .collect())
}

fn find<'a>(curves: &'a [Curve], method: &str) -> Result<&'a Curve> {
    curves
        .iter()
        .find(|c| c.method == method)
        .ok_or_else(|| Error::Config(format!("no curve for target method {method}")))
}

/// Pooled standard deviation of two groups of per-seed values.
pub fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    let var = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0).max(1.0)
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let dof = (na + nb - 2.0).max(1.0);
    (((na - 1.0).max(0.0) * var(a) + (nb - 1.0).max(0.0) * var(b)) / dof).sqrt()
}
