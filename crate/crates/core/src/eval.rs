//! Trajectory error metrics and result tables.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{TrajectoryPoint, TruthSample};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no estimate falls inside the evaluation segment (t >= {start} s and within the ground truth)")]
    EmptySegment { start: f64 },
    #[error("ground truth needs at least two samples")]
    ShortTruth,
}

/// How the speed error is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedError {
    /// `|‖v̂‖ − ‖v‖|`
    #[default]
    Scalar,
    /// `‖v̂ − v‖`
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rms_horizontal: f64,
    pub end_horizontal: f64,
    pub rms_vertical: f64,
    pub end_vertical: f64,
    /// RMS speed error under [`MetricsReport::speed_definition`], m/s.
    pub rms_speed: f64,
    pub speed_definition: SpeedError,
    /// RMS of the scalar speed difference, m/s.
    pub rms_speed_scalar: f64,
    /// RMS of the velocity-error norm, m/s.
    pub rms_velocity: f64,
    /// Ground-truth path length over the evaluated segment, m.
    pub segment_length: f64,
    pub segment_duration: f64,
    pub epochs: usize,
}

/// Linear interpolation of the truth stream at time `t`.
struct TruthInterp<'a> {
    truth: &'a [TruthSample],
    vel: Vec<Vector3<f64>>,
}

impl<'a> TruthInterp<'a> {
    fn new(truth: &'a [TruthSample]) -> Self {
        let n = truth.len();
        let vel = (0..n)
            .map(|i| {
                truth[i].v.unwrap_or_else(|| {
                    let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                    (truth[b].p - truth[a].p) / (truth[b].t - truth[a].t)
                })
            })
            .collect();
        Self { truth, vel }
    }

    fn span(&self) -> (f64, f64) {
        (self.truth[0].t, self.truth[self.truth.len() - 1].t)
    }

    fn at(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let tr = self.truth;
        let i = tr.partition_point(|s| s.t <= t).clamp(1, tr.len() - 1);
        let (a, b) = (&tr[i - 1], &tr[i]);
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        (a.p.lerp(&b.p, w), self.vel[i - 1].lerp(&self.vel[i], w))
    }
}

/// Errors of `estimate` against `truth`, evaluated from the first estimate
/// time plus `aiding_window` to the end.
pub fn compute_metrics(
    estimate: &[TrajectoryPoint],
    truth: &[TruthSample],
    aiding_window: f64,
    speed: SpeedError,
) -> Result<MetricsReport, EvalError> {
    if truth.len() < 2 {
        return Err(EvalError::ShortTruth);
    }
    let start = estimate.first().map_or(f64::INFINITY, |e| e.t) + aiding_window;
    let interp = TruthInterp::new(truth);
    let (lo, hi) = interp.span();
    let tol = 1e-9 * (1.0 + hi.abs());
    let seg: Vec<&TrajectoryPoint> = estimate
        .iter()
        .filter(|e| e.t >= start - tol && e.t >= lo - tol && e.t <= hi + tol)
        .collect();
    if seg.is_empty() {
        return Err(EvalError::EmptySegment { start });
    }

    let mut sums = [0.0; 4];
    let mut last = (0.0, 0.0);
    for e in &seg {
        let (p, v) = interp.at(e.t);
        let d = e.p - p;
        let h = d.xy().norm();
        let scalar = (e.v.norm() - v.norm()).abs();
        let vector = (e.v - v).norm();
        sums[0] += h * h;
        sums[1] += d.z * d.z;
        sums[2] += scalar * scalar;
        sums[3] += vector * vector;
        last = (h, d.z.abs());
    }
    let n = seg.len() as f64;
    let [rh, rv, rs, rvel] = sums.map(|s| (s / n).sqrt());

    let (t0, t1) = (seg[0].t, seg[seg.len() - 1].t);
    let mut length = 0.0;
    let mut prev = interp.at(t0).0;
    for s in truth.iter().filter(|s| s.t > t0 && s.t < t1) {
        length += (s.p - prev).norm();
        prev = s.p;
    }
    length += (interp.at(t1).0 - prev).norm();

    Ok(MetricsReport {
        rms_horizontal: rh,
        end_horizontal: last.0,
        rms_vertical: rv,
        end_vertical: last.1,
        rms_speed: match speed {
            SpeedError::Scalar => rs,
            SpeedError::Vector => rvel,
        },
        speed_definition: speed,
        rms_speed_scalar: rs,
        rms_velocity: rvel,
        segment_length: length,
        segment_duration: t1 - t0,
        epochs: seg.len(),
    })
}

/// Per-epoch errors, in the order of `estimate`.
pub fn error_series(
    estimate: &[TrajectoryPoint],
    truth: &[TruthSample],
) -> Vec<(f64, Vector3<f64>, Vector3<f64>)> {
    let interp = TruthInterp::new(truth);
    estimate
        .iter()
        .map(|e| {
            let (p, v) = interp.at(e.t);
            (e.t, e.p - p, e.v - v)
        })
        .collect()
}

/// Table with one column per dataset and one row per metric.
pub fn format_table(columns: &[(String, MetricsReport)]) -> String {
    type Row = (&'static str, fn(&MetricsReport) -> f64, usize);
    let rows: [Row; 7] = [
        ("Trajectory length (m)", |m| m.segment_length, 2),
        ("Trajectory duration (s)", |m| m.segment_duration, 0),
        ("RMS Horizontal Error (m)", |m| m.rms_horizontal, 2),
        ("Horizontal Error at the end (m)", |m| m.end_horizontal, 2),
        ("RMS Vertical Error (m)", |m| m.rms_vertical, 2),
        ("Vertical Error at the end (m)", |m| m.end_vertical, 2),
        ("RMS Speed Error (m/s)", |m| m.rms_speed, 2),
    ];
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(_, f, prec)| {
            columns
                .iter()
                .map(|(_, m)| format!("{:.*}", prec, f(m)))
                .collect()
        })
        .collect();
    let col_w: Vec<usize> = (0..columns.len())
        .map(|j| {
            cells
                .iter()
                .map(|r| r[j].len())
                .chain([columns[j].0.len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for (j, (name, _)) in columns.iter().enumerate() {
        let _ = write!(out, "  {:>w$}", name, w = col_w[j]);
    }
    out.push('\n');
    for (i, (label, _, _)) in rows.iter().enumerate() {
        let _ = write!(out, "{label:label_w$}");
        for (j, cell) in cells[i].iter().enumerate() {
            let _ = write!(out, "  {:>w$}", cell, w = col_w[j]);
        }
        out.push('\n');
    }
    out
}
