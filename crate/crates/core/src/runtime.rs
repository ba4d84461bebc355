//! Execution: classify live inputs into library regions, dispatch stored
//! controls, simulate, and request adaptation when inputs drift out.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary::fmt17;
use crate::error::{check_dim, Error, Result};
use crate::library::{learn_trio, SolutionLibrary, SolutionRecord, TrajectoryPlan, TrioConfig};
use crate::plant::{evaluate, EvalCounter, Plant};
use crate::spaces::derive_seed;

/// The record an input belongs to, with its membership depth.
#[derive(Debug, Clone, Copy)]
pub struct Classification<'l> {
    pub record: Option<&'l SolutionRecord>,
    /// Depth in the selected record, or the best (largest) depth seen when
    /// no record contains the input. `-inf` for an empty library.
    pub depth: f64,
    /// Index of the record with the largest depth overall.
    nearest: Option<usize>,
}

/// Deepest containing record; ties go to the lowest id.
pub fn classify<'l>(lib: &'l SolutionLibrary, x: &[f64]) -> Result<Classification<'l>> {
    let mut best_member: Option<(usize, f64)> = None;
    let mut nearest: Option<(usize, f64)> = None;
    for (i, rec) in lib.records.iter().enumerate() {
        check_dim("input", rec.input_dim(), x.len())?;
        let m = rec.membership(x)?;
        let better = |cur: Option<(usize, f64)>| match cur {
            None => true,
            Some((j, d)) => m.depth > d || (m.depth == d && rec.id < lib.records[j].id),
        };
        if better(nearest) {
            nearest = Some((i, m.depth));
        }
        if m.inside && better(best_member) {
            best_member = Some((i, m.depth));
        }
    }
    Ok(match best_member {
        Some((i, depth)) => Classification {
            record: Some(&lib.records[i]),
            depth,
            nearest: Some(i),
        },
        None => Classification {
            record: None,
            depth: nearest.map_or(f64::NEG_INFINITY, |n| n.1),
            nearest: nearest.map(|n| n.0),
        },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    #[default]
    Centroid,
    FirstVertex,
    /// Vertex closest to the previously applied control.
    NearestVertex,
}

pub fn dispatch_control(record: &SolutionRecord, policy: DispatchPolicy, previous: Option<&[f64]>) -> Vec<f64> {
    let cr = &record.control_region;
    match (policy, previous) {
        (DispatchPolicy::Centroid, _) => cr.centroid.clone(),
        (DispatchPolicy::FirstVertex, _) | (DispatchPolicy::NearestVertex, None) => cr.vertices[0].clone(),
        (DispatchPolicy::NearestVertex, Some(prev)) => {
            let dist = |v: &[f64]| -> f64 { v.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum() };
            let mut best = 0;
            for (i, v) in cr.vertices.iter().enumerate().skip(1) {
                if dist(v) < dist(&cr.vertices[best]) {
                    best = i;
                }
            }
            cr.vertices[best].clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    Halt,
    /// Use the record with the largest (negative) depth; no guarantee.
    NearestRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub record_id: String,
    pub chosen_control: Vec<f64>,
    pub depth: f64,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    pub input: Vec<f64>,
    pub dispatch: Dispatch,
    pub output: Vec<f64>,
    pub in_box: bool,
}

/// An input no record claimed, which stopped a `Halt` simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub step: usize,
    pub input: Vec<f64>,
    pub best_depth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub steps: Vec<SimStep>,
    pub gap: Option<Gap>,
    /// Plan indices where the trajectory runner relearned from the actual state.
    pub replans: Vec<usize>,
}

impl SimTrace {
    pub fn in_box_rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|s| s.in_box).count() as f64 / self.steps.len() as f64
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.steps
            .iter()
            .map(|s| Observation {
                input: s.input.clone(),
                depth: s.dispatch.depth,
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let (n_in, n_c, n_out) = self.steps.first().map_or((0, 0, 0), |s| {
            (s.input.len(), s.dispatch.chosen_control.len(), s.output.len())
        });
        let mut header = vec!["step".to_string()];
        header.extend((0..n_in).map(|i| format!("x{i}")));
        header.push("record_id".into());
        header.extend((0..n_c).map(|i| format!("c{i}")));
        header.extend((0..n_out).map(|i| format!("y{i}")));
        header.extend(["in_box", "depth", "fallback_used"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for (k, s) in self.steps.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(s.input.iter().map(|v| fmt17(*v)));
            row.push(s.dispatch.record_id.clone());
            row.extend(s.dispatch.chosen_control.iter().map(|v| fmt17(*v)));
            row.extend(s.output.iter().map(|v| fmt17(*v)));
            row.push(s.in_box.to_string());
            row.push(fmt17(s.dispatch.depth));
            row.push(s.dispatch.fallback_used.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Open-loop replay of `inputs`: classify, dispatch, evaluate, log.
pub fn simulate(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    lib: &SolutionLibrary,
    inputs: &[Vec<f64>],
    policy: DispatchPolicy,
    fallback: Fallback,
) -> Result<SimTrace> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("simulate needs at least one input".into()));
    }
    let mut trace = SimTrace::default();
    let mut previous: Option<Vec<f64>> = None;
    for (k, x) in inputs.iter().enumerate() {
        let cls = classify(lib, x)?;
        let (record, fallback_used) = match (cls.record, fallback) {
            (Some(r), _) => (r, false),
            (None, Fallback::NearestRegion) if cls.nearest.is_some() => (&lib.records[cls.nearest.unwrap()], true),
            (None, _) => {
                trace.gap = Some(Gap {
                    step: k,
                    input: x.clone(),
                    best_depth: cls.depth,
                });
                break;
            }
        };
        let control = dispatch_control(record, policy, previous.as_deref());
        let output = evaluate(plant, counter, x, &control)?;
        let in_box = record.output_box.contains(&output)?;
        trace.steps.push(SimStep {
            input: x.clone(),
            dispatch: Dispatch {
                record_id: record.id.clone(),
                chosen_control: control.clone(),
                depth: cls.depth,
                fallback_used,
            },
            output,
            in_box,
        });
        previous = Some(control);
    }
    Ok(trace)
}

/// Runs a plan in state-feedback mode: each output becomes the next state.
/// When the actual state is outside the next record's region the trio is
/// relearned there first, using `replan` seeded per step.
pub fn simulate_trajectory(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    plan: &TrajectoryPlan,
    policy: DispatchPolicy,
    replan: &TrioConfig,
) -> Result<SimTrace> {
    let sig = plant.signature();
    if sig.n_in != sig.n_out {
        return Err(Error::StateFeedbackDimMismatch {
            n_in: sig.n_in,
            n_out: sig.n_out,
        });
    }
    let mut trace = SimTrace::default();
    let mut state = plan.start_state.clone();
    let mut previous: Option<Vec<f64>> = None;
    for (k, wp) in plan.waypoints.iter().enumerate() {
        let mut m = wp.record.membership(&state)?;
        let relearned;
        let record = if m.inside {
            &wp.record
        } else {
            let cfg = TrioConfig {
                seed: derive_seed(replan.seed, 0x5EED + k as u64),
                ..replan.clone()
            };
            relearned = learn_trio(plant, counter, &state, &wp.output_box, &cfg)?;
            trace.replans.push(k);
            m = relearned.membership(&state)?;
            &relearned
        };
        let control = dispatch_control(record, policy, previous.as_deref());
        let output = evaluate(plant, counter, &state, &control)?;
        let in_box = wp.output_box.contains(&output)?;
        trace.steps.push(SimStep {
            input: state.clone(),
            dispatch: Dispatch {
                record_id: record.id.clone(),
                chosen_control: control.clone(),
                depth: m.depth,
                fallback_used: false,
            },
            output: output.clone(),
            in_box,
        });
        previous = Some(control);
        state = output;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub input: Vec<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRequest {
    pub origin: Vec<f64>,
    pub median_depth: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Requests a new origin (componentwise median input) when the median depth
/// of the window drops below `threshold_depth`.
pub fn drift_monitor(window: &[Observation], threshold_depth: f64) -> Option<AdaptationRequest> {
    let first = window.first()?;
    let median_depth = median(window.iter().map(|o| o.depth).collect());
    if median_depth >= threshold_depth {
        return None;
    }
    let origin = (0..first.input.len())
        .map(|i| median(window.iter().map(|o| o.input[i]).collect()))
        .collect();
    Some(AdaptationRequest { origin, median_depth })
}
