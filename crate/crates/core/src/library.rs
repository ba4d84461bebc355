//! Solution records: learning a trio, growing its control set through
//! intersecting regions, composing libraries, trajectory chaining,
//! adaptation, and the persisted library file.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::boundary::{learn_surface, CutoffSample, FitTrace, Membership, RadialSurface, SurfaceConfig};
use crate::error::{check_dim, Error, Result};
use crate::parallel;
use crate::plant::{evaluate, EvalCounter, Plant};
use crate::search::{best_control, BestControlConfig};
use crate::spaces::{derive_seed, BallSampling, NormalizedFrame, OutputBox};

pub const FORMAT_VERSION: u32 = 1;

/// Validated control vectors; the records' control subspace is their convex hull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRegion {
    pub vertices: Vec<Vec<f64>>,
    pub centroid: Vec<f64>,
}

impl ControlRegion {
    pub fn new(vertices: Vec<Vec<f64>>) -> Result<Self> {
        let first = vertices
            .first()
            .ok_or_else(|| Error::InvalidArgument("control region needs a vertex".into()))?;
        let n = first.len();
        for v in &vertices {
            check_dim("control vertex", n, v.len())?;
        }
        let centroid = mean(&vertices);
        Ok(Self { vertices, centroid })
    }

    pub fn single(control: Vec<f64>) -> Self {
        Self {
            centroid: control.clone(),
            vertices: vec![control],
        }
    }

    fn push(&mut self, control: Vec<f64>) {
        self.vertices.push(control);
        self.centroid = mean(&self.vertices);
    }

    /// `Σ w_k v_k` with weights normalized to sum to one.
    pub fn combination(&self, weights: &[f64]) -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; self.centroid.len()];
        for (w, v) in weights.iter().zip(&self.vertices) {
            for (o, c) in out.iter_mut().zip(v) {
                *o += w / total * c;
            }
        }
        out
    }
}

fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let n = vs.len() as f64;
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, c) in out.iter_mut().zip(v) {
            *o += c;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Everything needed to learn one trio. `seed` is the master seed; the
/// best-control and surface stages derive their own streams from it, so
/// `surface.seed` is ignored here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrioConfig {
    pub search: BestControlConfig,
    pub surface: SurfaceConfig,
    /// Normalization scales; 1/100 of each input-domain width when absent.
    pub scales: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvals {
    pub best_control: u64,
    pub surface: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionKind {
    Interior,
    Proximal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    pub kind: ExpansionKind,
    pub origin: Vec<f64>,
    pub accepted: bool,
    /// Common points found with the running intersection.
    pub witnesses: usize,
    pub required_witnesses: usize,
    pub control: Option<Vec<f64>>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub vertex_pass_rate: f64,
    /// `None` when no convex combinations were requested.
    pub combo_pass_rate: Option<f64>,
    pub samples_used: usize,
    pub vertex_failures: usize,
    pub combo_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub plant_id: String,
    pub master_seed: u64,
    pub config: TrioConfig,
    /// One entry per surface, in surface order.
    pub eval_counts: Vec<StageEvals>,
    pub best_losses: Vec<f64>,
    pub fit_traces: Vec<FitTrace>,
    pub expansion_log: Vec<ExpansionEvent>,
    pub validation: Option<ValidationReport>,
    pub adapted_from: Option<String>,
    /// Human-readable flags for violated region/control hypotheses.
    pub hypothesis_flags: Vec<String>,
}

/// The memorized trio extended with an intersected input region and a
/// control set: any vertex control maps any member input into `output_box`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub id: String,
    pub surfaces: Vec<RadialSurface>,
    #[serde(rename = "control")]
    pub control_region: ControlRegion,
    #[serde(rename = "box")]
    pub output_box: OutputBox,
    pub provenance: Provenance,
}

impl SolutionRecord {
    /// Membership in the intersection: inside every surface, depth is the minimum.
    pub fn membership(&self, x: &[f64]) -> Result<Membership> {
        let mut out = Membership {
            inside: true,
            depth: f64::INFINITY,
        };
        for s in &self.surfaces {
            let m = s.contains(x)?;
            out.inside &= m.inside;
            out.depth = out.depth.min(m.depth);
        }
        Ok(out)
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        Ok(self.membership(x)?.inside)
    }

    pub fn origin(&self) -> &[f64] {
        self.surfaces[0].origin()
    }

    pub fn input_dim(&self) -> usize {
        self.surfaces[0].dim()
    }

    fn refresh_flags(&mut self) {
        let mut flags = Vec::new();
        for (i, s) in self.surfaces.iter().enumerate() {
            if s.diagnostics.hole_hypothesis_violated() {
                flags.push(format!(
                    "surface {i}: {} rays crossed an unacceptable pocket inside the region",
                    s.diagnostics.hole_samples
                ));
            }
            if s.diagnostics.convexity_hypothesis_violated() {
                flags.push(format!(
                    "surface {i}: {:.3} of boundary chord midpoints lie outside (non-convex)",
                    s.diagnostics.nonconvex_chord_fraction
                ));
            }
        }
        if let Some(v) = &self.provenance.validation {
            if v.combo_failures > 0 {
                flags.push(format!(
                    "control region: {} convex-combination checks left the output box",
                    v.combo_failures
                ));
            }
        }
        self.provenance.hypothesis_flags = flags;
    }

    /// True when any surface found a hole or the control hull failed a check.
    pub fn has_hypothesis_violation(&self) -> bool {
        !self.provenance.hypothesis_flags.is_empty()
    }
}

fn trio_id(origin: &[f64], output_box: &OutputBox, seed: u64) -> String {
    let mut h = crc32fast::Hasher::new();
    for v in origin.iter().chain(&output_box.lo).chain(&output_box.hi).chain(&output_box.target) {
        h.update(&v.to_bits().to_le_bytes());
    }
    h.update(&seed.to_le_bytes());
    format!("trio-{:08x}", h.finalize())
}

struct LearnedTrio {
    control: Vec<f64>,
    loss: f64,
    surface: RadialSurface,
    trace: FitTrace,
    samples: Vec<CutoffSample>,
    evals: StageEvals,
}

fn learn_trio_parts(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    origin: &[f64],
    output_box: &OutputBox,
    cfg: &TrioConfig,
) -> Result<LearnedTrio> {
    let sig = plant.signature();
    check_dim("origin", sig.n_in, origin.len())?;
    if let Some(index) = (0..sig.n_in).find(|&i| {
        !(sig.input_domain.lo[i] < origin[i] && origin[i] < sig.input_domain.hi[i])
    }) {
        return Err(Error::OriginOutsideDomain { index });
    }
    let frame = match &cfg.scales {
        Some(s) => NormalizedFrame::new(origin.to_vec(), s.clone())?,
        None => NormalizedFrame::with_default_scales(origin.to_vec(), &sig.input_domain)?,
    };
    let bc_counter = counter.child(u64::MAX);
    let best = best_control(
        plant,
        &bc_counter,
        origin,
        output_box,
        &cfg.search,
        derive_seed(cfg.seed, 1),
    )?;
    let surface_counter = counter.child(u64::MAX);
    let surface_cfg = SurfaceConfig {
        seed: derive_seed(cfg.seed, 2),
        ..cfg.surface.clone()
    };
    let learned = learn_surface(
        plant,
        &surface_counter,
        &best.control,
        &frame,
        output_box,
        &surface_cfg,
    )?;
    Ok(LearnedTrio {
        control: best.control,
        loss: best.loss,
        surface: learned.surface,
        trace: learned.trace,
        samples: learned.samples,
        evals: StageEvals {
            best_control: bc_counter.count(),
            surface: surface_counter.count(),
        },
    })
}

/// Best control at `origin`, then its bounding surface: a one-surface,
/// one-vertex record.
pub fn learn_trio(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    origin: &[f64],
    output_box: &OutputBox,
    cfg: &TrioConfig,
) -> Result<SolutionRecord> {
    learn_trio_with_samples(plant, counter, origin, output_box, cfg).map(|r| r.0)
}

/// [`learn_trio`] that also hands back the cutoff samples behind the surface.
pub fn learn_trio_with_samples(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    origin: &[f64],
    output_box: &OutputBox,
    cfg: &TrioConfig,
) -> Result<(SolutionRecord, Vec<CutoffSample>)> {
    let t = learn_trio_parts(plant, counter, origin, output_box, cfg)?;
    let mut record = SolutionRecord {
        id: trio_id(origin, output_box, cfg.seed),
        surfaces: vec![t.surface],
        control_region: ControlRegion::single(t.control),
        output_box: output_box.clone(),
        provenance: Provenance {
            plant_id: plant.id(),
            master_seed: cfg.seed,
            config: cfg.clone(),
            eval_counts: vec![t.evals],
            best_losses: vec![t.loss],
            fit_traces: vec![t.trace],
            expansion_log: Vec::new(),
            validation: None,
            adapted_from: None,
            hypothesis_flags: Vec::new(),
        },
    };
    record.refresh_flags();
    Ok((record, t.samples))
}

const MAX_SAMPLING_ATTEMPTS: usize = 200_000;

/// Rejection sampler for points inside a record's intersection, drawing from
/// the first surface's bounding ball and discarding points outside the domain.
fn sample_intersection(
    record: &SolutionRecord,
    plant: &dyn Plant,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    let first = &record.surfaces[0];
    let n = first.dim();
    let scheme = BallSampling::for_dim(n);
    let radius = first.max_sample_radius;
    let domain = &plant.signature().input_domain;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= MAX_SAMPLING_ATTEMPTS {
            return Err(Error::EmptyIntersection { attempts });
        }
        attempts += 1;
        let v = scheme.sample(rng, n, radius)?;
        let x = first.frame.from_normalized(&v)?;
        if domain.contains(&x) && record.contains(&x)? {
            out.push(x);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    pub n_interior: usize,
    pub n_proximal: usize,
    /// Proximal origins sit at up to `(1 + band) · R(u)` along a random ray.
    pub proximity_band: f64,
    pub validation_samples: usize,
    pub n_combos: usize,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            n_interior: 4,
            n_proximal: 0,
            proximity_band: 0.1,
            validation_samples: 1000,
            n_combos: 4,
            seed: 0,
        }
    }
}

impl ExpansionConfig {
    pub fn required_witnesses(&self) -> usize {
        (self.validation_samples / 10).max(50)
    }
}

fn proximal_origin(
    record: &SolutionRecord,
    plant: &dyn Plant,
    band: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let first = &record.surfaces[0];
    let domain = &plant.signature().input_domain;
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let u = crate::spaces::sample_unit_direction(rng, first.dim())?;
        let r = first.margin * first.effective_radius(&u);
        let s: f64 = rng.random();
        let t = r * (1.0 + band * s);
        let v: Vec<f64> = u.iter().map(|c| c * t).collect();
        let x = first.frame.from_normalized(&v)?;
        if domain.contains_strictly(&x) && !record.contains(&x)? {
            return Ok(x);
        }
    }
    Err(Error::EmptyIntersection {
        attempts: MAX_SAMPLING_ATTEMPTS,
    })
}

/// Adds controls learned at new origins inside (interior) and just outside
/// (proximal) the current intersection. A candidate is accepted when enough
/// sampled points of the running intersection also lie in its region; its
/// surface then joins the intersection and its control joins the vertex set.
pub fn expand_control_region(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    record: &SolutionRecord,
    trio_cfg: &TrioConfig,
    cfg: &ExpansionConfig,
) -> Result<SolutionRecord> {
    if cfg.n_interior == 0 && cfg.n_proximal == 0 {
        return Ok(record.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut candidates: Vec<(ExpansionKind, Vec<f64>)> = sample_intersection(record, plant, &mut rng, cfg.n_interior)?
        .into_iter()
        .filter(|x| plant.signature().input_domain.contains_strictly(x))
        .map(|x| (ExpansionKind::Interior, x))
        .collect();
    for _ in 0..cfg.n_proximal {
        candidates.push((
            ExpansionKind::Proximal,
            proximal_origin(record, plant, cfg.proximity_band, &mut rng)?,
        ));
    }

    let base_seed = derive_seed(cfg.seed, 0xE2);
    let learned: Vec<Result<LearnedTrio>> = parallel::map_range(candidates.len(), |k| {
        let sub = TrioConfig {
            seed: derive_seed(base_seed, k as u64),
            ..trio_cfg.clone()
        };
        learn_trio_parts(plant, counter, &candidates[k].1, &record.output_box, &sub)
    });

    let required = cfg.required_witnesses();
    let probe_count = cfg.validation_samples.max(required);
    let mut out = record.clone();
    for (k, ((kind, origin), result)) in candidates.into_iter().zip(learned).enumerate() {
        let mut event = ExpansionEvent {
            kind,
            origin: origin.clone(),
            accepted: false,
            witnesses: 0,
            required_witnesses: required,
            control: None,
            reason: None,
        };
        match result {
            Err(e) => event.reason = Some(format!("{}: {e}", e.kind())),
            Ok(t) => {
                event.control = Some(t.control.clone());
                if kind == ExpansionKind::Interior && !out.contains(&origin)? {
                    event.reason = Some("origin no longer inside the running intersection".into());
                } else {
                    let mut wrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1000 + k as u64));
                    let pts = sample_intersection(&out, plant, &mut wrng, probe_count)?;
                    let mut witnesses = 0;
                    for p in &pts {
                        if t.surface.contains(p)?.inside {
                            witnesses += 1;
                        }
                    }
                    event.witnesses = witnesses;
                    if witnesses >= required {
                        event.accepted = true;
                        out.surfaces.push(t.surface);
                        out.control_region.push(t.control);
                        out.provenance.eval_counts.push(t.evals);
                        out.provenance.best_losses.push(t.loss);
                        out.provenance.fit_traces.push(t.trace);
                    } else {
                        event.reason = Some("too few common points with the running intersection".into());
                    }
                }
            }
        }
        out.provenance.expansion_log.push(event);
    }

    let report = validate_record(
        plant,
        counter,
        &out,
        cfg.validation_samples,
        cfg.n_combos,
        derive_seed(cfg.seed, 0xA11D),
    )?;
    out.provenance.validation = Some(report);
    out.refresh_flags();
    Ok(out)
}

/// Re-evaluates sampled intersection points under every vertex control and
/// under random convex combinations of the vertices.
pub fn validate_record(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    record: &SolutionRecord,
    n_samples: usize,
    n_combos: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = sample_intersection(record, plant, &mut rng, n_samples)?;
    let cr = &record.control_region;
    let combos: Vec<Vec<Vec<f64>>> = points
        .iter()
        .map(|_| {
            (0..n_combos)
                .map(|_| {
                    let w: Vec<f64> = cr
                        .vertices
                        .iter()
                        .map(|_| -(1.0 - rng.random::<f64>()).ln())
                        .collect();
                    cr.combination(&w)
                })
                .collect()
        })
        .collect();
    let jobs: Vec<(&Vec<f64>, &Vec<Vec<f64>>)> = points.iter().zip(&combos).collect();
    let counts = parallel::map(&jobs, |(x, combos)| -> Result<(usize, usize)> {
        let mut vertex_fail = 0;
        for v in &cr.vertices {
            if !record.output_box.contains(&evaluate(plant, counter, x, v)?)? {
                vertex_fail += 1;
            }
        }
        let mut combo_fail = 0;
        for c in combos.iter() {
            if !record.output_box.contains(&evaluate(plant, counter, x, c)?)? {
                combo_fail += 1;
            }
        }
        Ok((vertex_fail, combo_fail))
    });
    let (mut vf, mut cf) = (0, 0);
    for c in counts {
        let (v, k) = c?;
        vf += v;
        cf += k;
    }
    let vertex_checks = (points.len() * cr.vertices.len()).max(1);
    let combo_checks = points.len() * n_combos;
    Ok(ValidationReport {
        vertex_pass_rate: 1.0 - vf as f64 / vertex_checks as f64,
        combo_pass_rate: (combo_checks > 0).then(|| 1.0 - cf as f64 / combo_checks as f64),
        samples_used: points.len(),
        vertex_failures: vf,
        combo_failures: cf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionLibrary {
    pub format_version: u32,
    pub plant_id: String,
    pub records: Vec<SolutionRecord>,
}

impl SolutionLibrary {
    pub fn new(plant_id: impl Into<String>, records: Vec<SolutionRecord>) -> Result<Self> {
        let lib = Self {
            format_version: FORMAT_VERSION,
            plant_id: plant_id.into(),
            records,
        };
        lib.check_ids()?;
        Ok(lib)
    }

    fn check_ids(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate record id {}", w[0])));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SolutionRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedOrigin {
    pub index: usize,
    pub origin: Vec<f64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub library: SolutionLibrary,
    pub skipped: Vec<SkippedOrigin>,
}

/// One trio (optionally expanded) per origin, in origin order. Origins that
/// fail are skipped and reported. `boxes` holds one box shared by all
/// origins or one box per origin.
pub fn decompose(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    origins: &[Vec<f64>],
    boxes: &[OutputBox],
    cfg: &TrioConfig,
    expansion: Option<&ExpansionConfig>,
) -> Result<Decomposition> {
    if origins.is_empty() {
        return Err(Error::InvalidArgument("decompose needs at least one origin".into()));
    }
    if !(boxes.len() == 1 || boxes.len() == origins.len()) {
        return Err(Error::InvalidArgument(format!(
            "expected 1 or {} output boxes, got {}",
            origins.len(),
            boxes.len()
        )));
    }
    let results = parallel::map_range(origins.len(), |i| {
        let b = &boxes[if boxes.len() == 1 { 0 } else { i }];
        let sub = TrioConfig {
            seed: derive_seed(cfg.seed, i as u64),
            ..cfg.clone()
        };
        let rec = learn_trio(plant, counter, &origins[i], b, &sub)?;
        match expansion {
            Some(e) => {
                let ecfg = ExpansionConfig {
                    seed: derive_seed(e.seed ^ cfg.seed, i as u64),
                    ..e.clone()
                };
                expand_control_region(plant, counter, &rec, &sub, &ecfg)
            }
            None => Ok(rec),
        }
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut rec) => {
                rec.id = format!("rec-{i:04}");
                records.push(rec);
            }
            Err(e) => skipped.push(SkippedOrigin {
                index: i,
                origin: origins[i].clone(),
                error: format!("{}: {e}", e.kind()),
            }),
        }
    }
    if records.is_empty() {
        return Err(Error::AllOriginsFailed {
            count: origins.len(),
        });
    }
    Ok(Decomposition {
        library: SolutionLibrary::new(plant.id(), records)?,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWaypoint {
    #[serde(rename = "box")]
    pub output_box: OutputBox,
    pub record: SolutionRecord,
}

/// Chained records for moving a state-feedback plant (output = next state)
/// through a sequence of output boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    pub start_state: Vec<f64>,
    pub waypoints: Vec<TrajectoryWaypoint>,
    pub state_feedback: bool,
}

impl TrajectoryPlan {
    pub fn to_library(&self, plant_id: &str) -> Result<SolutionLibrary> {
        let records = self
            .waypoints
            .iter()
            .enumerate()
            .map(|(k, w)| SolutionRecord {
                id: format!("wp-{k:04}"),
                ..w.record.clone()
            })
            .collect();
        SolutionLibrary::new(plant_id, records)
    }
}

/// Trajectory planning stopped at an infeasible waypoint.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct PlanAbort {
    pub partial: TrajectoryPlan,
    #[source]
    pub error: Error,
}

/// Plans with predicted states: each waypoint's target becomes the next origin.
pub fn plan_trajectory(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    start_state: &[f64],
    waypoints: &[OutputBox],
    cfg: &TrioConfig,
) -> std::result::Result<TrajectoryPlan, PlanAbort> {
    let sig = plant.signature();
    let mut plan = TrajectoryPlan {
        start_state: start_state.to_vec(),
        waypoints: Vec::new(),
        state_feedback: true,
    };
    let abort = |plan: TrajectoryPlan, error| Err(PlanAbort { partial: plan, error });
    if sig.n_out != sig.n_in {
        return abort(
            plan,
            Error::StateFeedbackDimMismatch {
                n_in: sig.n_in,
                n_out: sig.n_out,
            },
        );
    }
    if waypoints.is_empty() {
        return abort(plan, Error::InvalidArgument("no waypoints".into()));
    }
    let mut origin = start_state.to_vec();
    for (k, wp) in waypoints.iter().enumerate() {
        let sub = TrioConfig {
            seed: derive_seed(cfg.seed, k as u64),
            ..cfg.clone()
        };
        match learn_trio(plant, counter, &origin, wp, &sub) {
            Ok(record) => {
                origin = wp.target.clone();
                plan.waypoints.push(TrajectoryWaypoint {
                    output_box: wp.clone(),
                    record,
                });
            }
            Err(e) => {
                let reason = format!("{}: {e}", e.kind());
                return abort(plan, Error::WaypointInfeasible { index: k, reason });
            }
        }
    }
    Ok(plan)
}

/// Relearns the trio at a moved origin for the same output box. The old
/// record is untouched; the new one links back to it.
pub fn adapt(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    record: &SolutionRecord,
    new_origin: &[f64],
    cfg: &TrioConfig,
) -> Result<SolutionRecord> {
    let mut fresh = learn_trio(plant, counter, new_origin, &record.output_box, cfg)?;
    fresh.provenance.adapted_from = Some(record.id.clone());
    Ok(fresh)
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn checksum(records: &Value) -> String {
    let text = serde_json::to_string(records).expect("json value serializes");
    format!("{:08x}", crc32fast::hash(text.as_bytes()))
}

/// Canonical file text: sorted keys, shortest round-trip numbers, CRC32 of
/// the canonical record array.
pub fn to_canonical_string(lib: &SolutionLibrary) -> Result<String> {
    let records = sort_keys(serde_json::to_value(&lib.records)?);
    let mut root = serde_json::Map::new();
    root.insert("checksum".into(), Value::String(checksum(&records)));
    root.insert("format_version".into(), Value::from(lib.format_version));
    root.insert("plant_id".into(), Value::String(lib.plant_id.clone()));
    root.insert("records".into(), records);
    let mut text = serde_json::to_string(&sort_keys(Value::Object(root)))?;
    text.push('\n');
    Ok(text)
}

pub fn from_canonical_str(text: &str) -> Result<SolutionLibrary> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptFile(format!("not JSON: {e}")))?;
    let version = root
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::CorruptFile("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let stored = root
        .get("checksum")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::CorruptFile("missing checksum".into()))?;
    let records = root
        .get("records")
        .ok_or_else(|| Error::CorruptFile("missing records".into()))?;
    let actual = checksum(&sort_keys(records.clone()));
    if stored != actual {
        return Err(Error::CorruptFile(format!(
            "checksum mismatch: stored {stored}, computed {actual}"
        )));
    }
    let plant_id = root
        .get("plant_id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::CorruptFile("missing plant_id".into()))?
        .to_string();
    let records: Vec<SolutionRecord> = serde_json::from_value(records.clone())
        .map_err(|e| Error::CorruptFile(format!("bad record: {e}")))?;
    let lib = SolutionLibrary {
        format_version: FORMAT_VERSION,
        plant_id,
        records,
    };
    lib.check_ids()
        .map_err(|e| Error::CorruptFile(e.to_string()))?;
    Ok(lib)
}

pub fn save_library(lib: &SolutionLibrary, path: &Path) -> Result<()> {
    std::fs::write(path, to_canonical_string(lib)?)?;
    Ok(())
}

pub fn load_library(path: &Path) -> Result<SolutionLibrary> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::FileUnreadable {
        path: path.display().to_string(),
        source,
    })?;
    from_canonical_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{make_ellipsoidal_plant, AffinePlant, ControlOffset, EllipsoidalPlant};
    use crate::spaces::AxisBox;

    fn integrator() -> AffinePlant {
        AffinePlant::scalar_integrator((-10.0, 10.0), (-10.0, 10.0)).unwrap()
    }

    fn unit_box() -> OutputBox {
        OutputBox::new(vec![-1.0], vec![1.0], vec![0.0]).unwrap()
    }

    fn one_d_cfg(seed: u64) -> TrioConfig {
        TrioConfig {
            surface: SurfaceConfig {
                degree: 1,
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn learn_trio_on_integrator() {
        let p = integrator();
        let counter = EvalCounter::unlimited();
        let rec = learn_trio(&p, &counter, &[2.0], &unit_box(), &one_d_cfg(1)).unwrap();
        assert!((rec.control_region.vertices[0][0] + 2.0).abs() < 1e-3);
        assert!(rec.contains(&[2.0]).unwrap());
        assert!(rec.contains(&[2.9]).unwrap());
        assert!(rec.contains(&[1.1]).unwrap());
        assert!(!rec.contains(&[3.5]).unwrap());
        assert!(!rec.contains(&[2.99]).unwrap());
        let ev = &rec.provenance.eval_counts[0];
        assert_eq!(ev.best_control + ev.surface, counter.count());
        assert!(!rec.has_hypothesis_violation());
    }

    #[test]
    fn learn_trio_rejects_origin_outside_domain() {
        let r = learn_trio(&integrator(), &EvalCounter::unlimited(), &[11.0], &unit_box(), &one_d_cfg(1));
        assert!(matches!(r, Err(Error::OriginOutsideDomain { index: 0 })));
    }

    #[test]
    fn interval_expansion_adds_vertex() {
        let p = integrator();
        let counter = EvalCounter::unlimited();
        let cfg = one_d_cfg(1);
        let rec = learn_trio(&p, &counter, &[2.0], &unit_box(), &cfg).unwrap();
        let same = expand_control_region(
            &p,
            &counter,
            &rec,
            &cfg,
            &ExpansionConfig {
                n_interior: 0,
                n_proximal: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(same, rec);

        let grown = expand_control_region(
            &p,
            &counter,
            &rec,
            &cfg,
            &ExpansionConfig {
                n_interior: 3,
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(grown.control_region.vertices.len() >= 2);
        for (v, s) in grown.control_region.vertices.iter().zip(&grown.surfaces) {
            // each vertex is (−origin) for the integrator
            assert!((v[0] + s.origin()[0]).abs() < 1e-3);
        }
        for s in &grown.surfaces {
            assert!(s.contains(rec.origin()).unwrap().inside || s.origin() == rec.origin());
        }
        let v = grown.provenance.validation.as_ref().unwrap();
        assert_eq!(v.vertex_pass_rate, 1.0);
        assert!(v.combo_pass_rate.unwrap() >= v.vertex_pass_rate - 1e-12);
        let accepted = grown.provenance.expansion_log.iter().filter(|e| e.accepted).count();
        assert_eq!(accepted + 1, grown.surfaces.len());
    }

    fn hand_record(origins: &[f64], radius: f64) -> SolutionRecord {
        let surfaces = origins
            .iter()
            .map(|o| {
                RadialSurface::constant(NormalizedFrame::new(vec![*o], vec![1.0]).unwrap(), radius, 1.0).unwrap()
            })
            .collect();
        SolutionRecord {
            id: "hand".into(),
            surfaces,
            control_region: ControlRegion::new(origins.iter().map(|o| vec![-o]).collect()).unwrap(),
            output_box: unit_box(),
            provenance: Provenance {
                plant_id: "affine-1x1x1".into(),
                master_seed: 0,
                config: TrioConfig::default(),
                eval_counts: vec![],
                best_losses: vec![],
                fit_traces: vec![],
                expansion_log: vec![],
                validation: None,
                adapted_from: None,
                hypothesis_flags: vec![],
            },
        }
    }

    #[test]
    fn interval_intersection_arithmetic() {
        // regions [1,3] and [1.5,3.5] intersect in [1.5,3]
        let r = hand_record(&[2.0, 2.5], 1.0);
        assert!(r.contains(&[1.5]).unwrap() && r.contains(&[3.0]).unwrap());
        assert!(!r.contains(&[1.4]).unwrap() && !r.contains(&[3.1]).unwrap());
        assert_eq!(r.control_region.centroid, vec![-2.25]);
    }

    #[test]
    fn duplicated_vertices_match_vertex_results() {
        let p = integrator();
        let mut r = hand_record(&[2.0], 1.0);
        r.control_region = ControlRegion::new(vec![vec![-2.0], vec![-2.0]]).unwrap();
        let v = validate_record(&p, &EvalCounter::unlimited(), &r, 200, 3, 1).unwrap();
        assert_eq!(v.combo_pass_rate, Some(v.vertex_pass_rate));
        assert_eq!(v.samples_used, 200);
    }

    #[test]
    fn validation_reports_empty_intersection() {
        let p = integrator();
        let r = hand_record(&[-5.0, 5.0], 1.0);
        assert!(matches!(
            validate_record(&p, &EvalCounter::unlimited(), &r, 10, 1, 1),
            Err(Error::EmptyIntersection { .. })
        ));
    }

    fn quad_ellipse() -> EllipsoidalPlant {
        make_ellipsoidal_plant(
            vec![0.0, 0.0],
            vec![4.0, 1.0],
            ControlOffset {
                constant: 0.0,
                linear: vec![],
                quadratic: vec![1.0],
            },
            AxisBox::cube(2, -1.5, 1.5).unwrap(),
            AxisBox::cube(1, -1.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn ellipse_trio_uses_zero_control() {
        let p = quad_ellipse();
        let b = OutputBox::new(vec![0.0], vec![1.0], vec![0.0]).unwrap();
        let rec = learn_trio(&p, &EvalCounter::unlimited(), &[0.0, 0.0], &b, &TrioConfig::default()).unwrap();
        assert!(rec.control_region.vertices[0][0].abs() < 1e-3);
    }

    #[test]
    fn decompose_routes_failures() {
        let p = AffinePlant::scalar_integrator((-10.0, 10.0), (-1.0, 1.0)).unwrap();
        let counter = EvalCounter::unlimited();
        let d = decompose(&p, &counter, &[vec![0.5], vec![8.0]], &[unit_box()], &one_d_cfg(3), None).unwrap();
        assert_eq!(d.library.records.len(), 1);
        assert_eq!(d.library.records[0].id, "rec-0000");
        assert_eq!(d.skipped.len(), 1);
        assert_eq!(d.skipped[0].index, 1);
        assert!(d.skipped[0].error.starts_with("NoAcceptableControl"));

        assert!(matches!(
            decompose(&p, &counter, &[], &[unit_box()], &one_d_cfg(3), None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            decompose(&p, &counter, &[vec![8.0]], &[unit_box()], &one_d_cfg(3), None),
            Err(Error::AllOriginsFailed { count: 1 })
        ));
    }

    #[test]
    fn decompose_two_origins() {
        let p = integrator();
        let d = decompose(
            &p,
            &EvalCounter::unlimited(),
            &[vec![-4.0], vec![4.0]],
            &[unit_box()],
            &one_d_cfg(3),
            None,
        )
        .unwrap();
        let recs = &d.library.records;
        assert_eq!(recs.len(), 2);
        assert!(recs[0].contains(&[-4.5]).unwrap() && !recs[0].contains(&[0.0]).unwrap());
        assert!(recs[1].contains(&[4.5]).unwrap() && !recs[1].contains(&[0.0]).unwrap());
    }

    fn integrator_with_unit_controls() -> AffinePlant {
        AffinePlant::scalar_integrator((-10.0, 10.0), (-1.0, 1.0)).unwrap()
    }

    #[test]
    fn trajectory_telescopes() {
        let p = integrator_with_unit_controls();
        let boxes: Vec<OutputBox> = [1.0, 2.0, 3.0]
            .iter()
            .map(|t| OutputBox::around(vec![*t], 0.25).unwrap())
            .collect();
        let plan = plan_trajectory(&p, &EvalCounter::unlimited(), &[0.0], &boxes, &one_d_cfg(2)).unwrap();
        assert_eq!(plan.waypoints.len(), 3);
        for w in &plan.waypoints {
            assert!((w.record.control_region.vertices[0][0] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn trajectory_fixed_point_and_infeasible_jump() {
        let p = integrator_with_unit_controls();
        let stay = OutputBox::around(vec![0.0], 2.0).unwrap();
        let plan = plan_trajectory(&p, &EvalCounter::unlimited(), &[0.0], &[stay], &one_d_cfg(2)).unwrap();
        assert!(plan.waypoints[0].record.control_region.vertices[0][0].abs() < 1e-3);

        let boxes = vec![
            OutputBox::around(vec![0.5], 0.25).unwrap(),
            OutputBox::around(vec![5.5], 0.25).unwrap(),
        ];
        let abort = plan_trajectory(&p, &EvalCounter::unlimited(), &[0.0], &boxes, &one_d_cfg(2)).unwrap_err();
        assert!(matches!(abort.error, Error::WaypointInfeasible { index: 1, .. }));
        assert_eq!(abort.partial.waypoints.len(), 1);
    }

    #[test]
    fn trajectory_requires_state_feedback_dims() {
        let p = quad_ellipse();
        let b = OutputBox::new(vec![0.0], vec![1.0], vec![0.0]).unwrap();
        let abort = plan_trajectory(&p, &EvalCounter::unlimited(), &[0.0, 0.0], &[b], &TrioConfig::default()).unwrap_err();
        assert!(matches!(abort.error, Error::StateFeedbackDimMismatch { n_in: 2, n_out: 1 }));
    }

    #[test]
    fn adapt_translates_the_region() {
        let p = integrator();
        let counter = EvalCounter::unlimited();
        let cfg = one_d_cfg(5);
        let rec = learn_trio(&p, &counter, &[2.0], &unit_box(), &cfg).unwrap();
        let same = adapt(&p, &counter, &rec, &[2.0], &cfg).unwrap();
        assert_eq!(same.surfaces[0].coefficients, rec.surfaces[0].coefficients);
        assert_eq!(same.provenance.adapted_from.as_deref(), Some(rec.id.as_str()));

        let moved = adapt(&p, &counter, &rec, &[2.5], &cfg).unwrap();
        assert!((moved.control_region.vertices[0][0] + 2.5).abs() < 1e-3);
        assert!(moved.contains(&[3.4]).unwrap() && !rec.contains(&[3.4]).unwrap());
        assert!(rec.provenance.adapted_from.is_none());

        let fenced = AffinePlant::scalar_integrator((-10.0, 10.0), (-1.0, 1.0)).unwrap();
        assert!(matches!(
            adapt(&fenced, &counter, &rec, &[8.0], &cfg),
            Err(Error::NoAcceptableControl { .. })
        ));
    }

    #[test]
    fn persistence_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.json");
        let empty = SolutionLibrary::new("none", vec![]).unwrap();
        save_library(&empty, &path).unwrap();
        assert_eq!(load_library(&path).unwrap(), empty);

        let p = integrator();
        let d = decompose(&p, &EvalCounter::unlimited(), &[vec![-4.0], vec![4.0]], &[unit_box()], &one_d_cfg(3), None)
            .unwrap();
        save_library(&d.library, &path).unwrap();
        let loaded = load_library(&path).unwrap();
        assert_eq!(loaded, d.library);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(to_canonical_string(&loaded).unwrap(), text);

        let value: Value = serde_json::from_str(&text).unwrap();
        let stored = value["checksum"].as_str().unwrap().to_string();
        let mut flipped = stored.clone().into_bytes();
        flipped[0] = if flipped[0] == b'0' { b'1' } else { b'0' };
        let bad = text.replace(&stored, std::str::from_utf8(&flipped).unwrap());
        assert!(matches!(from_canonical_str(&bad), Err(Error::CorruptFile(_))));

        let bumped = text.replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(
            from_canonical_str(&bumped),
            Err(Error::FormatVersionMismatch { found: 2, .. })
        ));
    }
}
