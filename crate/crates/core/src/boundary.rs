//! Star-shaped bounding surfaces fitted to cutoff samples.
//!
//! A surface stores the cutoff radius as a polynomial in the components of
//! the unit direction `u` (normalized coordinates), `r̂(u) = Σ_α c_α u^α` over
//! all monomials up to a total degree. Membership is radial: a point at
//! normalized distance `ρ` along `u` is inside when `ρ <= margin · max(r̂(u), floor)`,
//! so every member's segment back to the origin is also a member.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::parallel;
use crate::plant::{EvalCounter, Plant};
use crate::search::CutoffContext;
use crate::spaces::{l2_norm, sample_unit_direction, NormalizedFrame, OutputBox, Ray};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffSample {
    pub direction: Vec<f64>,
    pub radius: f64,
    pub clipped: bool,
    pub hole_detected: bool,
}

/// All exponent vectors in `n` variables with total degree `<= degree`,
/// ordered by degree, then lexicographically descending.
pub fn monomials(n: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(prefix: &mut Vec<u32>, n: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == n - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            fill(prefix, n, left - e, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in 0..=degree {
        fill(&mut Vec::with_capacity(n), n, d, &mut out);
    }
    out
}

/// Number of monomials in `n` variables up to `degree`: C(n + degree, degree).
pub fn monomial_count(n: usize, degree: u32) -> usize {
    (1..=degree as usize).fold(1usize, |acc, k| acc * (n + k) / k)
}

fn feature_row(exponents: &[Vec<u32>], degree: u32, u: &[f64], row: &mut Vec<f64>) {
    let d = degree as usize;
    let mut powers = vec![1.0; u.len() * (d + 1)];
    for (i, ui) in u.iter().enumerate() {
        for k in 1..=d {
            powers[i * (d + 1) + k] = powers[i * (d + 1) + k - 1] * ui;
        }
    }
    row.clear();
    row.extend(exponents.iter().map(|alpha| {
        alpha
            .iter()
            .enumerate()
            .filter(|(_, e)| **e > 0)
            .map(|(i, e)| powers[i * (d + 1) + *e as usize])
            .product::<f64>()
    }));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonomialCoefficient {
    pub monomial: Vec<u32>,
    pub value: f64,
}

/// Hypothesis checks attached to a fitted surface.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDiagnostics {
    /// Samples whose ray crossed an unacceptable stretch before its cutoff.
    pub hole_samples: usize,
    pub clipped_samples: usize,
    /// Fraction of random boundary-chord midpoints that fall outside the surface.
    pub nonconvex_chord_fraction: f64,
}

impl SurfaceDiagnostics {
    /// True when some ray found an unacceptable pocket inside the region.
    pub fn hole_hypothesis_violated(&self) -> bool {
        self.hole_samples > 0
    }

    pub fn convexity_hypothesis_violated(&self) -> bool {
        self.nonconvex_chord_fraction > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub inside: bool,
    /// `1 − ρ/R`: positive inside, zero on the surface, negative outside.
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSurface {
    #[serde(flatten)]
    pub frame: NormalizedFrame,
    pub degree: u32,
    pub coefficients: Vec<MonomialCoefficient>,
    pub rms_residual: f64,
    pub margin: f64,
    #[serde(rename = "floor")]
    pub min_radius_floor: f64,
    pub sample_count: usize,
    pub max_sample_radius: f64,
    pub diagnostics: SurfaceDiagnostics,
}

const CHORD_COUNT: usize = 200;
const CHORD_SEED: u64 = 0x00C0_FFEE;

impl RadialSurface {
    /// Surface with `r̂ ≡ radius`, useful for fixtures and hand-built regions.
    pub fn constant(frame: NormalizedFrame, radius: f64, margin: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidArgument("constant radius must be > 0".into()));
        }
        check_margin(margin)?;
        let n = frame.dim();
        Ok(Self {
            frame,
            degree: 0,
            coefficients: vec![MonomialCoefficient {
                monomial: vec![0; n],
                value: radius,
            }],
            rms_residual: 0.0,
            margin,
            min_radius_floor: 0.1 * radius,
            sample_count: 0,
            max_sample_radius: radius,
            diagnostics: SurfaceDiagnostics::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.frame.dim()
    }

    pub fn origin(&self) -> &[f64] {
        &self.frame.origin
    }

    /// Raw polynomial radius `r̂(u)` for a unit direction.
    pub fn predicted_radius(&self, u: &[f64]) -> f64 {
        let d = self.degree as usize;
        let mut powers = vec![1.0; u.len() * (d + 1)];
        for (i, ui) in u.iter().enumerate() {
            for k in 1..=d {
                powers[i * (d + 1) + k] = powers[i * (d + 1) + k - 1] * ui;
            }
        }
        self.coefficients
            .iter()
            .map(|c| {
                c.value
                    * c.monomial
                        .iter()
                        .enumerate()
                        .filter(|(_, e)| **e > 0)
                        .map(|(i, e)| powers[i * (d + 1) + *e as usize])
                        .product::<f64>()
            })
            .sum()
    }

    /// Floor-clamped radius `max(r̂(u), floor)` without the margin.
    pub fn effective_radius(&self, u: &[f64]) -> f64 {
        self.predicted_radius(u).max(self.min_radius_floor)
    }

    /// Radial membership of a point given in normalized coordinates.
    pub fn contains_normalized(&self, v: &[f64]) -> Membership {
        let rho = l2_norm(v);
        if rho == 0.0 {
            return Membership {
                inside: true,
                depth: 1.0,
            };
        }
        let u: Vec<f64> = v.iter().map(|c| c / rho).collect();
        let r = self.margin * self.effective_radius(&u);
        Membership {
            inside: rho <= r,
            depth: 1.0 - rho / r,
        }
    }

    pub fn contains(&self, x: &[f64]) -> Result<Membership> {
        Ok(self.contains_normalized(&self.frame.to_normalized(x)?))
    }

    pub fn with_margin(&self, margin: f64) -> Result<Self> {
        check_margin(margin)?;
        Ok(Self {
            margin,
            ..self.clone()
        })
    }

    /// Fraction of midpoints of random chords between (unmargined) surface
    /// points that lie outside the surface. Zero for a convex surface.
    pub fn chord_midpoint_violations(&self, chords: usize, seed: u64) -> f64 {
        if chords == 0 || self.dim() < 2 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim();
        let mut outside = 0usize;
        for _ in 0..chords {
            let (Ok(a), Ok(b)) = (
                sample_unit_direction(&mut rng, n),
                sample_unit_direction(&mut rng, n),
            ) else {
                continue;
            };
            let ra = self.effective_radius(&a);
            let rb = self.effective_radius(&b);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (ra * x + rb * y)).collect();
            let rho = l2_norm(&mid);
            if rho == 0.0 {
                continue;
            }
            let u: Vec<f64> = mid.iter().map(|c| c / rho).collect();
            if rho > self.effective_radius(&u) * (1.0 + 1e-12) {
                outside += 1;
            }
        }
        outside as f64 / chords as f64
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("margin {margin} outside (0, 1]")))
    }
}

/// Running `AᵀA`, `Aᵀr` for the radial regression.
struct NormalEquations {
    exponents: Vec<Vec<u32>>,
    degree: u32,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    rows: usize,
    row: Vec<f64>,
}

impl NormalEquations {
    fn new(n: usize, degree: u32) -> Self {
        let exponents = monomials(n, degree);
        let p = exponents.len();
        Self {
            exponents,
            degree,
            gram: DMatrix::zeros(p, p),
            rhs: DVector::zeros(p),
            rows: 0,
            row: Vec::with_capacity(p),
        }
    }

    fn coefficient_count(&self) -> usize {
        self.exponents.len()
    }

    fn add(&mut self, u: &[f64], r: f64) {
        let mut row = std::mem::take(&mut self.row);
        feature_row(&self.exponents, self.degree, u, &mut row);
        let p = row.len();
        for j in 0..p {
            let rj = row[j];
            if rj == 0.0 {
                continue;
            }
            self.rhs[j] += rj * r;
            for i in j..p {
                self.gram[(i, j)] += row[i] * rj;
            }
        }
        self.row = row;
        self.rows += 1;
    }

    /// Ridge solve with `λ = 1e−8 · tr(AᵀA)/p`, refined twice.
    fn solve(&self) -> Result<Vec<f64>> {
        let p = self.coefficient_count();
        let mut g = self.gram.clone();
        for j in 0..p {
            for i in (j + 1)..p {
                g[(j, i)] = g[(i, j)];
            }
        }
        let trace: f64 = (0..p).map(|i| g[(i, i)]).sum();
        let lambda = 1e-8 * if trace > 0.0 { trace / p as f64 } else { 1.0 };
        for i in 0..p {
            g[(i, i)] += lambda;
        }
        let chol = g.clone().cholesky().ok_or(Error::DegenerateDirections)?;
        // Iterated Tikhonov: removes the ridge bias on well-determined
        // directions while near-null ones stay damped.
        let mut c = chol.solve(&self.rhs);
        for _ in 0..2 {
            let mut resid = self.rhs.clone();
            resid -= &g * &c;
            resid.axpy(lambda, &c, 1.0);
            c += chol.solve(&resid);
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateDirections);
        }
        Ok(c.iter().copied().collect())
    }
}

fn surface_from_fit(
    frame: &NormalizedFrame,
    eq: &NormalEquations,
    samples: &[CutoffSample],
    margin: f64,
) -> Result<RadialSurface> {
    let coefficients = eq.solve()?;
    let mut surface = RadialSurface {
        frame: frame.clone(),
        degree: eq.degree,
        coefficients: eq
            .exponents
            .iter()
            .zip(coefficients)
            .map(|(m, value)| MonomialCoefficient {
                monomial: m.clone(),
                value,
            })
            .collect(),
        rms_residual: 0.0,
        margin,
        min_radius_floor: 0.0,
        sample_count: samples.len(),
        max_sample_radius: samples.iter().map(|s| s.radius).fold(0.0, f64::max),
        diagnostics: SurfaceDiagnostics::default(),
    };
    let regression: Vec<&CutoffSample> = samples.iter().filter(|s| !s.clipped).collect();
    let sq: f64 = regression
        .iter()
        .map(|s| {
            let e = surface.predicted_radius(&s.direction) - s.radius;
            e * e
        })
        .sum();
    surface.rms_residual = (sq / regression.len() as f64).sqrt();
    let min_r = regression.iter().map(|s| s.radius).fold(f64::INFINITY, f64::min);
    surface.min_radius_floor = (0.1 * min_r).max(1e-12);
    surface.diagnostics = SurfaceDiagnostics {
        hole_samples: samples.iter().filter(|s| s.hole_detected).count(),
        clipped_samples: samples.len() - regression.len(),
        nonconvex_chord_fraction: 0.0,
    };
    surface.diagnostics.nonconvex_chord_fraction =
        surface.chord_midpoint_violations(CHORD_COUNT, CHORD_SEED);
    Ok(surface)
}

/// Ridge least-squares fit of the radial polynomial to non-clipped samples.
pub fn fit_radial_surface(
    frame: &NormalizedFrame,
    samples: &[CutoffSample],
    degree: u32,
    margin: f64,
) -> Result<RadialSurface> {
    check_margin(margin)?;
    let n = frame.dim();
    for s in samples {
        check_dim("sample direction", n, s.direction.len())?;
    }
    let mut eq = NormalEquations::new(n, degree);
    for s in samples.iter().filter(|s| !s.clipped) {
        eq.add(&s.direction, s.radius);
    }
    if eq.rows < eq.coefficient_count() {
        return Err(Error::InsufficientSamples {
            have: eq.rows,
            need: eq.coefficient_count(),
        });
    }
    surface_from_fit(frame, &eq, samples, margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub sample_count: usize,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub history: Vec<TracePoint>,
    pub stabilized: bool,
    /// Set when a refinement batch was dropped because the evaluation budget ran out.
    #[serde(default)]
    pub budget_exhausted: bool,
}

impl FitTrace {
    /// Appends a fit; sample counts must strictly increase.
    fn push(&mut self, sample_count: usize, rms_residual: f64) {
        debug_assert!(self.history.last().is_none_or(|p| p.sample_count < sample_count));
        self.history.push(TracePoint {
            sample_count,
            rms_residual,
        });
    }

    /// Every relative change across the last `window` fits is `<= eps`.
    /// A pair whose residuals are both below `resolution` (the cutoff search
    /// tolerance) counts as unchanged: such residuals are bisection noise.
    pub fn is_stable(&self, window: usize, eps: f64, resolution: f64) -> bool {
        let window = window.max(2);
        if self.history.len() < window {
            return false;
        }
        let tail = &self.history[self.history.len() - window..];
        tail.windows(2).all(|w| {
            let (prev, next) = (w[0].rms_residual, w[1].rms_residual);
            prev.max(next) <= resolution || (next - prev).abs() <= eps * prev
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceConfig {
    pub degree: u32,
    /// Rays per batch; four times the coefficient count when absent.
    pub batch_size: Option<usize>,
    pub margin: f64,
    pub stabilization_eps: f64,
    pub stabilization_window: usize,
    pub max_batches: usize,
    pub tol: f64,
    pub probe_k: usize,
    pub seed: u64,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            batch_size: None,
            margin: 0.95,
            stabilization_eps: 0.02,
            stabilization_window: 3,
            max_batches: 25,
            tol: 1e-6,
            probe_k: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedSurface {
    pub surface: RadialSurface,
    pub trace: FitTrace,
    pub samples: Vec<CutoffSample>,
}

/// Ray-casts cutoff samples in batches around `frame.origin` and refits until
/// the least-squares residual stabilizes.
///
/// The first batch searches every ray from scratch; later batches seed each
/// ray's bracket at the current fitted radius. Each batch refits on all
/// accumulated samples.
pub fn learn_surface(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    control: &[f64],
    frame: &NormalizedFrame,
    output_box: &OutputBox,
    cfg: &SurfaceConfig,
) -> Result<LearnedSurface> {
    let sig = plant.signature();
    check_dim("frame", sig.n_in, frame.dim())?;
    check_dim("control", sig.n_ctrl, control.len())?;
    check_margin(cfg.margin)?;
    if !(cfg.tol > 0.0) || cfg.max_batches == 0 {
        return Err(Error::InvalidArgument(
            "tol must be > 0 and max_batches >= 1".into(),
        ));
    }
    if let Some(index) = (0..sig.n_in).find(|&i| {
        let o = frame.origin[i];
        !(sig.input_domain.lo[i] < o && o < sig.input_domain.hi[i])
    }) {
        return Err(Error::OriginOutsideDomain { index });
    }
    let ctx = CutoffContext {
        plant,
        counter,
        control,
        output_box,
        tol: cfg.tol,
        probe_k: cfg.probe_k,
    };
    if !ctx.origin_acceptable(&frame.origin)? {
        return Err(Error::OriginNotAcceptable);
    }

    let n = frame.dim();
    let mut eq = NormalEquations::new(n, cfg.degree);
    let p = eq.coefficient_count();
    let batch = cfg.batch_size.unwrap_or(4 * p).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples: Vec<CutoffSample> = Vec::new();
    let mut surface: Option<RadialSurface> = None;
    let mut trace = FitTrace::default();

    for _ in 0..cfg.max_batches {
        let jobs: Vec<(Vec<f64>, Option<f64>)> = (0..batch)
            .map(|_| {
                let u = sample_unit_direction(&mut rng, n)?;
                let hint = surface.as_ref().map(|s| s.effective_radius(&u));
                Ok((u, hint))
            })
            .collect::<Result<_>>()?;
        let results = parallel::map(&jobs, |(u, hint)| {
            let ray = Ray::new(frame, u)?;
            let r = ctx.search(&ray, *hint)?;
            Ok(CutoffSample {
                direction: ray.direction().to_vec(),
                radius: r.radius,
                clipped: r.clipped,
                hole_detected: r.hole_detected,
            })
        });
        let batch_samples = match results.into_iter().collect::<Result<Vec<_>>>() {
            Ok(s) => s,
            Err(Error::BudgetExhausted { .. }) if surface.is_some() => {
                trace.budget_exhausted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        for s in &batch_samples {
            if !s.clipped {
                eq.add(&s.direction, s.radius);
            }
        }
        samples.extend(batch_samples);
        if eq.rows < p {
            continue;
        }
        let fitted = surface_from_fit(frame, &eq, &samples, cfg.margin)?;
        trace.push(samples.len(), fitted.rms_residual);
        surface = Some(fitted);
        if trace.is_stable(cfg.stabilization_window, cfg.stabilization_eps, cfg.tol) {
            trace.stabilized = true;
            break;
        }
    }

    let surface = surface.ok_or(Error::InsufficientSamples {
        have: eq.rows,
        need: p,
    })?;
    Ok(LearnedSurface {
        surface,
        trace,
        samples,
    })
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the sample table and, for 1–3 input dimensions, a fitted-radius grid.
///
/// Samples: `u0..u{n-1},radius,clipped,hole_detected`. Grid (2-D):
/// `angle,fitted_radius,member_radius`; (3-D): `polar,azimuth,...`; (1-D):
/// `direction,...`. Returns whether a grid file was written.
pub fn export_boundary_csv(
    samples: &[CutoffSample],
    surface: &RadialSurface,
    samples_path: Option<&Path>,
    grid_path: &Path,
    grid_points: usize,
) -> Result<bool> {
    if let Some(path) = samples_path {
        let mut out = String::new();
        let n = surface.dim();
        let header: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
        writeln!(out, "{},radius,clipped,hole_detected", header.join(",")).unwrap();
        for s in samples {
            let dirs: Vec<String> = s.direction.iter().map(|v| fmt17(*v)).collect();
            writeln!(
                out,
                "{},{},{},{}",
                dirs.join(","),
                fmt17(s.radius),
                s.clipped,
                s.hole_detected
            )
            .unwrap();
        }
        std::fs::File::create(path)?.write_all(out.as_bytes())?;
    }
    let Some(grid) = radius_grid_csv(surface, grid_points) else {
        return Ok(false);
    };
    std::fs::File::create(grid_path)?.write_all(grid.as_bytes())?;
    Ok(true)
}

fn radius_grid_csv(surface: &RadialSurface, grid_points: usize) -> Option<String> {
    use std::f64::consts::PI;
    let g = grid_points.max(2);
    let mut out = String::new();
    let row = |out: &mut String, coords: &[f64], u: &[f64]| {
        let r = surface.effective_radius(u);
        let c: Vec<String> = coords.iter().map(|v| fmt17(*v)).collect();
        writeln!(out, "{},{},{}", c.join(","), fmt17(r), fmt17(surface.margin * r)).unwrap();
    };
    match surface.dim() {
        1 => {
            out.push_str("direction,fitted_radius,member_radius\n");
            for d in [-1.0, 1.0] {
                row(&mut out, &[d], &[d]);
            }
        }
        2 => {
            out.push_str("angle,fitted_radius,member_radius\n");
            for k in 0..g {
                let a = 2.0 * PI * k as f64 / g as f64;
                row(&mut out, &[a], &[a.cos(), a.sin()]);
            }
        }
        3 => {
            out.push_str("polar,azimuth,fitted_radius,member_radius\n");
            for i in 0..g {
                let polar = PI * i as f64 / (g - 1) as f64;
                for j in 0..g {
                    let az = 2.0 * PI * j as f64 / g as f64;
                    let u = [polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()];
                    row(&mut out, &[polar, az], &u);
                }
            }
        }
        _ => return None,
    }
    Some(out)
}
