//! Best-control synthesis at an origin (compass search with restarts) and the
//! one-dimensional cutoff search along a ray.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::plant::{evaluate, EvalCounter, Plant};
use crate::spaces::{OutputBox, Ray};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BestControlConfig {
    /// Evaluation cap for one best-control search.
    pub budget: u64,
    /// Number of pattern-search starts; the first starts at the control-domain center.
    pub restarts: usize,
    /// Initial poll step as a fraction of each control-domain width.
    pub initial_step: f64,
    /// A start terminates once its step falls below this fraction of the width.
    pub min_step: f64,
    /// Per-output loss weights; all ones when absent.
    pub weights: Option<Vec<f64>>,
}

impl Default for BestControlConfig {
    fn default() -> Self {
        Self {
            budget: 20_000,
            restarts: 4,
            initial_step: 0.25,
            min_step: 1e-9,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestControlResult {
    pub control: Vec<f64>,
    pub loss: f64,
    pub output: Vec<f64>,
    pub evals_used: u64,
    pub budget_exhausted: bool,
}

fn weighted_loss(y: &[f64], target: &[f64], weights: Option<&[f64]>) -> f64 {
    y.iter()
        .zip(target)
        .enumerate()
        .map(|(j, (v, t))| weights.map_or(1.0, |w| w[j]) * (v - t) * (v - t))
        .sum()
}

/// Minimizes `Σ_j w_j (y_j − target_j)²` over the control domain at a fixed input.
///
/// The sequence of evaluated controls depends only on the seed and config, not
/// on `cfg.budget`; a larger budget runs a longer prefix of the same sequence,
/// so the returned loss is monotone non-increasing in the budget.
pub fn best_control(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    origin: &[f64],
    output_box: &OutputBox,
    cfg: &BestControlConfig,
    seed: u64,
) -> Result<BestControlResult> {
    let sig = plant.signature();
    check_dim("origin", sig.n_in, origin.len())?;
    check_dim("output box", sig.n_out, output_box.dim())?;
    if let Some(w) = &cfg.weights {
        check_dim("loss weights", sig.n_out, w.len())?;
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be positive".into()));
        }
    }
    if cfg.budget == 0 || cfg.restarts == 0 {
        return Err(Error::InvalidArgument("budget and restarts must be >= 1".into()));
    }
    let local = counter.child(cfg.budget);
    let weights = cfg.weights.as_deref();
    let domain = &sig.control_domain;
    let widths = domain.widths();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Ok(None) means the budget ran out.
    let probe = |c: &[f64]| -> Result<Option<(f64, Vec<f64>)>> {
        match evaluate(plant, &local, origin, c) {
            Ok(y) => Ok(Some((weighted_loss(&y, &output_box.target, weights), y))),
            Err(Error::BudgetExhausted { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    let mut exhausted = false;
    let keep_best = |best: &mut Option<(Vec<f64>, f64, Vec<f64>)>, c: &[f64], l: f64, y: &[f64]| {
        if best.as_ref().is_none_or(|b| l < b.1) {
            *best = Some((c.to_vec(), l, y.to_vec()));
        }
    };

    'restarts: for r in 0..cfg.restarts {
        let mut current = if r == 0 {
            domain.center()
        } else {
            (0..sig.n_ctrl)
                .map(|i| {
                    let u: f64 = rng.random();
                    domain.lo[i] + u * widths[i]
                })
                .collect()
        };
        let Some((mut current_loss, y)) = probe(&current)? else {
            exhausted = true;
            break;
        };
        keep_best(&mut best, &current, current_loss, &y);

        let mut step = cfg.initial_step;
        while step >= cfg.min_step {
            let mut improved = false;
            for i in 0..sig.n_ctrl {
                if widths[i] == 0.0 {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    let moved = (current[i] + sign * step * widths[i]).clamp(domain.lo[i], domain.hi[i]);
                    if moved == current[i] {
                        continue;
                    }
                    let mut candidate = current.clone();
                    candidate[i] = moved;
                    let Some((l, y)) = probe(&candidate)? else {
                        exhausted = true;
                        break 'restarts;
                    };
                    if l < current_loss {
                        current = candidate;
                        current_loss = l;
                        keep_best(&mut best, &current, l, &y);
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
    }

    let Some((control, loss, output)) = best else {
        return Err(Error::BudgetExhausted { budget: cfg.budget });
    };
    if !output_box.contains(&output)? {
        return Err(Error::NoAcceptableControl { loss });
    }
    Ok(BestControlResult {
        control,
        loss,
        output,
        evals_used: local.count(),
        budget_exhausted: exhausted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffResult {
    pub radius: f64,
    pub clipped: bool,
    pub hole_detected: bool,
    pub bracket_width: f64,
}

/// Everything a cutoff search needs besides the ray.
pub(crate) struct CutoffContext<'a, 'c> {
    pub plant: &'a dyn Plant,
    pub counter: &'a EvalCounter<'c>,
    pub control: &'a [f64],
    pub output_box: &'a OutputBox,
    pub tol: f64,
    pub probe_k: usize,
}

impl CutoffContext<'_, '_> {
    fn acceptable(&self, ray: &Ray<'_>, t: f64) -> Result<bool> {
        let mut x = ray.point_at(t);
        // only rounding can push a point at t <= fence past the wall
        self.plant.signature().input_domain.clamp(&mut x);
        let y = evaluate(self.plant, self.counter, &x, self.control)?;
        self.output_box.contains(&y)
    }

    pub fn origin_acceptable(&self, origin: &[f64]) -> Result<bool> {
        let y = evaluate(self.plant, self.counter, origin, self.control)?;
        self.output_box.contains(&y)
    }

    /// Shrinks `[lo, hi]` with `A(lo) = true`, `A(hi) = false` to width <= tol.
    fn bisect(&self, ray: &Ray<'_>, mut lo: f64, mut hi: f64) -> Result<(f64, f64)> {
        while hi - lo > self.tol {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.acceptable(ray, mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((lo, hi))
    }

    fn full_search(&self, ray: &Ray<'_>, fence: f64) -> Result<CutoffResult> {
        let mut lo = 0.0;
        let mut t = 1.0;
        let hi = loop {
            if t >= fence {
                if self.acceptable(ray, fence)? {
                    return Ok(CutoffResult {
                        radius: fence,
                        clipped: true,
                        hole_detected: false,
                        bracket_width: 0.0,
                    });
                }
                break fence;
            }
            if self.acceptable(ray, t)? {
                lo = t;
                t *= 2.0;
            } else {
                break t;
            }
        };
        let (lo, hi) = self.bisect(ray, lo, hi)?;
        Ok(CutoffResult {
            radius: lo,
            clipped: false,
            hole_detected: false,
            bracket_width: hi - lo,
        })
    }

    /// Bracket seeded at `[0.5·hint, 1.5·hint]`; falls back to the full search
    /// when that bracket does not straddle the boundary.
    fn refined_search(&self, ray: &Ray<'_>, fence: f64, hint: f64) -> Result<CutoffResult> {
        let lo = 0.5 * hint;
        if !(hint.is_finite() && hint > 0.0 && lo < fence) || !self.acceptable(ray, lo)? {
            return self.full_search(ray, fence);
        }
        let hi = 1.5 * hint;
        if hi >= fence {
            if self.acceptable(ray, fence)? {
                return Ok(CutoffResult {
                    radius: fence,
                    clipped: true,
                    hole_detected: false,
                    bracket_width: 0.0,
                });
            }
            let (lo, hi) = self.bisect(ray, lo, fence)?;
            return Ok(CutoffResult {
                radius: lo,
                clipped: false,
                hole_detected: false,
                bracket_width: hi - lo,
            });
        }
        if self.acceptable(ray, hi)? {
            return self.full_search(ray, fence);
        }
        let (lo, hi) = self.bisect(ray, lo, hi)?;
        Ok(CutoffResult {
            radius: lo,
            clipped: false,
            hole_detected: false,
            bracket_width: hi - lo,
        })
    }

    /// Probes `probe_k` equispaced interior radii; on the first unacceptable
    /// probe the radius is re-bisected between it and the previous probe.
    fn check_holes(&self, ray: &Ray<'_>, found: CutoffResult) -> Result<CutoffResult> {
        let k = self.probe_k;
        let mut previous = 0.0;
        for j in 1..=k {
            let t = found.radius * j as f64 / (k + 1) as f64;
            if t <= 0.0 {
                continue;
            }
            if !self.acceptable(ray, t)? {
                let (lo, hi) = self.bisect(ray, previous, t)?;
                return Ok(CutoffResult {
                    radius: lo,
                    clipped: false,
                    hole_detected: true,
                    bracket_width: hi - lo,
                });
            }
            previous = t;
        }
        Ok(found)
    }

    /// Cutoff search assuming the origin is already known to be acceptable.
    pub fn search(&self, ray: &Ray<'_>, hint: Option<f64>) -> Result<CutoffResult> {
        let fence = ray.max_domain_radius(&self.plant.signature().input_domain)?;
        let found = match hint {
            Some(h) => self.refined_search(ray, fence, h)?,
            None => self.full_search(ray, fence)?,
        };
        self.check_holes(ray, found)
    }
}

/// Distance along `ray` (normalized units) at which `control` first maps the
/// input outside `output_box`.
pub fn cutoff_radius(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    control: &[f64],
    ray: &Ray<'_>,
    output_box: &OutputBox,
    tol: f64,
    probe_k: usize,
) -> Result<CutoffResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("cutoff tolerance must be > 0".into()));
    }
    let ctx = CutoffContext {
        plant,
        counter,
        control,
        output_box,
        tol,
        probe_k,
    };
    if !ctx.origin_acceptable(&ray.frame.origin)? {
        return Err(Error::OriginNotAcceptable);
    }
    ctx.search(ray, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{make_annulus_plant, make_ellipsoidal_plant, AffinePlant, ControlOffset};
    use crate::spaces::{sample_unit_direction, AxisBox, NormalizedFrame};

    fn unit_box() -> OutputBox {
        OutputBox::new(vec![-1.0], vec![1.0], vec![0.0]).unwrap()
    }

    #[test]
    fn best_control_hits_analytic_minimizer() {
        let p = AffinePlant::scalar_integrator((-10.0, 10.0), (-10.0, 10.0)).unwrap();
        let counter = EvalCounter::unlimited();
        let cfg = BestControlConfig {
            budget: 2000,
            ..Default::default()
        };
        let r = best_control(&p, &counter, &[2.0], &unit_box(), &cfg, 1).unwrap();
        assert!((r.control[0] + 2.0).abs() < 1e-3);
        assert!(r.loss < 1e-6);
        assert!(r.evals_used <= 2000);
        assert_eq!(counter.count(), r.evals_used);
    }

    #[test]
    fn best_control_respects_domain_edge() {
        let p = AffinePlant::scalar_integrator((-10.0, 10.0), (-1.0, 1.0)).unwrap();
        let b = OutputBox::new(vec![-2.0], vec![2.0], vec![0.0]).unwrap();
        let r = best_control(&p, &EvalCounter::unlimited(), &[2.0], &b, &BestControlConfig::default(), 1)
            .unwrap();
        assert!((r.control[0] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn best_control_reports_unreachable_box() {
        let p = AffinePlant::scalar_integrator((-10.0, 10.0), (-1.0, 1.0)).unwrap();
        let r = best_control(&p, &EvalCounter::unlimited(), &[5.0], &unit_box(), &BestControlConfig::default(), 1);
        assert!(matches!(r, Err(Error::NoAcceptableControl { .. })));
    }

    #[test]
    fn best_control_budget_flag_and_prefix_monotonicity() {
        let p = crate::plant::make_network_analog(7);
        let b = OutputBox::new(vec![0.0], vec![10.0], vec![0.0]).unwrap();
        let x = vec![0.1; 31];
        let mut last = f64::INFINITY;
        for budget in [50, 100, 200, 400, 800] {
            let cfg = BestControlConfig {
                budget,
                ..Default::default()
            };
            let r = best_control(&p, &EvalCounter::unlimited(), &x, &b, &cfg, 3).unwrap();
            assert!(r.budget_exhausted);
            assert_eq!(r.evals_used, budget);
            assert!(r.loss <= last);
            last = r.loss;
        }
    }

    #[test]
    fn best_control_is_deterministic() {
        let p = crate::plant::make_network_analog(7);
        let b = OutputBox::new(vec![0.0], vec![10.0], vec![0.0]).unwrap();
        let cfg = BestControlConfig {
            budget: 3000,
            ..Default::default()
        };
        let x = vec![0.2; 31];
        let a = best_control(&p, &EvalCounter::unlimited(), &x, &b, &cfg, 9).unwrap();
        let c = best_control(&p, &EvalCounter::unlimited(), &x, &b, &cfg, 9).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn best_control_beats_random_sampling_on_network_analog() {
        use rand::Rng;
        let p = crate::plant::make_network_analog(7);
        let b = OutputBox::new(vec![0.0], vec![10.0], vec![0.0]).unwrap();
        let x = vec![0.0; 31];
        // random-sampling oracle first
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut oracle = f64::INFINITY;
        for _ in 0..20_000 {
            let c: Vec<f64> = (0..43).map(|_| rng.random_range(0.0..=1.0)).collect();
            let y = p.compute(&x, &c)[0];
            oracle = oracle.min(y * y);
        }
        let cfg = BestControlConfig {
            budget: 20_000,
            ..Default::default()
        };
        let r = best_control(&p, &EvalCounter::unlimited(), &x, &b, &cfg, 7).unwrap();
        assert!(r.loss <= oracle, "pattern {} vs random {}", r.loss, oracle);
    }

    fn frame1(origin: f64) -> NormalizedFrame {
        NormalizedFrame::new(vec![origin], vec![1.0]).unwrap()
    }

    #[test]
    fn cutoff_examples_on_integrator() {
        let p = AffinePlant::scalar_integrator((-10.0, 10.0), (-10.0, 10.0)).unwrap();
        let counter = EvalCounter::unlimited();
        let f = frame1(2.0);
        for dir in [1.0, -1.0] {
            let ray = Ray::new(&f, &[dir]).unwrap();
            let r = cutoff_radius(&p, &counter, &[-2.0], &ray, &unit_box(), 1e-6, 8).unwrap();
            assert!((r.radius - 1.0).abs() <= 1e-6, "{r:?}");
            assert!(r.radius <= 1.0);
            assert!(!r.clipped && !r.hole_detected);
            assert!(r.bracket_width <= 1e-6);
        }

        let fenced = AffinePlant::scalar_integrator((0.0, 2.5), (-10.0, 10.0)).unwrap();
        let ray = Ray::new(&f, &[1.0]).unwrap();
        let r = cutoff_radius(&fenced, &counter, &[-2.0], &ray, &unit_box(), 1e-6, 8).unwrap();
        assert_eq!(r.radius, 0.5);
        assert!(r.clipped);
    }

    #[test]
    fn cutoff_rejects_unacceptable_origin() {
        let p = AffinePlant::scalar_integrator((-10.0, 10.0), (-10.0, 10.0)).unwrap();
        let f = frame1(2.0);
        let ray = Ray::new(&f, &[1.0]).unwrap();
        let r = cutoff_radius(&p, &EvalCounter::unlimited(), &[0.0], &ray, &unit_box(), 1e-6, 8);
        assert!(matches!(r, Err(Error::OriginNotAcceptable)));
    }

    fn ellipse() -> crate::plant::EllipsoidalPlant {
        make_ellipsoidal_plant(
            vec![0.0, 0.0],
            vec![4.0, 1.0],
            ControlOffset::default(),
            AxisBox::cube(2, -2.0, 2.0).unwrap(),
            AxisBox::cube(1, -1.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    /// Independent scalar bisection on the plant output, 200 halvings.
    fn oracle_radius(p: &crate::plant::EllipsoidalPlant, u: &[f64], h: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 2.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let x: Vec<f64> = u.iter().map(|d| d * mid).collect();
            if p.compute(&x, &[0.0])[0] <= h {
                lo = mid
            } else {
                hi = mid
            }
        }
        lo
    }

    #[test]
    fn ellipse_closed_form_matches_scalar_bisection() {
        let p = ellipse();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let u = sample_unit_direction(&mut rng, 2).unwrap();
            let exact = p.exact_cutoff_radius(&u, 1.0, &[0.0]).unwrap();
            assert!((exact - oracle_radius(&p, &u, 1.0)).abs() < 1e-9);
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((oracle_radius(&p, &[s, s], 1.0) - 0.6325).abs() < 1e-4);
    }

    #[test]
    fn cutoff_matches_ellipse_closed_form() {
        let p = ellipse();
        let f = NormalizedFrame::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = OutputBox::new(vec![0.0], vec![1.0], vec![0.0]).unwrap();
        let counter = EvalCounter::unlimited();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let u = sample_unit_direction(&mut rng, 2).unwrap();
            let ray = Ray::new(&f, &u).unwrap();
            let r = cutoff_radius(&p, &counter, &[0.0], &ray, &b, 1e-6, 8).unwrap();
            let exact = p.exact_cutoff_radius(ray.direction(), 1.0, &[0.0]).unwrap();
            assert!((r.radius - exact).abs() <= 1e-6);
            assert!(!r.hole_detected && !r.clipped);
        }
    }

    #[test]
    fn refined_search_agrees_with_full_search() {
        let p = ellipse();
        let f = NormalizedFrame::new(vec![0.0, 0.0], vec![0.05, 0.05]).unwrap();
        let b = OutputBox::new(vec![0.0], vec![1.0], vec![0.0]).unwrap();
        let counter = EvalCounter::unlimited();
        let ctx = CutoffContext {
            plant: &p,
            counter: &counter,
            control: &[0.0],
            output_box: &b,
            tol: 1e-6,
            probe_k: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for hint in [3.0, 15.0, 30.0, 1000.0] {
            let u = sample_unit_direction(&mut rng, 2).unwrap();
            let ray = Ray::new(&f, &u).unwrap();
            let full = ctx.search(&ray, None).unwrap();
            let refined = ctx.search(&ray, Some(hint)).unwrap();
            assert!((full.radius - refined.radius).abs() <= 2e-6);
        }
    }

    #[test]
    fn annulus_gap_is_detected() {
        let p = make_annulus_plant();
        let b = OutputBox::new(vec![0.0], vec![0.25], vec![0.0]).unwrap();
        // scale 2 makes the first bracketing step jump across the hole
        let f = NormalizedFrame::new(vec![1.0, 0.0], vec![2.0, 2.0]).unwrap();
        let ray = Ray::new(&f, &[-1.0, 0.0]).unwrap();

        // dense scan oracle: an unacceptable stretch lies strictly inside an acceptable one
        let scan: Vec<bool> = (0..=2000)
            .map(|i| {
                let x = ray.point_at(i as f64 * 1e-3);
                p.compute(&x, &[0.0])[0] <= 0.25
            })
            .collect();
        let first_bad = scan.iter().position(|a| !a).unwrap();
        assert!(scan[first_bad..].iter().any(|a| *a));

        let r = cutoff_radius(&p, &EvalCounter::unlimited(), &[0.0], &ray, &b, 1e-6, 16).unwrap();
        assert!(r.hole_detected);
        assert!(!r.clipped);
        // first exit of the ring is at ‖x‖ = 0.75, normalized t = 0.125
        assert!((r.radius - 0.125).abs() <= 1e-6);
    }

    #[test]
    fn annulus_without_probes_misses_the_gap() {
        let p = make_annulus_plant();
        let b = OutputBox::new(vec![0.0], vec![0.25], vec![0.0]).unwrap();
        let f = NormalizedFrame::new(vec![1.0, 0.0], vec![2.0, 2.0]).unwrap();
        let ray = Ray::new(&f, &[-1.0, 0.0]).unwrap();
        let r = cutoff_radius(&p, &EvalCounter::unlimited(), &[0.0], &ray, &b, 1e-6, 0).unwrap();
        assert!(!r.hole_detected);
        assert!((r.radius - 1.125).abs() <= 1e-6);
    }
}
