//! Ground-truth audits: fitted membership versus direct plant evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::SolutionRecord;
use crate::parallel;
use crate::plant::{evaluate, EvalCounter, Plant};
use crate::spaces::BallSampling;

const MAX_REDRAWS_PER_SAMPLE: usize = 10_000;

/// Counts and rates from an audit. Rates are conditional: false accepts are
/// counted among fitted accepts, false rejects among plant accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n_samples: usize,
    pub fitted_accepts: usize,
    pub fitted_rejects: usize,
    pub plant_accepts: usize,
    pub false_accepts: usize,
    pub false_rejects: usize,
    pub false_accept_rate: f64,
    pub false_reject_rate: f64,
    /// Fitted-accept count over plant-accept count.
    pub volume_ratio_estimate: f64,
}

impl AuditReport {
    fn from_flags(flags: &[(bool, bool)]) -> Self {
        let n = flags.len();
        let fitted = flags.iter().filter(|f| f.0).count();
        let plant = flags.iter().filter(|f| f.1).count();
        let fa = flags.iter().filter(|f| f.0 && !f.1).count();
        let fr = flags.iter().filter(|f| !f.0 && f.1).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            n_samples: n,
            fitted_accepts: fitted,
            fitted_rejects: n - fitted,
            plant_accepts: plant,
            false_accepts: fa,
            false_rejects: fr,
            false_accept_rate: ratio(fa, fitted),
            false_reject_rate: ratio(fr, plant),
            volume_ratio_estimate: if plant == 0 && fitted == 0 { 1.0 } else { ratio(fitted, plant) },
        }
    }

    fn fields(&self) -> [(&'static str, String); 9] {
        [
            ("n_samples", self.n_samples.to_string()),
            ("fitted_accepts", self.fitted_accepts.to_string()),
            ("fitted_rejects", self.fitted_rejects.to_string()),
            ("plant_accepts", self.plant_accepts.to_string()),
            ("false_accepts", self.false_accepts.to_string()),
            ("false_rejects", self.false_rejects.to_string()),
            ("false_accept_rate", format!("{:.6}", self.false_accept_rate)),
            ("false_reject_rate", format!("{:.6}", self.false_reject_rate)),
            ("volume_ratio_estimate", format!("{:.6}", self.volume_ratio_estimate)),
        ]
    }

    pub fn to_kv(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn csv_header() -> String {
        AuditReport::from_flags(&[]).fields().map(|f| f.0).join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.fields().map(|f| f.1).join(",")
    }
}

fn judge(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    record: &SolutionRecord,
    points: &[Vec<f64>],
) -> Result<AuditReport> {
    let control = &record.control_region.vertices[0];
    let flags = parallel::map(points, |x| -> Result<(bool, bool)> {
        let fitted = record.contains(x)?;
        let y = evaluate(plant, counter, x, control)?;
        Ok((fitted, record.output_box.contains(&y)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport::from_flags(&flags))
}

/// Samples `n` points from the normalized ball of radius 1.5 × the largest
/// training radius around the first surface's origin. Points outside the
/// input domain are redrawn.
pub fn mc_audit(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    record: &SolutionRecord,
    n: usize,
    seed: u64,
) -> Result<AuditReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("mc_audit needs n >= 1".into()));
    }
    let first = &record.surfaces[0];
    let dim = first.dim();
    let radius = 1.5 * first.max_sample_radius;
    let scheme = BallSampling::for_dim(dim);
    let domain = &plant.signature().input_domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let mut found = false;
        for _ in 0..MAX_REDRAWS_PER_SAMPLE {
            let x = first.frame.from_normalized(&scheme.sample(&mut rng, dim, radius)?)?;
            if domain.contains(&x) {
                points.push(x);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::InvalidArgument(
                "audit ball does not overlap the input domain".into(),
            ));
        }
    }
    judge(plant, counter, record, &points)
}

/// Full-factorial grid over the input domain, endpoints included.
pub fn grid_audit(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    record: &SolutionRecord,
    points_per_dim: usize,
) -> Result<AuditReport> {
    let domain = &plant.signature().input_domain;
    let n = domain.dim();
    if n > 3 {
        return Err(Error::DimensionTooHigh { n_in: n });
    }
    if points_per_dim < 2 {
        return Err(Error::InvalidArgument("grid_audit needs points_per_dim >= 2".into()));
    }
    let axis = |i: usize, k: usize| {
        domain.lo[i] + (domain.hi[i] - domain.lo[i]) * k as f64 / (points_per_dim - 1) as f64
    };
    let total = points_per_dim.pow(n as u32);
    let points: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|i| {
                    let k = idx % points_per_dim;
                    idx /= points_per_dim;
                    axis(i, k)
                })
                .collect()
        })
        .collect();
    judge(plant, counter, record, &points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::RadialSurface;
    use crate::library::{learn_trio, ControlRegion, Provenance, TrioConfig};
    use crate::plant::AffinePlant;
    use crate::spaces::{NormalizedFrame, OutputBox};

    fn interval_plant() -> AffinePlant {
        AffinePlant::scalar_integrator((0.0, 4.0), (-10.0, 10.0)).unwrap()
    }

    fn interval_record(margin: f64) -> SolutionRecord {
        SolutionRecord {
            id: "i".into(),
            surfaces: vec![RadialSurface::constant(NormalizedFrame::new(vec![2.0], vec![1.0]).unwrap(), 1.0, margin)
                .unwrap()],
            control_region: ControlRegion::single(vec![-2.0]),
            output_box: OutputBox::new(vec![-1.0], vec![1.0], vec![0.0]).unwrap(),
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
    fn interval_grid_audit_matches_interval_arithmetic() {
        // grid step 0.04 over [0,4]; true region [1,3], fitted [1.05,2.95]
        let r = grid_audit(&interval_plant(), &EvalCounter::unlimited(), &interval_record(0.95), 101).unwrap();
        assert_eq!(r.n_samples, 101);
        assert_eq!(r.false_accepts, 0);
        assert_eq!(r.false_accept_rate, 0.0);
        assert_eq!(r.plant_accepts, 51);
        // excluded band is 0.1 of the length-2 interval; one cell of slack per end
        let band = 0.1 / 2.0;
        assert!((r.false_reject_rate - band).abs() <= 2.0 / 51.0);
        assert_eq!(r.fitted_accepts + r.fitted_rejects, r.n_samples);
    }

    #[test]
    fn grid_rejects_high_dimension_and_tiny_grids() {
        let p = crate::plant::make_network_analog(1);
        let rec = interval_record(0.95);
        assert!(matches!(
            grid_audit(&p, &EvalCounter::unlimited(), &rec, 3),
            Err(Error::DimensionTooHigh { n_in: 31 })
        ));
        assert!(matches!(
            grid_audit(&interval_plant(), &EvalCounter::unlimited(), &rec, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_sample_reconciles() {
        let r = mc_audit(&interval_plant(), &EvalCounter::unlimited(), &interval_record(0.95), 1, 3).unwrap();
        assert_eq!(r.n_samples, 1);
        assert!(r.false_accept_rate == 0.0 || r.false_accept_rate == 1.0);
        assert!(r.false_reject_rate == 0.0 || r.false_reject_rate == 1.0);
        assert_eq!(r.fitted_accepts + r.fitted_rejects, 1);
    }

    #[test]
    fn mc_audit_is_deterministic_and_margin_monotone() {
        let p = interval_plant();
        let c = EvalCounter::unlimited();
        let rec = learn_trio(
            &p,
            &c,
            &[2.0],
            &OutputBox::new(vec![-1.0], vec![1.0], vec![0.0]).unwrap(),
            &TrioConfig {
                surface: crate::boundary::SurfaceConfig {
                    degree: 1,
                    ..Default::default()
                },
                ..Default::default()
            },
        )
        .unwrap();
        let a = mc_audit(&p, &c, &rec, 2000, 8).unwrap();
        assert_eq!(a, mc_audit(&p, &c, &rec, 2000, 8).unwrap());
        let mut narrow = rec.clone();
        narrow.surfaces[0] = rec.surfaces[0].with_margin(0.5).unwrap();
        let b = mc_audit(&p, &c, &narrow, 2000, 8).unwrap();
        assert!(b.false_accepts <= a.false_accepts);
        assert!(b.fitted_accepts <= a.fitted_accepts);
        assert_eq!(a.plant_accepts, b.plant_accepts);
    }

    #[test]
    fn report_text_forms() {
        let r = AuditReport::from_flags(&[(true, true), (true, false), (false, true), (false, false)]);
        assert_eq!(r.false_accept_rate, 0.5);
        assert_eq!(r.false_reject_rate, 0.5);
        assert!(r.to_kv().contains("false_accept_rate=0.500000\n"));
        assert_eq!(AuditReport::csv_header().split(',').count(), r.to_csv_row().split(',').count());
    }
}
