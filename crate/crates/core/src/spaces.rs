//! Normalized input geometry: origin-centered unit scaling, random unit
//! directions, rays, and the closed output acceptability box.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Axis-aligned box with finite bounds, `lo <= hi` componentwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim("box upper bound", lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::InvalidArgument("box has zero dimensions".into()));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "box component {i} is unbounded"
                )));
            }
            if l > h {
                return Err(Error::InvalidArgument(format!(
                    "box component {i} has lo {l} > hi {h}"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// True when every component is strictly inside its interval.
    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l < *v && *v < *h)
    }

    /// Index of the first component outside the box, if any.
    pub fn first_violation(&self, x: &[f64]) -> Option<usize> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .position(|(v, (l, h))| !(*l <= *v && *v <= *h))
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }
}

/// Origin plus per-dimension unit scales (physical units per normalized unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedFrame {
    pub origin: Vec<f64>,
    pub scales: Vec<f64>,
}

impl NormalizedFrame {
    pub fn new(origin: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        check_dim("frame scales", origin.len(), scales.len())?;
        if let Some(i) = scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "unit scale {i} must be positive and finite"
            )));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(Self { origin, scales })
    }

    /// Frame whose unit is 1/100 of each domain width.
    pub fn with_default_scales(origin: Vec<f64>, domain: &AxisBox) -> Result<Self> {
        check_dim("origin", domain.dim(), origin.len())?;
        let scales = domain
            .widths()
            .into_iter()
            .map(|w| if w > 0.0 { w / 100.0 } else { 1.0 })
            .collect();
        Self::new(origin, scales)
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn to_normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("input", self.dim(), x.len())?;
        Ok(x
            .iter()
            .zip(self.origin.iter().zip(&self.scales))
            .map(|(v, (o, s))| (v - o) / s)
            .collect())
    }

    pub fn from_normalized(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("normalized vector", self.dim(), v.len())?;
        Ok(v
            .iter()
            .zip(self.origin.iter().zip(&self.scales))
            .map(|(n, (o, s))| o + n * s)
            .collect())
    }
}

/// A ray from the frame origin along a unit direction in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray<'a> {
    pub frame: &'a NormalizedFrame,
    direction: Vec<f64>,
}

impl<'a> Ray<'a> {
    /// `direction` is normalized here; only the zero vector is rejected.
    pub fn new(frame: &'a NormalizedFrame, direction: &[f64]) -> Result<Self> {
        check_dim("ray direction", frame.dim(), direction.len())?;
        let norm = l2_norm(direction);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidArgument("ray direction is zero".into()));
        }
        let direction = direction.iter().map(|d| d / norm).collect();
        Ok(Self { frame, direction })
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    /// Input point at normalized radius `t`; `t = 0` returns the origin exactly.
    pub fn point_at(&self, t: f64) -> Vec<f64> {
        self.frame
            .origin
            .iter()
            .zip(self.frame.scales.iter().zip(&self.direction))
            .map(|(o, (s, d))| o + t * d * s)
            .collect()
    }

    /// Largest `t` with `point_at(t)` inside `domain`.
    pub fn max_domain_radius(&self, domain: &AxisBox) -> Result<f64> {
        check_dim("domain", self.frame.dim(), domain.dim())?;
        if let Some(index) = (0..domain.dim()).find(|&i| {
            let o = self.frame.origin[i];
            !(domain.lo[i] < o && o < domain.hi[i])
        }) {
            return Err(Error::OriginOutsideDomain { index });
        }
        let mut t_max = f64::INFINITY;
        for i in 0..domain.dim() {
            let v = self.direction[i] * self.frame.scales[i];
            let o = self.frame.origin[i];
            let t = if v > 0.0 {
                (domain.hi[i] - o) / v
            } else if v < 0.0 {
                (domain.lo[i] - o) / v
            } else {
                continue;
            };
            t_max = t_max.min(t);
        }
        Ok(t_max)
    }
}

/// Free-function form of [`Ray::point_at`].
pub fn point_on_ray(ray: &Ray<'_>, t: f64) -> Vec<f64> {
    ray.point_at(t)
}

/// Free-function form of [`Ray::max_domain_radius`].
pub fn max_domain_radius(ray: &Ray<'_>, domain: &AxisBox) -> Result<f64> {
    ray.max_domain_radius(domain)
}

/// Closed output acceptability box plus the desired ("best") output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub target: Vec<f64>,
}

impl OutputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        AxisBox::new(lo.clone(), hi.clone())?;
        check_dim("output target", lo.len(), target.len())?;
        for i in 0..lo.len() {
            if !(lo[i] <= target[i] && target[i] <= hi[i]) {
                return Err(Error::InvalidArgument(format!(
                    "target component {i} = {} outside [{}, {}]",
                    target[i], lo[i], hi[i]
                )));
            }
        }
        Ok(Self { lo, hi, target })
    }

    /// Symmetric box `target ± half_width`.
    pub fn around(target: Vec<f64>, half_width: f64) -> Result<Self> {
        let lo = target.iter().map(|t| t - half_width).collect();
        let hi = target.iter().map(|t| t + half_width).collect();
        Self::new(lo, hi, target)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, y: &[f64]) -> Result<bool> {
        check_dim("output", self.dim(), y.len())?;
        Ok(y
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h))
    }
}

pub fn in_output_box(output_box: &OutputBox, y: &[f64]) -> Result<bool> {
    output_box.contains(y)
}

const MAX_ZERO_DRAWS: usize = 64;

/// Isotropic unit vector from normalized standard-normal components.
pub fn sample_unit_direction<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("direction dimension must be >= 1".into()));
    }
    for _ in 0..MAX_ZERO_DRAWS {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2_norm(&v);
        if norm > 1e-300 && norm.is_finite() {
            v.iter_mut().for_each(|c| *c /= norm);
            return Ok(v);
        }
    }
    Err(Error::ZeroVectorDraw {
        attempts: MAX_ZERO_DRAWS,
    })
}

/// How points are drawn inside an origin-centered normalized ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallSampling {
    /// Uniform in volume (radius ∝ U^(1/n)).
    Volume,
    /// Uniform direction, radius uniform in [0, R].
    Radial,
}

impl BallSampling {
    /// Volume sampling up to 3 dimensions; above that almost no volume lies
    /// inside a region whose radius is below the ball radius, so sampling
    /// switches to radial.
    pub fn for_dim(n: usize) -> Self {
        if n <= 3 {
            BallSampling::Volume
        } else {
            BallSampling::Radial
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R, n: usize, radius: f64) -> Result<Vec<f64>> {
        let mut u = sample_unit_direction(rng, n)?;
        let s: f64 = rng.random();
        let r = match self {
            BallSampling::Volume => radius * s.powf(1.0 / n as f64),
            BallSampling::Radial => radius * s,
        };
        u.iter_mut().for_each(|c| *c *= r);
        Ok(u)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
