//! Black-box plant abstraction, budgeted evaluation, and reference plants
//! with analytically known acceptable regions.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::spaces::AxisBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSignature {
    pub n_in: usize,
    pub n_ctrl: usize,
    pub n_out: usize,
    pub input_domain: AxisBox,
    pub control_domain: AxisBox,
}

impl PlantSignature {
    pub fn new(n_out: usize, input_domain: AxisBox, control_domain: AxisBox) -> Result<Self> {
        if n_out == 0 {
            return Err(Error::InvalidPlant("n_out must be >= 1".into()));
        }
        for (name, b) in [("input", &input_domain), ("control", &control_domain)] {
            if b.dim() == 0 {
                return Err(Error::InvalidPlant(format!("{name} domain is empty")));
            }
            if b.lo.iter().chain(&b.hi).any(|v| !v.is_finite()) {
                return Err(Error::InvalidPlant(format!("{name} domain is unbounded")));
            }
            if b.lo.iter().zip(&b.hi).any(|(l, h)| l > h) {
                return Err(Error::InvalidPlant(format!("{name} domain has lo > hi")));
            }
        }
        Ok(Self {
            n_in: input_domain.dim(),
            n_ctrl: control_domain.dim(),
            n_out,
            input_domain,
            control_domain,
        })
    }
}

/// A deterministic mapping `(input, control) -> output` over declared domains.
///
/// Implementations must be pure: identical arguments give bit-identical outputs.
/// Callers go through [`evaluate`], which validates arguments and charges the
/// evaluation budget before calling [`Plant::compute`].
pub trait Plant: Send + Sync {
    fn signature(&self) -> &PlantSignature;

    /// Stable identifier recorded in library provenance.
    fn id(&self) -> String;

    /// Raw mapping. Arguments have already been validated.
    fn compute(&self, x: &[f64], c: &[f64]) -> Vec<f64>;
}

/// Atomic evaluation counter with a hard cap.
///
/// A child counter charges itself and every ancestor, so per-stage counts can
/// be read off while a run-wide budget still applies.
#[derive(Debug)]
pub struct EvalCounter<'p> {
    count: AtomicU64,
    budget: u64,
    parent: Option<&'p EvalCounter<'p>>,
}

impl EvalCounter<'static> {
    pub fn new(budget: u64) -> Self {
        Self {
            count: AtomicU64::new(0),
            budget,
            parent: None,
        }
    }

    pub fn unlimited() -> Self {
        Self::new(u64::MAX)
    }
}

impl<'p> EvalCounter<'p> {
    pub fn child<'a>(&'a self, budget: u64) -> EvalCounter<'a>
    where
        'p: 'a,
    {
        EvalCounter {
            count: AtomicU64::new(0),
            budget,
            parent: Some(self),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn remaining(&self) -> u64 {
        let own = self.budget - self.count();
        match self.parent {
            Some(p) => own.min(p.remaining()),
            None => own,
        }
    }

    /// Charges one evaluation, failing without side effects when any level is at cap.
    pub fn try_charge(&self) -> Result<()> {
        self.count
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                (c < self.budget).then_some(c + 1)
            })
            .map_err(|_| Error::BudgetExhausted {
                budget: self.budget,
            })?;
        if let Some(p) = self.parent {
            if let Err(e) = p.try_charge() {
                self.count.fetch_sub(1, Ordering::SeqCst);
                return Err(e);
            }
        }
        Ok(())
    }
}

/// Validated, budgeted plant evaluation.
pub fn evaluate(
    plant: &dyn Plant,
    counter: &EvalCounter<'_>,
    x: &[f64],
    c: &[f64],
) -> Result<Vec<f64>> {
    let sig = plant.signature();
    check_dim("input", sig.n_in, x.len())?;
    check_dim("control", sig.n_ctrl, c.len())?;
    for (what, v, dom) in [
        ("input", x, &sig.input_domain),
        ("control", c, &sig.control_domain),
    ] {
        if let Some(index) = dom.first_violation(v) {
            return Err(Error::DomainViolation {
                what,
                index,
                value: v[index],
                lo: dom.lo[index],
                hi: dom.hi[index],
            });
        }
    }
    counter.try_charge()?;
    let y = plant.compute(x, c);
    debug_assert_eq!(y.len(), sig.n_out);
    if let Some(index) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput { index });
    }
    Ok(y)
}

/// `y = A x + B c + b`.
#[derive(Debug, Clone)]
pub struct AffinePlant {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    bias: Vec<f64>,
    signature: PlantSignature,
}

pub fn make_affine_plant(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    bias: Vec<f64>,
    input_domain: AxisBox,
    control_domain: AxisBox,
) -> Result<AffinePlant> {
    let n_out = bias.len();
    let signature = PlantSignature::new(n_out, input_domain, control_domain)?;
    check_dim("A rows", n_out, a.len())?;
    check_dim("B rows", n_out, b.len())?;
    for row in &a {
        check_dim("A columns", signature.n_in, row.len())?;
    }
    for row in &b {
        check_dim("B columns", signature.n_ctrl, row.len())?;
    }
    if a.iter().chain(&b).flatten().chain(&bias).any(|v| !v.is_finite()) {
        return Err(Error::InvalidPlant("affine coefficients must be finite".into()));
    }
    Ok(AffinePlant {
        a,
        b,
        bias,
        signature,
    })
}

impl AffinePlant {
    /// `y = x + c` on scalar domains.
    pub fn scalar_integrator(input_domain: (f64, f64), control_domain: (f64, f64)) -> Result<Self> {
        make_affine_plant(
            vec![vec![1.0]],
            vec![vec![1.0]],
            vec![0.0],
            AxisBox::new(vec![input_domain.0], vec![input_domain.1])?,
            AxisBox::new(vec![control_domain.0], vec![control_domain.1])?,
        )
    }
}

impl Plant for AffinePlant {
    fn signature(&self) -> &PlantSignature {
        &self.signature
    }

    fn id(&self) -> String {
        format!(
            "affine-{}x{}x{}",
            self.signature.n_in, self.signature.n_ctrl, self.signature.n_out
        )
    }

    fn compute(&self, x: &[f64], c: &[f64]) -> Vec<f64> {
        (0..self.bias.len())
            .map(|j| {
                let ax: f64 = self.a[j].iter().zip(x).map(|(a, v)| a * v).sum();
                let bc: f64 = self.b[j].iter().zip(c).map(|(b, v)| b * v).sum();
                ax + bc + self.bias[j]
            })
            .collect()
    }
}

/// `g(c) = constant + Σ linear_k c_k + Σ quadratic_k c_k²`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlOffset {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub linear: Vec<f64>,
    #[serde(default)]
    pub quadratic: Vec<f64>,
}

impl ControlOffset {
    pub fn eval(&self, c: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(c).map(|(a, v)| a * v).sum();
        let quad: f64 = self.quadratic.iter().zip(c).map(|(a, v)| a * v * v).sum();
        self.constant + lin + quad
    }
}

/// Scalar `y = Σ W_i (x_i − center_i)² + g(c)`; sublevel sets are ellipsoids.
#[derive(Debug, Clone)]
pub struct EllipsoidalPlant {
    center: Vec<f64>,
    weights: Vec<f64>,
    offset: ControlOffset,
    signature: PlantSignature,
}

pub fn make_ellipsoidal_plant(
    center: Vec<f64>,
    weights: Vec<f64>,
    offset: ControlOffset,
    input_domain: AxisBox,
    control_domain: AxisBox,
) -> Result<EllipsoidalPlant> {
    let signature = PlantSignature::new(1, input_domain, control_domain)?;
    check_dim("ellipsoid center", signature.n_in, center.len())?;
    check_dim("ellipsoid weights", signature.n_in, weights.len())?;
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidPlant("ellipsoid weights must be > 0".into()));
    }
    if offset.linear.len() > signature.n_ctrl || offset.quadratic.len() > signature.n_ctrl {
        return Err(Error::InvalidPlant("control offset longer than control dimension".into()));
    }
    if let Some(index) = signature.input_domain.first_violation(&center) {
        return Err(Error::DomainViolation {
            what: "ellipsoid center",
            index,
            value: center[index],
            lo: signature.input_domain.lo[index],
            hi: signature.input_domain.hi[index],
        });
    }
    Ok(EllipsoidalPlant {
        center,
        weights,
        offset,
        signature,
    })
}

impl EllipsoidalPlant {
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Value of `Σ W_i (x_i − center_i)²`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.center.iter().zip(&self.weights))
            .map(|(v, (m, w))| w * (v - m) * (v - m))
            .sum()
    }

    /// Closed-form cutoff radius from the center along physical direction `u`
    /// for the bound `y <= h`; `None` when `h < g(c)`.
    pub fn exact_cutoff_radius(&self, u: &[f64], h: f64, c: &[f64]) -> Option<f64> {
        let slack = h - self.offset.eval(c);
        if slack < 0.0 {
            return None;
        }
        let denom: f64 = u.iter().zip(&self.weights).map(|(d, w)| w * d * d).sum();
        Some((slack / denom).sqrt())
    }

    /// Exact membership of `x` in the acceptable region `y <= h` under control `c`.
    pub fn exact_member(&self, x: &[f64], h: f64, c: &[f64]) -> bool {
        self.quadratic_form(x) + self.offset.eval(c) <= h
    }
}

impl Plant for EllipsoidalPlant {
    fn signature(&self) -> &PlantSignature {
        &self.signature
    }

    fn id(&self) -> String {
        format!("ellipsoidal-{}d", self.signature.n_in)
    }

    fn compute(&self, x: &[f64], c: &[f64]) -> Vec<f64> {
        vec![self.quadratic_form(x) + self.offset.eval(c)]
    }
}

/// Synthetic network-scale plant: 31 demand inputs, 43 link-capacity controls,
/// one aggregate delay/cost output.
///
/// Each link carries background load plus a weighted sum of squared demand
/// deviations; its delay is a load/(capacity − load) ratio with the utilization
/// passed through a smooth `tanh` saturation so the plant stays bounded.
/// Capacity spending carries a quadratic price.
#[derive(Debug, Clone)]
pub struct NetworkAnalog {
    seed: u64,
    demand_weights: Vec<Vec<f64>>,
    background: Vec<f64>,
    base_capacity: Vec<f64>,
    capacity_gain: Vec<f64>,
    link_weight: Vec<f64>,
    price: Vec<f64>,
    signature: PlantSignature,
}

pub const NETWORK_INPUTS: usize = 31;
pub const NETWORK_CONTROLS: usize = 43;
const UTILIZATION_CEILING: f64 = 0.95;

pub fn make_network_analog(seed: u64) -> NetworkAnalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links = NETWORK_CONTROLS;
    let demand_weights = (0..links)
        .map(|_| {
            (0..NETWORK_INPUTS)
                .map(|_| rng.random_range(0.0..1.0) / NETWORK_INPUTS as f64)
                .collect()
        })
        .collect();
    let background = (0..links).map(|_| rng.random_range(0.2..0.4)).collect();
    let base_capacity = (0..links).map(|_| rng.random_range(0.5..0.8)).collect();
    let capacity_gain = (0..links).map(|_| rng.random_range(0.4..0.8)).collect();
    let link_weight = (0..links)
        .map(|_| rng.random_range(0.5..1.5) / links as f64)
        .collect();
    let price = (0..links)
        .map(|_| rng.random_range(0.5..1.5) / links as f64)
        .collect();
    let signature = PlantSignature::new(
        1,
        AxisBox::cube(NETWORK_INPUTS, -1.0, 1.0).expect("static box"),
        AxisBox::cube(NETWORK_CONTROLS, 0.0, 1.0).expect("static box"),
    )
    .expect("static signature");
    NetworkAnalog {
        seed,
        demand_weights,
        background,
        base_capacity,
        capacity_gain,
        link_weight,
        price,
        signature,
    }
}

impl NetworkAnalog {
    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Plant for NetworkAnalog {
    fn signature(&self) -> &PlantSignature {
        &self.signature
    }

    fn id(&self) -> String {
        format!("network-analog-seed-{}", self.seed)
    }

    fn compute(&self, x: &[f64], c: &[f64]) -> Vec<f64> {
        let mut y = 0.0;
        for l in 0..NETWORK_CONTROLS {
            let demand: f64 = self.demand_weights[l]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v * v)
                .sum();
            let load = self.background[l] + demand;
            let capacity = self.base_capacity[l] + self.capacity_gain[l] * c[l];
            let rho = UTILIZATION_CEILING * (load / capacity / UTILIZATION_CEILING).tanh();
            y += self.link_weight[l] * rho / (1.0 - rho) + self.price[l] * c[l] * c[l];
        }
        vec![y]
    }
}

/// Scalar `y = |‖x‖ − 1|` on a 2-D input; acceptable sets under `y <= h` are
/// annuli, so regions around ring points contain holes.
#[derive(Debug, Clone)]
pub struct AnnulusPlant {
    signature: PlantSignature,
}

pub fn make_annulus_plant() -> AnnulusPlant {
    AnnulusPlant {
        signature: PlantSignature::new(
            1,
            AxisBox::cube(2, -3.0, 3.0).expect("static box"),
            AxisBox::cube(1, -1.0, 1.0).expect("static box"),
        )
        .expect("static signature"),
    }
}

impl Plant for AnnulusPlant {
    fn signature(&self) -> &PlantSignature {
        &self.signature
    }

    fn id(&self) -> String {
        "annulus".into()
    }

    fn compute(&self, x: &[f64], _c: &[f64]) -> Vec<f64> {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        vec![(r - 1.0).abs()]
    }
}

/// Serializable description of a reference plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    Affine {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        bias: Vec<f64>,
        input_domain: AxisBox,
        control_domain: AxisBox,
    },
    Ellipsoidal {
        center: Vec<f64>,
        weights: Vec<f64>,
        #[serde(default)]
        offset: ControlOffset,
        input_domain: AxisBox,
        control_domain: AxisBox,
    },
    NetworkAnalog {
        seed: u64,
    },
    Annulus,
}

impl PlantSpec {
    pub fn build(&self) -> Result<Box<dyn Plant>> {
        Ok(match self {
            PlantSpec::Affine {
                a,
                b,
                bias,
                input_domain,
                control_domain,
            } => Box::new(make_affine_plant(
                a.clone(),
                b.clone(),
                bias.clone(),
                input_domain.clone(),
                control_domain.clone(),
            )?),
            PlantSpec::Ellipsoidal {
                center,
                weights,
                offset,
                input_domain,
                control_domain,
            } => Box::new(make_ellipsoidal_plant(
                center.clone(),
                weights.clone(),
                offset.clone(),
                input_domain.clone(),
                control_domain.clone(),
            )?),
            PlantSpec::NetworkAnalog { seed } => Box::new(make_network_analog(*seed)),
            PlantSpec::Annulus => Box::new(make_annulus_plant()),
        })
    }
}
