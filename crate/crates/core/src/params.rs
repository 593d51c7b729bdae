//! Model coefficients, the volume-fraction factors `P`, `S`, `R`, `Q`, the
//! reaction terms and the rescaling from dimensional to dimensionless form.
//!
//! Everything downstream of this module works in dimensionless variables where
//! the carrying capacity, the diffusion speed and the proliferation rate are
//! all one. The vasculature therefore lives in `[0, 1]` and the tumor and
//! necrosis densities are nonnegative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset added to the denominators of `P` and `Q` so that both evaluate to 0
/// at `(phi, t) = (0, 0)` instead of `0/0`.
pub const FACTOR_EPS: f64 = 1e-12;

/// Step of the central differences used by [`check_hypotheses`].
pub const FD_STEP: f64 = 1e-5;

/// Physical coefficients of the model before rescaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionalParams {
    /// Diffusion speed (cm²/s).
    pub nu: f64,
    /// Chemotaxis speed (cm²/(s·density)).
    pub kappa: f64,
    /// Tumor proliferation rate (1/day).
    pub rho: f64,
    /// Hypoxic death rate (1/day).
    pub alpha: f64,
    /// Vasculature proliferation rate (1/day).
    pub gamma: f64,
    /// Vascular destruction by the tumor (1/day).
    pub delta: f64,
    /// Carrying capacity (cell/cm³).
    pub capacity: f64,
}

impl DimensionalParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("nu", self.nu),
            ("kappa", self.kappa),
            ("rho", self.rho),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("capacity", self.capacity),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!(
                    "dimensional parameter {name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The four coefficients that survive rescaling.
///
/// The exponent of the change of variable `T = exp(chi * Phi) * u` is
/// `chi = kappa` in these units, see [`DimensionlessParams::chi`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionlessParams {
    pub kappa: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for DimensionlessParams {
    /// Reference values used by the ring and surface experiments.
    fn default() -> Self {
        DimensionlessParams {
            kappa: 5.0,
            alpha: 45.0,
            gamma: 0.255,
            delta: 2.55,
        }
    }
}

impl DimensionlessParams {
    pub fn new(kappa: f64, alpha: f64, gamma: f64, delta: f64) -> Result<Self> {
        let p = DimensionlessParams {
            kappa,
            alpha,
            gamma,
            delta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Exponent coefficient of the change of variable. With unit diffusion
    /// and unit capacity this is the chemotaxis coefficient itself.
    #[inline]
    pub fn chi(&self) -> f64 {
        self.kappa
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa", self.kappa),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "parameter {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Values of the four volume fractions at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FactorValues {
    /// Proliferation fraction, grows with vasculature.
    pub p: f64,
    /// Hypoxia fraction, grows as vasculature drops.
    pub s: f64,
    /// Vasculature growth fraction, grows with tumor.
    pub r: f64,
    /// Vascular destruction fraction, grows with tumor.
    pub q: f64,
}

/// Which family of factor functions the stepper evaluates.
///
/// `Zero` switches every reaction off and exists for conservation tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FactorModel {
    #[default]
    Standard,
    Zero,
}

impl FactorModel {
    /// Evaluates the factors after clamping `phi` to `[0, 1]` and `t` to
    /// `[0, inf)`, the same truncation used to keep the continuous problem
    /// inside its admissible set.
    #[inline]
    pub fn evaluate(self, phi: f64, t: f64) -> FactorValues {
        match self {
            FactorModel::Standard => standard_factors(phi.clamp(0.0, 1.0), t.max(0.0)),
            FactorModel::Zero => FactorValues::default(),
        }
    }
}

#[inline]
fn standard_factors(phi: f64, t: f64) -> FactorValues {
    FactorValues {
        p: phi / (phi + t + FACTOR_EPS),
        s: (1.0 - phi) / (t + phi + 1.0),
        r: t / (t * t + phi + 1.0),
        q: t / (phi + t + FACTOR_EPS),
    }
}

fn check_admissible(phi: f64, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::Domain(format!("vasculature {phi} outside [0, 1]")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("tumor density {t} must be >= 0")));
    }
    Ok(())
}

/// Evaluates `P`, `S`, `R`, `Q` at an admissible point.
///
/// ```
/// let f = gbm_core::params::factors(0.0, 1.0).unwrap();
/// assert_eq!(f.p, 0.0);
/// assert_eq!(f.r, 0.5);
/// ```
pub fn factors(phi: f64, t: f64) -> Result<FactorValues> {
    check_admissible(phi, t)?;
    Ok(standard_factors(phi, t))
}

/// Right-hand sides `(f1, f2, f3)` of the tumor, necrosis and vasculature
/// equations in dimensionless form.
pub fn reaction_rhs(
    t: f64,
    n: f64,
    phi: f64,
    params: &DimensionlessParams,
) -> Result<(f64, f64, f64)> {
    check_admissible(phi, t)?;
    if !(n >= 0.0 && n.is_finite()) {
        return Err(Error::Domain(format!("necrosis density {n} must be >= 0")));
    }
    Ok(reaction_rhs_unchecked(t, n, phi, params, FactorModel::Standard))
}

#[inline]
pub(crate) fn reaction_rhs_unchecked(
    t: f64,
    n: f64,
    phi: f64,
    params: &DimensionlessParams,
    model: FactorModel,
) -> (f64, f64, f64) {
    let f = model.evaluate(phi, t);
    let crowding = 1.0 - (t + n + phi);
    let hypoxia = params.alpha * f.s * t;
    let destruction = params.delta * f.q * phi;
    let f1 = f.p * t * crowding - hypoxia;
    let f2 = hypoxia + destruction;
    let f3 = params.gamma * f.r * phi * crowding - destruction;
    (f1, f2, f3)
}

/// Result of [`adimensionalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescaling {
    pub params: DimensionlessParams,
    /// Multiplier taking physical time to dimensionless time (`s = rho * t`).
    pub time_scale: f64,
    /// Multiplier taking physical length to dimensionless length
    /// (`y = sqrt(rho / nu) * x`).
    pub space_scale: f64,
}

/// Rescales densities by the capacity, time by `rho` and space by
/// `sqrt(rho / nu)`.
pub fn adimensionalize(dp: &DimensionalParams) -> Result<Rescaling> {
    dp.validate()?;
    let params = DimensionlessParams {
        kappa: dp.capacity * dp.kappa / dp.nu,
        alpha: dp.alpha / dp.rho,
        gamma: dp.gamma / dp.rho,
        delta: dp.delta / dp.rho,
    };
    Ok(Rescaling {
        params,
        time_scale: dp.rho,
        space_scale: (dp.rho / dp.nu).sqrt(),
    })
}

/// Sampling grid of [`check_hypotheses`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub phi_samples: usize,
    pub t_max: f64,
    pub t_samples: usize,
}

impl GridSpec {
    pub fn phi(&self, i: usize) -> f64 {
        i as f64 / (self.phi_samples - 1) as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        self.t_max * j as f64 / (self.t_samples - 1) as f64
    }
}

/// Grid estimates of the constants in the boundedness hypotheses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisReport {
    /// `max R * phi / P` over grid points with `P > 0`.
    pub c1: f64,
    /// Grid point `(phi, t)` where `c1` is attained.
    pub c1_at: (f64, f64),
    /// Whether `1 >= kappa * gamma * c1` (proliferation dominates chemotactic
    /// feedback).
    pub rho_condition_holds: bool,
    /// Bound on the partials of `R * phi`.
    pub c2: f64,
    /// Bound on the partials of `Q * phi`.
    pub c3: f64,
    /// Bound on the partials of `S * t`.
    pub c4: f64,
    pub grid: GridSpec,
}

/// Central difference of `g` in both arguments at `(phi, t)`, with the
/// stencil points clamped to the admissible set. Returns the larger magnitude.
fn max_partial(g: impl Fn(f64, f64) -> f64, phi: f64, t: f64) -> f64 {
    let (pm, pp) = ((phi - FD_STEP).max(0.0), (phi + FD_STEP).min(1.0));
    let (tm, tp) = ((t - FD_STEP).max(0.0), t + FD_STEP);
    let d_phi = (g(pp, t) - g(pm, t)) / (pp - pm);
    let d_t = (g(phi, tp) - g(phi, tm)) / (tp - tm);
    d_phi.abs().max(d_t.abs())
}

/// Samples the structural constants on a uniform `(phi, t)` grid over
/// `[0, 1] x [0, t_max]`.
///
/// A failing growth condition is reported through
/// [`HypothesisReport::rho_condition_holds`], not as an error.
pub fn check_hypotheses(
    params: &DimensionlessParams,
    phi_samples: usize,
    t_max: f64,
    t_samples: usize,
) -> Result<HypothesisReport> {
    params.validate()?;
    if phi_samples < 2 || t_samples < 2 {
        return Err(Error::Domain("sampling counts must be >= 2".into()));
    }
    if !(t_max >= 0.0 && t_max.is_finite()) {
        return Err(Error::Domain(format!("t_max must be >= 0, got {t_max}")));
    }
    let grid = GridSpec {
        phi_samples,
        t_max,
        t_samples,
    };
    let f = |phi: f64, t: f64| FactorModel::Standard.evaluate(phi, t);
    let r_phi = |phi: f64, t: f64| f(phi, t).r * phi.clamp(0.0, 1.0);
    let q_phi = |phi: f64, t: f64| f(phi, t).q * phi.clamp(0.0, 1.0);
    let s_t = |phi: f64, t: f64| f(phi, t).s * t.max(0.0);

    let (mut c1, mut c1_at) = (0.0f64, (0.0, 0.0));
    let (mut c2, mut c3, mut c4) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..phi_samples {
        let phi = grid.phi(i);
        for j in 0..t_samples {
            let t = grid.t(j);
            let fv = f(phi, t);
            if fv.p > 0.0 {
                let ratio = fv.r * phi / fv.p;
                if ratio > c1 {
                    c1 = ratio;
                    c1_at = (phi, t);
                }
            }
            c2 = c2.max(max_partial(r_phi, phi, t));
            c3 = c3.max(max_partial(q_phi, phi, t));
            c4 = c4.max(max_partial(s_t, phi, t));
        }
    }
    Ok(HypothesisReport {
        c1,
        c1_at,
        rho_condition_holds: 1.0 >= params.kappa * params.gamma * c1,
        c2,
        c3,
        c4,
        grid,
    })
}
