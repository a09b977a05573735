//! Moment-form population balance for seeded batch cooling crystallization.
//!
//! Secondary nucleation only, size-independent Arrhenius growth, and the
//! solute mass balance. Every kinetic expression is written once against
//! [`Numeric`] so the same code drives the forward simulator (`f64`) and the
//! physics residual (autodiff variables).

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Universal gas constant [J/(mol K)].
pub const GAS_CONSTANT: f64 = 8.314;

/// Guard range for solubility evaluation [K].
pub const SOLUBILITY_T_MIN: f64 = 223.15;
pub const SOLUBILITY_T_MAX: f64 = 373.15;

/// Arithmetic needed by the kinetic expressions.
pub trait Numeric:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn exp(&self) -> Self;
    fn scale(&self, c: f64) -> Self;
    /// `self + c`.
    fn offset(&self, c: f64) -> Self;
    /// `max(self, 0)`.
    fn positive_part(&self) -> Self;
    /// `self^exponent` for a non-negative base produced by [`positive_part`];
    /// zero for a zero base, with finite derivatives.
    ///
    /// [`positive_part`]: Numeric::positive_part
    fn pow(&self, exponent: &Self) -> Self;
}

impl Numeric for f64 {
    fn exp(&self) -> Self {
        f64::exp(*self)
    }

    fn scale(&self, c: f64) -> Self {
        self * c
    }

    fn offset(&self, c: f64) -> Self {
        self + c
    }

    fn positive_part(&self) -> Self {
        self.max(0.0)
    }

    fn pow(&self, exponent: &Self) -> Self {
        if *self <= 0.0 {
            0.0
        } else {
            self.powf(*exponent)
        }
    }
}

/// Names of the six kinetic constants, in storage order.
pub const PARAMETER_NAMES: [&str; 6] = ["k_b2", "alpha", "beta", "k_g", "E_ag", "gamma_g"];

/// The six PBM kinetic constants, stored as natural logarithms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParameters {
    pub log_kb2: f64,
    pub log_alpha: f64,
    pub log_beta: f64,
    pub log_kg: f64,
    pub log_eag: f64,
    pub log_gammag: f64,
}

impl KineticParameters {
    /// Literature values used to generate the synthetic corpus.
    pub const REFERENCE: [f64; 6] = [6.000e3, 2.080, 0.713, 2.730e5, 4.130e4, 1.240];

    pub fn reference() -> Self {
        Self::from_physical(Self::REFERENCE)
    }

    /// All physical values equal to one (log values zero), the learner's
    /// starting point.
    pub fn unit() -> Self {
        Self::from_log([0.0; 6])
    }

    pub fn from_physical(values: [f64; 6]) -> Self {
        Self::from_log(values.map(f64::ln))
    }

    pub fn from_log(v: [f64; 6]) -> Self {
        Self {
            log_kb2: v[0],
            log_alpha: v[1],
            log_beta: v[2],
            log_kg: v[3],
            log_eag: v[4],
            log_gammag: v[5],
        }
    }

    pub fn log_values(&self) -> [f64; 6] {
        [
            self.log_kb2,
            self.log_alpha,
            self.log_beta,
            self.log_kg,
            self.log_eag,
            self.log_gammag,
        ]
    }

    pub fn physical(&self) -> [f64; 6] {
        self.log_values().map(f64::exp)
    }

    pub fn values(&self) -> KineticValues<f64> {
        KineticValues::from_array(self.physical())
    }

    pub fn is_finite(&self) -> bool {
        self.log_values().iter().all(|v| v.is_finite())
    }
}

/// Physical (exponentiated) kinetic constants over any numeric type.
#[derive(Debug, Clone)]
pub struct KineticValues<T> {
    pub kb2: T,
    pub alpha: T,
    pub beta: T,
    pub kg: T,
    pub eag: T,
    pub gammag: T,
}

impl<T: Clone> KineticValues<T> {
    pub fn from_array(v: [T; 6]) -> Self {
        let [kb2, alpha, beta, kg, eag, gammag] = v;
        Self {
            kb2,
            alpha,
            beta,
            kg,
            eag,
            gammag,
        }
    }
}

/// Material constants and the unit conventions for the moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalConstants {
    /// Volume shape factor [-].
    pub k_v: f64,
    /// Crystal density [g/cm^3].
    pub rho: f64,
    /// Gas constant [J/(mol K)].
    #[serde(default = "default_gas_constant")]
    pub gas_constant: f64,
    /// Converts mu3 [um^3/g solvent] to cm^3 per g solvent.
    pub unit_mu3_to_cm3_per_g: f64,
    /// Converts k_v rho mu3 to crystal mass loading in g/kg.
    pub unit_ms_scale: f64,
}

fn default_gas_constant() -> f64 {
    GAS_CONSTANT
}

impl Default for PhysicalConstants {
    /// `k_v * rho` is calibrated to 1e8 so that a reference run starting at
    /// C0 = 0.45 g/g desupersaturates to S close to 1 within 500 min; only the
    /// product enters the model.
    fn default() -> Self {
        Self {
            k_v: 7.92e7,
            rho: 1.263,
            gas_constant: GAS_CONSTANT,
            unit_mu3_to_cm3_per_g: 1e-12,
            unit_ms_scale: 1e-12 * 1000.0,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("k_v", self.k_v),
            ("rho", self.rho),
            ("gas_constant", self.gas_constant),
            ("unit_mu3_to_cm3_per_g", self.unit_mu3_to_cm3_per_g),
            ("unit_ms_scale", self.unit_ms_scale),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Factor linking concentration to the third moment:
    /// `dC/dt = -mass_balance_factor * dmu3/dt`.
    pub fn mass_balance_factor(&self) -> f64 {
        self.unit_mu3_to_cm3_per_g * self.k_v * self.rho
    }
}

/// One time instant of a batch: moments per g solvent and concentration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentState {
    pub mu0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub c: f64,
}

impl MomentState {
    pub const NAMES: [&'static str; 5] = ["mu0", "mu1", "mu2", "mu3", "C"];

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            mu0: v[0],
            mu1: v[1],
            mu2: v[2],
            mu3: v[3],
            c: v[4],
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.mu0, self.mu1, self.mu2, self.mu3, self.c]
    }

    pub fn is_non_negative(&self) -> bool {
        self.to_array().iter().all(|v| *v >= 0.0)
    }
}

/// Cubic solubility correlation in absolute temperature with an optional
/// multiplicative bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolubilityModel {
    pub coefficients: [f64; 4],
    #[serde(default)]
    pub shift_fraction: f64,
}

impl Default for SolubilityModel {
    fn default() -> Self {
        Self::reference()
    }
}

impl SolubilityModel {
    /// Paracetamol correlation, g solute per g solvent.
    pub fn reference() -> Self {
        Self {
            coefficients: [-16.17, 1.765e-1, -6.439e-4, 7.915e-7],
            shift_fraction: 0.0,
        }
    }

    pub fn shifted(self, shift_fraction: f64) -> Self {
        Self {
            shift_fraction,
            ..self
        }
    }

    /// Polynomial value without range or sign checks.
    pub fn polynomial(&self, t_kelvin: f64) -> f64 {
        let [c0, c1, c2, c3] = self.coefficients;
        (1.0 + self.shift_fraction) * (c0 + t_kelvin * (c1 + t_kelvin * (c2 + t_kelvin * c3)))
    }

    pub fn evaluate(&self, t_kelvin: f64) -> Result<f64> {
        if !(SOLUBILITY_T_MIN..=SOLUBILITY_T_MAX).contains(&t_kelvin) {
            return Err(Error::Range {
                quantity: "temperature [K]",
                value: t_kelvin,
                min: SOLUBILITY_T_MIN,
                max: SOLUBILITY_T_MAX,
            });
        }
        let cs = self.polynomial(t_kelvin);
        if !(cs > 0.0) {
            return Err(Error::Evaluation(format!(
                "solubility {cs} at {t_kelvin} K is not positive"
            )));
        }
        Ok(cs)
    }
}

pub fn solubility(model: &SolubilityModel, t_kelvin: f64) -> Result<f64> {
    model.evaluate(t_kelvin)
}

pub fn supersaturation(c: f64, c_sat: f64) -> Result<f64> {
    if !(c_sat > 0.0) {
        return Err(Error::Domain(format!(
            "saturation concentration must be positive, got {c_sat}"
        )));
    }
    Ok(c / c_sat)
}

/// Growth rate [um/min]; zero at or below saturation.
pub fn growth_rate(p: &KineticParameters, t_kelvin: f64, c: f64, c_sat: f64) -> Result<f64> {
    if !(t_kelvin > 0.0) {
        return Err(Error::Domain(format!(
            "absolute temperature must be positive, got {t_kelvin}"
        )));
    }
    Ok(growth_generic(&p.values(), &t_kelvin, &c, &c_sat, GAS_CONSTANT))
}

/// Secondary nucleation rate [#/(min g solvent)]; zero at or below S = 1.
pub fn secondary_nucleation_rate(p: &KineticParameters, s: f64, m_s: f64) -> f64 {
    nucleation_generic(&p.values(), &s, &m_s)
}

/// Crystal mass loading m_s [g crystals / kg solvent].
pub fn crystal_mass_loading(mu3: f64, consts: &PhysicalConstants) -> f64 {
    consts.unit_ms_scale * consts.k_v * consts.rho * mu3
}

pub fn growth_generic<T: Numeric>(
    p: &KineticValues<T>,
    t_kelvin: &T,
    c: &T,
    c_sat: &T,
    gas_constant: f64,
) -> T {
    let arrhenius = (-(p.eag.clone() / t_kelvin.scale(gas_constant))).exp();
    let driving = (c.clone() - c_sat.clone()).positive_part();
    p.kg.clone() * arrhenius * driving.pow(&p.gammag)
}

pub fn nucleation_generic<T: Numeric>(p: &KineticValues<T>, s: &T, m_s: &T) -> T {
    let excess = s.offset(-1.0).positive_part();
    p.kb2.clone() * excess.pow(&p.alpha) * m_s.positive_part().pow(&p.beta)
}

/// Time derivatives `[dmu0, dmu1, dmu2, dmu3, dC]` for a state given as five
/// numeric components, with the saturation concentration precomputed.
pub fn moment_rhs_generic<T: Numeric>(
    x: &[T; 5],
    t_kelvin: &T,
    c_sat: &T,
    p: &KineticValues<T>,
    consts: &PhysicalConstants,
) -> [T; 5] {
    let [mu0, mu1, mu2, mu3, c] = x;
    let g = growth_generic(p, t_kelvin, c, c_sat, consts.gas_constant);
    let s = c.clone() / c_sat.clone();
    let m_s = mu3.scale(consts.unit_ms_scale * consts.k_v * consts.rho);
    let b2 = nucleation_generic(p, &s, &m_s);
    let dmu3 = g.clone() * mu2.clone().scale(3.0);
    let dc = -dmu3.scale(consts.mass_balance_factor());
    [
        b2,
        g.clone() * mu0.clone(),
        g.clone() * mu1.clone().scale(2.0),
        dmu3,
        dc,
    ]
}

/// Right-hand side of the moment ODE system at one state and temperature.
pub fn moment_rhs(
    x: &MomentState,
    t_kelvin: f64,
    p: &KineticParameters,
    model: &SolubilityModel,
    consts: &PhysicalConstants,
) -> Result<[f64; 5]> {
    let c_sat = model.evaluate(t_kelvin)?;
    let values = p.values();
    let xs = x.to_array();
    Ok(moment_rhs_generic(&xs, &t_kelvin, &c_sat, &values, consts))
}
