use crystal_pirnn::autodiff::{Tape, Tensor};
use crystal_pirnn::pbm::*;
use crystal_pirnn::Error;
use proptest::prelude::*;

fn reference_polynomial(t: f64) -> f64 {
    -16.17 + 1.765e-1 * t - 6.439e-4 * t.powi(2) + 7.915e-7 * t.powi(3)
}

#[test]
fn solubility_reference_points() {
    let m = SolubilityModel::reference();
    let a = solubility(&m, 298.15).unwrap();
    let b = solubility(&m, 323.15).unwrap();
    assert!((a - reference_polynomial(298.15)).abs() < 1e-12);
    assert!((b - reference_polynomial(323.15)).abs() < 1e-12);
    assert!((a - 0.1926).abs() < 5e-5, "{a}");
    // The commonly quoted 0.3353 does not follow from the coefficients.
    assert!((b - 0.3355).abs() < 5e-5, "{b}");
}

#[test]
fn solubility_shift_is_multiplicative() {
    let base = SolubilityModel::reference();
    let shifted = base.shifted(0.10);
    for t in [280.0, 300.0, 315.5, 323.15] {
        let ratio = solubility(&shifted, t).unwrap() / solubility(&base, t).unwrap();
        assert!((ratio - 1.10).abs() < 1e-14);
    }
}

#[test]
fn solubility_range_and_sign_errors() {
    let m = SolubilityModel::reference();
    assert!(matches!(solubility(&m, 200.0), Err(Error::Range { .. })));
    assert!(matches!(solubility(&m, 400.0), Err(Error::Range { .. })));
    let bad = SolubilityModel {
        coefficients: [-1.0, 0.0, 0.0, 0.0],
        shift_fraction: 0.0,
    };
    assert!(matches!(solubility(&bad, 300.0), Err(Error::Evaluation(_))));
}

#[test]
fn solubility_positive_over_operating_range() {
    let m = SolubilityModel::reference();
    for k in 0..=50 {
        let t = 273.15 + k as f64;
        assert!(solubility(&m, t).unwrap() > 0.0);
    }
}

#[test]
fn supersaturation_cases() {
    assert_eq!(supersaturation(0.2, 0.2).unwrap(), 1.0);
    assert_eq!(supersaturation(0.4, 0.2).unwrap(), 2.0);
    assert_eq!(supersaturation(0.0, 0.2).unwrap(), 0.0);
    assert!(matches!(supersaturation(0.1, 0.0), Err(Error::Domain(_))));
}

#[test]
fn growth_rate_oracle() {
    let p = KineticParameters::reference();
    let g = growth_rate(&p, 313.15, 0.30, 0.25).unwrap();
    let expected = 2.730e5 * (-4.130e4 / (8.314 * 313.15)).exp() * 0.05f64.powf(1.240);
    assert!((g - expected).abs() < 1e-15 * expected.abs().max(1.0));
    assert!((g - 8.6e-4).abs() / 8.6e-4 < 0.02, "{g}");
    assert_eq!(growth_rate(&p, 313.15, 0.25, 0.25).unwrap(), 0.0);
    assert_eq!(growth_rate(&p, 313.15, 0.20, 0.25).unwrap(), 0.0);
    assert!(matches!(growth_rate(&p, 0.0, 0.3, 0.2), Err(Error::Domain(_))));
}

#[test]
fn growth_rate_degenerate_exponents() {
    let p0 = KineticParameters::from_physical([1.0, 1.0, 1.0, 7.5, 0.0, 1.0]);
    let g = growth_rate(&p0, 300.0, 0.33, 0.21).unwrap();
    assert!((g - 7.5 * 0.12).abs() < 1e-14);
}

#[test]
fn nucleation_oracle() {
    let p = KineticParameters::reference();
    let b = secondary_nucleation_rate(&p, 1.2, 10.0);
    let expected = 6000.0 * 0.2f64.powf(2.08) * 10f64.powf(0.713);
    assert!((b - expected).abs() / expected < 1e-12);
    assert_eq!(secondary_nucleation_rate(&p, 1.0, 10.0), 0.0);
    assert_eq!(secondary_nucleation_rate(&p, 0.8, 10.0), 0.0);
    assert_eq!(secondary_nucleation_rate(&p, 1.5, 0.0), 0.0);
}

#[test]
fn mass_loading_definition() {
    let unit = PhysicalConstants {
        k_v: 1.0,
        rho: 1.0,
        gas_constant: GAS_CONSTANT,
        unit_mu3_to_cm3_per_g: 1e-12,
        unit_ms_scale: 1000.0,
    };
    assert_eq!(crystal_mass_loading(0.0, &unit), 0.0);
    assert!((crystal_mass_loading(2e-3, &unit) - 2.0).abs() < 1e-15);
    let c = PhysicalConstants::default();
    assert_eq!(crystal_mass_loading(6.0, &c), 2.0 * crystal_mass_loading(3.0, &c));
}

#[test]
fn rhs_equilibrium_and_empty_seed() {
    let p = KineticParameters::reference();
    let m = SolubilityModel::reference();
    let c = PhysicalConstants::default();
    let t = 310.0;
    let cs = solubility(&m, t).unwrap();
    let at_eq = MomentState::from_array([1e6, 1e8, 1e10, 1e12, cs]);
    assert_eq!(moment_rhs(&at_eq, t, &p, &m, &c).unwrap(), [0.0; 5]);
    let empty = MomentState::from_array([0.0, 0.0, 0.0, 0.0, cs * 1.5]);
    let r = moment_rhs(&empty, t, &p, &m, &c).unwrap();
    assert_eq!(r[0], 0.0);
    assert_eq!(&r[1..], &[0.0; 4]);
}

#[test]
fn rhs_structure() {
    let p = KineticParameters::reference();
    let m = SolubilityModel::reference();
    let c = PhysicalConstants::default();
    let x = MomentState::from_array([2e6, 3e7, 5e8, 9e9, 0.4]);
    let t = 315.0;
    let r = moment_rhs(&x, t, &p, &m, &c).unwrap();
    let cs = solubility(&m, t).unwrap();
    let g = growth_rate(&p, t, x.c, cs).unwrap();
    let b = secondary_nucleation_rate(&p, x.c / cs, crystal_mass_loading(x.mu3, &c));
    let expected = [b, g * x.mu0, 2.0 * g * x.mu1, 3.0 * g * x.mu2, -3.0 * 1e-12 * c.k_v * c.rho * g * x.mu2];
    for (a, e) in r.iter().zip(expected) {
        assert!((a - e).abs() <= 1e-14 * e.abs(), "{a} vs {e}");
    }
    assert!(matches!(
        moment_rhs(&x, 100.0, &p, &m, &c),
        Err(Error::Range { .. })
    ));
}

#[test]
fn reference_parameters_round_trip() {
    let p = KineticParameters::reference();
    for (a, b) in p.physical().iter().zip(KineticParameters::REFERENCE) {
        assert!((a - b).abs() / b < 1e-12);
    }
    let q = KineticParameters::from_log(p.log_values());
    assert_eq!(p, q);
}

#[test]
fn growth_log_gradient_equals_rate() {
    let p = KineticParameters::reference();
    let g = |log_kg: f64| {
        let mut q = p;
        q.log_kg = log_kg;
        growth_rate(&q, 313.15, 0.31, 0.25).unwrap()
    };
    let h = 1e-5;
    let fd = (g(p.log_kg + h) - g(p.log_kg - h)) / (2.0 * h);
    let g0 = g(p.log_kg);
    assert!((fd - g0).abs() / g0 < 1e-6);

    // Same identity through the tape.
    let tape = Tape::new();
    let logs = p.log_values();
    let vars: [_; 6] = std::array::from_fn(|i| tape.param(Tensor::scalar(logs[i])));
    let vals = KineticValues::from_array(std::array::from_fn(|i| vars[i].exp()));
    let out = growth_generic(
        &vals,
        &tape.scalar(313.15),
        &tape.scalar(0.31),
        &tape.scalar(0.25),
        GAS_CONSTANT,
    );
    out.backward().unwrap();
    let d = vars[3].grad().unwrap().item();
    assert!((d - out.item()).abs() / out.item() < 1e-12);
}

proptest! {
    #[test]
    fn mass_balance_identity(
        mu in prop::array::uniform4(0.0f64..1e12),
        c in 0.0f64..0.8,
        t in 275.0f64..323.0,
    ) {
        let p = KineticParameters::reference();
        let m = SolubilityModel::reference();
        let k = PhysicalConstants::default();
        let x = MomentState::from_array([mu[0], mu[1], mu[2], mu[3], c]);
        let r = moment_rhs(&x, t, &p, &m, &k).unwrap();
        prop_assert_eq!(r[4], -(r[3] * k.mass_balance_factor()));
    }

    #[test]
    fn kinetics_monotone(t in 280.0f64..320.0, m_s in 0.0f64..100.0) {
        let p = KineticParameters::reference();
        let mut prev_g = 0.0;
        let mut prev_b = 0.0;
        for k in 0..50 {
            let d = k as f64 * 0.01;
            let g = growth_rate(&p, t, 0.2 + d, 0.2).unwrap();
            let b = secondary_nucleation_rate(&p, 1.0 + d, m_s);
            prop_assert!(g >= prev_g);
            prop_assert!(b >= prev_b);
            prev_g = g;
            prev_b = b;
        }
    }

    #[test]
    fn clamped_below_threshold(
        under in 0.0f64..0.2,
        s in 0.0f64..1.0,
        m_s in 0.0f64..100.0,
        t in 280.0f64..320.0,
    ) {
        let p = KineticParameters::reference();
        prop_assert_eq!(growth_rate(&p, t, 0.3 - under, 0.3).unwrap(), 0.0);
        prop_assert_eq!(secondary_nucleation_rate(&p, s, m_s), 0.0);
    }
}
