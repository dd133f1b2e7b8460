//! Reference values computed independently of this crate.

use approx::assert_relative_eq;
use geoscale::bounds::{calibrate, presets, CalibrationTarget};
use geoscale::fp8::{decode, encode, Fp8Code, OverflowMode};
use geoscale::harness::monte_carlo_projection;
use statrs::distribution::{Beta, ContinuousCDF};

// (γ, α_min, d/(γ·d_h)) at δ* = 1e-6, L = 1024, from a 30-digit mpmath root solve.
const REFERENCE: [(&str, f64, f64, f64); 4] = [
    ("gpt2-xl", 2.98525367629, 0.0734613249743, 8.3744976846),
    ("mistral-7b", 2.25761539028, 0.0352138462712, 14.1742478093),
    ("llama2-13b", 2.27010605989, 0.0284234781663, 17.6203221104),
    ("llama2-70b", 2.30241024556, 0.0181738940171, 27.7969576114),
];

#[test]
fn calibration_matches_reference_solver() {
    let target = CalibrationTarget::new(1e-6, 1024).unwrap();
    for (name, gamma, alpha, imp) in REFERENCE {
        let dims = presets::by_name(name).unwrap_or_else(|| panic!("missing preset {name}"));
        let r = calibrate(&dims, &target).unwrap();
        assert_relative_eq!(r.gamma, gamma, max_relative = 1e-8);
        assert_relative_eq!(r.alpha_min, alpha, max_relative = 1e-8);
        assert_relative_eq!(r.improvement, imp, max_relative = 1e-8);
        assert_relative_eq!(r.overflow_bound, 1e-6, max_relative = 1e-9);
    }
}

#[test]
fn e4m3_hand_decodes() {
    let cases = [
        (0x00, 0.0),
        (0x01, 2f64.powi(-9)),
        (0x07, 7.0 * 2f64.powi(-9)),
        (0x08, 2f64.powi(-6)),
        (0x38, 1.0),
        (0x3C, 1.5),
        (0x7E, 448.0),
        (0xB8, -1.0),
        (0xFE, -448.0),
    ];
    for (bits, v) in cases {
        assert_eq!(decode(Fp8Code(bits)), v, "code {bits:#04x}");
        assert_eq!(encode(v, OverflowMode::FlagNan).code, Fp8Code(bits));
    }
    assert!(decode(Fp8Code(0x7F)).is_nan());
    assert!(decode(Fp8Code(0xFF)).is_nan());
}

#[test]
fn projection_follows_beta_law() {
    // One-sample Kolmogorov–Smirnov against Beta(k/2, (d−k)/2) at the 1% level.
    let (d, k, n) = (40, 6, 20_000);
    let r = monte_carlo_projection(d, k, &[], n, 17).unwrap();
    let beta = Beta::new(k as f64 / 2.0, (d - k) as f64 / 2.0).unwrap();
    let mut xs = r.samples.clone();
    xs.sort_by(f64::total_cmp);
    let nf = n as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = beta.cdf(x);
            (f - i as f64 / nf).abs().max(((i + 1) as f64 / nf - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.628 / nf.sqrt(), "KS statistic {ks}");
}
