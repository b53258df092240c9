use wattline_core::{compute_emissions, integrate_energy, Factor, FactorProvider};

/// Fine-step midpoint sum of a power function, 1 ms per step.
fn fine_step_joules(f: impl Fn(f64) -> f64, start_s: f64, end_s: f64) -> f64 {
    let steps = ((end_s - start_s) * 1000.0).round() as usize;
    let dt = (end_s - start_s) / steps as f64;
    (0..steps).map(|i| f(start_s + (i as f64 + 0.5) * dt) * dt).sum()
}

#[test]
fn constant_power_is_exact() {
    let e = integrate_energy(&[(0, 100.0), (3_600_000, 100.0)]).unwrap();
    assert_eq!(e.joules, 360_000.0);
    assert_eq!(e.kwh, 0.1);
}

#[test]
fn linear_ramp_matches_fine_step_oracle() {
    let points: Vec<(i64, f64)> = (0..=60).map(|k| (k * 60_000, 100.0 * k as f64 / 60.0)).collect();
    let e = integrate_energy(&points).unwrap();
    let oracle = fine_step_joules(|t| 100.0 * t / 3600.0, 0.0, 3600.0);
    assert!((e.joules - oracle).abs() <= 1e-6 * oracle, "{} vs {oracle}", e.joules);
    assert!((e.joules - 180_000.0).abs() <= 1e-6 * 180_000.0);
}

#[test]
fn two_hours_at_fixed_power_to_grams() {
    let e = integrate_energy(&[(0, 216.25f64), (7_200_000, 216.25)]).unwrap();
    assert!((e.kwh - 0.4325).abs() < 1e-12);
    let factor = Factor {
        region: "FR".into(),
        grams_per_kwh: 32.0,
        timestamp_ms: 0,
        provider: FactorProvider::Realtime,
    };
    let g = compute_emissions(e.kwh, &factor).unwrap();
    assert!((g - 13.84).abs() < 1e-9);
}
