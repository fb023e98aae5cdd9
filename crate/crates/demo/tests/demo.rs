use aad_demo::{decide, filter_response, synthetic_coupling};

#[test]
fn filter_response_passes_the_band_and_stops_the_rest() {
    let fs = 1000.0;
    let n = 501;
    let r = filter_response(0.5, 32.0, fs, n).unwrap();
    assert_eq!(r.len(), n + 1);
    let taps = r[n];
    assert!(taps >= 3.0 && taps % 2.0 == 1.0, "{taps}");
    let at = |hz: f64| r[(hz / (fs / 2.0) * (n - 1) as f64).round() as usize];
    assert!(at(10.0).abs() < 1.0);
    assert!(at(0.0) < -20.0);
    assert!(at(100.0) < -20.0);
    assert!(r[..n].iter().all(|v| v.is_finite() && *v >= -120.0));
}

#[test]
fn filter_response_rejects_bad_bands() {
    assert!(filter_response(32.0, 0.5, 1000.0, 10).is_err());
    assert!(filter_response(0.5, 32.0, 1000.0, 1).is_err());
}

#[test]
fn decision_matches_logistic_closed_form() {
    for (s0, s1, tau) in [(0.3f32, 0.1f32, 0.05f32), (-0.2, 0.4, 0.5), (0.0, 0.0, 1.0)] {
        let out = decide(vec![s0, s1], tau).unwrap();
        let p0 = 1.0 / (1.0 + ((s1 - s0) as f64 / tau as f64).exp());
        assert!((out[0] as f64 - p0).abs() < 1e-6);
        assert!((out[0] + out[1] - 1.0).abs() < 1e-6);
        let predicted = if s1 > s0 { 1.0 } else { 0.0 };
        assert_eq!(out[2], predicted);
        assert!((out[3] as f64 + p0.ln()).abs() < 1e-4);
    }
    assert!(decide(vec![0.1], 0.05).is_err());
    assert!(decide(vec![0.1, 0.2], 0.0).is_err());
    assert!(decide(vec![f32::NAN, 0.2], 0.1).is_err());
}

#[test]
fn synthetic_coupling_tracks_the_gains() {
    let only_attended = synthetic_coupling(1.0, 0.0, 1.0, 4).unwrap();
    assert!(only_attended[0] > 0.3 && only_attended[1].abs() < 0.1, "{only_attended:?}");
    assert!(only_attended[2] == 1.0 || only_attended[2] == 2.0);
    let equal = synthetic_coupling(1.0, 1.0, 1.0, 4).unwrap();
    assert!((equal[0] - equal[1]).abs() < 0.05, "{equal:?}");
    assert!(synthetic_coupling(-1.0, 0.0, 1.0, 0).is_err());
}
