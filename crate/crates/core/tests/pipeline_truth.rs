//! Centroiding and coincidence finding checked against simulator ground truth.

use hypercam::pipeline::{cluster_and_centroid, find_coincidences, split_arms, ArmLayout, CentroidedPhoton, ClusterParams};
use hypercam::source::SourceConfig;
use hypercam::synth::{simulate_acquisition, Arm, BasisPlane, DetectorConfig, MeasurementSetting};

fn sparse_detector() -> DetectorConfig {
    DetectorConfig {
        pair_rate_hz: 2.0e4,
        acquisition_s: 3.0,
        efficiency: 0.9,
        dark_rate_hz: 0.0,
        seed: 11,
        ..Default::default()
    }
}

fn nearest(photons: &[CentroidedPhoton], t: f64) -> &CentroidedPhoton {
    let k = photons.partition_point(|p| (p.toa_corr as f64) < t);
    [k.checked_sub(1), Some(k)]
        .into_iter()
        .flatten()
        .filter_map(|i| photons.get(i))
        .min_by(|a, b| (a.toa_corr as f64 - t).abs().total_cmp(&(b.toa_corr as f64 - t).abs()))
        .expect("photons present")
}

#[test]
fn centroids_and_times_match_truth() {
    let det = sparse_detector();
    let setting = MeasurementSetting::from_label("HH", BasisPlane::FarField).unwrap();
    let acq = simulate_acquisition(&SourceConfig::default(), &det, &setting, true).unwrap();
    let layout = ArmLayout {
        signal_roi: det.signal_roi,
        idler_roi: det.idler_roi,
    };
    let (photons, stats) = cluster_and_centroid(&acq.events, &ClusterParams::default(), &layout).unwrap();
    assert_eq!(stats.unassigned, 0);
    assert_eq!(photons.len() as u64, acq.stats.photons_detected);
    let (signal, idler) = split_arms(&photons);

    let mut pos_err = Vec::new();
    let mut residuals = Vec::new();
    for t in acq.truth.as_ref().unwrap() {
        for (hit, arm_photons) in [(t.signal_pixel, &signal), (t.idler_pixel, &idler)] {
            let Some((x, y)) = hit else { continue };
            let p = nearest(arm_photons, t.birth_ns);
            pos_err.push((p.cx - x as f64).hypot(p.cy - y as f64));
            residuals.push(p.toa_corr as f64 - t.birth_ns);
        }
    }
    assert!(pos_err.len() > 10_000);
    let mean_err = pos_err.iter().sum::<f64>() / pos_err.len() as f64;
    let n = residuals.len() as f64;
    let mean_res = residuals.iter().sum::<f64>() / n;
    let sd = (residuals.iter().map(|r| (r - mean_res).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    println!("mean centroid error {mean_err:.3} px, toa residual sd {sd:.3} ns");
    assert!(mean_err <= 0.3, "mean centroid error {mean_err}");
    // The reference pixel carries the full per-pixel jitter, and integer-ns
    // stamps add 1/12 ns² on top, so the spread sits just above the jitter.
    let floor = (det.time_resolution_ns.powi(2) + 1.0 / 12.0).sqrt();
    assert!(sd >= det.time_resolution_ns * 0.98, "toa residual sd {sd}");
    assert!(sd <= floor * 1.03, "toa residual sd {sd}");
}

#[test]
fn coincidences_recover_detected_pairs() {
    let det = sparse_detector();
    let setting = MeasurementSetting::from_label("HH", BasisPlane::FarField).unwrap();
    let acq = simulate_acquisition(&SourceConfig::default(), &det, &setting, true).unwrap();
    let layout = ArmLayout {
        signal_roi: det.signal_roi,
        idler_roi: det.idler_roi,
    };
    let (photons, _) = cluster_and_centroid(&acq.events, &ClusterParams::default(), &layout).unwrap();
    let (signal, idler) = split_arms(&photons);
    let pairs = find_coincidences(&signal, &idler, 10).unwrap();
    // Without dark counts and at this rate every detected pair is found and
    // accidentals are rare.
    let detected = acq.stats.pairs_detected as f64;
    assert!((pairs.len() as f64 - detected).abs() <= 0.01 * detected, "{} vs {detected}", pairs.len());
    assert!(pairs.iter().all(|p| p.signal.arm == Arm::Signal && p.idler.arm == Arm::Idler && p.dt.abs() <= 10));
}
