use lora_mud::harness::{sweep, ExperimentConfig, SweepAxis};

#[test]
fn more_antennas_never_hurt() {
    let cfg = ExperimentConfig {
        n_devices: 3,
        snr_db: vec![-16.0],
        trials: 4000,
        seed: 41,
        ..ExperimentConfig::default()
    };
    let recs = sweep(&cfg, SweepAxis::NAntennas, &[16.0, 24.0, 32.0, 40.0]).unwrap();
    let ser: Vec<f64> = recs.iter().map(|r| r.ser_avg).collect();
    assert!(ser.windows(2).all(|w| w[1] <= w[0]), "{ser:?}");
    assert!(ser[3] < ser[0]);
}

#[test]
fn alpha_sweep_has_an_interior_minimum() {
    let cfg = ExperimentConfig {
        n_devices: 3,
        n_antennas: 40,
        snr_db: vec![-13.0],
        trials: 20_000,
        seed: 909,
        ..ExperimentConfig::default()
    };
    let alphas = [1.0, 1.02, 1.04, 1.06, 1.08, 1.10];
    let recs = sweep(&cfg, SweepAxis::Alpha, &alphas).unwrap();
    let ser: Vec<f64> = recs.iter().map(|r| r.ser_avg).collect();
    let best = (0..ser.len()).min_by(|&a, &b| ser[a].total_cmp(&ser[b])).unwrap();
    assert!(best > 0 && best < alphas.len() - 1, "{ser:?}");
    assert!(ser[best] < ser[0]);
}
