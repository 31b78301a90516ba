//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to the
//! raw stderr handle so the summary survives output capture.

use std::io::Write;
use std::time::{Duration, Instant};

use lora_mud::channel::{db_to_linear, generate_topology, sample_channels_with, synthesize_received_with};
use lora_mud::css_phy::{bin_powers, dechirp, generate_chirp};
use lora_mud::detector::{
    calibrate_threshold, count_tuples, rho, stage1_identify, CandidateTuple,
};
use lora_mud::harness::*;
use lora_mud::power_control::*;
use lora_mud::rng::{complex_gaussian, derive_seed, rng_from_seed};
use lora_mud::stats::ActiveBinStats;
use lora_mud::{ChirpFrame, Demodulator, NetworkTopology, SpreadingConfig, TopologyParams};
use rand::Rng;

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "criterion {id:>2} {name:<28} {} ({:.1} s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn criterion_01_combinatorics() {
    let t = Instant::now();
    let c: Vec<u128> = (1..=5).map(|i| count_tuples(5, i).unwrap()).collect();
    let mut pass = c == [1, 30, 150, 240, 120];
    for m in 2u128..=32 {
        for nu in 1usize..=6 {
            let total: u128 = (1..=nu.min(m as usize))
                .map(|i| count_tuples(nu, i).unwrap() * binomial(m, i as u128))
                .sum();
            pass &= total == m.pow(nu as u32);
        }
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(1);
    report(1, "combinatorics", pass, elapsed, &format!("C = {c:?}"));
    assert!(pass);
}

#[test]
fn criterion_02_waveform() {
    let t = Instant::now();
    let mut worst_ortho = 0.0f64;
    let mut worst_parseval = 0.0f64;
    for sf in [5u32, 7] {
        let cfg = SpreadingConfig::with_sf(sf).unwrap();
        let m = cfg.m();
        let chirps: Vec<_> = (0..m).map(|s| generate_chirp(&cfg, s).unwrap()).collect();
        for a in 0..m {
            for b in a + 1..m {
                let ip: num_complex::Complex64 =
                    chirps[a].iter().zip(&chirps[b]).map(|(x, y)| x * y.conj()).sum();
                worst_ortho = worst_ortho.max(ip.norm());
            }
        }
        let mut rng = rng_from_seed(derive_seed(7, 99, &[sf as u64]));
        for _ in 0..50 {
            let samples: Vec<_> = (0..m).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
            let energy: f64 = samples.iter().map(|z| z.norm_sqr()).sum();
            let frame = ChirpFrame { gateway_id: 0, antenna_id: 0, samples };
            let bins = bin_powers(&[frame], 1, 1, &cfg).unwrap();
            worst_parseval = worst_parseval.max((bins.r.iter().sum::<f64>() - energy).abs() / energy);
        }
    }
    let cfg = SpreadingConfig::with_sf(7).unwrap();
    let m = cfg.m();
    let mut rng = rng_from_seed(derive_seed(7, 98, &[]));
    let mut hits = 0;
    let trials = 10_000;
    for _ in 0..trials {
        let s = rng.random_range(0..m);
        let gain = complex_gaussian(&mut rng, 1.0);
        let samples = generate_chirp(&cfg, s).unwrap().into_iter().map(|x| x * gain).collect();
        let frame = ChirpFrame { gateway_id: 0, antenna_id: 0, samples };
        let de = dechirp(&frame, &cfg).unwrap();
        let bins = bin_powers(
            &[ChirpFrame { gateway_id: 0, antenna_id: 0, samples: de }],
            1,
            1,
            &cfg,
        )
        .unwrap();
        let total: f64 = bins.r.iter().sum();
        let argmax = (0..m).max_by(|&a, &b| bins.r[a].total_cmp(&bins.r[b])).unwrap();
        if argmax == s && bins.r[s] >= total * (1.0 - 1e-9) {
            hits += 1;
        }
    }
    let elapsed = t.elapsed();
    let pass = worst_ortho < 1e-9
        && worst_parseval < 1e-9
        && hits == trials
        && elapsed < Duration::from_secs(30);
    report(
        2,
        "waveform",
        pass,
        elapsed,
        &format!("max |<x,x'>| = {worst_ortho:.2e}, Parseval err = {worst_parseval:.2e}, concentrated {hits}/{trials}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_distribution_oracle() {
    let t = Instant::now();
    let cfg = SpreadingConfig::with_sf(5).unwrap();
    let m = cfg.m();
    let sigma2 = 1.0;
    // (beta[gateway][device], powers, symbols)
    let fixtures: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<usize>)> = vec![
        (vec![vec![0.05], vec![0.01]], vec![1.0], vec![3]),
        (vec![vec![0.02, 0.004], vec![0.003, 0.03]], vec![1.0, 2.0], vec![4, 17]),
        (
            vec![vec![0.02, 0.01, 0.001], vec![0.005, 0.03, 0.002]],
            vec![1.0, 0.5, 4.0],
            vec![9, 9, 30],
        ),
    ];
    let n_t = 4;
    let reps = 100_000;
    let mut demod = Demodulator::new(cfg);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for (idx, (beta, powers, symbols)) in fixtures.into_iter().enumerate() {
        let topo = NetworkTopology::from_gains(beta, sigma2, n_t).unwrap();
        let l = topo.n_gateways();
        let expected = rho(&CandidateTuple::new(symbols.clone()), &topo, &powers, m).unwrap();
        let mut sum_r = vec![0.0; l * m];
        let mut sum_u = vec![0.0; m];
        let mut sum_u2 = vec![0.0; m];
        let mut rng = rng_from_seed(derive_seed(11, 3, &[idx as u64]));
        for _ in 0..reps {
            let ch = sample_channels_with(&topo, &mut rng).unwrap();
            let rx = synthesize_received_with(&topo, &ch, &powers, &symbols, &cfg, &mut rng).unwrap();
            let bins = demod.process(&rx).unwrap();
            for (acc, r) in sum_r.iter_mut().zip(&bins.r) {
                *acc += r;
            }
            for k in 0..m {
                sum_u[k] += bins.upsilon[k];
                sum_u2[k] += bins.upsilon[k] * bins.upsilon[k];
            }
        }
        let n = reps as f64;
        for gw in 0..l {
            for k in 0..m {
                let mean = sum_r[gw * m + k] / n / n_t as f64;
                worst_mean = worst_mean.max((mean / expected[gw][k] - 1.0).abs());
            }
        }
        for k in 0..m {
            let mean = sum_u[k] / n;
            let var = (sum_u2[k] / n - mean * mean) * n / (n - 1.0);
            let model: f64 = (0..l).map(|gw| expected[gw][k].powi(2)).sum::<f64>() / n_t as f64;
            worst_var = worst_var.max((var / model - 1.0).abs());
        }
    }
    let elapsed = t.elapsed();
    let pass = worst_mean < 0.01 && worst_var < 0.05 && elapsed < Duration::from_secs(120);
    report(
        3,
        "distribution oracle",
        pass,
        elapsed,
        &format!("worst mean rel err {worst_mean:.4}, worst variance rel err {worst_var:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_threshold_calibration() {
    let t = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    let spreading = SpreadingConfig::with_sf(7).unwrap();
    let m = spreading.m();
    let params = TopologyParams { n_gateways: 3, n_devices: 5, ..TopologyParams::default() };
    let base = generate_topology(&params, 2024).unwrap();
    for n_t in [30usize, 40] {
        let topo = base.with_antennas(n_t);
        let powers = calibrate_single_user_powers(&topo, -20.0);
        let stats = ActiveBinStats::new(&topo, &powers, m).unwrap();
        let curve = bound_curve(&stats, 200).unwrap();
        let step = curve[1].0 - curve[0].0;
        let imin = (0..curve.len()).min_by(|&a, &b| curve[a].1.total_cmp(&curve[b].1)).unwrap();
        // Rises below the bound's own quadrature tolerance are float noise on
        // flat stretches, not extra modes.
        let noise = 1e-12;
        let unimodal = curve[..=imin].windows(2).all(|w| w[1].1 <= w[0].1 + noise)
            && curve[imin..].windows(2).all(|w| w[1].1 >= w[0].1 - noise);
        let cal = calibrate_threshold(&stats).unwrap();
        let agrees = (cal.p_th - curve[imin].0).abs() <= step;

        let trials = 10_000;
        let mut demod = Demodulator::new(spreading);
        let mut correct = 0u32;
        for trial in 0..trials {
            let mut rng = rng_from_seed(derive_seed(4, 4, &[n_t as u64, trial]));
            let symbols: Vec<usize> = (0..5).map(|_| rng.random_range(0..m)).collect();
            let ch = sample_channels_with(&topo, &mut rng).unwrap();
            let rx = synthesize_received_with(&topo, &ch, &powers, &symbols, &spreading, &mut rng).unwrap();
            let bins = demod.process(&rx).unwrap();
            let mut found = stage1_identify(&bins, cal.p_th, 5);
            found.sort_unstable();
            let mut truth = symbols.clone();
            truth.sort_unstable();
            truth.dedup();
            if found == truth {
                correct += 1;
            }
        }
        let rate = correct as f64 / trials as f64;
        let lb = 1.0 - cal.p_error_ub;
        let se = (lb * (1.0 - lb) / trials as f64).sqrt();
        let mc_ok = rate >= lb - 3.0 * se;
        pass &= unimodal && agrees && mc_ok;
        detail += &format!(
            "[N_t={n_t}: unimodal={unimodal}, |golden-grid|/step={:.2}, MC {rate:.4} vs LB {lb:.4}] ",
            (cal.p_th - curve[imin].0).abs() / step
        );
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    report(4, "threshold calibration", pass, elapsed, &detail);
    assert!(pass);
}

#[test]
fn criterion_05_sca_optimizer() {
    let t = Instant::now();
    let cfg = ExperimentConfig { n_devices: 3, n_gateways: 3, n_topologies: 20, seed: 55, ..ExperimentConfig::default() };
    let m = cfg.spreading().unwrap().m();
    let topologies = cfg.topologies().unwrap();
    let mut monotone = true;
    let mut feasible = true;
    let mut converged = 0;
    let mut tight = 0.0f64;
    let mut rng = rng_from_seed(derive_seed(5, 5, &[]));
    for topo in &topologies {
        let link = prepare_link(&cfg, topo, -16.0).unwrap();
        let out = link.power_control.unwrap();
        let trace = &out.state.trace;
        monotone &= trace.windows(2).all(|w| w[1].lambda >= w[0].lambda - 1e-9);
        feasible &= trace.iter().all(|r| r.box_residual >= -1e-9 && r.snr_residual >= -1e-9);
        let steps_ok = out.state.iteration <= 100 && out.state.converged;
        let last_gain = match trace.len() {
            n if n >= 2 => (trace[n - 1].lambda - trace[n - 2].lambda).abs(),
            _ => 0.0,
        };
        if steps_ok && last_gain < 1e-5 {
            converged += 1;
        }

        let gains = normalized_gains(topo, m, out.allocation.p_max);
        for _ in 0..5 {
            let x_bar: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
            let lambda_bar = modeled_lambda(&gains, &x_bar, cfg.alpha).unwrap();
            for c in build_sca_constraints(&gains, &x_bar, lambda_bar, cfg.alpha).unwrap() {
                let lhs = c.lhs_exact(&x_bar, lambda_bar);
                let rhs = c.rhs_exact(&x_bar);
                tight = tight
                    .max((c.lhs_surrogate(&x_bar, lambda_bar) - lhs).abs() / lhs.abs().max(1.0))
                    .max((c.rhs_surrogate(&x_bar) - rhs).abs() / rhs.abs().max(1.0));
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = monotone
        && feasible
        && converged >= 19
        && tight <= 1e-12
        && elapsed < Duration::from_secs(300);
    report(
        5,
        "SCA optimizer",
        pass,
        elapsed,
        &format!("monotone={monotone}, feasible={feasible}, converged {converged}/20, surrogate gap {tight:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_power_control_effect() {
    let t = Instant::now();
    let snr = -16.0;
    let base = ExperimentConfig { n_devices: 3, n_antennas: 35, trials: 20_000, seed: 606, ..ExperimentConfig::default() };
    let topologies = base.topologies().unwrap();
    let off = ExperimentConfig { power_control: false, ..base.clone() };
    let with_pc = run_ser_point(&base, &topologies, snr).unwrap();
    let without = run_ser_point(&off, &topologies, snr).unwrap();
    let test = paired_sign_test(&without.flags, &with_pc.flags).unwrap();
    let equal_power = topologies.iter().all(|topo| {
        let on = prepare_link(&base, topo, snr).unwrap();
        let total: f64 = on.powers.iter().sum();
        let budget: f64 = on.p_su.iter().sum();
        total <= budget * (1.0 + 1e-12)
    });
    let elapsed = t.elapsed();
    let pass = with_pc.record.ser_avg < without.record.ser_avg
        && test.p_value < 0.05
        && equal_power
        && elapsed < Duration::from_secs(1200);
    report(
        6,
        "power-control effect",
        pass,
        elapsed,
        &format!(
            "SER {:.4} (PC) vs {:.4} (no PC), discordant {}/{}, p = {:.2e}",
            with_pc.record.ser_avg, without.record.ser_avg, test.treatment_only, test.baseline_only, test.p_value
        ),
    );
    assert!(pass);
}

fn snr_for(cfg: &ExperimentConfig, grid: &[f64], target: f64) -> (Option<f64>, Vec<(f64, f64)>) {
    let c = ExperimentConfig { snr_db: grid.to_vec(), ..cfg.clone() };
    let pts: Vec<(f64, f64)> = run_ser_experiment(&c).unwrap().iter().map(|r| (r.snr_db, r.ser_avg)).collect();
    (snr_at_ser(&pts, target), pts)
}

#[test]
fn criterion_07_ml_vs_two_stage() {
    let t = Instant::now();
    let grid: Vec<f64> = (0..11).map(|i| -16.0 + i as f64).collect();
    let base = ExperimentConfig { sf: 5, n_devices: 2, n_antennas: 35, trials: 4000, seed: 707, ..ExperimentConfig::default() };
    let (two, _) = snr_for(&base, &grid, 1e-2);
    let (ml, _) = snr_for(&ExperimentConfig { detector: DetectorMode::Ml, ..base }, &grid, 1e-2);
    let elapsed = t.elapsed();
    let gap = two.zip(ml).map(|(a, b)| a - b);
    let pass = gap.is_some_and(|g| g <= 1.5) && elapsed < Duration::from_secs(1800);
    report(
        7,
        "ML vs two-stage gap",
        pass,
        elapsed,
        &format!("SNR@1e-2: two-stage {two:?}, ML {ml:?}, gap {gap:?} dB"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_multiuser_penalty() {
    let t = Instant::now();
    let grid: Vec<f64> = (0..19).map(|i| -23.0 + 0.5 * i as f64).collect();
    let base = ExperimentConfig { sf: 7, n_antennas: 35, trials: 10_000, seed: 808, ..ExperimentConfig::default() };
    // The single-device reference uses the optimal non-coherent detector.
    let at: Vec<Option<f64>> = (1..=3)
        .map(|nu| {
            let detector = if nu == 1 { DetectorMode::Ml } else { DetectorMode::TwoStage };
            snr_for(&ExperimentConfig { n_devices: nu, detector, ..base.clone() }, &grid, 1e-2).0
        })
        .collect();
    let elapsed = t.elapsed();
    let d2 = at[1].zip(at[0]).map(|(a, b)| a - b);
    let d3 = at[2].zip(at[0]).map(|(a, b)| a - b);
    let pass = d2.is_some_and(|d| (1.5..=4.5).contains(&d))
        && d3.is_some_and(|d| (3.0..=6.5).contains(&d))
        && elapsed < Duration::from_secs(3600);
    report(
        8,
        "multiuser power penalty",
        pass,
        elapsed,
        &format!("SNR@1e-2 = {at:.2?}; penalty N_u=2 {d2:.2?} dB, N_u=3 {d3:.2?} dB"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_alpha_sweep() {
    let t = Instant::now();
    let base = ExperimentConfig { n_devices: 3, n_antennas: 40, trials: 20_000, seed: 909, ..ExperimentConfig::default() };
    let topologies = base.topologies().unwrap();
    let ser = |alpha: f64| {
        run_ser_point(&ExperimentConfig { alpha, ..base.clone() }, &topologies, -13.0)
            .unwrap()
            .record
            .ser_avg
    };
    let (s106, s100) = (ser(1.06), ser(1.0));
    let elapsed = t.elapsed();
    let pass = s106 <= s100 && elapsed < Duration::from_secs(1200);
    report(9, "alpha sweep", pass, elapsed, &format!("SER(1.06) = {s106:.2e}, SER(1.00) = {s100:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let t = Instant::now();
    let cfg = ExperimentConfig { n_devices: 2, snr_db: vec![-18.0, -15.0], trials: 300, n_topologies: 3, seed: 10, ..ExperimentConfig::default() };
    let ser_csv = || {
        let mut buf = Vec::new();
        write_ser_csv(&run_ser_experiment(&cfg).unwrap(), &mut buf).unwrap();
        buf
    };
    let topo = &cfg.topologies().unwrap()[0];
    let m = cfg.spreading().unwrap().m();
    let bound_csv = || {
        let p = calibrate_single_user_powers(topo, -18.0);
        let stats = ActiveBinStats::new(topo, &p, m).unwrap();
        let mut buf = Vec::new();
        write_bound_csv(&bound_curve(&stats, 50).unwrap(), &mut buf).unwrap();
        buf
    };
    let trace_csv = || {
        let p_max: f64 = calibrate_single_user_powers(topo, -18.0).iter().sum();
        let out = run_power_control(topo, m, &PowerControlConfig::new(p_max, db_to_linear(-3.0))).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&out.state, &mut buf).unwrap();
        buf
    };
    let pass = ser_csv() == ser_csv() && bound_csv() == bound_csv() && trace_csv() == trace_csv();
    report(10, "determinism", pass, t.elapsed(), "SER, bound and trace CSV bytes compared across reruns");
    assert!(pass);
}
