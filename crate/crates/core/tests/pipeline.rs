use mains::array::ArrayGeometry;
use mains::dataio::{load_dataset, read_trajectory, save_dataset, write_trajectory};
use mains::eskf::{run_filter, FilterConfig};
use mains::eval::{compute_metrics, SpeedError};
use mains::sim::{Scenario, SimNoise};
use mains::strapdown::{propagate, NavState};

#[test]
fn synthesized_dataset_survives_write_and_load() {
    let geo = ArrayGeometry::rectangular30();
    let ds = Scenario::square_laps(15.0).generate(&geo, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn file_round_trip_does_not_change_results() {
    let geo = ArrayGeometry::rectangular30();
    let ds = Scenario::square_laps(70.0).generate(&geo, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, &dir.path().join("ds")).unwrap();
    let loaded = load_dataset(&dir.path().join("ds")).unwrap();

    let cfg = FilterConfig::default();
    let a = run_filter(&ds, &geo, &cfg).unwrap().trajectory();
    let b = run_filter(&loaded, &loaded.geometry, &cfg)
        .unwrap()
        .trajectory();
    assert_eq!(a, b);

    let path = dir.path().join("traj.csv");
    write_trajectory(&path, &a).unwrap();
    let from_file = read_trajectory(&path).unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let m1 = compute_metrics(&a, truth, 60.0, SpeedError::Scalar).unwrap();
    let m2 = compute_metrics(&from_file, truth, 60.0, SpeedError::Scalar).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn filter_without_aiding_or_updates_is_dead_reckoning() {
    let geo = ArrayGeometry::square5();
    let ds = Scenario::square_laps(20.0).generate(&geo, 6).unwrap();
    let cfg = FilterConfig {
        mag_updates: false,
        aiding_seconds: 0.0,
        ..FilterConfig::default()
    };
    let run = run_filter(&ds, &geo, &cfg).unwrap();
    let t0 = &ds.truth.as_ref().unwrap()[0];
    let mut x = NavState {
        p: t0.p,
        v: t0.v.unwrap(),
        q: t0.q,
        ..NavState::default()
    };
    let g = nalgebra::Vector3::from(cfg.gravity);
    for (k, e) in run.epochs.iter().enumerate().skip(1) {
        x = propagate(&x, &ds.imu[k - 1], ds.imu[k].t - ds.imu[k - 1].t, &g);
        assert_eq!(e.state.ins, x, "epoch {k}");
    }
}

#[test]
fn same_inputs_same_estimates() {
    let geo = ArrayGeometry::rectangular30();
    let ds = Scenario::exact_model(30.0).generate(&geo, 7).unwrap();
    let cfg = FilterConfig::default();
    let a = run_filter(&ds, &geo, &cfg).unwrap().trajectory();
    let b = run_filter(&ds, &geo, &cfg).unwrap().trajectory();
    assert_eq!(a, b);
}

#[test]
fn magnetometer_updates_beat_inertial_only() {
    let geo = ArrayGeometry::rectangular30();
    let ds = Scenario::square_laps(90.0).generate(&geo, 8).unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let cfg = FilterConfig::default();
    let eval = |cfg: &FilterConfig| {
        let run = run_filter(&ds, &geo, cfg).unwrap();
        compute_metrics(
            &run.trajectory(),
            truth,
            cfg.aiding_seconds,
            SpeedError::Scalar,
        )
        .unwrap()
    };
    let mains = eval(&cfg);
    let ins = eval(&FilterConfig {
        mag_updates: false,
        ..cfg.clone()
    });
    assert!(
        ins.rms_horizontal > 3.0 * mains.rms_horizontal,
        "MAINS {} m vs INS {} m",
        mains.rms_horizontal,
        ins.rms_horizontal
    );
}

#[test]
fn noiseless_exact_model_tracks_truth_closely() {
    let geo = ArrayGeometry::rectangular30();
    let mut sc = Scenario::exact_model(90.0);
    sc.noise = SimNoise::zero();
    let ds = sc.generate(&geo, 9).unwrap();
    let run = run_filter(&ds, &geo, &FilterConfig::default()).unwrap();
    let m = compute_metrics(
        &run.trajectory(),
        ds.truth.as_ref().unwrap(),
        60.0,
        SpeedError::Scalar,
    )
    .unwrap();
    assert!(m.end_horizontal < 0.05, "end error {} m", m.end_horizontal);
}
