use std::f64::consts::PI;

use nsde_core::dataset::Dataset;
use nsde_core::envs::{
    cartpole_step, fig2_point_clouds, generate_dataset, mass_spring_step, CartpoleParams, CloudShape, ControlPolicy,
    GenConfig, MassSpringParams, SystemSpec,
};
use nsde_core::diffcore::stream_rng;
use rand::Rng;

fn rk4<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], x: [f64; N], dt: f64) -> [f64; N] {
    let add = |a: &[f64; N], b: &[f64; N], h: f64| {
        let mut o = *a;
        for i in 0..N {
            o[i] += h * b[i];
        }
        o
    };
    let k1 = f(&x);
    let k2 = f(&add(&x, &k1, dt / 2.0));
    let k3 = f(&add(&x, &k2, dt / 2.0));
    let k4 = f(&add(&x, &k3, dt));
    let mut o = x;
    for i in 0..N {
        o[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    o
}

#[test]
fn mass_spring_single_steps() {
    let p = MassSpringParams::default();
    assert_eq!(mass_spring_step(&p, &[0.0, 0.0], 0.01), vec![0.0, 0.0]);
    let x = mass_spring_step(&p, &[1.0, 0.0], 0.01);
    assert_eq!(x[0], 1.0);
    assert!((x[1] + 0.01).abs() < 1e-15);
}

fn mass_spring_error(dt: f64, t_end: f64) -> f64 {
    let p = MassSpringParams::default();
    let steps = (t_end / dt).round() as usize;
    let mut x = vec![0.1, 0.1];
    for _ in 0..steps {
        x = mass_spring_step(&p, &x, dt);
    }
    let f = |s: &[f64; 2]| [s[1], -0.5 * s[1] - s[0]];
    let mut y = [0.1, 0.1];
    for _ in 0..(t_end / 0.0001).round() as usize {
        y = rk4(f, y, 0.0001);
    }
    (x[0] - y[0]).abs().max((x[1] - y[1]).abs())
}

#[test]
fn mass_spring_tracks_rk4() {
    // Explicit Euler at the data step is first order; at a tenth of the step it is within 1e-3.
    let coarse = mass_spring_error(0.01, 5.0);
    let fine = mass_spring_error(0.001, 5.0);
    assert!(coarse < 2e-3, "{coarse}");
    assert!(fine < 1e-3, "{fine}");
    assert!((coarse / fine - 10.0).abs() < 1.0, "ratio {}", coarse / fine);
}

#[test]
fn undamped_energy_drift_is_small() {
    let p = MassSpringParams { m: 1.0, b: 0.0, k: 1.0 };
    let energy = |x: &[f64]| 0.5 * x[1] * x[1] + 0.5 * x[0] * x[0];
    let mut x = vec![0.1, 0.0];
    let e0 = energy(&x);
    for _ in 0..50_000 {
        x = mass_spring_step(&p, &x, 1e-4);
    }
    assert!((energy(&x) - e0).abs() / e0 < 0.01);
}

#[test]
fn cartpole_equilibria() {
    let p = CartpoleParams::default();
    assert_eq!(cartpole_step(&p, &[0.0; 4], 0.0, 0.02), vec![0.0; 4]);
    let mut x = vec![0.0, 0.0, PI, 0.0];
    for _ in 0..500 {
        x = cartpole_step(&p, &x, 0.0, 0.02);
    }
    assert!((x[2] - PI).abs() < 1e-9 && x[3].abs() < 1e-9, "{x:?}");
}

#[test]
fn cartpole_tracks_rk4() {
    let p = CartpoleParams::default();
    let mut rng = stream_rng(5, 0);
    for _ in 0..3 {
        let x0 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-PI..PI), rng.gen_range(-2.0..2.0)];
        let u = rng.gen_range(-10.0..10.0);
        let euler = |dt: f64| {
            let mut x = x0.to_vec();
            for _ in 0..(1.0 / dt).round() as usize {
                x = cartpole_step(&p, &x, u, dt);
            }
            x
        };
        let (coarse, mid, x) = (euler(0.0005), euler(0.00005), euler(0.000005));
        // Oracle: Lagrangian equations for a uniform rod, solved as a 2x2 linear system.
        let (mc, mp, l, g) = (1.0, 0.1, 0.5, 9.81);
        let f = |s: &[f64; 4]| {
            let (sn, cs) = s[2].sin_cos();
            // (mc+mp) a - mp l cos th * alpha = u - mp l sin th * w^2   (theta measured from upright, sign per convention)
            // -cos th * a + (4/3) l alpha = g sin th
            let a11 = mc + mp;
            let a12 = mp * l * cs;
            let b1 = u + mp * l * s[3] * s[3] * sn;
            let a21 = cs;
            let a22 = 4.0 / 3.0 * l;
            let b2 = g * sn;
            let det = a11 * a22 - a12 * a21;
            let acc = (b1 * a22 - a12 * b2) / det;
            let alpha = (a11 * b2 - a21 * b1) / det;
            [s[1], acc, s[3], alpha]
        };
        let mut y = x0;
        for _ in 0..10_000 {
            y = rk4(f, y, 0.0001);
        }
        let err = |z: &[f64]| (0..4).map(|i| (z[i] - y[i]).abs()).fold(0.0, f64::max);
        assert!(err(&x) < 1e-3, "{x:?} vs {y:?}");
        assert!((err(&coarse) / err(&mid) - 10.0).abs() < 1.0, "not first order: {} {}", err(&coarse), err(&mid));
    }
}

#[test]
fn d2_dataset_layout_and_noise_free_equality() {
    let cfg = GenConfig { seed: 7, ..GenConfig::mass_spring_d2() };
    let ds = generate_dataset(&cfg).unwrap();
    assert_eq!(ds.trajectories.len(), 5);
    assert!(ds.trajectories.iter().all(|t| t.len() == 501));
    assert_eq!(ds.trajectories[0].t[500], 5.0);
    let x1: Vec<f64> = ds.trajectories.iter().map(|t| t.x[0][0]).collect();
    assert!(x1.iter().any(|&v| v > 0.0) && x1.iter().any(|&v| v < 0.0), "{x1:?}");

    let clean = generate_dataset(&GenConfig { noise_std: vec![0.0, 0.0], ..cfg.clone() }).unwrap();
    let p = MassSpringParams::default();
    let tr = &clean.trajectories[2];
    let mut x = tr.x[0].clone();
    for k in 1..tr.len() {
        x = mass_spring_step(&p, &x, 0.01);
        assert_eq!(tr.x[k], x);
    }
}

#[test]
fn d1_box_as_written() {
    let ds = generate_dataset(&GenConfig::mass_spring_d1()).unwrap();
    for t in &ds.trajectories {
        let x0 = &t.x[0];
        // Initial observations are the box sample plus noise.
        assert!((x0[0] - 0.1).abs() < 0.03);
        assert!(x0[1] > 0.0 && x0[1] < 0.2);
    }
}

#[test]
fn datasets_are_seed_deterministic_and_round_trip() {
    let cfg = GenConfig { n_trajectories: 3, duration: 1.0, ..GenConfig::cartpole_random() };
    let (a, b) = (generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
    assert_eq!(a, b);
    let back: Dataset = serde_json::from_str(&a.to_json_string()).unwrap();
    assert_eq!(back, a);
    assert!(a.trajectories.iter().flat_map(|t| &t.u).all(|u| u[0].abs() <= 10.0));
}

#[test]
fn zero_trajectories_give_empty_dataset() {
    let ds = generate_dataset(&GenConfig { n_trajectories: 0, ..GenConfig::mass_spring_d2() }).unwrap();
    assert!(ds.trajectories.is_empty());
}

#[test]
fn scripted_policy_pumps_energy() {
    let cfg = GenConfig {
        n_trajectories: 1,
        duration: 8.0,
        init_low: vec![0.0, 0.0, PI - 0.1, 0.0],
        init_high: vec![0.0, 0.0, PI - 0.1, 0.0],
        control_policy: ControlPolicy::Scripted,
        ..GenConfig::cartpole_random()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let best = ds.trajectories[0].x.iter().map(|x| x[2].cos()).fold(f64::NEG_INFINITY, f64::max);
    assert!(best > 0.8, "pole never rose: max cos {best}");
}

#[test]
fn scripted_policy_rejected_for_mass_spring() {
    let cfg = GenConfig { control_policy: ControlPolicy::Scripted, ..GenConfig::mass_spring_d2() };
    assert!(generate_dataset(&cfg).is_err());
}

#[test]
fn forced_mass_spring_has_control_channel() {
    let cfg = GenConfig {
        system: SystemSpec::MassSpring { params: MassSpringParams::default(), force_max: Some(0.5) },
        control_policy: ControlPolicy::UniformRandom,
        ..GenConfig::mass_spring_d2()
    };
    let ds = generate_dataset(&cfg).unwrap();
    assert_eq!(ds.control_dim, 1);
    assert!(ds.trajectories[0].u.iter().all(|u| u[0].abs() <= 0.5));
}

#[test]
fn point_clouds_in_box_and_deterministic() {
    for shape in [CloudShape::Circle, CloudShape::FigureEight] {
        let a = fig2_point_clouds(shape, 200, 3);
        assert!(a.trajectories[0].x.iter().all(|p| p[0].abs() <= 0.2 && p[1].abs() <= 0.2));
        assert_eq!(a, fig2_point_clouds(shape, 200, 3));
    }
}

#[test]
fn point_cloud_spacing_matches_arc_length() {
    for shape in [CloudShape::Circle, CloudShape::FigureEight] {
        let n = 60;
        let fine = 100_000;
        let length: f64 = (0..fine)
            .map(|i| {
                let (a, b) = (shape.point(i as f64 / fine as f64), shape.point((i + 1) as f64 / fine as f64));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .sum();
        let pts = &fig2_point_clouds(shape, n, 1).trajectories[0].x;
        // Mean distance between consecutive samples against the mean parametric step.
        let mean_step: f64 = (0..n)
            .map(|i| {
                let (a, b) = (&pts[i], &pts[(i + 1) % n]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / n as f64;
        let expect = length / n as f64;
        assert!((mean_step - expect).abs() < 0.2 * expect, "{shape:?}: {mean_step} vs {expect}");
    }
}
