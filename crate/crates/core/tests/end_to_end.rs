use noisy_fedavg::analysis::{convergence_bound, d_constant, BoundSpec, BoundVariant};
use noisy_fedavg::engine::{run, ChannelLayer, RunConfig};
use noisy_fedavg::policy::{thm1_noise, thm3_downlink, LearningRateSchedule, ScheduleClock};
use noisy_fedavg::task::{derive_constants, make_task, TaskSpec};
use noisy_fedavg::{Exact, ExactBound, ExactSchedule, Scalar, Schedule};

fn q(n: i128, d: i128) -> Exact {
    Exact::new(n, d)
}

fn task_spec(clients: usize) -> TaskSpec {
    TaskSpec {
        clients,
        dimension: 6,
        samples_per_client: 40,
        heterogeneity: 0.5,
        ridge: 0.5,
        label_noise: 0.5,
        seed: 11,
    }
}

fn config(json: &str) -> RunConfig {
    serde_json::from_str(json).unwrap()
}

#[test]
fn precisions_agree_with_exact_schedule() {
    // μ = 1/2, L = 2: κ = 4, γ = max(32, 5), η_t = 4/(32 + t)
    let exact = ExactSchedule::new(q(1, 2), q(2, 1), 5).unwrap();
    let f64s = Schedule::new(0.5, 2.0, 5).unwrap();
    let f32s = LearningRateSchedule::<f32>::new(0.5, 2.0, 5).unwrap();
    assert_eq!(exact.gamma(), q(32, 1));
    for t in 1..200usize {
        let e = exact.eta(t).unwrap();
        assert_eq!(e, q(4, 32 + t as i128));
        assert!((f64s.eta(t).unwrap() - e.to_f64_lossy()).abs() <= 1e-15);
        assert!((f32s.eta(t).unwrap() as f64 - e.to_f64_lossy()).abs() <= 1e-7);
        let (se, ze) = thm1_noise(t + 1, 10, &exact).unwrap();
        let (sf, zf) = thm1_noise(t + 1, 10, &f64s).unwrap();
        assert!((sf / se.to_f64_lossy() - 1.0).abs() < 1e-13);
        assert!((zf / ze.to_f64_lossy() - 1.0).abs() < 1e-13);
    }
    let dl = thm3_downlink(10, 10, 5, q(10, 1), &exact).unwrap();
    let dlf = thm3_downlink(10, 10, 5, 10.0, &f64s).unwrap();
    assert!((dlf / dl.to_f64_lossy() - 1.0).abs() < 1e-13);
}

#[test]
fn exact_bound_matches_float_bound() {
    let spec: ExactBound = BoundSpec {
        variant: BoundVariant::Thm3,
        schedule: ExactSchedule::new(q(1, 2), q(2, 1), 4).unwrap(),
        sgd_var: vec![q(1, 3); 8],
        gamma_noniid: q(1, 7),
        grad_bound: q(9, 1),
        local_steps: 4,
        clients: 8,
        participants: 3,
        nu: Some(q(10, 1)),
        dim: 6,
        initial_gap: q(5, 2),
    };
    let float = BoundSpec {
        variant: spec.variant,
        schedule: Schedule::new(0.5, 2.0, 4).unwrap(),
        sgd_var: vec![1.0 / 3.0; 8],
        gamma_noniid: 1.0 / 7.0,
        grad_bound: 9.0,
        local_steps: 4,
        clients: 8,
        participants: 3,
        nu: Some(10.0),
        dim: 6,
        initial_gap: 2.5,
    };
    let de = d_constant(&spec).unwrap().to_f64_lossy();
    assert!((d_constant(&float).unwrap() / de - 1.0).abs() < 1e-13);
    for t in [1usize, 10, 100, 1000] {
        let b = convergence_bound(t, &spec).unwrap().to_f64_lossy();
        assert!((convergence_bound(t, &float).unwrap() / b - 1.0).abs() < 1e-13);
    }
}

#[test]
fn analog_mdt_run_with_normalization_converges() {
    let task = make_task(&task_spec(8)).unwrap();
    let cfg = config(
        r#"{"clients": 8, "participants": 4, "rounds": 60, "local_steps": 3, "batch": 8,
            "mode": "mdt", "layer": "analog_physical", "normalize": true,
            "policy": {"kind": "theorem3_mdt", "nu": "10 dB"}, "clock": "iteration", "seed": 5}"#,
    );
    assert_eq!(cfg.layer, ChannelLayer::AnalogPhysical);
    let out = run(&cfg, &task).unwrap();
    let gap = task.optimum().norm_sq();
    let last = out.trace.last().unwrap().sq_dist;
    assert_eq!(out.trace.len(), 60);
    assert!(last < 0.2 * gap, "{gap} -> {last}");
    assert!(out.trace.windows(2).all(|w| w[1].energy_cum >= w[0].energy_cum));
}

#[test]
fn trace_records_the_scheduled_step_sizes() {
    let task = make_task(&task_spec(4)).unwrap();
    let c = derive_constants(&task, 8, 1.0).unwrap();
    let schedule = Schedule::new(c.mu, c.lipschitz, 2).unwrap();
    for (clock, json_clock) in [(ScheduleClock::Round, "round"), (ScheduleClock::Iteration, "iteration")] {
        let cfg = config(&format!(
            r#"{{"clients": 4, "participants": 4, "rounds": 12, "local_steps": 2, "batch": 8,
                "policy": {{"kind": "theorem1_mt_full"}}, "clock": "{json_clock}", "seed": 1}}"#
        ));
        assert_eq!(cfg.clock, clock);
        let out = run(&cfg, &task).unwrap();
        for r in &out.trace {
            // the step size at the round's last local iteration
            assert_eq!(r.eta, schedule.eta(r.t * 2).unwrap());
            assert!(r.sigma2_ul > 0.0 && r.zeta2_dl > 0.0);
        }
        let s: Vec<f64> = out.trace.iter().map(|r| r.sigma2_ul).collect();
        assert!(s.windows(2).all(|w| w[1] < w[0]));
    }
}
