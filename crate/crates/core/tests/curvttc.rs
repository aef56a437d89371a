use pedsafe_core::curvttc::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type P2 = (f64, f64);

/// Ground-truth motions, `tau` measured from the latest sample.
#[derive(Debug, Clone, Copy)]
enum Truth {
    Circle { center: P2, radius: f64, theta0: f64, omega: f64 },
    Straight { origin: P2, vel: P2 },
}

impl Truth {
    fn at(&self, tau: f64) -> P2 {
        match *self {
            Truth::Circle { center, radius, theta0, omega } => {
                let th = theta0 + omega * tau;
                (center.0 + radius * th.cos(), center.1 + radius * th.sin())
            }
            Truth::Straight { origin, vel } => (origin.0 + vel.0 * tau, origin.1 + vel.1 * tau),
        }
    }
}

fn walker(c: P2, v: P2, a: P2, t_hit: f64) -> impl Fn(f64) -> P2 {
    move |tau| {
        let s = tau - t_hit;
        (c.0 + v.0 * s + 0.5 * a.0 * s * s, c.1 + v.1 * s + 0.5 * a.1 * s * s)
    }
}

/// First time on a 0.01 s grid at which the true paths come within the
/// threshold.
fn dense_oracle(veh: &Truth, ped: &dyn Fn(f64) -> P2, threshold: f64, horizon: f64) -> f64 {
    let n = (horizon / 0.01).round() as usize;
    for k in 0..=n {
        let tau = k as f64 * 0.01;
        let (a, b) = (veh.at(tau), ped(tau));
        if (a.0 - b.0).hypot(a.1 - b.1) < threshold {
            return tau;
        }
    }
    f64::INFINITY
}

#[test]
fn agrees_with_dense_stepping_on_converging_scenarios() {
    let cfg = CurvTtcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 250 {
        let t_hit = rng.random_range(1.0..8.0);
        let c = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let speed = rng.random_range(2.0..12.0);
        let veh = if rng.random_bool(0.3) {
            let h: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let vel = (speed * h.cos(), speed * h.sin());
            Truth::Straight { origin: (c.0 - vel.0 * t_hit, c.1 - vel.1 * t_hit), vel }
        } else {
            let radius = rng.random_range(8.0..60.0);
            let omega = speed / radius * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let th_hit: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let center = (c.0 - radius * th_hit.cos(), c.1 - radius * th_hit.sin());
            Truth::Circle { center, radius, theta0: th_hit - omega * t_hit, omega }
        };
        let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let ps = rng.random_range(0.3..2.0);
        let pa = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let ped = walker(c, (ps * ph.cos(), ps * ph.sin()), pa, t_hit);
        let start = {
            let (a, b) = (veh.at(0.0), ped(0.0));
            (a.0 - b.0).hypot(a.1 - b.1)
        };
        if start < 2.0 * cfg.threshold {
            continue;
        }
        let vfit = fit_arc(veh.at(-0.2), veh.at(-0.1), veh.at(0.0), 0.1);
        let pfit = fit_quadratic(ped(-0.2), ped(-0.1), ped(0.0), 0.1);
        let s = curvttc_at(0.0, &vfit, &pfit, &cfg).unwrap();
        let oracle = dense_oracle(&veh, &ped, cfg.threshold, cfg.horizon);
        assert!(oracle.is_finite() && s.value.is_finite(), "no hit: oracle {oracle}, got {}", s.value);
        let err = (s.value - oracle).abs();
        worst = worst.max(err);
        assert!(err <= 0.05, "oracle {oracle} vs {} for {veh:?}", s.value);
        checked += 1;
    }
    assert!(worst <= 0.011, "worst {worst}");
}

#[test]
fn head_on_two_seconds() {
    let cfg = CurvTtcConfig::default();
    // 10 m/s toward a standing pedestrian 21.3 m ahead reaches 1.3 m after 20 m
    let veh = fit_arc((0.0, -2.0), (0.0, -1.0), (0.0, 0.0), 0.1);
    let ped = fit_quadratic((0.0, 21.3), (0.0, 21.3), (0.0, 21.3), 0.1);
    let s = curvttc_at(0.0, &veh, &ped, &cfg).unwrap();
    assert!((s.value - 2.0).abs() < 0.05);
    assert!((s.value - 2.0).abs() < 1e-6);
    assert_eq!(s.conflict_type, ConflictType::Frontal);
    let (x, y) = s.projected_collision_point.unwrap();
    assert!(x.abs() < 1e-9 && (y - 20.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn circle_fit_recovers_uniform_motion(
        cx in -50.0f64..50.0, cy in -50.0f64..50.0, r in 5.0f64..200.0,
        th in 0.0f64..6.28, speed in 0.5f64..15.0, ccw in any::<bool>(),
    ) {
        let omega = speed / r * if ccw { 1.0 } else { -1.0 };
        let truth = Truth::Circle { center: (cx, cy), radius: r, theta0: th, omega };
        let fit = fit_arc(truth.at(-0.2), truth.at(-0.1), truth.at(0.0), 0.1);
        prop_assert!((fit.speed() - speed).abs() < 1e-6 * (1.0 + speed));
        for tau in [0.0, 0.5, 1.7, 3.0] {
            let (a, b) = (fit.position(tau), truth.at(tau));
            prop_assert!((a.0 - b.0).hypot(a.1 - b.1) < 1e-5 * (1.0 + r));
        }
    }

    #[test]
    fn quadratic_fit_interpolates(p in prop::array::uniform6(-30.0f64..30.0)) {
        let q = fit_quadratic((p[0], p[1]), (p[2], p[3]), (p[4], p[5]), 0.1);
        for (k, tau) in [0.0, 0.1, 0.2].into_iter().enumerate() {
            let (x, y) = q.position(tau);
            prop_assert!((x - p[2 * k]).abs() < 1e-9 && (y - p[2 * k + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn separating_agents_never_conflict(gap in 3.0f64..40.0, sv in 0.5f64..12.0, sp in 0.0f64..2.0) {
        let cfg = CurvTtcConfig::default();
        let veh = fit_arc((0.0, 0.2 * sv), (0.0, 0.1 * sv), (0.0, 0.0), 0.1);
        let ped = fit_quadratic((0.0, gap - 0.2 * sp), (0.0, gap - 0.1 * sp), (0.0, gap), 0.1);
        let s = curvttc_at(0.0, &veh, &ped, &cfg).unwrap();
        prop_assert!(s.value.is_infinite());
        prop_assert_eq!(s.conflict_type, ConflictType::None);
    }
}
