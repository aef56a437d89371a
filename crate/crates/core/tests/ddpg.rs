use pedsafe_core::curvttc::{curvttc_series, flag_critical, CriticalEvent, CurvTtcConfig};
use pedsafe_core::ddpg::*;
use pedsafe_core::env::*;
use pedsafe_core::synth::{generate, ScenarioTemplate, TemplateKind};
use pedsafe_core::traj::AgentClass;
use pedsafe_core::Error;
use pedsafe_nn::gradcheck::check_param_grads;
use pedsafe_nn::{AdamConfig, NnError, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_windows(rng: &mut ChaCha8Rng, n: usize) -> Vec<StateWindow> {
    (0..n)
        .map(|_| {
            let mut w = StateWindow::default();
            for _ in 0..rng.random_range(1..=WINDOW) {
                w = w.push(&EnvState {
                    dlon: rng.random_range(-15.0..15.0),
                    vlon_ped: rng.random_range(-2.0..2.0),
                    dvlon: rng.random_range(-6.0..6.0),
                    dlat: rng.random_range(-15.0..15.0),
                    vlat_ped: rng.random_range(-2.0..2.0),
                    dvlat: rng.random_range(-6.0..6.0),
                });
            }
            w
        })
        .collect()
}

fn critical_events(seed: u64, n: usize) -> Vec<CriticalEvent> {
    let mut t = ScenarioTemplate::new(TemplateKind::StraightCrossing, seed);
    t.critical_fraction = 1.0;
    t.av_fraction = 0.0;
    generate(&t, n)
        .unwrap()
        .iter()
        .map(|s| {
            let p = s.pair();
            let series = curvttc_series(&p, &CurvTtcConfig::default()).unwrap();
            flag_critical(&p, series).unwrap()
        })
        .collect()
}

fn nn(e: Error) -> NnError {
    match e {
        Error::Nn(inner) => inner,
        other => NnError::Domain(other.to_string()),
    }
}

/// `Q = -|a - a*|^2`, independent of the state.
struct Bowl(f64, f64);

impl QFunction for Bowl {
    fn q(&self, tape: &mut Tape, states: &WindowBatch, actions: Var, _frozen: bool) -> pedsafe_core::Result<Var> {
        let target = (0..states.batch).flat_map(|_| [self.0, self.1]).collect();
        let t = tape.constant(Tensor::from_vec(states.batch, 2, target)?);
        let d = tape.sub(actions, t)?;
        let d2 = tape.square(d);
        let s = tape.sum_rows(d2);
        Ok(tape.neg(s))
    }
}

/// Ignores the action entirely.
struct Flat;

impl QFunction for Flat {
    fn q(&self, tape: &mut Tape, states: &WindowBatch, _a: Var, _frozen: bool) -> pedsafe_core::Result<Var> {
        Ok(tape.constant(Tensor::filled(states.batch, 1, 2.5)))
    }
}

#[test]
fn chained_actor_gradient_matches_finite_differences() {
    let mut worst = 0.0f64;
    for point in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let actor = ActorNet::new(&mut rng);
        let critic = CriticNet::new(&mut rng);
        let windows = random_windows(&mut rng, 3);
        let batch = WindowBatch::from_windows(&windows);
        let report = check_param_grads(&actor.params, 2, 1e-5, point, &|tape, store| {
            let a = ActorNet::from_params(store.clone()).map_err(nn)?;
            actor_objective(tape, &batch, &a, &critic).map_err(nn)
        })
        .unwrap();
        assert!(report.checked > 20);
        assert!(report.max_rel_err < 1e-4, "point {point}: {report:?}");
        worst = worst.max(report.max_rel_err);
    }
    eprintln!("actor worst relative error {worst:.2e}");
}

#[test]
fn critic_gradient_matches_finite_differences() {
    for point in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + point);
        let critic = CriticNet::new(&mut rng);
        let windows = random_windows(&mut rng, 3);
        let batch = WindowBatch::from_windows(&windows);
        let acts: Vec<f64> = (0..6).map(|_| rng.random_range(-7.0..7.0)).collect();
        let targets: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..1.0)).collect();
        let report = check_param_grads(&critic.params, 2, 1e-5, point, &|tape, store| {
            let c = CriticNet::from_params(store.clone()).map_err(nn)?;
            let a = tape.constant(Tensor::from_vec(3, 2, acts.clone())?);
            let q = c.q(tape, &batch, a, false).map_err(nn)?;
            let y = tape.constant(Tensor::from_vec(3, 1, targets.clone())?);
            let d = tape.sub(q, y)?;
            let d2 = tape.square(d);
            Ok(tape.mean(d2))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "point {point}: {report:?}");
    }
}

#[test]
fn critic_loss_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut critic = CriticNet::new(&mut rng);
    let windows = random_windows(&mut rng, 4);
    let ts: Vec<Transition> = windows
        .iter()
        .map(|w| Transition { state: *w, action: Action { alon: 0.5, alat: -1.0 }, reward: 0.0, raw_reward: 0.0, next_state: *w, terminal: Terminal::No })
        .collect();
    let batch: Vec<&Transition> = ts.iter().collect();
    let states = WindowBatch::from_windows(&windows);
    let q_now = |c: &CriticNet| {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::from_vec(4, 2, [0.5, -1.0].repeat(4)).unwrap());
        let q = c.q(&mut tape, &states, a, true).unwrap();
        tape.value(q).data.clone()
    };
    let q = q_now(&critic);
    let frozen = critic.params.clone();
    let loss = update_critic(&batch, &q, &mut critic, &AdamConfig::with_lr(1e-3)).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(critic.params.get("q/w").unwrap(), frozen.get("q/w").unwrap());

    let mut c2 = CriticNet::from_params(frozen.clone()).unwrap();
    let shifted: Vec<f64> = q.iter().map(|v| v + 0.3).collect();
    let loss = update_critic(&batch, &shifted, &mut c2, &AdamConfig::with_lr(1e-3)).unwrap();
    assert!((loss - 0.09).abs() < 1e-12);

    let mut c3 = CriticNet::from_params(frozen).unwrap();
    let loss = update_critic(&batch[..1], &[q[0] - 2.0], &mut c3, &AdamConfig::with_lr(1e-3)).unwrap();
    assert!((loss - 4.0).abs() < 1e-12);
    assert!(matches!(update_critic(&batch, &[0.0], &mut c3, &AdamConfig::default()), Err(Error::Contract(_))));
}

#[test]
fn action_blind_critic_gives_zero_actor_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut actor = ActorNet::new(&mut rng);
    let before = actor.params.clone();
    let windows = random_windows(&mut rng, 5);
    let refs: Vec<&StateWindow> = windows.iter().collect();
    let obj = update_actor(&refs, &mut actor, &Flat, &AdamConfig::with_lr(1e-2)).unwrap();
    assert_eq!(obj, -2.5);
    for name in before.names() {
        assert_eq!(before.get(name).unwrap().data, actor.params.get(name).unwrap().data, "{name}");
    }
}

#[test]
fn bowl_critic_pulls_actor_to_its_optimum_and_reconstruction_follows() {
    let events = critical_events(31, 2);
    let cfg = EpisodeConfig::default();
    let variant = RewardVariant::new(RewardKind::AbsVelocity);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut actor = ActorNet::new(&mut rng);
    let star = (1.5, -0.75);
    let bowl = Bowl(star.0, star.1);
    // train on the windows the rollout will visit, gathered with a fixed policy
    let mut windows = Vec::new();
    for ev in &events {
        let mut still = |_: &StateWindow| Action { alon: star.0, alat: star.1 };
        for (t, _) in rollout(ev, &mut still, variant, cfg, 0.0, 0).unwrap() {
            windows.push(t.state);
        }
    }
    let refs: Vec<&StateWindow> = windows.iter().collect();
    let first = update_actor(&refs, &mut actor, &bowl, &AdamConfig::with_lr(5e-3)).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = update_actor(&refs, &mut actor, &bowl, &AdamConfig::with_lr(5e-3)).unwrap();
    }
    assert!(last < 0.1 * first && last < 1e-3, "{first} -> {last}");
    for ev in &events {
        let steps = reconstruct_with_policy(&mut ActorPolicy(&actor), ev, variant, cfg).unwrap();
        assert!(!steps.is_empty());
        for (_, info) in &steps {
            assert!((info.action.alon - star.0).abs() < 0.05 && (info.action.alat - star.1).abs() < 0.05, "{:?}", info.action);
        }
        let again = reconstruct_with_policy(&mut ActorPolicy(&actor), ev, variant, cfg).unwrap();
        assert_eq!(steps, again);
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let events = critical_events(11, 2);
    let cfg = TrainConfig { episodes: 3, batch: 16, seed: 4, ..TrainConfig::default() };
    let variant = RewardVariant::new(RewardKind::AbsVelocity);
    let a = train(&events, variant, &cfg, AgentClass::HDV).unwrap();
    let b = train(&events, variant, &cfg, AgentClass::HDV).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
    assert_eq!(a.curve.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    a.checkpoint.save(&path).unwrap();
    let loaded = PolicyCheckpoint::load(&path).unwrap();
    assert_eq!(loaded.vehicle_type, AgentClass::HDV);
    assert_eq!(loaded.corpus_digest, corpus_digest(&events).unwrap());
    let (x, y) = (a.checkpoint.actor().unwrap(), loaded.actor().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for w in random_windows(&mut rng, 20) {
        let (p, q) = (x.act(&w).unwrap(), y.act(&w).unwrap());
        assert_eq!((p.alon.to_bits(), p.alat.to_bits()), (q.alon.to_bits(), q.alat.to_bits()));
    }
    let r1 = reconstruct(&a.checkpoint, &events[0]).unwrap();
    let r2 = reconstruct(&loaded, &events[0]).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.len() <= Episode::new(&events[0], cfg.episode, variant).unwrap().horizon());

    let other = train(&events, variant, &TrainConfig { seed: 5, ..cfg }, AgentClass::HDV).unwrap();
    assert_ne!(a.curve, other.curve);
    assert!(matches!(train(&[], variant, &cfg, AgentClass::HDV), Err(Error::InvalidArgument(_))));
}

#[test]
fn targets_start_equal_to_main_networks() {
    let agent = Agent::new(12);
    assert_eq!(agent.actor.params.values_only(), agent.target_actor.params.values_only());
    assert_eq!(agent.critic.params.values_only(), agent.target_critic.params.values_only());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn soft_updates_follow_the_geometric_law(
        main in prop::collection::vec(-5.0f64..5.0, 1..6),
        start in -5.0f64..5.0,
        tau in 0.001f64..1.0,
        k in 0usize..200,
    ) {
        let n = main.len();
        let mut m = ParamStore::new();
        m.insert("w", Tensor::from_vec(1, n, main.clone()).unwrap());
        let mut t = ParamStore::new();
        t.insert("w", Tensor::filled(1, n, start));
        for _ in 0..k {
            soft_update(&m, &mut t, tau).unwrap();
        }
        let decay = (1.0 - tau).powi(k as i32);
        for (got, &mv) in t.get("w").unwrap().data.iter().zip(&main) {
            let want = (1.0 - decay) * mv + decay * start;
            prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}
