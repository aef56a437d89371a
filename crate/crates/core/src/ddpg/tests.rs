use super::*;
use crate::env::EnvState;
use pedsafe_nn::Var;

struct ConstActor(f64, f64);

impl ActorFn for ConstActor {
    fn actions(&self, tape: &mut Tape, states: &WindowBatch, _frozen: bool) -> Result<Var> {
        let data = (0..states.batch).flat_map(|_| [self.0, self.1]).collect();
        Ok(tape.constant(Tensor::from_vec(states.batch, 2, data)?))
    }
}

struct ConstQ(f64);

impl QFunction for ConstQ {
    fn q(&self, tape: &mut Tape, states: &WindowBatch, _a: Var, _frozen: bool) -> Result<Var> {
        Ok(tape.constant(Tensor::filled(states.batch, 1, self.0)))
    }
}

fn transition(reward: f64, terminal: Terminal) -> Transition {
    let w = StateWindow::default().push(&EnvState { dlon: 3.0, vlon_ped: 1.0, dvlon: -2.0, dlat: 1.0, vlat_ped: 0.2, dvlat: 0.1 });
    Transition { state: w, action: Action::default(), reward, raw_reward: reward * 100.0, next_state: w.push(&EnvState::default()), terminal }
}

#[test]
fn targets_bootstrap_only_when_not_absorbing() {
    let ts = [
        transition(0.0, Terminal::No),
        transition(-2.0, Terminal::Collision),
        transition(1.0, Terminal::Goal),
        transition(0.5, Terminal::HorizonEnd),
    ];
    let batch: Vec<&Transition> = ts.iter().collect();
    let y = critic_target(&batch, &ConstActor(0.0, 0.0), &ConstQ(1.0), 0.9).unwrap();
    assert_eq!(y, vec![0.9, -2.0, 1.0, 1.4]);
    let y0 = critic_target(&batch, &ConstActor(0.0, 0.0), &ConstQ(1.0), 0.0).unwrap();
    assert_eq!(y0, vec![0.0, -2.0, 1.0, 0.5]);
}

#[test]
fn soft_update_limits_and_single_step() {
    let mut main = ParamStore::new();
    main.insert("w", Tensor::filled(1, 3, 1.0));
    let mut target = ParamStore::new();
    target.insert("w", Tensor::filled(1, 3, 0.0));
    let mut t = target.clone();
    soft_update(&main, &mut t, 0.01).unwrap();
    assert!(t.get("w").unwrap().data.iter().all(|&v| (v - 0.01).abs() < 1e-15));
    let mut t = target.clone();
    soft_update(&main, &mut t, 1.0).unwrap();
    assert_eq!(t.get("w").unwrap(), main.get("w").unwrap());
    let mut t = target.clone();
    soft_update(&main, &mut t, 0.0).unwrap();
    assert_eq!(t, target);

    let mut other = ParamStore::new();
    other.insert("v", Tensor::filled(1, 3, 0.0));
    assert!(matches!(soft_update(&main, &mut other, 0.5), Err(Error::Contract(_))));
}

#[test]
fn replay_is_fifo_and_bounded() {
    let mut buf = ReplayBuffer::new(3);
    for i in 0..5 {
        buf.push(transition(i as f64, Terminal::No));
    }
    assert_eq!(buf.len(), 3);
    let r: Vec<f64> = buf.iter().map(|t| t.reward).collect();
    assert_eq!(r, vec![2.0, 3.0, 4.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(buf.sample(4, &mut rng).is_err());
    assert_eq!(buf.sample(3, &mut rng).unwrap().len(), 3);
}

#[test]
fn rolling_mean_is_trailing() {
    let r = rolling_mean(&[1.0, 3.0, 5.0, 7.0], 2);
    assert_eq!(r, vec![1.0, 2.0, 4.0, 6.0]);
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    assert_eq!((c.episodes, c.batch, c.buffer), (3000, 256, 10_000));
    assert_eq!((c.lr_actor, c.lr_critic, c.gamma, c.tau, c.noise_sigma), (5e-4, 1e-3, 0.9, 0.01, 0.01));
    c.validate().unwrap();
    assert!(TrainConfig { gamma: 1.0, ..c }.validate().is_err());
    assert!(TrainConfig { tau: 0.0, ..c }.validate().is_err());
    assert!(TrainConfig { batch: 20_000, ..c }.validate().is_err());
}

#[test]
fn actor_outputs_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut actor = ActorNet::new(&mut rng);
    // inflate the output layer so tanh saturates
    actor.params.get_mut("out/w").unwrap().data.iter_mut().for_each(|v| *v *= 1e3);
    let w = StateWindow::default().push(&EnvState { dlon: 50.0, vlon_ped: 3.0, dvlon: -9.0, dlat: -20.0, vlat_ped: 2.0, dvlat: 1.0 });
    let a = actor.act(&w).unwrap();
    assert!(a.alon.abs() <= 7.0 && a.alat.abs() <= 7.0);
}

#[test]
fn train_step_timing_smoke() {
    let ts: Vec<Transition> = (0..64).map(|i| transition(-(i as f64) / 64.0, Terminal::No)).collect();
    let batch: Vec<&Transition> = ts.iter().collect();
    let mut agent = Agent::new(0);
    let cfg = TrainConfig { batch: 64, ..TrainConfig::default() };
    let (l0, _) = agent.train_step(&batch, &cfg).unwrap();
    assert!(l0.is_finite());
}
