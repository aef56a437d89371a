//! Actor and critic networks over a 10-step state window.

use pedsafe_nn::{Activation, Dense, ParamStore, SMamba, SMambaConfig, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, StateWindow, ACTION_BOUND, ACTION_DIM, STATE_DIM, WINDOW};
use crate::error::{Error, Result};

/// Fixed per-feature divisors applied before the linear lift.
pub const STATE_SCALE: [f64; STATE_DIM] = [10.0, 2.0, 5.0, 10.0, 2.0, 5.0];
pub const HIDDEN: usize = 256;

/// A batch of state windows laid out as `[batch * WINDOW, STATE_DIM]`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub batch: usize,
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl WindowBatch {
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a StateWindow>) -> Self {
        let mut data = Vec::new();
        let mut mask = Vec::new();
        let mut batch = 0;
        for w in windows {
            batch += 1;
            let m = w.mask();
            for (row, valid) in w.rows.iter().zip(m) {
                data.extend(row.iter().zip(STATE_SCALE).map(|(v, s)| if valid { v / s } else { 0.0 }));
                mask.push(valid);
            }
        }
        let features = Tensor::from_vec(batch * WINDOW, STATE_DIM, data).expect("window rows are fixed width");
        WindowBatch { batch, features, mask }
    }
}

/// Something that maps state windows to actions on a tape.
pub trait ActorFn {
    /// Returns `[batch, 2]` actions.
    fn actions(&self, tape: &mut Tape, states: &WindowBatch, frozen: bool) -> Result<Var>;
}

/// Something that scores state-action pairs on a tape.
pub trait QFunction {
    /// `actions` is `[batch, 2]`; returns `[batch, 1]`.
    fn q(&self, tape: &mut Tape, states: &WindowBatch, actions: Var, frozen: bool) -> Result<Var>;
}

fn smamba_cfg() -> SMambaConfig {
    SMambaConfig { seq_len: WINDOW, ..SMambaConfig::default() }
}

fn encode(tape: &mut Tape, store: &ParamStore, block: &SMamba, lift: &Dense, states: &WindowBatch, frozen: bool) -> Result<Var> {
    let x = tape.constant(states.features.clone());
    let h = lift.forward(tape, store, x, frozen)?;
    Ok(block.forward(tape, store, h, states.batch, &states.mask, frozen)?)
}

/// Lift 6 -> 32, SMamba, two ReLU layers of 256, tanh output scaled to the
/// action bound.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub params: ParamStore,
    block: SMamba,
    lift: Dense,
    fc1: Dense,
    fc2: Dense,
    out: Dense,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut net = Self::empty();
        net.lift.init(&mut net.params, rng);
        net.block.init(&mut net.params, rng);
        net.fc1.init(&mut net.params, rng);
        net.fc2.init(&mut net.params, rng);
        net.out.init(&mut net.params, rng);
        net
    }

    fn empty() -> Self {
        let cfg = smamba_cfg();
        ActorNet {
            params: ParamStore::new(),
            block: SMamba::new(cfg),
            lift: Dense::new("lift", STATE_DIM, cfg.d_model, Activation::Identity),
            fc1: Dense::new("fc1", cfg.d_model, HIDDEN, Activation::ReLU),
            fc2: Dense::new("fc2", HIDDEN, HIDDEN, Activation::ReLU),
            out: Dense::new("out", HIDDEN, ACTION_DIM, Activation::Tanh),
        }
    }

    /// Rebuilds a network around stored parameters.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let mut net = Self::empty();
        let reference = ActorNet::new(&mut ChaCha8Rng::seed_from_u64(0)).params;
        reference.check_compatible(&params).map_err(|e| Error::Contract(format!("actor parameters: {e}")))?;
        net.params = params;
        SMamba::mark_bounds(&mut net.params)?;
        Ok(net)
    }

    /// Deterministic action for a single window.
    pub fn act(&self, window: &StateWindow) -> Result<Action> {
        let batch = WindowBatch::from_windows([window]);
        let mut tape = Tape::inference();
        let a = self.actions(&mut tape, &batch, true)?;
        let v = &tape.value(a).data;
        Ok(Action { alon: v[0], alat: v[1] })
    }
}

impl ActorFn for ActorNet {
    fn actions(&self, tape: &mut Tape, states: &WindowBatch, frozen: bool) -> Result<Var> {
        let z = encode(tape, &self.params, &self.block, &self.lift, states, frozen)?;
        let h = self.fc1.forward(tape, &self.params, z, frozen)?;
        let h = self.fc2.forward(tape, &self.params, h, frozen)?;
        let a = self.out.forward(tape, &self.params, h, frozen)?;
        Ok(tape.scale(a, ACTION_BOUND))
    }
}

/// State branch SMamba -> 16 -> 32, action branch 16 -> 32, joined and
/// passed through two ReLU layers of 256 to a scalar.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub params: ParamStore,
    block: SMamba,
    lift: Dense,
    s1: Dense,
    s2: Dense,
    a1: Dense,
    a2: Dense,
    fc1: Dense,
    fc2: Dense,
    q: Dense,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut net = Self::empty();
        let p = &mut net.params;
        net.lift.init(p, rng);
        net.block.init(p, rng);
        for d in [&net.s1, &net.s2, &net.a1, &net.a2, &net.fc1, &net.fc2, &net.q] {
            d.init(p, rng);
        }
        net
    }

    fn empty() -> Self {
        let cfg = smamba_cfg();
        CriticNet {
            params: ParamStore::new(),
            block: SMamba::new(cfg),
            lift: Dense::new("lift", STATE_DIM, cfg.d_model, Activation::Identity),
            s1: Dense::new("s1", cfg.d_model, 16, Activation::ReLU),
            s2: Dense::new("s2", 16, 32, Activation::ReLU),
            a1: Dense::new("a1", ACTION_DIM, 16, Activation::ReLU),
            a2: Dense::new("a2", 16, 32, Activation::ReLU),
            fc1: Dense::new("fc1", 64, HIDDEN, Activation::ReLU),
            fc2: Dense::new("fc2", HIDDEN, HIDDEN, Activation::ReLU),
            q: Dense::new("q", HIDDEN, 1, Activation::Identity),
        }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let mut net = Self::empty();
        let reference = CriticNet::new(&mut ChaCha8Rng::seed_from_u64(0)).params;
        reference.check_compatible(&params).map_err(|e| Error::Contract(format!("critic parameters: {e}")))?;
        net.params = params;
        SMamba::mark_bounds(&mut net.params)?;
        Ok(net)
    }
}

impl QFunction for CriticNet {
    fn q(&self, tape: &mut Tape, states: &WindowBatch, actions: Var, frozen: bool) -> Result<Var> {
        let p = &self.params;
        let z = encode(tape, p, &self.block, &self.lift, states, frozen)?;
        let s = self.s1.forward(tape, p, z, frozen)?;
        let s = self.s2.forward(tape, p, s, frozen)?;
        let a = tape.scale(actions, 1.0 / ACTION_BOUND);
        let a = self.a1.forward(tape, p, a, frozen)?;
        let a = self.a2.forward(tape, p, a, frozen)?;
        let h = tape.concat_cols(&[s, a])?;
        let h = self.fc1.forward(tape, p, h, frozen)?;
        let h = self.fc2.forward(tape, p, h, frozen)?;
        Ok(self.q.forward(tape, p, h, frozen)?)
    }
}
