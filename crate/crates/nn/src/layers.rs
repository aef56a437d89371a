use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{init_uniform, ParamStore};
use crate::tape::{Activation, Tape, Var};

/// `act(x W + b)` on the tape.
pub fn forward_dense(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let (xs, ws, bs) = (&tape.value(x).shape, &tape.value(w).shape, &tape.value(b).shape);
    if xs[1] != ws[0] || bs[..] != [1, ws[1]] {
        return shape_err("dense", format!("x {xs:?}, W {ws:?}, b {bs:?}"));
    }
    let h = tape.matmul(x, w)?;
    let h = tape.add(h, b)?;
    Ok(tape.activation(h, act))
}

/// Fully connected layer whose weights live in a [`ParamStore`] as
/// `<name>/w` (`[in, out]`) and `<name>/b` (`[1, out]`).
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub act: Activation,
}

impl Dense {
    pub fn new(name: &str, input: usize, output: usize, act: Activation) -> Self {
        Dense { name: name.to_string(), input, output, act }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let bound = 1.0 / (self.input as f64).sqrt();
        store.insert(&format!("{}/w", self.name), init_uniform(rng, self.input, self.output, bound));
        store.insert(&format!("{}/b", self.name), init_uniform(rng, 1, self.output, bound));
    }

    /// `frozen` puts the weights on the tape as constants.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let (wn, bn) = (format!("{}/w", self.name), format!("{}/b", self.name));
        let (w, b) = if frozen {
            (store.frozen(tape, &wn)?, store.frozen(tape, &bn)?)
        } else {
            (store.var(tape, &wn)?, store.var(tape, &bn)?)
        };
        forward_dense(tape, x, w, b, self.act)
    }
}
