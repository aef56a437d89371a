//! Central finite-difference comparison for parameter gradients.

use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences with step `h`, on up to `per_param` random
/// coordinates of every parameter in `store`.
pub fn check_param_grads(
    store: &ParamStore,
    per_param: usize,
    h: f64,
    seed: u64,
    build: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let l = build(&mut t, s)?;
        Ok(t.value(l).data[0])
    };
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let n = store.get(&name)?.len();
        for _ in 0..per_param.min(n) {
            let k = rng.random_range(0..n);
            let mut plus = store.clone();
            plus.get_mut(&name)?.data[k] += h;
            let mut minus = store.clone();
            minus.get_mut(&name)?.data[k] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let an = grads.param(&name).map_or(0.0, |g| g.data[k]);
            let err = relative_error(an, fd, 1e-6);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}
