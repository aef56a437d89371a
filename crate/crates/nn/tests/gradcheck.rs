//! Analytic gradients against central finite differences.

use pedsafe_nn::smamba::{causal_conv_on_tape, scan_on_tape, DeltaAdjust};
use pedsafe_nn::{Activation, Dense, ParamStore, SMamba, SMambaConfig, ScanMode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks up to `per_param` random coordinates of every parameter.
fn check_params(store: &ParamStore, per_param: usize, seed: u64, build: &dyn Fn(&mut Tape, &ParamStore) -> Var) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |s: &ParamStore| {
        let mut t = Tape::inference();
        let l = build(&mut t, s);
        t.value(l).data[0]
    };
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let n = store.get(&name).unwrap().len();
        let analytic = grads.param(&name).cloned().unwrap_or_else(|| Tensor::zeros(1, n));
        for _ in 0..per_param.min(n) {
            let k = rng.random_range(0..n);
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().data[k] += H;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().data[k] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let an = analytic.data[k];
            assert!(rel_err(an, fd) < TOL, "{name}[{k}]: analytic {an}, fd {fd}");
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn elementwise_and_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert("a", random_tensor(&mut rng, 3, 4, -1.0, 1.0));
    store.insert("b", random_tensor(&mut rng, 3, 4, 0.5, 2.0));
    store.insert("row", random_tensor(&mut rng, 1, 4, 0.5, 1.5));
    store.insert("col", random_tensor(&mut rng, 3, 1, 0.5, 1.5));
    let build = |tape: &mut Tape, s: &ParamStore| {
        let a = s.var(tape, "a").unwrap();
        let b = s.var(tape, "b").unwrap();
        let row = s.var(tape, "row").unwrap();
        let col = s.var(tape, "col").unwrap();
        let x = tape.mul(a, b).unwrap();
        let x = tape.div(x, row).unwrap();
        let x = tape.sub(x, col).unwrap();
        let e = tape.exp(x);
        let lb = tape.ln(b);
        let y = tape.add(e, lb).unwrap();
        let t = tape.tanh(y);
        let sg = tape.sigmoid(a);
        let sp = tape.softplus(a);
        let si = tape.silu(b);
        let c = tape.concat_cols(&[t, sg, sp]).unwrap();
        let sl = tape.slice_cols(c, 2, 7).unwrap();
        let g = tape.gather_rows(sl, &[2, 0, 2]).unwrap();
        let q = tape.square(g);
        let sr = tape.sum_rows(si);
        let tr = tape.transpose(sr);
        let m1 = tape.mean(q);
        let m2 = tape.sum(tr);
        let m2 = tape.scale(m2, 0.3);
        let tot = tape.add(m1, m2).unwrap();
        let neg = tape.neg(tot);
        let rs = tape.mul(neg, neg).unwrap();
        tape.sum(rs)
    };
    check_params(&store, 12, 2, &build);
}

#[test]
fn dense_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let layers = [
        Dense::new("l1", 5, 8, Activation::Tanh),
        Dense::new("l2", 8, 8, Activation::SiLU),
        Dense::new("l3", 8, 3, Activation::Softplus),
    ];
    for l in &layers {
        l.init(&mut store, &mut rng);
    }
    let x = random_tensor(&mut rng, 4, 5, -1.0, 1.0);
    let build = |tape: &mut Tape, s: &ParamStore| {
        let mut h = tape.constant(x.clone());
        for l in &layers {
            h = l.forward(tape, s, h, false).unwrap();
        }
        tape.mean(h)
    };
    check_params(&store, 10, 4, &build);
}

fn scan_case(adjust: DeltaAdjust, mode: ScanMode, mask: Vec<bool>, seed: u64) {
    let (batch, len, d, n) = (2, mask.len() / 2, 3, 4);
    let rows = batch * len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("u", random_tensor(&mut rng, rows, d, -1.0, 1.0));
    store.insert("delta", random_tensor(&mut rng, rows, d, 0.05, 0.5));
    store.insert("a", random_tensor(&mut rng, d, n, -2.0, -0.2));
    store.insert("b", random_tensor(&mut rng, rows, n, -1.0, 1.0));
    store.insert("c", random_tensor(&mut rng, rows, n, -1.0, 1.0));
    store.insert("s", random_tensor(&mut rng, 1, n, 0.5, 1.5));
    let weights = random_tensor(&mut rng, rows, d, -1.0, 1.0);
    let build = |tape: &mut Tape, s: &ParamStore| {
        let v: Vec<Var> = ["u", "delta", "a", "b", "c", "s"].iter().map(|k| s.var(tape, k).unwrap()).collect();
        let ln_s = tape.ln(v[5]);
        let y = scan_on_tape(tape, v[0], v[1], v[2], v[3], v[4], ln_s, batch, len, &mask, adjust, mode).unwrap();
        let w = tape.constant(weights.clone());
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    };
    check_params(&store, 30, seed + 1, &build);
}

#[test]
fn scan_gradients_all_valid() {
    scan_case(DeltaAdjust::FirstStep, ScanMode::Sequential, vec![true; 10], 10);
    scan_case(DeltaAdjust::EveryStep, ScanMode::ParallelScan, vec![true; 10], 11);
}

#[test]
fn scan_gradients_with_masked_prefix() {
    let mask = vec![false, false, true, true, true, false, true, true, true, true];
    scan_case(DeltaAdjust::EveryStep, ScanMode::Sequential, mask.clone(), 12);
    scan_case(DeltaAdjust::FirstStep, ScanMode::Sequential, mask, 13);
}

#[test]
fn causal_conv_gradients() {
    let (batch, len, ch, k) = (2, 5, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut store = ParamStore::new();
    store.insert("x", random_tensor(&mut rng, batch * len, ch, -1.0, 1.0));
    store.insert("w", random_tensor(&mut rng, ch, k, -1.0, 1.0));
    store.insert("bias", random_tensor(&mut rng, 1, ch, -1.0, 1.0));
    let weights = random_tensor(&mut rng, batch * len, ch, -1.0, 1.0);
    let build = |tape: &mut Tape, s: &ParamStore| {
        let x = s.var(tape, "x").unwrap();
        let w = s.var(tape, "w").unwrap();
        let b = s.var(tape, "bias").unwrap();
        let y = causal_conv_on_tape(tape, x, w, b, batch, len).unwrap();
        let y = tape.square(y);
        let c = tape.constant(weights.clone());
        let p = tape.mul(y, c).unwrap();
        tape.sum(p)
    };
    check_params(&store, 30, 21, &build);
}

#[test]
fn smamba_block_gradients_at_random_points() {
    let cfg = SMambaConfig { d_model: 6, d_inner: 8, d_state: 4, conv_width: 4, seq_len: 5, ..Default::default() };
    let block = SMamba::new(cfg);
    for point in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + point);
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng);
        // move the smoothing vectors away from 1 so their paths are exercised
        for name in ["smamba/s_out", "smamba/s_mm"] {
            for v in store.get_mut(name).unwrap().data.iter_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
        let batch = 3;
        let x = random_tensor(&mut rng, batch * cfg.seq_len, cfg.d_model, -1.0, 1.0);
        let mut mask = vec![true; batch * cfg.seq_len];
        mask[cfg.seq_len] = false;
        mask[cfg.seq_len + 1] = false;
        let build = |tape: &mut Tape, s: &ParamStore| {
            let xv = tape.constant(x.clone());
            let out = block.forward(tape, s, xv, batch, &mask, false).unwrap();
            let sq = tape.square(out);
            tape.mean(sq)
        };
        check_params(&store, 8, 200 + point, &build);
    }
}
