//! Central finite differences (step 1e-5) against the tape's analytic gradients.

use gtp_core::tensor::{ParamStore, Tape, Tensor, Var};
use gtp_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
/// Below this size the central difference is mostly round-off (~1e-11 / STEP).
const REL_FLOOR: f64 = 1e-6;

fn loss_value(store: &ParamStore, build: &dyn Fn(&mut Tape) -> Result<Var>) -> f64 {
    let mut tape = Tape::new(store);
    let loss = build(&mut tape).unwrap();
    tape.value(loss).data()[0]
}

/// Returns the worst relative error over coordinates with |g| > 1e-8 (with the
/// denominator floored at `REL_FLOOR`), and the worst absolute error over the rest.
fn check(store: &ParamStore, build: &dyn Fn(&mut Tape) -> Result<Var>) -> (f64, f64) {
    let mut tape = Tape::new(store);
    let loss = build(&mut tape).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for id in store.ids() {
        for i in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= STEP;
            let numeric = (loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * STEP);
            let analytic = grads.get(id).data()[i];
            if analytic.abs() > 1e-8 {
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
                worst_rel = worst_rel.max(rel);
            } else {
                worst_abs = worst_abs.max((analytic - numeric).abs());
            }
        }
    }
    (worst_rel, worst_abs)
}

fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, r, c) in shapes {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.insert(*name, Tensor::matrix(*r, *c, data).unwrap()).unwrap();
    }
    store
}

#[test]
fn gru_cell_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (dx, dh) = (3, 4);
    let store = random_store(
        &mut rng,
        &[
            ("wx", dx, 3 * dh),
            ("wh", dh, 3 * dh),
            ("b", 1, 3 * dh),
            ("x", 2, dx),
            ("h", 2, dh),
            ("probe", dh, 1),
        ],
    );
    let build = |t: &mut Tape| -> Result<Var> {
        let p = t.params();
        let (wx, wh, b) = (t.param(p.id("wx").unwrap()), t.param(p.id("wh").unwrap()), t.param(p.id("b").unwrap()));
        let (x, h, probe) = (t.param(p.id("x").unwrap()), t.param(p.id("h").unwrap()), t.param(p.id("probe").unwrap()));
        let h1 = t.gru_cell(h, x, wx, wh, b)?;
        let h2 = t.gru_cell(h1, x, wx, wh, b)?;
        let y = t.matmul(h2, probe)?;
        Ok(t.sum(y))
    };
    let (rel, abs) = check(&store, &build);
    assert!(rel < 1e-4, "relative error {rel}");
    assert!(abs < 1e-7, "absolute error {abs}");
}

#[test]
fn attention_style_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = random_store(
        &mut rng,
        &[("e", 4, 3), ("h", 1, 2), ("we", 3, 1), ("wh", 2, 1), ("b", 1, 1), ("target", 1, 3)],
    );
    let build = |t: &mut Tape| -> Result<Var> {
        let p = t.params();
        let id = |n: &str| p.id(n).unwrap();
        let (e, h, we, wh, b, target) = (
            t.param(id("e")),
            t.param(id("h")),
            t.param(id("we")),
            t.param(id("wh")),
            t.param(id("b")),
            t.param(id("target")),
        );
        let se = t.matmul(e, we)?;
        let sh = t.matmul(h, wh)?;
        let sh = t.add(sh, b)?;
        let score = t.add_row(se, sh)?;
        let score = t.tanh(score);
        let alpha = t.softmax(score)?;
        let at = t.transpose(alpha);
        let c = t.matmul(at, e)?;
        let diff = t.sub(c, target)?;
        let joined = t.concat_cols(diff, h)?;
        let norms = t.row_norms(joined);
        let nll = t.neg_log_at(alpha, 2)?;
        let s = t.sigmoid(norms);
        let s = t.scale(s, 0.7);
        let m = t.mean(s)?;
        t.add(m, nll)
    };
    let (rel, abs) = check(&store, &build);
    assert!(rel < 1e-4, "relative error {rel}");
    assert!(abs < 1e-7, "absolute error {abs}");
}

/// A random chain of primitives over a 2×3 parameter.
fn compose(t: &mut Tape, ops: &[u8]) -> Result<Var> {
    let p = t.params();
    let a = t.param(p.id("a").unwrap());
    let w = t.param(p.id("w").unwrap());
    let r = t.param(p.id("r").unwrap());
    let mut cur = a;
    for op in ops {
        cur = match op % 7 {
            0 => t.tanh(cur),
            1 => t.sigmoid(cur),
            2 => {
                let m = t.matmul(cur, w)?;
                t.tanh(m)
            }
            3 => t.add_row(cur, r)?,
            4 => t.mul(cur, a)?,
            5 => t.softmax(cur)?,
            _ => t.scale(cur, -1.3),
        };
    }
    let n = t.row_norms(cur);
    Ok(t.sum(n))
}

#[test]
fn batched_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    // 2 samples, 3 items each, width 4
    let store = random_store(&mut rng, &[("e", 6, 4), ("h", 2, 4), ("w", 4, 1), ("b", 1, 4)]);
    let build = |t: &mut Tape| -> Result<Var> {
        let p = t.params();
        let id = |n: &str| p.id(n).unwrap();
        let (e, h, w, b) = (t.param(id("e")), t.param(id("h")), t.param(id("w")), t.param(id("b")));
        let hr = t.repeat_rows(h, 3);
        let joined = t.add(e, hr)?;
        let joined = t.add_row(joined, b)?;
        let joined = t.tanh(joined);
        let s = t.matmul(joined, w)?;
        let s = t.reshape(s, 2, 3)?;
        let alpha = t.softmax_rows(s)?;
        let c = t.combine(alpha, e)?;
        let n = t.row_norms(c);
        let n = t.sum(n);
        let nll = t.neg_log_rows(alpha, &[2, 0])?;
        t.add(n, nll)
    };
    let (rel, abs) = check(&store, &build);
    assert!(rel < 1e-4, "relative error {rel}");
    assert!(abs < 1e-7, "absolute error {abs}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn random_compositions_match_finite_differences(ops in proptest::collection::vec(0u8..7, 1..6), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&mut rng, &[("a", 2, 3), ("w", 3, 3), ("r", 1, 3)]);
        let build = move |t: &mut Tape| compose(t, &ops);
        let (rel, abs) = check(&store, &build);
        prop_assert!(rel < 1e-4, "relative error {}", rel);
        prop_assert!(abs < 1e-7, "absolute error {}", abs);
    }

    #[test]
    fn softmax_lies_on_simplex(values in proptest::collection::vec(-700.0f64..700.0, 1..20)) {
        let s = gtp_core::tensor::softmax(&values);
        prop_assert!(s.iter().all(|v| *v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
