//! Central-difference checks of every tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::nn::layers::{gaussian, multi_head_attention, register_attention};
use crate::nn::{NodeId, ParamStore, Tape, Tensor2};
use crate::srm::project_constraints;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn check<F>(store: &ParamStore, tol: f64, build: F) -> GradCheckReport
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<NodeId>,
{
    let report = grad_check(
        store,
        |s| {
            let mut tape = Tape::new();
            let root = build(&mut tape, s)?;
            let g = tape.backward(root, 1.0)?;
            Ok((tape.value(root).item(), tape.param_grads(&g, s)))
        },
        DEFAULT_EPS,
        tol,
    )
    .unwrap();
    assert!(report.checked > 0);
    report
}

/// Reduces a matrix node to `l^T X r` with fixed pseudo-random `l`, `r`,
/// so every entry gets a distinct weight.
fn project<'p>(tape: &mut Tape<'p>, x: NodeId, seed: u64) -> Result<NodeId> {
    let (rows, cols) = tape.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let l = tape.input(gaussian(&mut rng, 1, rows, 1.0));
    let r = tape.input(gaussian(&mut rng, cols, 1, 1.0));
    let xr = tape.matmul(x, r)?;
    tape.matmul(l, xr)
}

fn store_with(seed: u64, shapes: &[(&str, usize, usize)]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for &(name, r, c) in shapes {
        s.insert(name, gaussian(&mut rng, r, c, 1.0)).unwrap();
    }
    s
}

fn assert_passed(name: &str, seed: u64, r: &GradCheckReport) {
    assert!(
        r.passed(),
        "{name} seed {seed}: max rel error {} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn linear_map_sum() {
    let s = store_with(1, &[("x", 4, 3), ("w", 3, 5), ("b", 1, 5)]);
    let r = check(&s, 1e-8, |t, s| {
        let x = t.param_named(s, "x")?;
        let w = t.param_named(s, "w")?;
        let b = t.param_named(s, "b")?;
        let y = t.matmul(x, w)?;
        let y = t.add_bias(y, b)?;
        Ok(t.sum_all(y))
    });
    assert_passed("linear", 1, &r);
}

#[test]
fn softmax_first_column() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("x", 3, 4)]);
        let r = check(&s, 1e-6, |t, s| {
            let x = t.param_named(s, "x")?;
            let p = t.softmax_rows(x);
            let sel = t.input(Tensor2::from_vec(4, 1, vec![1.0, 0.0, 0.0, 0.0])?);
            let col = t.matmul(p, sel)?;
            Ok(t.sum_all(col))
        });
        assert_passed("softmax", seed, &r);
    }
}

#[test]
fn elementwise_ops() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("a", 3, 4), ("b", 3, 4), ("c", 1, 4)]);
        let r = check(&s, TOL, |t, s| {
            let a = t.param_named(s, "a")?;
            let b = t.param_named(s, "b")?;
            let c = t.param_named(s, "c")?;
            let x = t.add(a, b)?;
            let x = t.add_bias(x, c)?;
            let x = t.affine(x, 0.7, -0.2);
            let x = t.gelu(x);
            project(t, x, seed)
        });
        assert_passed("elementwise", seed, &r);
    }
}

#[test]
fn matmul_both_sides() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("a", 3, 5), ("b", 5, 2)]);
        let r = check(&s, TOL, |t, s| {
            let a = t.param_named(s, "a")?;
            let b = t.param_named(s, "b")?;
            let y = t.matmul(a, b)?;
            project(t, y, seed)
        });
        assert_passed("matmul", seed, &r);
    }
}

#[test]
fn softmax_rows_projected() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("x", 4, 5)]);
        let r = check(&s, TOL, |t, s| {
            let x = t.param_named(s, "x")?;
            let p = t.softmax_rows(x);
            project(t, p, seed)
        });
        assert_passed("softmax", seed, &r);
    }
}

#[test]
fn standardize_rows_projected() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("x", 3, 9)]);
        let r = check(&s, TOL, |t, s| {
            let x = t.param_named(s, "x")?;
            let y = t.standardize_rows(x, 1e-7);
            let y = t.gelu(y);
            project(t, y, seed)
        });
        assert_passed("standardize", seed, &r);
    }
}

#[test]
fn standardize_rows_moments() {
    let mut t = Tape::new();
    let x = t.input(Tensor2::from_rows(&[vec![1.0, 2.0, 3.0, 6.0], vec![5.0; 4]]).unwrap());
    let y = t.standardize_rows(x, 1e-7);
    let r0 = t.value(y).row(0);
    let mean = r0.iter().sum::<f64>() / 4.0;
    let var = r0.iter().map(|v| v * v).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-6);
    assert!(t.value(y).row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn frames_with_padding() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("x", 1, 23)]);
        let r = check(&s, TOL, |t, s| {
            let x = t.param_named(s, "x")?;
            let f = t.frames(x, 7, 5)?;
            assert_eq!(t.value(f).shape(), (5, 7));
            project(t, f, seed)
        });
        assert_passed("frames", seed, &r);
    }
}

#[test]
fn srm_residual_all_inputs() {
    for seed in 0..SEEDS {
        let mut s = store_with(seed, &[("x", 1, 17), ("k", 3, 5), ("m", 1, 3), ("b", 1, 1)]);
        let k = s.id("k").unwrap();
        project_constraints(s.get_mut(k)).unwrap();
        let r = check(&s, TOL, |t, s| {
            let x = t.param_named(s, "x")?;
            let k = t.param_named(s, "k")?;
            let m = t.param_named(s, "m")?;
            let b = t.param_named(s, "b")?;
            let y = t.srm_residual(x, k, m, b)?;
            project(t, y, seed)
        });
        assert_passed("srm residual", seed, &r);
    }
}

#[test]
fn raw_attention() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("q", 3, 8), ("k", 5, 8), ("v", 5, 8)]);
        let r = check(&s, TOL, |t, s| {
            let q = t.param_named(s, "q")?;
            let k = t.param_named(s, "k")?;
            let v = t.param_named(s, "v")?;
            let a = t.attention(q, k, v, 2)?;
            project(t, a, seed)
        });
        assert_passed("attention", seed, &r);
    }
}

#[test]
fn projected_attention_random_inputs() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("query", gaussian(&mut rng, 3, 8, 1.0)).unwrap();
        s.insert("context", gaussian(&mut rng, 3, 8, 1.0)).unwrap();
        register_attention(&mut s, &mut rng, "mha", 8, 1.0).unwrap();
        let r = check(&s, TOL, |t, s| {
            let q = t.param_named(s, "query")?;
            let c = t.param_named(s, "context")?;
            let a = multi_head_attention(t, s, "mha", q, c, 2)?;
            project(t, a, seed)
        });
        assert_passed("mha", seed, &r);
    }
}

#[test]
fn attention_single_key_returns_value() {
    let mut t = Tape::new();
    let q = t.input(Tensor2::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap());
    let k = t.input(Tensor2::from_rows(&[vec![0.3, 0.1]]).unwrap());
    let v = t.input(Tensor2::from_rows(&[vec![4.0, -1.0]]).unwrap());
    let a = t.attention(q, k, v, 1).unwrap();
    assert_eq!(t.value(a).as_slice(), &[4.0, -1.0, 4.0, -1.0]);
}

#[test]
fn attention_equal_keys_average_values() {
    let mut t = Tape::new();
    let q = t.input(Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let k = t.input(Tensor2::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
    let v = t.input(Tensor2::from_rows(&[vec![1.0, 3.0], vec![3.0, -1.0]]).unwrap());
    let a = t.attention(q, k, v, 1).unwrap();
    for (x, y) in t.value(a).as_slice().iter().zip([2.0, 1.0]) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn positional_pooling_and_concat() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("a", 4, 3), ("pos", 6, 3), ("b", 4, 2)]);
        let r = check(&s, TOL, |t, s| {
            let a = t.param_named(s, "a")?;
            let pos = t.param_named(s, "pos")?;
            let b = t.param_named(s, "b")?;
            let x = t.add_positional(a, pos)?;
            let x = t.concat_cols(x, b)?;
            let m = t.mean_rows(x)?;
            project(t, m, seed)
        });
        assert_passed("pos/concat/mean", seed, &r);
    }
}

#[test]
fn framewise_js_both_arguments() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("p", 4, 6), ("q", 4, 6)]);
        let r = check(&s, TOL, |t, s| {
            let p = t.param_named(s, "p")?;
            let q = t.param_named(s, "q")?;
            let p = t.softmax_rows(p);
            let q = t.softmax_rows(q);
            t.framewise_js(p, q)
        });
        assert_passed("js", seed, &r);
    }
}

#[test]
fn weighted_ce_both_labels() {
    for seed in 0..SEEDS {
        let s = store_with(seed, &[("z", 1, 2)]);
        let label = (seed % 2) as usize;
        let w = ChaCha8Rng::seed_from_u64(seed).gen_range(0.1..0.9);
        let r = check(&s, TOL, |t, s| {
            let z = t.param_named(s, "z")?;
            t.weighted_ce(z, label, w)
        });
        assert_passed("wce", seed, &r);
    }
}

#[test]
fn inputs_without_grad_receive_none() {
    let s = store_with(0, &[("w", 2, 2)]);
    let mut t = Tape::new();
    let x = t.input(Tensor2::filled(1, 2, 1.0));
    let w = t.param_named(&s, "w").unwrap();
    let y = t.matmul(x, w).unwrap();
    let root = t.sum_all(y);
    let g = t.backward(root, 1.0).unwrap();
    assert!(g.node(x).is_none());
    assert_eq!(g.node(w).unwrap().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
}
