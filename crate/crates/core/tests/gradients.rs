use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xdrive::numerics::{grad_check, Tape, Tensor, Var};
use xdrive::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

/// Weighted sum with fixed distinct weights, so every output element matters.
fn probe(t: &mut Tape<'_>, v: Var) -> Result<Var> {
    let n = t.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let flat = t.reshape(v, &[n])?;
    let m = t.mul_const(flat, w)?;
    Ok(t.sum(m))
}

fn check1(x: Vec<f64>, f: impl Fn(&mut Tape<'_>, Var) -> Result<Var>) -> f64 {
    let n = x.len();
    grad_check(|t, v| { let y = f(t, v[0])?; probe(t, y) }, &[Tensor::vector(x)], EPS)
        .unwrap_or_else(|e| panic!("grad_check on {n} values: {e}"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unary_elementwise(x in values(6)) {
        let e = check1(x.clone(), |t, v| Ok(t.tanh(v)));
        prop_assert!(e < TOL, "{}", e);
        let e = check1(x.clone(), |t, v| Ok(t.sigmoid(v)));
        prop_assert!(e < TOL, "{}", e);
        let e = check1(x.clone(), |t, v| Ok(t.square(v)));
        prop_assert!(e < TOL, "{}", e);
        let e = check1(x, |t, v| Ok(t.scale(v, -1.7)));
        prop_assert!(e < TOL, "{}", e);
    }

    #[test]
    fn relu_away_from_the_kink(x in prop::collection::vec(prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], 6)) {
        let e = check1(x, |t, v| Ok(t.relu(v)));
        prop_assert!(e < TOL, "{}", e);
    }

    #[test]
    fn binary_elementwise(a in values(5), b in values(5)) {
        let ps = [Tensor::vector(a), Tensor::vector(b)];
        for op in 0..3 {
            let err = grad_check(|t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                probe(t, y)
            }, &ps, EPS).unwrap();
            prop_assert!(err < TOL, "op {op}: {err}");
        }
    }

    #[test]
    fn matmul_and_add_row(a in values(6), b in values(8), r in values(4)) {
        let ps = [
            Tensor::matrix(3, 2, a).unwrap(),
            Tensor::matrix(2, 4, b).unwrap(),
            Tensor::vector(r),
        ];
        let err = grad_check(|t, v| {
            let m = t.matmul(v[0], v[1])?;
            let y = t.add_row(m, v[2])?;
            let y = t.tanh(y);
            probe(t, y)
        }, &ps, EPS).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_entropy_and_cross_entropy(z in values(7), target in 0usize..7) {
        let e = check1(z.clone(), |t, v| t.softmax(v));
        prop_assert!(e < TOL, "{}", e);
        let e = check1(z.clone(), |t, v| { let p = t.softmax(v)?; Ok(t.entropy(p)) });
        prop_assert!(e < TOL, "{}", e);
        let e = check1(z, |t, v| t.cross_entropy(v, target));
        prop_assert!(e < TOL, "{}", e);
    }

    #[test]
    fn kl_against_fixed_target(z in values(5), w in prop::collection::vec(0.05f64..1.0, 5)) {
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / s).collect();
        let e = check1(z, |t, v| { let q = t.softmax(v)?; t.kl_div(&p, q) });
        prop_assert!(e < TOL, "{}", e);
    }

    #[test]
    fn shape_ops(x in values(12)) {
        let e = check1(x.clone(), |t, v| { let m = t.reshape(v, &[3, 4])?; t.transpose(m) });
        prop_assert!(e < TOL, "{}", e);
        let e = check1(x.clone(), |t, v| { let m = t.reshape(v, &[3, 4])?; t.mean_rows(m) });
        prop_assert!(e < TOL, "{}", e);
        let e = check1(x.clone(), |t, v| { let m = t.reshape(v, &[3, 4])?; t.row(m, 1) });
        prop_assert!(e < TOL, "{}", e);
        let e = check1(x.clone(), |t, v| t.slice(v, 2, 5));
        prop_assert!(e < TOL, "{}", e);
        let e = check1(x, |t, v| { let a = t.slice(v, 0, 4)?; let b = t.tanh(v); Ok(t.concat(&[a, b])) });
        prop_assert!(e < TOL, "{}", e);
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    // batch of two 3×5×5 inputs through a 4×3×3×3 kernel
    let inputs = [rand(&[3, 5, 5]), rand(&[3, 5, 5])];
    let ps = [inputs[0].clone(), inputs[1].clone(), rand(&[4, 3, 3, 3]), rand(&[4])];
    for (stride, pad) in [((1, 1), (1, 1)), ((2, 2), (1, 1)), ((1, 2), (0, 1))] {
        let err = grad_check(
            |t, v| {
                let a = t.conv2d(v[0], v[2], v[3], stride, pad)?;
                let b = t.conv2d(v[1], v[2], v[3], stride, pad)?;
                let a = t.tanh(a);
                let pa = probe(t, a)?;
                let pb = probe(t, b)?;
                t.add(pa, pb)
            },
            &ps,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "stride {stride:?} pad {pad:?}: {err}");
    }
}

#[test]
fn second_backward_is_refused() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.square(x);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(xdrive::Error::TapeConsumed)));
}
