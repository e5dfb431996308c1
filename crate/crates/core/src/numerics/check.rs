//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the computation from scratch for every probe, so it
//! exercises exactly the same code path training uses. Errors are relative
//! with denominator `max(1, |analytic|, |numeric|)`, which keeps tiny
//! gradients from inflating the report.

use super::{DiffTensor, Tape};

/// Maximum relative disagreement between tape gradients and central
/// differences of `build` over the given parameters.
///
/// `build` must construct a scalar from the parameter tensors it is handed,
/// in order. Parameters the function never touches contribute zero error
/// (both sides are exactly zero).
pub fn finite_diff_check<F>(build: &F, params: &[(Vec<usize>, Vec<f64>)], eps: f64) -> f64
where
    F: Fn(&Tape, &[DiffTensor]) -> DiffTensor,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    for (shape, values) in params {
        assert_eq!(shape.iter().product::<usize>(), values.len());
    }

    let tape = Tape::new();
    let tensors: Vec<DiffTensor> = params
        .iter()
        .map(|(s, v)| tape.param(s, v.clone()))
        .collect();
    let loss = build(&tape, &tensors);
    tape.backward(&loss).expect("build must produce a scalar");
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .zip(params)
        .map(|(t, (_, v))| t.grad().unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let tensors: Vec<DiffTensor> = params
            .iter()
            .zip(vals)
            .map(|((s, _), v)| tape.param(s, v.clone()))
            .collect();
        build(&tape, &tensors).item()
    };

    let mut work: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].1.len() {
            let base = params[p].1[i];
            work[p][i] = base + eps;
            let plus = eval(&work);
            work[p][i] = base - eps;
            let minus = eval(&work);
            work[p][i] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p][i];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{concat_cols, layer_norm};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_tight() {
        let build = |_: &Tape, ts: &[DiffTensor]| ts[0].mul(&ts[0]).sum_all();
        let params = vec![(vec![3], vec![1.0, 2.0, -0.5])];
        let err = finite_diff_check(&build, &params, 1e-5);
        assert!(err <= 1e-8, "quadratic check err {err}");
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    /// Every differentiable primitive, checked over 100 seeded random
    /// instances each. Threshold 1e-4 at eps 1e-5.
    #[test]
    fn primitives_match_finite_differences() {
        type Build = Box<dyn Fn(&Tape, &[DiffTensor]) -> DiffTensor>;
        type Mk = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<(Vec<usize>, Vec<f64>)>, Build)>;

        let cases: Vec<(&str, Mk)> = vec![
            (
                "elementwise",
                Box::new(|rng| {
                    let a = uniform(rng, 6, -1.0, 1.0);
                    let b = uniform(rng, 6, -1.0, 1.0);
                    let params = vec![(vec![2, 3], a), (vec![2, 3], b)];
                    let build: Build = Box::new(|_, ts| {
                        ts[0]
                            .mul(&ts[1])
                            .add(&ts[0].scale(0.3))
                            .sub(&ts[1])
                            .add_scalar(0.1)
                            .mean_all()
                    });
                    (params, build)
                }),
            ),
            (
                "activations",
                Box::new(|rng| {
                    let a = uniform(rng, 8, -1.5, 1.5);
                    let params = vec![(vec![8], a)];
                    let build: Build = Box::new(|_, ts| {
                        let sig = ts[0].sigmoid();
                        let rel = ts[0].add_scalar(0.37).relu();
                        let sq = ts[0].mul(&ts[0]).add_scalar(1.0).sqrt();
                        sig.add(&rel).add(&sq).mean_all()
                    });
                    (params, build)
                }),
            ),
            (
                "smooth_step",
                Box::new(|rng| {
                    let a = uniform(rng, 8, -1.0, 1.0);
                    let params = vec![(vec![8], a)];
                    let build: Build = Box::new(|_, ts| ts[0].smooth_step(0.8).mean_all());
                    (params, build)
                }),
            ),
            (
                "broadcasts",
                Box::new(|rng| {
                    let x = uniform(rng, 6, -1.0, 1.0);
                    let row = uniform(rng, 3, -1.0, 1.0);
                    let col = uniform(rng, 2, 0.5, 1.5);
                    let params = vec![(vec![2, 3], x), (vec![3], row), (vec![2], col)];
                    let build: Build = Box::new(|_, ts| {
                        ts[0]
                            .add_row_vec(&ts[1])
                            .mul_row_vec(&ts[1])
                            .sub_col_vec(&ts[2])
                            .mul_col_vec(&ts[2])
                            .div_col_vec(&ts[2])
                            .mean_all()
                    });
                    (params, build)
                }),
            ),
            (
                "matmul_chain",
                Box::new(|rng| {
                    let a = uniform(rng, 6, -1.0, 1.0);
                    let b = uniform(rng, 12, -1.0, 1.0);
                    let c = uniform(rng, 8, -1.0, 1.0);
                    let params = vec![(vec![2, 3], a), (vec![3, 4], b), (vec![4, 2], c)];
                    let build: Build =
                        Box::new(|_, ts| ts[0].matmul(&ts[1]).matmul(&ts[2]).mean_all());
                    (params, build)
                }),
            ),
            (
                "bmm",
                Box::new(|rng| {
                    let x = uniform(rng, 12, -1.0, 1.0);
                    let y = uniform(rng, 12, -1.0, 1.0);
                    let z = uniform(rng, 8, -1.0, 1.0);
                    let params = vec![(vec![4, 3], x), (vec![4, 3], y), (vec![4, 2], z)];
                    let build: Build = Box::new(|_, ts| {
                        ts[0].bmm_nt(&ts[1], 2).bmm_nn(&ts[2], 2).mean_all()
                    });
                    (params, build)
                }),
            ),
            (
                "softmax",
                Box::new(|rng| {
                    let x = uniform(rng, 8, -2.0, 2.0);
                    let w = uniform(rng, 8, -1.0, 1.0);
                    let params = vec![(vec![2, 4], x)];
                    let build: Build = Box::new(move |tape, ts| {
                        let weight = tape.input(&[2, 4], w.clone());
                        ts[0].softmax_rows().unwrap().mul(&weight).mean_all()
                    });
                    (params, build)
                }),
            ),
            (
                "layer_norm",
                Box::new(|rng| {
                    let x = uniform(rng, 8, -2.0, 2.0);
                    let g = uniform(rng, 4, 0.5, 1.5);
                    let b = uniform(rng, 4, -0.5, 0.5);
                    let w = uniform(rng, 8, -1.0, 1.0);
                    let params = vec![(vec![2, 4], x), (vec![4], g), (vec![4], b)];
                    let build: Build = Box::new(move |tape, ts| {
                        let weight = tape.input(&[2, 4], w.clone());
                        layer_norm(&ts[0], &ts[1], &ts[2])
                            .unwrap()
                            .mul(&weight)
                            .mean_all()
                    });
                    (params, build)
                }),
            ),
            (
                "shuffles",
                Box::new(|rng| {
                    let table = uniform(rng, 12, -1.0, 1.0);
                    let t = uniform(rng, 3, -1.0, 1.0);
                    let w = uniform(rng, 24, -1.0, 1.0);
                    let params = vec![(vec![4, 3], table), (vec![1, 3], t)];
                    let build: Build = Box::new(move |tape, ts| {
                        let picked = ts[0].gather_rows(&[2, 0, 3, 1, 2, 0]);
                        let tiled = ts[1].tile_rows(6);
                        let cat = concat_cols(&[&picked, &tiled]);
                        let sliced = cat.slice_cols(1, 4).reshape(&[4, 6]);
                        let weight = tape.input(&[4, 6], w.clone());
                        sliced.mul(&weight).mean_all()
                    });
                    (params, build)
                }),
            ),
            (
                "losses",
                Box::new(|rng| {
                    let a = uniform(rng, 6, -1.5, 1.5);
                    let labels = (0..6).map(|_| f64::from(rng.gen_range(0..2u8))).collect::<Vec<_>>();
                    let target = uniform(rng, 6, 0.0, 1.0);
                    let params = vec![(vec![6], a)];
                    let build: Build = Box::new(move |_, ts| {
                        let p = ts[0].sigmoid();
                        let (bce, _) = p.bce_mean(&labels);
                        bce.add(&p.sq_err_mean(&target))
                    });
                    (params, build)
                }),
            ),
            (
                "reductions",
                Box::new(|rng| {
                    let x = uniform(rng, 8, -1.0, 1.0);
                    let params = vec![(vec![2, 4], x)];
                    let build: Build = Box::new(|_, ts| {
                        ts[0].row_mean().sum_all().add(&ts[0].mean_all())
                    });
                    (params, build)
                }),
            ),
        ];

        for (name, mk) in &cases {
            let mut worst = 0.0f64;
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
                let (params, build) = mk(&mut rng);
                let err = finite_diff_check(&build, &params, 1e-5);
                worst = worst.max(err);
            }
            assert!(worst <= 1e-4, "{name}: worst finite-diff error {worst}");
        }
    }
}
