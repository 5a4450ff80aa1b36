//! Central finite-difference verification of every differentiable op.
//!
//! The numeric side never touches the backward pass: it re-runs the forward
//! closure at perturbed inputs, so it stays an independent oracle for the
//! analytic gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub cases: usize,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error with a unit floor, the usual gradient-check metric.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs())).max(1e-4)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = vec![0.0; inputs[ti].len()];
        for i in 0..inputs[ti].len() {
            let orig = work[ti][i];
            work[ti][i] = orig + eps;
            let plus = f(&work);
            work[ti][i] = orig - eps;
            let minus = f(&work);
            work[ti][i] = orig;
            g[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Checks the analytic gradient of a taped scalar against finite differences.
///
/// `build` receives leaf data (one flat vector per input of the given shape)
/// and must return the scalar loss var; it is invoked fresh for every
/// perturbed evaluation.
pub fn check_taped_fn(
    name: &str,
    shapes: &[Vec<usize>],
    seeds: usize,
    eps: f64,
    sample: impl Fn(&mut ChaCha8Rng, usize) -> f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> CheckReport {
    let mut max_rel = 0.0f64;
    let mut cases = 0;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9 ^ seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(ti, s)| {
                (0..s.iter().product::<usize>())
                    .map(|_| sample(&mut rng, ti))
                    .collect()
            })
            .collect();

        let run = |data: &[Vec<f64>]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = data
                .iter()
                .zip(shapes)
                .map(|(d, s)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap(), true))
                .collect();
            let loss = build(&mut tape, &vars).expect("gradcheck forward build");
            (tape, vars, loss)
        };

        let (tape, vars, loss) = run(&inputs);
        let grads = tape.backward(loss).expect("gradcheck backward");
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| grads.grad(&tape, v).data().to_vec())
            .collect();

        let numeric = finite_diff_grad(
            |data| {
                let (tape, _, loss) = run(data);
                tape.value(loss).item()
            },
            &inputs,
            eps,
        );

        for (a, n) in analytic.iter().zip(&numeric) {
            for (&av, &nv) in a.iter().zip(n) {
                max_rel = max_rel.max(rel_err(av, nv));
                cases += 1;
            }
        }
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        cases,
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Gradient checks for each primitive op, randomized over `seeds` draws.
pub fn op_suite(eps: f64, seeds: usize) -> Vec<CheckReport> {
    let sym = |rng: &mut ChaCha8Rng, _: usize| uniform(rng, -1.0, 1.0);
    let mut reports = Vec::new();

    reports.push(check_taped_fn(
        "elementwise_mul",
        &[vec![3, 2, 2], vec![3, 2, 2], vec![3, 2, 2]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let m = tape.elementwise_mul(v[0], v[1])?;
            let w = tape.elementwise_mul(m, v[2])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "elementwise_mul_channel_broadcast",
        &[vec![3, 2, 2], vec![2, 2], vec![3, 2, 2]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let m = tape.elementwise_mul(v[0], v[1])?;
            let w = tape.elementwise_mul(m, v[2])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "conv2d_stride1_pad1",
        &[vec![2, 4, 4], vec![2, 2, 3, 3], vec![2, 4, 4]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], 1, 1)?;
            let w = tape.elementwise_mul(y, v[2])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "conv2d_stride2_pad0",
        &[vec![1, 5, 5], vec![2, 1, 3, 3], vec![2, 2, 2]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], 2, 0)?;
            let w = tape.elementwise_mul(y, v[2])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "add_channel_bias",
        &[vec![3, 2, 2], vec![3], vec![3, 2, 2]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let y = tape.add_channel_bias(v[0], v[1])?;
            let w = tape.elementwise_mul(y, v[2])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "relu",
        &[vec![8], vec![8]],
        seeds,
        eps,
        // keep samples away from the kink at 0
        |rng, _| {
            let v = uniform(rng, 0.05, 1.0);
            if rng.random_range(0..2) == 0 {
                v
            } else {
                -v
            }
        },
        |tape, v| {
            let y = tape.relu(v[0])?;
            let w = tape.elementwise_mul(y, v[1])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "global_avg_pool",
        &[vec![3, 3, 2], vec![3]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let y = tape.global_avg_pool(v[0])?;
            let w = tape.elementwise_mul(y, v[1])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "max_reduce_set",
        &[vec![4], vec![4], vec![4], vec![4]],
        seeds,
        eps,
        // distinct magnitudes avoid argmax flips under the probe step
        |rng, _| uniform(rng, -1.0, 1.0),
        |tape, v| {
            let m = tape.max_reduce_set(&v[..3])?;
            let w = tape.elementwise_mul(m, v[3])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "matvec",
        &[vec![3, 4], vec![4], vec![3]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let y = tape.matvec(v[0], v[1])?;
            let w = tape.elementwise_mul(y, v[2])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "softmax",
        &[vec![5], vec![5]],
        seeds,
        eps,
        |rng, _| uniform(rng, -2.0, 2.0),
        |tape, v| {
            let y = tape.softmax(v[0])?;
            let w = tape.elementwise_mul(y, v[1])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "softmax_cross_entropy",
        &[vec![6]],
        seeds,
        eps,
        |rng, _| uniform(rng, -2.0, 2.0),
        |tape, v| {
            let y = tape.softmax(v[0])?;
            tape.cross_entropy(y, 2)
        },
    ));

    reports.push(check_taped_fn(
        "block_slice",
        &[vec![2, 4, 4], vec![2, 2, 2]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let b = tape.block(v[0], 1, 2, 2, 2)?;
            let w = tape.elementwise_mul(b, v[1])?;
            tape.sum_all(w)
        },
    ));

    reports.push(check_taped_fn(
        "reshape",
        &[vec![2, 6], vec![12]],
        seeds,
        eps,
        sym,
        |tape, v| {
            let r = tape.reshape(v[0], vec![12])?;
            let w = tape.elementwise_mul(r, v[1])?;
            tape.sum_all(w)
        },
    ));

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_at_default_tolerance() {
        for report in op_suite(DEFAULT_EPS, 5) {
            assert!(
                report.passed(DEFAULT_TOLERANCE),
                "{} failed: max rel err {:.3e} over {} cases",
                report.name,
                report.max_rel_err,
                report.cases
            );
        }
    }

    #[test]
    fn gap_gradient_is_uniform_one_over_hw() {
        let report = check_taped_fn(
            "gap_direct",
            &[vec![1, 2, 3]],
            3,
            DEFAULT_EPS,
            |rng, _| rng.random_range(-1.0..1.0),
            |tape, v| {
                let y = tape.global_avg_pool(v[0])?;
                tape.sum_all(y)
            },
        );
        assert!(report.passed(DEFAULT_TOLERANCE));
        // and the analytic value itself is exactly 1/(h*w)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 3], 0.5), true);
        let y = tape.global_avg_pool(x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        for &g in grads.grad(&tape, x).data() {
            assert!((g - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn detects_an_injected_wrong_gradient() {
        // negative control: a deliberately broken "analytic" gradient must
        // be flagged by the same rel-err metric the suite uses
        let inputs = vec![vec![0.3, -0.7, 1.1]];
        let f = |d: &[Vec<f64>]| d[0].iter().map(|x| x * x).sum::<f64>();
        let numeric = finite_diff_grad(f, &inputs, DEFAULT_EPS);
        let broken: Vec<f64> = inputs[0].iter().map(|x| 2.0 * x + 0.5).collect();
        let worst = broken
            .iter()
            .zip(&numeric[0])
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0f64, f64::max);
        assert!(worst > DEFAULT_TOLERANCE);
    }
}
