//! Finite-difference verification of the reverse pass.

use std::sync::Arc;

use rand::Rng as _;

use super::{Graph, Resampler, Tensor, Var};
use crate::error::Result;
use crate::rng::{mix, rng_from, Rng};

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(&t.shape, t.values.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss)[0])
}

fn analytic<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(&t.shape, t.values.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Compares every gradient entry with a central difference of step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, inputs)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe[i].values[j];
            probe[i].values[j] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[i].values[j] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[i].values[j] = orig;
            let err = rel_error(g[j], (up - down) / (2.0 * eps));
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Directional check: `<grad, v>` against the central difference along a
/// random unit direction `v`. Returns the relative error.
pub fn jvp_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic(&f, inputs)?;
    let mut rng = rng_from(seed);
    let mut dirs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    dirs.iter_mut().flatten().for_each(|v| *v /= norm);
    let directional: f64 = grads
        .iter()
        .flatten()
        .zip(dirs.iter().flatten())
        .map(|(g, d)| g * d)
        .sum();
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let mut t = t.clone();
                t.values.iter_mut().zip(d).for_each(|(v, d)| *v += sign * eps * d);
                t
            })
            .collect()
    };
    let up = evaluate(&f, &shifted(1.0))?;
    let down = evaluate(&f, &shifted(-1.0))?;
    Ok(rel_error(directional, (up - down) / (2.0 * eps)))
}

pub type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// One randomised gradient check: a scalar function of `inputs`.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub f: CaseFn,
}

impl std::fmt::Debug for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shapes: Vec<&[usize]> = self.inputs.iter().map(|t| t.shape.as_slice()).collect();
        write!(f, "Case({}, {shapes:?})", self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub rel_error: f64,
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// `sum(y * w)` for a fixed random `w`, so every output element carries a
/// distinct cotangent.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = rng_from(mix(&[seed, 0x9807]));
    let w = uniform(&mut rng, &shape, -1.0, 1.0);
    let w = g.constant(&shape, w.values);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// One case per registered op, with shapes and values drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = rng_from(mix(&[seed, 0x0FCA5E]));
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (n, k, m) = (dim(2, 5), dim(2, 5), dim(2, 5));
    let (h, w, oh, ow) = (dim(2, 4), dim(2, 4), dim(2, 6), dim(2, 6));
    let targets: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % m).collect();
    let gather: Vec<usize> = (0..n + 2).map(|i| (i * 3 + seed as usize) % k).collect();
    let s = seed;
    let mut rng = rng_from(mix(&[seed, 0x1A]));
    let mut u = |shape: &[usize]| uniform(&mut rng, shape, -1.0, 1.0);
    let positive = uniform(&mut rng_from(mix(&[seed, 0x1B])), &[n, k], 0.5, 1.5);
    let map = Arc::new(Resampler::bilinear_grid(h, w, oh, ow));

    macro_rules! case {
        ($name:expr, [$($inp:expr),*], |$g:ident, $v:ident| $body:expr) => {
            Case {
                name: $name.to_string(),
                inputs: vec![$($inp),*],
                f: Box::new(move |$g: &mut Graph<f64>, $v: &[Var]| {
                    let y = $body;
                    project($g, y, s)
                }),
            }
        };
    }

    vec![
        case!("matmul", [u(&[n, k]), u(&[k, m])], |g, v| g.matmul(v[0], v[1])?),
        case!("matmul_t", [u(&[n, k]), u(&[m, k])], |g, v| g.matmul_t(v[0], v[1])?),
        case!("add", [u(&[n, k]), u(&[n, k])], |g, v| g.add(v[0], v[1])?),
        case!("sub", [u(&[n, k]), u(&[n, k])], |g, v| g.sub(v[0], v[1])?),
        case!("mul", [u(&[n, k]), u(&[n, k])], |g, v| g.mul(v[0], v[1])?),
        case!("div", [u(&[n, k]), positive.clone()], |g, v| g.div(v[0], v[1])?),
        case!("add_bias", [u(&[n, k]), u(&[k])], |g, v| g.add_bias(v[0], v[1])?),
        case!("scale", [u(&[n, k])], |g, v| g.scale(v[0], 0.37)),
        case!("add_scalar", [u(&[n, k])], |g, v| g.add_scalar(v[0], -1.3)),
        case!("reshape", [u(&[n, k])], |g, v| g.reshape(v[0], &[k, n])?),
        case!("transpose", [u(&[n, k])], |g, v| g.transpose(v[0])?),
        case!("concat0", [u(&[n, k]), u(&[m, k])], |g, v| g.concat(&[v[0], v[1]], 0)?),
        case!("concat1", [u(&[n, k]), u(&[n, m])], |g, v| g.concat(&[v[0], v[1]], 1)?),
        case!("slice", [u(&[n, k + 2])], |g, v| g.slice(v[0], 1, 1, k)?),
        case!("split", [u(&[n + 1, k])], |g, v| {
            let parts = g.split(v[0], 0, &[1, n])?;
            let a = g.scale(parts[0], 2.0);
            let a = g.sum(a);
            let b = g.sum(parts[1]);
            g.sub(a, b)?
        }),
        case!("softmax", [u(&[n, k])], |g, v| g.softmax(v[0])?),
        case!("log_softmax", [u(&[n, k])], |g, v| g.log_softmax(v[0])?),
        case!("layer_norm", [u(&[n, k]), u(&[k]), u(&[k])], |g, v| g.layer_norm(v[0], v[1], v[2])?),
        case!("gelu", [u(&[n, k])], |g, v| g.gelu(v[0])),
        case!("sum", [u(&[n, k])], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        }),
        case!("mean", [u(&[n, k])], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        }),
        case!("mean_rows", [u(&[n, k])], |g, v| g.mean_rows(v[0])?),
        case!("l2_normalize", [u(&[n, k])], |g, v| g.l2_normalize(v[0])?),
        case!("gather_rows", [u(&[k, m])], |g, v| g.gather_rows(v[0], &gather)?),
        case!("cross_entropy", [u(&[n, m])], |g, v| g.cross_entropy_with_logits(v[0], &targets)?),
        case!("resample", [u(&[h * w, k])], |g, v| g.resample(v[0], map.clone())?),
    ]
}

/// Runs a directional check for every case with step `eps`.
pub fn run_cases(cases: &[Case], eps: f64, seed: u64) -> Result<Vec<CaseResult>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(CaseResult {
                name: c.name.clone(),
                rel_error: jvp_check(&c.f, &c.inputs, eps, mix(&[seed, i as u64]))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(rel_error(1e-9, 0.0), 1e-3);
    }

    #[test]
    fn two_layer_mlp() {
        let inputs = [
            rand_tensor(&[4, 5], 1),
            rand_tensor(&[5, 6], 2),
            rand_tensor(&[6], 3),
            rand_tensor(&[6, 3], 4),
        ];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_bias(h, v[2])?;
            let h = g.gelu(h);
            let o = g.matmul(h, v[3])?;
            g.cross_entropy_with_logits(o, &[0, 2, 1, 1])
        };
        let r = grad_check(f, &inputs, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.checked, 20 + 30 + 6 + 18);
        assert!(jvp_check(f, &inputs, 1e-5, 9).unwrap() < 1e-5);
    }

    #[test]
    fn every_op_passes() {
        let inputs = [
            rand_tensor(&[3, 4], 10),
            rand_tensor(&[4], 11),
            rand_tensor(&[4], 12),
            rand_tensor(&[2, 4], 13),
            rand_tensor(&[4, 3], 14),
        ];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let ln = g.layer_norm(v[0], v[1], v[2])?;
            let t = g.transpose(v[3])?;
            let t = g.transpose(t)?;
            let c = g.concat(&[ln, t], 0)?;
            let parts = g.split(c, 0, &[2, 3])?;
            let s = g.softmax(parts[1])?;
            let ls = g.log_softmax(parts[0])?;
            let m = g.mean_rows(ls)?;
            let n = g.l2_normalize(s)?;
            let proj = g.matmul_t(n, ls)?;
            let proj = g.reshape(proj, &[6])?;
            let gathered = g.gather_rows(v[4], &[0, 2, 2, 1])?;
            let gm = g.mean(gathered);
            let pm = g.sum(proj);
            let mm = g.mul(m, m)?;
            let one = g.add_scalar(mm, 1.5);
            let mm = g.div(mm, one)?;
            let ms = g.sum(mm);
            let a = g.add(gm, pm)?;
            let a = g.sub(a, ms)?;
            let a = g.scale(a, 0.7);
            Ok(g.add_scalar(a, 2.0))
        };
        let r = grad_check(f, &inputs, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn resample_and_slice_cols() {
        use std::sync::Arc;
        let map = Arc::new(super::super::Resampler::bilinear_grid(2, 3, 5, 4));
        let inputs = [rand_tensor(&[6, 4], 20), rand_tensor(&[20, 2], 21)];
        let f = move |g: &mut Graph<f64>, v: &[Var]| {
            let r = g.resample(v[0], map.clone())?;
            let cols = g.slice(r, 1, 1, 2)?;
            let w = g.mul(cols, v[1])?;
            let w = g.gelu(w);
            Ok(g.sum(w))
        };
        let r = grad_check(f, &inputs, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn op_suite_over_seeds() {
        for seed in 0..4 {
            let cases = op_cases(seed);
            for r in run_cases(&cases, 1e-6, seed).unwrap() {
                assert!(r.rel_error < 1e-6, "seed {seed}: {r:?}");
            }
            for c in &cases {
                let r = grad_check(&c.f, &c.inputs, 1e-6).unwrap();
                assert!(r.max_rel_error < 1e-5, "seed {seed} {}: {r:?}", c.name);
            }
        }
    }
}
