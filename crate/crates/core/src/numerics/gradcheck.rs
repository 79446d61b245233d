//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step. A power of two close to 1e-3, so that `x ± h` is
/// exact for moderate `x` and the difference quotient loses no bits to the
/// perturbation itself.
pub const FD_STEP: f32 = 1.0 / 1024.0;

/// Gradient magnitudes below this are compared in absolute terms. f32 outputs
/// of order one carry rounding of about 1e-7, which a step of 1e-3 turns into
/// about 1e-4 of absolute noise on the difference quotient.
pub const REL_FLOOR: f32 = 1.0;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f32,
    pub coordinates: usize,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f32, f32)>,
}

pub fn relative_error(analytic: f32, numeric: f32) -> f32 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar `f` with central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `inputs`. Up to
/// `max_coords` coordinates per input are sampled (all of them when the input
/// is smaller).
pub fn grad_check<F>(f: F, inputs: &[Tensor], max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Invalid("grad_check needs a scalar function".into()));
        }
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok((tape, out, vars))
    };

    let (tape, out, vars) = eval(inputs, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            sample(&mut rng, input.len(), max_coords).into_vec()
        };
        for c in coords {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + FD_STEP;
            let (t, o, _) = eval(&work, false)?;
            let plus = t.scalar(o);
            work[i].data_mut()[c] = x0 - FD_STEP;
            let (t, o, _) = eval(&work, false)?;
            let minus = t.scalar(o);
            work[i].data_mut()[c] = x0;

            let numeric = ((plus - minus) / (2.0 * FD_STEP as f64)) as f32;
            let a = analytic[i].data()[c];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Plain central difference of a scalar function of one `f32`.
pub fn central_difference(f: impl Fn(f32) -> f32, x: f32) -> f32 {
    ((f(x + FD_STEP) as f64 - f(x - FD_STEP) as f64) / (2.0 * FD_STEP as f64)) as f32
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

/// Weighted sum with fixed random weights, so every output coordinate
/// reaches the scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(uniform(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// One finite-difference check per differentiable primitive of [`Tape`],
/// on inputs drawn from `[-2, 2]`. Returns `(primitive, report)` pairs.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Objective)> = Vec::new();
    let mut unary = |name: &'static str, shape: &[usize], k: u64, op: fn(&mut Tape, Var) -> Result<Var>| {
        cases.push((
            name,
            vec![uniform(shape, s(k))],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = op(t, v[0])?;
                project(t, y, k)
            }),
        ));
    };
    unary("scale", &[3, 4], 1, |t, a| t.scale(a, -1.7));
    unary("reshape", &[3, 4], 2, |t, a| t.reshape(a, &[2, 6]));
    unary("split_heads", &[6, 4], 3, |t, a| t.split_heads(a, 2, 3, 2));
    unary("merge_heads", &[4, 3, 2], 4, |t, a| t.merge_heads(a, 2, 3, 2));
    unary("softmax_rows", &[3, 5], 5, |t, a| t.softmax_rows(a));
    unary("gelu", &[4, 5], 6, |t, a| t.gelu(a));
    unary("index_rows", &[4, 3], 7, |t, a| t.index_rows(a, vec![3, 0, 0, 2]));
    unary("mean_groups", &[6, 3], 8, |t, a| t.mean_groups(a, 3));
    unary("sum", &[3, 4], 9, |t, a| t.sum(a));
    unary("mean", &[3, 4], 10, |t, a| t.mean(a));

    let mut binary = |name: &'static str, sa: &[usize], sb: &[usize], k: u64, op: fn(&mut Tape, Var, Var) -> Result<Var>| {
        cases.push((
            name,
            vec![uniform(sa, s(k)), uniform(sb, s(k + 50))],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = op(t, v[0], v[1])?;
                project(t, y, k)
            }),
        ));
    };
    binary("matmul", &[3, 4], &[4, 5], 11, |t, a, b| t.matmul(a, b));
    binary("bmm", &[2, 3, 4], &[2, 4, 3], 12, |t, a, b| t.bmm(a, b, false));
    binary("bmm_trans_b", &[2, 3, 4], &[2, 5, 4], 13, |t, a, b| t.bmm(a, b, true));
    binary("add", &[3, 4], &[3, 4], 14, |t, a, b| t.add(a, b));
    binary("sub", &[3, 4], &[3, 4], 15, |t, a, b| t.sub(a, b));
    binary("mul", &[3, 4], &[3, 4], 16, |t, a, b| t.mul(a, b));
    binary("add_rows", &[6, 4], &[2, 4], 17, |t, a, b| t.add_rows(a, b));
    binary("concat_rows", &[2, 3], &[1, 3], 18, |t, a, b| t.concat_rows(a, b));

    cases.push((
        "layer_norm",
        vec![uniform(&[4, 6], s(19)), uniform(&[6], s(20)), uniform(&[6], s(21))],
        Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            project(t, y, 19)
        }),
    ));
    let target = uniform(&[6, 3], s(22));
    cases.push((
        "masked_mse",
        vec![uniform(&[6, 3], s(23))],
        Box::new(move |t: &mut Tape, v: &[Var]| t.masked_mse(v[0], &target, vec![0, 2, 5])),
    ));
    cases.push((
        "cross_entropy",
        vec![uniform(&[3, 4], s(24))],
        Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[1, 0, 3])),
    ));

    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, grad_check(f, &inputs, 64, seed)?)))
        .collect()
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let reports = primitive_suite(0).unwrap();
        assert_eq!(reports.len(), 21);
        for (name, r) in reports {
            assert!(r.max_rel_error <= 1e-3, "{name}: {r:?}");
        }
    }
}
