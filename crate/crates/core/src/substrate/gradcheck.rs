use super::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|)` over all inputs jointly.
    pub max_rel_error: f64,
    /// Input holding the largest absolute discrepancy.
    pub worst_input: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn default_step<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() <= 4 {
        2e-2
    } else {
        1e-3
    }
}

/// Compares reverse-mode gradients of `f` against five-point central
/// differences. Non-scalar outputs are reduced with a fixed random
/// projection so every output element contributes.
pub fn gradient_check<T, F>(f: F, inputs: &[Tensor<T>], tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    gradient_check_with_step(f, inputs, tolerance, default_step::<T>())
}

pub fn gradient_check_with_step<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check(&f, &f, inputs, tolerance, step)
}

/// Checks the `f32` gradients of `f` against differences of `reference`,
/// the same computation evaluated in `f64` at the same point. This keeps
/// the `f32` roundoff of deep compositions out of the numeric side.
pub fn gradient_check_f32<F, R>(f: F, reference: R, inputs: &[Tensor<f32>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f32>, &[Var]) -> Result<Var>,
    R: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(&f, &reference, inputs, tolerance, default_step::<f64>())
}

fn check<T, U, F, R>(f: &F, reference: &R, inputs: &[Tensor<T>], tolerance: f64, step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    U: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    R: Fn(&mut Graph<U>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let proj: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let seed = Tensor {
        shape: g.value(out).shape.clone(),
        data: proj.iter().map(|&p| T::of(p)).collect(),
    };
    let grads = g.backward_with(out, seed)?;

    let eval = |xs: &[Tensor<U>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = reference(&mut g, &vars)?;
        Ok(g.value(out).data.iter().zip(&proj).map(|(v, p)| v.f64() * p).sum())
    };
    let base: Vec<Tensor<U>> = inputs.iter().map(Tensor::cast).collect();
    let mut probe = base.clone();
    let mut worst = (0.0f64, 0usize);
    let mut scale = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v).to_f64();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let x0 = base[i].data[j];
            let mut at = |delta: f64| -> Result<f64> {
                probe[i].data[j] = U::of(x0.f64() + delta);
                eval(&probe)
            };
            let (p1, m1) = (at(step)?, at(-step)?);
            let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
            probe[i].data[j] = x0;
            *num = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        }
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        scale = analytic.iter().chain(&numeric).fold(scale, |m, v| m.max(v.abs()));
        if diff > worst.0 {
            worst = (diff, i);
        }
    }
    let rel = if scale > 0.0 { worst.0 / scale } else { 0.0 };
    Ok(GradCheckReport {
        max_rel_error: rel,
        worst_input: worst.1,
        tolerance,
        passed: rel < tolerance,
    })
}

/// Checks gradients with respect to every parameter of `store` at once.
pub fn gradient_check_params<T, F>(store: &ParamStore<T>, f: F, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let inputs: Vec<Tensor<T>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    gradient_check(
        |g, vars| {
            g.bind_params(store, vars);
            f(g, store)
        },
        &inputs,
        tolerance,
    )
}

/// [`gradient_check_f32`] with respect to every parameter; `reference`
/// must be the `f64` cast of `store`.
pub fn gradient_check_params_f32<F, R>(
    store: &ParamStore<f32>,
    f: F,
    reference: &ParamStore<f64>,
    f_ref: R,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f32>, &ParamStore<f32>) -> Result<Var>,
    R: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let inputs: Vec<Tensor<f32>> = store.iter().map(|(_, p)| p.value.clone()).collect();
    gradient_check_f32(
        |g, vars| {
            g.bind_params(store, vars);
            f(g, store)
        },
        |g, vars| {
            g.bind_params(reference, vars);
            f_ref(g, reference)
        },
        &inputs,
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::AttentionMask;
    use rand_distr::StandardNormal;

    fn rand_t<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    /// Inputs bounded away from zero so kinked activations stay differentiable.
    fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Tensor<T> {
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let m = rng.random_range(0.2..1.5);
                if rng.random::<bool>() { m } else { -m }
            })
            .collect();
        Tensor::from_f64(&[2, n / 2], &v).unwrap()
    }

    type Case<T> = (
        &'static str,
        Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>,
        Vec<Tensor<T>>,
    );

    fn cases<T: Scalar>() -> Vec<Case<T>> {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let mask = AttentionMask::causal(4);
        let mut out: Vec<Case<T>> = vec![
            (
                "matmul",
                Box::new(|g, v| g.matmul(v[0], v[1])),
                vec![rand_t(&mut r, &[3, 4], 1.0), rand_t(&mut r, &[4, 2], 1.0)],
            ),
            (
                "matmul_tt",
                Box::new(|g, v| g.matmul_t(v[0], v[1], true, true)),
                vec![rand_t(&mut r, &[4, 3], 1.0), rand_t(&mut r, &[2, 4], 1.0)],
            ),
            (
                "linear",
                Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
                vec![rand_t(&mut r, &[3, 4], 1.0), rand_t(&mut r, &[4, 5], 0.5), rand_t(&mut r, &[5], 0.5)],
            ),
            (
                "mul_sub",
                Box::new(|g, v| {
                    let d = g.sub(v[0], v[1])?;
                    g.mul(d, v[0])
                }),
                vec![rand_t(&mut r, &[6], 1.0), rand_t(&mut r, &[6], 1.0)],
            ),
            (
                "layer_norm",
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
                vec![rand_t(&mut r, &[3, 6], 1.0), rand_t(&mut r, &[6], 1.0), rand_t(&mut r, &[6], 1.0)],
            ),
            ("gelu", Box::new(|g, v| Ok(g.gelu(v[0]))), vec![rand_t(&mut r, &[2, 5], 1.5)]),
            ("relu", Box::new(|g, v| Ok(g.relu(v[0]))), vec![away_from_zero(&mut r, 10)]),
            ("leaky_relu", Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2))), vec![away_from_zero(&mut r, 10)]),
            ("softplus", Box::new(|g, v| Ok(g.softplus(v[0]))), vec![rand_t(&mut r, &[2, 5], 2.0)]),
            ("softmax", Box::new(|g, v| Ok(g.softmax(v[0]))), vec![rand_t(&mut r, &[3, 5], 1.0)]),
            (
                "embedding",
                Box::new(|g, v| g.embedding(v[0], &[2, 0, 2, 1])),
                vec![rand_t(&mut r, &[3, 4], 1.0)],
            ),
            (
                "conv2d",
                Box::new(|g, v| {
                    let y = g.conv2d(v[0], v[1], 2, 1)?;
                    g.add_channel_bias(y, v[2])
                }),
                vec![rand_t(&mut r, &[2, 2, 5, 5], 1.0), rand_t(&mut r, &[3, 2, 3, 3], 0.5), rand_t(&mut r, &[3], 0.5)],
            ),
            (
                "attention",
                Box::new(|g, v| g.attention(v[0], v[1], v[2], 2, 2, None)),
                vec![rand_t(&mut r, &[6, 4], 1.0), rand_t(&mut r, &[4, 4], 1.0), rand_t(&mut r, &[4, 4], 1.0)],
            ),
            (
                "attention_masked",
                Box::new(move |g, v| g.attention(v[0], v[1], v[2], 1, 1, Some(&mask))),
                vec![rand_t(&mut r, &[4, 3], 1.0), rand_t(&mut r, &[4, 3], 1.0), rand_t(&mut r, &[4, 3], 1.0)],
            ),
            (
                "cross_entropy",
                Box::new(|g, v| g.cross_entropy(v[0], &[1, 4, 0])),
                vec![rand_t(&mut r, &[3, 5], 1.0)],
            ),
            (
                "rows",
                Box::new(|g, v| {
                    let c = g.concat_rows(&[v[0], v[1]])?;
                    let s = g.slice_rows(c, 1, 3)?;
                    let idx = std::rc::Rc::new(vec![5, 0, 0, 3, 8, 2]);
                    let p = g.gather(s, idx, &[2, 3])?;
                    let p = g.reshape(p, &[6])?;
                    let m = g.mean(p);
                    let a = g.affine(v[0], 2.0, 1.0);
                    let sa = g.sum(a);
                    g.add(m, sa)
                }),
                vec![rand_t(&mut r, &[2, 3], 1.0), rand_t(&mut r, &[2, 3], 1.0)],
            ),
        ];
        out.push((
            "mse",
            Box::new(|g, v| g.mse(v[0], v[1])),
            vec![rand_t(&mut r, &[7], 1.0), rand_t(&mut r, &[7], 1.0)],
        ));
        out
    }

    #[test]
    fn every_op_passes_in_f64() {
        for (name, f, xs) in cases::<f64>() {
            let rep = gradient_check(f, &xs, 1e-6).unwrap();
            assert!(rep.passed, "{name}: {rep:?}");
        }
    }

    #[test]
    fn every_op_passes_in_f32() {
        for (name, f, xs) in cases::<f32>() {
            let rep = gradient_check(f, &xs, 1e-4).unwrap();
            assert!(rep.passed, "{name}: {rep:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // straight-through is intentionally not the true derivative of x -> x^2
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.value(v[0]).data.iter().map(|x| x * x).collect();
            let t = Tensor::new(g.shape(v[0]).to_vec(), sq)?;
            g.straight_through(v[0], t)
        };
        let xs = [Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()];
        assert!(!gradient_check(f, &xs, 1e-6).unwrap().passed);
    }
}
