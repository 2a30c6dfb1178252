use super::{Graph, NnError, Tensor, Var};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over leaf elements of `|analytic - numeric| / max(|analytic|, eps)`.
    pub max_rel_error: f64,
    /// `(leaf, element)` attaining the maximum.
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar built by `builder` with
/// central differences of step `eps`, for every element of every leaf.
pub fn grad_check<F>(leaves: &[Tensor], eps: f64, builder: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NnError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NnError::InvalidArgument("eps must be positive".into()));
    }
    let eval = |values: &[Tensor]| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t)).collect();
        let loss = builder(&mut g, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(NnError::NotScalar(g.shape(loss).to_vec()));
        }
        Ok(g.scalar(loss))
    };

    let trainable: Vec<Tensor> = leaves.iter().map(|t| t.clone().requires_grad(true)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = trainable.iter().map(|t| g.leaf(t)).collect();
    let loss = builder(&mut g, &vars)?;
    let first = g.scalar(loss);
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&trainable)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let second = eval(leaves)?;
    if first.to_bits() != second.to_bits() {
        return Err(NnError::NonDeterministic { first, second });
    }

    let mut worst = (0, 0);
    let mut max_rel_error = 0.0f64;
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for (ei, &x0) in leaf.data().iter().enumerate() {
            probe[li].data_mut()[ei] = x0 + eps;
            let fp = eval(&probe)?;
            probe[li].data_mut()[ei] = x0 - eps;
            let fm = eval(&probe)?;
            probe[li].data_mut()[ei] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[li][ei];
            let err = (a - numeric).abs() / a.abs().max(eps);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (li, ei);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        passed: max_rel_error < GRAD_CHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ConvOptions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn rand_t(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = [
            rand_t(vec![3, 4], &mut rng),
            rand_t(vec![2, 4], &mut rng),
            rand_t(vec![2], &mut rng),
        ];
        let r = grad_check(&leaves, 1e-4, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_relu_mse_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut x = rand_t(vec![1, 2, 5, 5], &mut rng);
        // Keep pre-activations away from the relu kink.
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let leaves = [x, rand_t(vec![2, 2, 3, 3], &mut rng), rand_t(vec![2], &mut rng)];
        let target = rand_t(vec![1, 2, 5, 5], &mut rng);
        let r = grad_check(&leaves, 1e-4, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvOptions::new(1, 1))?;
            let a = g.relu(y)?;
            let t = g.leaf(&target);
            g.mse_loss(a, t)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let leaves = [rand_t(vec![6], &mut rng)];
        let r = grad_check(&leaves, 1e-4, |g, v| {
            let s = g.grad_scale(v[0], 2.0)?;
            let sq = g.mul(s, s)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4 && r.max_rel_error < 0.6, "{r:?}");
    }

    #[test]
    fn nondeterministic_builder_detected() {
        let calls = Cell::new(0u32);
        let leaves = [Tensor::new(vec![1], vec![1.0]).unwrap()];
        let err = grad_check(&leaves, 1e-4, |g, v| {
            calls.set(calls.get() + 1);
            let s = g.scale(v[0], calls.get() as f64)?;
            g.sum(s)
        })
        .unwrap_err();
        assert!(matches!(err, NnError::NonDeterministic { .. }));
    }
}
