//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::grad;
use super::tensor::Tensor;
use crate::error::{CastError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖numeric − analytic‖₂ / max(‖numeric‖₂, ‖analytic‖₂)`, 0 when both vanish.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

fn leaves(values: &[Tensor]) -> Vec<Tensor> {
    values.iter().map(|t| t.detach().requires_grad_leaf()).collect()
}

/// Compares `grad(f)` at `inputs` with central differences of step `h` on
/// every input coordinate. `f` must return a scalar.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    check_coordinates(f, inputs, &coords, h)
}

/// [`check_gradients`] restricted to the given `(input, element)` pairs.
pub fn check_coordinates<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)], h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let xs = leaves(inputs);
    let out = f(&xs)?;
    let refs: Vec<&Tensor> = xs.iter().collect();
    let analytic = grad(&out, &refs, false)?;

    let eval = |t: usize, i: usize, delta: f64| -> Result<f64> {
        // fresh leaves, so functions that differentiate internally still can
        let mut moved = leaves(inputs);
        let mut data = moved[t].to_vec();
        data[i] = (data[i] as f64 + delta) as f32;
        moved[t] = Tensor::new(inputs[t].shape(), data)?.requires_grad_leaf();
        Ok(f(&moved)?.item()? as f64)
    };

    let (mut diff2, mut num2, mut ana2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(t, i) in coords {
        if t >= inputs.len() || i >= inputs[t].numel() {
            return Err(CastError::InvalidArgument(format!("coordinate ({t}, {i}) out of range")));
        }
        // difference of the actually representable perturbed points
        let x = inputs[t].data()[i];
        let up = ((x as f64 + h) as f32) as f64 - x as f64;
        let down = x as f64 - ((x as f64 - h) as f32) as f64;
        let numeric = (eval(t, i, h)? - eval(t, i, -h)?) / (up + down);
        let a = analytic[t].data()[i] as f64;
        diff2 += (numeric - a).powi(2);
        num2 += numeric.powi(2);
        ana2 += a.powi(2);
        max_abs = max_abs.max((numeric - a).abs());
    }
    let scale = num2.sqrt().max(ana2.sqrt());
    Ok(GradCheck {
        rel_err: if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 },
        max_abs_err: max_abs,
        checked: coords.len(),
    })
}

/// Checks the gradient of a random projection of `grad(f)`, which exercises
/// every backward rule as a differentiable function.
pub fn check_second_order<F>(f: F, inputs: &[Tensor], h: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<Tensor> = inputs
        .iter()
        .map(|x| Tensor::new(x.shape(), (0..x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    let projected = |xs: &[Tensor]| -> Result<Tensor> {
        let out = f(xs)?;
        let refs: Vec<&Tensor> = xs.iter().collect();
        let grads = grad(&out, &refs, true)?;
        let mut total = Tensor::scalar(0.0);
        for (g, w) in grads.iter().zip(&weights) {
            total = total.add(&g.mul(w)?.sum())?;
        }
        Ok(total)
    };
    check_gradients(projected, inputs, h)
}
