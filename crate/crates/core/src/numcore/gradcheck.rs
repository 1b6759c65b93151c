//! Central-difference verification of analytic gradients.

use super::{NumError, Tape, Tensor, Var};

/// A scalar function of one tensor with a claimed gradient.
pub trait Differentiable {
    fn value(&self, x: &Tensor) -> Result<f64, NumError>;
    fn gradient(&self, x: &Tensor) -> Result<Vec<f64>, NumError>;
}

/// Adapts a taped closure: the value is the forward result, the gradient
/// comes from [`Tape::backward`].
pub struct TapeFn<F>(pub F);

impl<F> Differentiable for TapeFn<F>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumError>,
{
    fn value(&self, x: &Tensor) -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = (self.0)(&mut tape, xv)?;
        scalar_of(&tape, out)
    }

    fn gradient(&self, x: &Tensor) -> Result<Vec<f64>, NumError> {
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let out = (self.0)(&mut tape, xv)?;
        tape.backward(out)?;
        Ok(tape.grad(xv).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64, NumError> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(NumError::Contract(format!("expected scalar output, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Max over all coordinates of `|analytic − central| / max(1, |central|)`.
pub fn grad_check<D: Differentiable + ?Sized>(f: &D, x: &Tensor, eps: f64) -> Result<f64, NumError> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Same as [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_coords<D: Differentiable + ?Sized>(
    f: &D,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<f64, NumError> {
    if !(eps > 0.0) {
        return Err(NumError::Contract(format!("eps must be positive, got {eps}")));
    }
    let analytic = f.gradient(x)?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f.value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f.value(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
