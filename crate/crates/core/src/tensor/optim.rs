use super::{check_finite, Result, Tensor, TensorError};

/// Plain SGD: `p ← p − lr·grad(p)` for every parameter that requires grad,
/// then clears the gradients. Frozen parameters are left untouched.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    if params
        .iter()
        .any(|p| p.requires_grad() && p.grad().is_none())
    {
        return Err(TensorError::MissingGrad);
    }
    for p in params.iter_mut().filter(|p| p.requires_grad()) {
        let grad = p.grad.take().expect("checked above");
        // x − 0·g can flip the sign of a zero.
        if lr == 0.0 {
            continue;
        }
        let data = p.data_mut();
        for (v, g) in data.iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        check_finite("sgd_step", p.data())?;
    }
    Ok(())
}
