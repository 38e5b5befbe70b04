use super::{Graph, NumericsError, Tensor, Var};

/// Largest relative disagreement between the tape gradient of a scalar
/// function and its central-difference estimate, over every input coordinate.
///
/// The error at a coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-7, 1e-3]"
    );
    let eval = |values: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let t = g.value(out);
        if t.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(t.shape().to_vec()).into());
        }
        Ok(t.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[slot]);
        for i in 0..inputs[slot].numel() {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[slot].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
