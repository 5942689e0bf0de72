use super::{Scalar, Tape, Tensor, Var};

/// Compare the taped analytic gradient of a scalar-valued function against
/// central finite differences, entry by entry over every input tensor.
///
/// Returns the maximum relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The closure must be deterministic: it is re-invoked on perturbed copies
/// of the inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: Scalar) -> Scalar
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    assert!(
        (1e-7..=1e-3).contains(&(eps as f64)),
        "grad_check: eps {eps} outside [1e-7, 1e-3]"
    );
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&tape, &vars);
    let (r, c) = tape.shape(loss);
    assert!(r == 1 && c == 1, "grad_check requires a scalar function");
    tape.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad_of(*v)
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let eval = |tensors: &[Tensor]| -> Scalar {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t)).collect();
        tape.value_scalar(f(&tape, &vars))
    };

    let mut max_rel: Scalar = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x0 = inputs[i].data()[j];
            plus[i].data_mut()[j] = x0 + eps;
            minus[i].data_mut()[j] = x0 - eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let ana = analytic[i].data()[j];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
