use super::{Result, Tape, Tensor, Var};

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate, in 64-bit mode.
///
/// `f` receives a fresh tape plus one leaf per input tensor and must return
/// a scalar. Returns the max over all coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<(f64, Option<Vec<Option<Tensor<f64>>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let per_input = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        Ok((value, Some(per_input)))
    };

    let (_, analytic) = eval(inputs)?;
    let analytic = analytic.unwrap();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let (fp, _) = eval_value(&f, &work)?;
            work[ti].data_mut()[ci] = orig - step;
            let (fm, _) = eval_value(&f, &work)?;
            work[ti].data_mut()[ci] = orig;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti].as_ref().map(|t| t.data()[ci]).unwrap_or(0.0);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn eval_value<F>(f: &F, points: &[Tensor<f64>]) -> Result<(f64, ())>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.value(loss).item(), ()))
}
