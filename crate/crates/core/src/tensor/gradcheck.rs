use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

const SCALE_FLOOR: f64 = 1e-3;

/// Maximum relative error between reverse-mode gradients and central
/// differences, over every entry of every input.
///
/// `f` builds a scalar from the input vars on the tape it is given. The
/// relative error of one entry is `|a - c| / max(|a|, |c|, 1e-3·s, 1e-12)`
/// where `s` is the largest analytic magnitude in the same input. The
/// floor keeps directions the output is invariant to (a key bias under
/// softmax, say) from comparing rounding noise against zero.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_entries(f, inputs, eps, |t| (0..t.numel()).collect())
}

/// Like [`grad_check`] but probes at most `per_input` randomly chosen entries
/// of each input, for composites whose parameter count makes the full sweep
/// slow.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, per_input: usize, rng: &mut RngStream) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_entries(f, inputs, eps, |t| {
        if t.numel() <= per_input {
            (0..t.numel()).collect()
        } else {
            let mut idx = rng.permutation(t.numel());
            idx.truncate(per_input);
            idx
        }
    })
}

fn grad_check_entries<F, S>(f: F, inputs: &[Tensor], eps: f64, mut select: S) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    S: FnMut(&Tensor) -> Vec<usize>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(&format!("input{i}"), t.clone()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.check_finite()?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.check_finite()?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (SCALE_FLOOR * scale).max(1e-12);
        for j in select(input) {
            let mut plus = input.data().to_vec();
            plus[j] += eps;
            probe[i] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&probe)?;
            let mut minus = input.data().to_vec();
            minus[j] -= eps;
            probe[i] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&probe)?;
            let central = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            if !central.is_finite() {
                return Err(Error::NonFinite { node: j, op: "central difference" });
            }
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(floor);
            worst = worst.max(rel);
        }
        probe[i] = input.clone();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.7, -0.4]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![1.5, -0.5, 0.25]).unwrap();
        let err = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.sum(y)
            },
            &[a, x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let x = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        let err = grad_check(|t, v| t.sum(v[0]), &[x], 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node: 0, .. }), "{err}");
    }
}
