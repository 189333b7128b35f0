//! Finite-difference validation of tape gradients.

use super::tape::{Tape, TensorId};
use super::{Result, Tensor};

/// Compare analytic gradients against central differences for every element
/// of every parameter and return the worst relative error
/// |analytic − numeric| / max(1e-8, |analytic| + |numeric|).
///
/// `build` must construct the same scalar loss each call from the leaves it
/// is handed (one per parameter, in order). It runs once for the analytic
/// pass and twice per parameter element for the ±eps evaluations, so keep
/// the function small when checking many parameters.
pub fn grad_check<F>(params: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        ids.iter().map(|&id| tape.grad_or_zeros(id)).collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / 1e-8_f64.max(a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn quadratic_chain() {
        // loss = sum((x*x + x) scaled) via scalar ops
        let x = Tensor::vector(vec![0.7, -1.3, 2.1]);
        let worst = grad_check(&[x], EPS, |tape, ids| {
            let x = ids[0];
            let sq = tape.mul(x, x)?;
            let s = tape.add(sq, x)?;
            let parts: Vec<_> = (0..3).map(|i| tape.select(s, i)).collect::<Result<_>>()?;
            let a = tape.add(parts[0], parts[1])?;
            tape.add(a, parts[2])
        })
        .unwrap();
        assert!(worst < TOL, "worst rel err {}", worst);
    }

    #[test]
    fn matmul_tanh_softmax_chain() {
        let w = Tensor::matrix(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.6]]).unwrap();
        let x = Tensor::matrix(&[vec![0.9, -0.4], vec![0.2, 1.1]]).unwrap();
        let worst = grad_check(&[w, x], EPS, |tape, ids| {
            let (w, x) = (ids[0], ids[1]);
            let h = tape.matmul(x, w)?;
            let t = tape.tanh(h)?;
            let p = tape.softmax_rows(t)?;
            let lp = tape.log_softmax_rows(p)?;
            let a = tape.select(lp, 1)?;
            let b = tape.select(lp, 5)?;
            tape.add(a, b)
        })
        .unwrap();
        assert!(worst < TOL, "worst rel err {}", worst);
    }

    #[test]
    fn layer_norm_mean_chain() {
        let x = Tensor::matrix(&[vec![1.0, -0.5, 0.25, 2.0], vec![-1.5, 0.75, 0.0, 0.5]]).unwrap();
        let gain = Tensor::vector(vec![1.2, 0.8, 1.0, 0.9]);
        let bias = Tensor::vector(vec![0.1, -0.2, 0.0, 0.3]);
        let worst = grad_check(&[x, gain, bias], EPS, |tape, ids| {
            let ln = tape.layer_norm_rows(ids[0], ids[1], ids[2])?;
            let m = tape.mean_rows(ln)?;
            let a = tape.select(m, 0)?;
            let b = tape.select(m, 3)?;
            tape.add(a, b)
        })
        .unwrap();
        assert!(worst < TOL, "worst rel err {}", worst);
    }

    #[test]
    fn concat_slice_repeat_chain() {
        let a = Tensor::matrix(&[vec![0.4, -0.7]]).unwrap();
        let b = Tensor::matrix(&[vec![1.3]]).unwrap();
        let worst = grad_check(&[a, b], EPS, |tape, ids| {
            let cat = tape.concat_feature(ids[0], ids[1])?;
            let rep = tape.repeat_rows(cat, 3)?;
            let s = tape.slice_cols(rep, 1, 2)?;
            let m = tape.mean_rows(s)?;
            let t = tape.tanh(m)?;
            let x = tape.select(t, 0)?;
            let y = tape.select(t, 1)?;
            tape.add(x, y)
        })
        .unwrap();
        assert!(worst < TOL, "worst rel err {}", worst);
    }

    #[test]
    fn logsumexp_and_l2_chain() {
        let a = Tensor::vector(vec![0.3, -1.1, 0.8]);
        let b = Tensor::vector(vec![-0.4, 0.9, 0.2]);
        let worst = grad_check(&[a, b], EPS, |tape, ids| {
            let d = tape.l2_distance(ids[0], ids[1])?;
            let s0 = tape.select(ids[0], 0)?;
            let s1 = tape.select(ids[1], 2)?;
            let lse = tape.logsumexp(&[s0, s1, d])?;
            tape.scale(lse, 1.5)
        })
        .unwrap();
        assert!(worst < TOL, "worst rel err {}", worst);
    }

    #[test]
    fn relu_and_bias_chain() {
        // Inputs chosen away from the relu kink.
        let x = Tensor::matrix(&[vec![0.6, -0.9], vec![-0.3, 1.4]]).unwrap();
        let bias = Tensor::vector(vec![0.25, -0.15]);
        let worst = grad_check(&[x, bias], EPS, |tape, ids| {
            let h = tape.add_bias_rows(ids[0], ids[1])?;
            let r = tape.relu(h)?;
            let m = tape.mean_rows(r)?;
            let a = tape.select(m, 0)?;
            let b = tape.select(m, 1)?;
            tape.add(a, b)
        })
        .unwrap();
        assert!(worst < TOL, "worst rel err {}", worst);
    }

    #[test]
    fn transpose_matmul_chain() {
        let w = Tensor::matrix(&[vec![0.2, -0.5], vec![0.7, 0.1], vec![-0.3, 0.6]]).unwrap();
        let worst = grad_check(&[w], EPS, |tape, ids| {
            let wt = tape.transpose(ids[0])?;
            let gram = tape.matmul(wt, ids[0])?;
            let a = tape.select(gram, 0)?;
            let b = tape.select(gram, 3)?;
            tape.add(a, b)
        })
        .unwrap();
        assert!(worst < TOL, "worst rel err {}", worst);
    }
}
