//! Differentiable composites built from tape primitives.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, PROB_FLOOR};

/// `sum_rows KL(q_row || softmax(logits_row))` recorded on the tape.
///
/// `q` is a constant `[m x V]` matrix of target distributions. Target mass
/// below [`PROB_FLOOR`] is dropped and the student probability is floored
/// at the same value inside the logarithm.
pub fn kl_from_logits<T: Scalar>(tape: &mut Tape<T>, q: &Tensor<T>, logits: Var) -> Result<Var> {
    if tape.try_value(logits)?.shape() != q.shape() {
        return Err(Error::InvalidShape(format!(
            "targets {:?} vs logits {:?}",
            q.shape(),
            tape.shape(logits)
        )));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let kept = q.map(|v| if v < floor { T::zero() } else { v });
    let neg_entropy: T = kept.data().iter().filter(|v| **v > T::zero()).map(|&v| v * v.ln()).sum();
    let p = tape.softmax(logits)?;
    let lp = tape.ln(p, floor)?;
    let qc = tape.constant(kept);
    let weighted = tape.mul(lp, qc)?;
    let cross = tape.sum(weighted)?;
    let neg_cross = tape.scale(cross, -T::one())?;
    let offset = tape.constant(Tensor::scalar(neg_entropy));
    tape.add(neg_cross, offset)
}

/// Cross-entropy of `targets` under `softmax(logits)`, summed over rows.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, targets: &[usize], logits: Var) -> Result<Var> {
    let (m, v) = tape.try_value(logits)?.dims2()?;
    if targets.len() != m {
        return Err(Error::InvalidShape(format!("{} targets for {m} rows", targets.len())));
    }
    let mut onehot = Tensor::zeros(vec![m, v]);
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::InvalidToken { id: t, vocab_size: v });
        }
        onehot.data_mut()[r * v + t] = T::one();
    }
    kl_from_logits(tape, &onehot, logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kl_divergence, softmax};

    #[test]
    fn matches_value_level_divergence() {
        let q = softmax(&Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap()).unwrap();
        let z = Tensor::new(vec![2, 3], vec![1.0, 0.2, -0.4, 0.7, 0.7, -2.0]).unwrap();
        let p = softmax(&z).unwrap();
        let mut expected = 0.0f64;
        for r in 0..2 {
            let qr = Tensor::from_vec(q.row(r).to_vec()).unwrap();
            let pr = Tensor::from_vec(p.row(r).to_vec()).unwrap();
            expected += kl_divergence(&qr, &pr).unwrap();
        }
        let mut tape = Tape::new();
        let zl = tape.leaf(z, true);
        let loss = kl_from_logits(&mut tape, &q, zl).unwrap();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::<f64>::zeros(vec![1, 4]), true);
        let loss = cross_entropy(&mut tape, &[2], z).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&mut tape, &[4], z).is_err());
    }
}
