use std::sync::Arc;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Mean squared error over all entries.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", tape.value(pred).shape(), tape.value(target).shape()),
        ));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Mean negative log-softmax of the true class. `logits` is `[batch,
/// classes]` or a single row `[classes]`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, Arc::from(labels))?;
    let m = tape.mean(picked, 0)?;
    Ok(tape.scale(m, -T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_regression_is_zero() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::vector(vec![1.5, -2.0]));
        let y = t.constant(Tensor::vector(vec![1.5, -2.0]));
        let l = mse(&mut t, p, y).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = cross_entropy(&mut t, z, &[0]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn class_out_of_range_is_error() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(cross_entropy(&mut t, z, &[2]).is_err());
    }

    #[test]
    fn losses_match_plain_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let b = rng.random_range(1..10);
            let p: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
            let want = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / b as f64;
            let mut t = Tape::<f64>::new();
            let (pv, yv) = (t.constant(Tensor::vector(p)), t.constant(Tensor::vector(y)));
            let l = mse(&mut t, pv, yv).unwrap();
            assert!((t.value(l).item() - want).abs() < 1e-12);

            let logits: Vec<f64> = (0..2 * b).map(|_| rng.random_range(-5.0..5.0)).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
            let mut want = 0.0;
            for i in 0..b {
                let (z0, z1) = (logits[2 * i], logits[2 * i + 1]);
                let lse = (z0.exp() + z1.exp()).ln();
                want -= logits[2 * i + labels[i]] - lse;
            }
            want /= b as f64;
            let mut t = Tape::<f64>::new();
            let z = t.constant(Tensor::matrix(b, 2, logits).unwrap());
            let l = cross_entropy(&mut t, z, &labels).unwrap();
            assert!((t.value(l).item() - want).abs() < 1e-12);
        }
    }
}
