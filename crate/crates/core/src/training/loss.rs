use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_in_place;
use crate::tensor::{Backward, Tensor, Var};

struct CrossEntropyBack {
    /// Softmax over the active classes, minus the one-hot target, over `Q`.
    delta: Tensor,
}

impl Backward for CrossEntropyBack {
    fn name(&self) -> &'static str {
        "cross_entropy_masked"
    }

    fn backward(&self, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(self.delta.scale(grad.item()?))])
    }
}

/// Mean over query rows of `−log softmax(logits[q, ..classes])[target_q]`.
///
/// Only the first `classes` logit columns take part; the remaining columns
/// get zero gradient.
pub fn cross_entropy_masked<'t>(logits: &Var<'t>, targets: &[usize], classes: usize) -> Result<Var<'t>> {
    let (q, width) = logits.value().dims2()?;
    if q == 0 {
        return Err(Error::Data("cross entropy over an empty query set".into()));
    }
    if q != targets.len() {
        return Err(Error::shape("cross_entropy_masked", logits.shape(), &[targets.len()]));
    }
    if classes == 0 || classes > width {
        return Err(Error::Contract(format!("{classes} classes for {width} logit columns")));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Data(format!("target {bad} out of range for {classes} classes")));
    }
    let inv = 1.0 / q as f64;
    let mut delta = Tensor::zeros([q, width]);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &mut delta.data_mut()[i * width..i * width + classes];
        row.copy_from_slice(&logits.value().row(i)[..classes]);
        let target_logit = row[t];
        let lse = softmax_in_place(row);
        total += lse - target_logit;
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    logits
        .tape()
        .record(&[logits], Tensor::scalar(total * inv), || CrossEntropyBack { delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use crate::testing::{check_gradients, random_tensor};

    fn direct(logits: &Tensor, targets: &[usize], classes: usize) -> f64 {
        let q = targets.len();
        (0..q)
            .map(|i| {
                let row = &logits.row(i)[..classes];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[targets[i]].exp() / z).ln()
            })
            .sum::<f64>()
            / q as f64
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let tape = Tape::new();
        let l = tape.leaf(Tensor::zeros([3, 4]));
        let loss = cross_entropy_masked(&l, &[0, 1, 3], 4).unwrap();
        assert!((loss.value().item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn margin_drives_loss_to_zero() {
        let tape = Tape::inference();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 40.0] {
            let l = tape.constant(Tensor::from_rows(&[[margin, 0.0, 0.0]]).unwrap());
            let loss = cross_entropy_masked(&l, &[0], 3).unwrap().value().item().unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn matches_direct_formula() {
        for seed in 0..10 {
            let logits = random_tensor(&[7, 5], seed);
            let targets = [0, 2, 1, 2, 0, 1, 1];
            let tape = Tape::inference();
            let got = cross_entropy_masked(&tape.constant(logits.clone()), &targets, 3).unwrap();
            assert!((got.value().item().unwrap() - direct(&logits, &targets, 3)).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_columns_get_no_gradient() {
        let tape = Tape::new();
        let l = tape.leaf(random_tensor(&[4, 5], 1));
        let loss = cross_entropy_masked(&l, &[0, 1, 1, 0], 2).unwrap();
        let g = tape.backward(&loss).unwrap();
        let g = g.get(&l).unwrap();
        for i in 0..4 {
            assert_eq!(&g.row(i)[2..], &[0.0, 0.0, 0.0]);
            assert!(g.row(i)[..2].iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn gradients() {
        for seed in 0..5 {
            check_gradients(&[random_tensor(&[6, 4], seed)], seed, |_, v| {
                cross_entropy_masked(&v[0], &[0, 2, 1, 2, 0, 1], 3)
            });
        }
    }

    #[test]
    fn errors() {
        let tape = Tape::inference();
        let empty = tape.constant(Tensor::zeros([0, 4]));
        assert!(matches!(cross_entropy_masked(&empty, &[], 4), Err(Error::Data(_))));
        let l = tape.constant(Tensor::zeros([2, 4]));
        assert!(cross_entropy_masked(&l, &[0, 3], 3).is_err());
        assert!(cross_entropy_masked(&l, &[0], 3).is_err());
    }
}
