use ndarray::Array1;

use crate::error::{Error, Result};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// `exp(z_i / T) / sum_j exp(z_j / T)`, computed after subtracting the max logit.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Array1<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("softmax over zero logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total = exps.sum();
    Ok(exps / total)
}

pub fn softmax(logits: &[f64]) -> Array1<f64> {
    softmax_with_temperature(logits, 1.0).expect("unit temperature")
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain(format!("{name} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Domain(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `-sum_i target_i ln(max(predicted_i, PROB_FLOOR))`.
pub fn cross_entropy(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "target has {} classes, prediction {}",
            target.len(),
            predicted.len()
        )));
    }
    check_distribution("target", target)?;
    check_distribution("prediction", predicted)?;
    Ok(-target
        .iter()
        .zip(predicted)
        .map(|(t, p)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("KL arguments differ in length".into()));
    }
    check_distribution("target", p)?;
    check_distribution("prediction", q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Gradient of `cross_entropy(target, softmax(z / T))` with respect to `z`,
/// for a target summing to one and held constant: `(softmax(z / T) - target) / T`.
pub fn softmax_cross_entropy_grad(logits: &[f64], target: &[f64], temperature: f64) -> Result<Array1<f64>> {
    let p = softmax_with_temperature(logits, temperature)?;
    if target.len() != p.len() {
        return Err(Error::Shape("target length differs from logits".into()));
    }
    Ok(Array1::from_iter(
        p.iter().zip(target).map(|(pi, ti)| (pi - ti) / temperature),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        for t in [0.5, 1.0, 7.0] {
            let p = softmax_with_temperature(&[0.0, 0.0, 0.0], t).unwrap();
            p.iter().for_each(|v| assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15));
        }
        let e2 = 2f64.exp();
        let p = softmax_with_temperature(&[2.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.1192, epsilon = 1e-4);
        let p = softmax_with_temperature(&[2.0, 0.0], 1e6).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-5);
        assert!(softmax_with_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0], -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(
            cross_entropy(&[1.0, 0.0], &[1.0 - 1e-12, 1e-12]).unwrap(),
            0.0,
            epsilon = 1e-11
        );
        assert_abs_diff_eq!(
            cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let u = [1.0 / 3.0; 3];
        assert_abs_diff_eq!(cross_entropy(&u, &u).unwrap(), 3f64.ln(), epsilon = 1e-12);
        assert!(cross_entropy(&[0.5, 0.2], &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&[1.0, 0.0], &[1.2, -0.2]).is_err());
    }

    fn arb_dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01..1.0f64, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in proptest::collection::vec(-20.0..20.0f64, 1..6), c in -50.0..50.0f64, t in 0.1..10.0f64) {
            let a = softmax_with_temperature(&z, t).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax_with_temperature(&shifted, t).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn gibbs_inequality(p in arb_dist(4), q in arb_dist(4)) {
            prop_assert!(cross_entropy(&p, &p).unwrap() <= cross_entropy(&p, &q).unwrap() + 1e-12);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }
}
