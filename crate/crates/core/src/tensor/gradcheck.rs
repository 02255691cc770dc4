//! Central finite-difference gradient checker.

use super::{Tape, TensorId};

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs a scalar loss on a fresh tape from the given parameter
/// leaves; it is called once for the analytic pass and twice per coordinate
/// for the numeric one, so it must be deterministic. Returns the maximum over
/// all coordinates of
/// `|analytic - central| / max(1e-8, |analytic| + |central|)`.
pub fn grad_check<F>(build: F, params: &[(Vec<f64>, Vec<usize>)], h: f64) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    grad_check_detail(build, params, h).0
}

/// Like [`grad_check`] but also reports (param index, coordinate, analytic,
/// central) for the worst coordinate.
pub fn grad_check_detail<F>(
    build: F,
    params: &[(Vec<f64>, Vec<usize>)],
    h: f64,
) -> (f64, usize, usize, f64, f64)
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    assert!(h > 0.0, "grad_check: step size must be positive");
    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values
            .iter()
            .zip(params.iter())
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape.clone(), false))
            .collect();
        let loss = build(&mut tape, &ids);
        assert_eq!(tape.value(loss).len(), 1, "grad_check: loss must be scalar");
        tape.value(loss)[0]
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone(), true))
        .collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, (data, _))| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; data.len()]))
        .collect();

    let base: Vec<Vec<f64>> = params.iter().map(|(d, _)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut worst = (0usize, 0usize, 0.0f64, 0.0f64);
    for (pi, (data, _)) in params.iter().enumerate() {
        for ci in 0..data.len() {
            let mut plus = base.clone();
            plus[pi][ci] += h;
            let mut minus = base.clone();
            minus[pi][ci] -= h;
            let central = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[pi][ci];
            let rel = (a - central).abs() / (a.abs() + central.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = (pi, ci, a, central);
            }
        }
    }
    (max_rel, worst.0, worst.1, worst.2, worst.3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let params = vec![(vec![0.7, -1.3, 2.1], vec![3usize])];
        let err = grad_check(
            |tape, ids| {
                let x = tape.leaf(vec![0.4, 0.5, -0.6], vec![3], false);
                let p = tape.mul(ids[0], x);
                tape.sum(p)
            },
            &params,
            1e-5,
        );
        assert!(err < 1e-9, "linear grad check error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = vec![(vec![1.0, 2.0], vec![2usize])];
        let err = grad_check(
            |tape, _ids| tape.scalar(3.5),
            &params,
            1e-5,
        );
        assert_eq!(err, 0.0);
    }
}
