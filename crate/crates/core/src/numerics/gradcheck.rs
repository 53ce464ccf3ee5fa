/// Max over coordinates of `|analytic - central| / (|central| + 1e-12)`,
/// where `central` is the central difference of `f` at `x` with step `h`.
pub fn finite_diff_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length must match input");
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let central = (up - down) / (2.0 * h);
        let err = (analytic[i] - central).abs() / (central.abs() + 1e-12);
        worst = worst.max(err);
    }
    worst
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = finite_diff_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_function_is_exact() {
        let err = finite_diff_check(|_| 4.2, &[1.0, -2.0], &[0.0, 0.0], 1e-5);
        assert_eq!(err, 0.0);
    }
}
