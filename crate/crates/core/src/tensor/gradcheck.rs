use super::{Element, Tensor};

/// Central-difference estimate `(f(x + h·e) − f(x − h·e)) / 2h` for every
/// element of `x`.
pub fn finite_diff_gradient<T: Element>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / two_h);
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("same shape as x")
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps near-zero gradients
/// from turning rounding noise into large relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::from_vec([1], vec![3.0]).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_vec([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_gradient(|_| 4.2, &x, 1e-5);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }
}
