//! Numeric kernels shared by inference and training.

use ndarray::{Array1, Array2, Axis};

use crate::runtime::weights::LayerNorm;
use crate::runtime::TokenId;

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise layer norm. Also returns the normalized rows and reciprocal std for backprop.
pub fn layer_norm_cached(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &ln.gain + &ln.bias;
    (y, xhat, rstd)
}

pub fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> Array2<f64> {
    layer_norm_cached(x, ln).0
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Index of the strict maximum, or `None` when the maximum is shared.
pub fn unique_argmax(xs: &[f64]) -> Option<TokenId> {
    let best = argmax(xs) as usize;
    let top = xs[best];
    if xs.iter().enumerate().any(|(i, &x)| i != best && x == top) {
        None
    } else {
        Some(best as TokenId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(unique_argmax(&[0.1, 0.5, 0.5]), None);
        assert_eq!(unique_argmax(&[0.0, 0.0]), None);
        assert_eq!(unique_argmax(&[0.0, 0.2]), Some(1));
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let mut v = [1.0, f64::NEG_INFINITY, 1.0];
        softmax_in_place(&mut v);
        assert_eq!(v, [0.5, 0.0, 0.5]);
    }
}
