//! Sparsifying and quantizing baselines.

use std::cmp::Ordering;

use super::{words32, Payload};
use crate::models::ParamVector;
use crate::scalar::Scalar;

/// Indices of the `k` largest-magnitude entries, ties broken by lower index,
/// returned in ascending index order.
fn top_indices<T: Scalar>(x: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    let by_mag = |a: &usize, b: &usize| {
        x[*b].abs()
            .partial_cmp(&x[*a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, by_mag);
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

/// Keeps the `k` entries of largest magnitude.
pub fn topk_compress<T: Scalar>(target: &ParamVector<T>, k: usize) -> Payload<T> {
    let x = target.as_slice();
    let indices = top_indices(x, k.min(x.len()));
    let values = indices.iter().map(|&i| x[i]).collect();
    Payload::Sparse {
        dim: x.len(),
        indices,
        values,
    }
}

/// Sign bits with one shared scale `||x||_1 / dim`. Zero entries are sent as `+`.
pub fn sign_compress<T: Scalar>(target: &ParamVector<T>) -> Payload<T> {
    let x = target.as_slice();
    let scale = if x.is_empty() {
        T::zero()
    } else {
        target.l1_norm() / T::from_usize_lossy(x.len())
    };
    Payload::Sign {
        scale,
        negative: x.iter().map(|v| *v < T::zero()).collect(),
    }
}

/// Top-k support, one sign per kept entry, and their mean magnitude.
pub fn ternary_compress<T: Scalar>(target: &ParamVector<T>, k: usize) -> Payload<T> {
    let x = target.as_slice();
    let indices = top_indices(x, k.min(x.len()));
    let mut total = T::zero();
    for &i in &indices {
        total += x[i].abs();
    }
    let magnitude = if indices.is_empty() {
        T::zero()
    } else {
        total / T::from_usize_lossy(indices.len())
    };
    Payload::Ternary {
        dim: x.len(),
        negative: indices.iter().map(|&i| x[i] < T::zero()).collect(),
        indices,
        magnitude,
    }
}

/// Largest `k` with `k + ceil(k/32) + 1 <= budget`.
pub fn ternary_k_for_budget(budget: usize) -> usize {
    if budget < 3 {
        return 0;
    }
    let mut k = budget - 2;
    while k > 0 && k + words32(k) + 1 > budget {
        k -= 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressors::decompress;

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn topk_keeps_largest() {
        let p = topk_compress(&pv(&[3.0, -5.0, 1.0]), 2);
        let r = decompress(&p, None).unwrap();
        assert_eq!(r, pv(&[3.0, -5.0, 0.0]));
        assert_eq!(p.cost(), 4);
    }

    #[test]
    fn topk_full_is_lossless() {
        let t = pv(&[0.1, -2.0, 0.0, 7.0]);
        assert_eq!(decompress(&topk_compress(&t, 4), None).unwrap(), t);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let p = topk_compress(&pv(&[1.0, -1.0, 1.0]), 2);
        match p {
            Payload::Sparse { indices, .. } => assert_eq!(indices, vec![0, 1]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn sign_constant_vector_is_exact() {
        let t = pv(&[0.75; 9]);
        assert_eq!(decompress(&sign_compress(&t), None).unwrap(), t);
        let p = sign_compress(&pv(&[2.0, -2.0]));
        assert_eq!(decompress(&p, None).unwrap(), pv(&[2.0, -2.0]));
        assert_eq!(p.cost(), 2);
        assert_eq!(sign_compress(&pv(&[1.0; 33])).cost(), 3);
    }

    #[test]
    fn ternary_example() {
        let p = ternary_compress(&pv(&[4.0, -4.0, 0.1]), 2);
        assert_eq!(decompress(&p, None).unwrap(), pv(&[4.0, -4.0, 0.0]));
        assert_eq!(p.cost(), 2 + 1 + 1);
    }

    #[test]
    fn ternary_equal_spikes_lossless() {
        let t = pv(&[0.0, 3.0, 0.0, -3.0, 0.0, 3.0]);
        assert_eq!(decompress(&ternary_compress(&t, 3), None).unwrap(), t);
    }

    #[test]
    fn ternary_budget_inversion() {
        assert_eq!(ternary_k_for_budget(2), 0);
        assert_eq!(ternary_k_for_budget(3), 1);
        assert_eq!(ternary_k_for_budget(34), 32);
        assert_eq!(ternary_k_for_budget(35), 32);
        assert_eq!(ternary_k_for_budget(36), 33);
        for b in 3..500 {
            let k = ternary_k_for_budget(b);
            assert!(k + words32(k) < b);
            assert!((k + 1) + words32(k + 1) + 1 > b);
        }
    }
}
