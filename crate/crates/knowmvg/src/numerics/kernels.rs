//! Matrix-product kernels. Loop orders are chosen so the inner loop always
//! walks contiguous memory; on a single core this is the difference between
//! a usable training step and an unusable one.

use super::scalar::Real;
use super::tensor::Tensor;

/// C = A·B, A is m×k, B is k×n.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        a.cols(),
        b.rows(),
        "matmul: inner dims {}x{} · {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            let brow = b.row(p);
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// C = A·Bᵀ, A is m×k, B is n×k.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        a.cols(),
        b.cols(),
        "matmul_nt: inner dims {}x{} · ({}x{})ᵀ",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
    let (m, n) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, oj) in orow.iter_mut().enumerate().take(n) {
            let brow = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *oj = acc;
        }
    }
    out
}

/// C = Aᵀ·B, A is m×k, B is m×n.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        a.rows(),
        b.rows(),
        "matmul_tn: inner dims ({}x{})ᵀ · {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(k, n);
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            let orow = out.row_mut(p);
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// C = A·B with each output accumulated in a canonical order: the k partial
/// products are sorted by IEEE total order before summation. The product
/// multiset for output (i,j) is invariant under a simultaneous permutation of
/// A's columns and B's rows, so this kernel makes graph-style aggregations
/// bit-exactly permutation-equivariant instead of merely close.
pub fn matmul_sorted<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols(), b.rows(), "matmul_sorted: inner dims");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    let mut scratch: Vec<T> = Vec::with_capacity(k);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            scratch.clear();
            for (p, &aip) in arow.iter().enumerate() {
                scratch.push(aip * b[(p, j)]);
            }
            scratch.sort_unstable_by(|x, y| x.total_order(y));
            let mut acc = T::zero();
            for &v in &scratch {
                acc += v;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn variants_agree_on_hand_case() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = t(&[vec![19.0, 22.0], vec![43.0, 50.0]]);
        assert_eq!(matmul(&a, &b), c);
        assert_eq!(matmul_nt(&a, &b.transpose()), c);
        assert_eq!(matmul_tn(&a.transpose(), &b), c);
        assert_eq!(matmul_sorted(&a, &b), c);
    }

    #[test]
    fn sorted_kernel_is_permutation_invariant() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(3, 7, 1.0, &mut rng);
        let b = Tensor::<f64>::randn(7, 5, 1.0, &mut rng);
        let perm = [4usize, 0, 6, 2, 1, 5, 3];
        // Permute A's columns and B's rows by the same permutation.
        let mut ap = Tensor::zeros(3, 7);
        let mut bp = Tensor::zeros(7, 5);
        for (new, &old) in perm.iter().enumerate() {
            for r in 0..3 {
                ap[(r, new)] = a[(r, old)];
            }
            bp.row_mut(new).copy_from_slice(b.row(old));
        }
        let c = matmul_sorted(&a, &b);
        let cp = matmul_sorted(&ap, &bp);
        assert_eq!(c, cp, "bit-exact equality required");
    }
}
