//! Dense linear algebra and statistics kernels. All accumulation is f64.

mod expm;
mod linalg;
mod stats;

pub use expm::{expm, expm_frechet};
pub use linalg::{
    column_means, column_means_sorted, covariance, cross_covariance, frobenius, gram_deviation,
    modified_gram_schmidt, solve, sym_eig, EigenDecomp, SymMatrix,
};
pub use stats::{circular_mean, ecdf_eval, ecdf_fit, ecdf_inv, pearson, wrap, Ecdf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Haar-distributed orthonormal d×q frame: a seeded Gaussian matrix run
/// through modified Gram–Schmidt.
pub fn haar_frame<R: Rng>(d: usize, q: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let mut a = Array2::from_shape_fn((d, q), |_| rng.sample::<f64, _>(StandardNormal));
        if modified_gram_schmidt(&mut a).is_ok() {
            return a;
        }
    }
}
