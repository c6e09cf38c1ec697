//! Matrix exponential by scaling and squaring with a degree-13 Padé
//! approximant, plus its Fréchet derivative.

use ndarray::{s, Array2};

use super::linalg::solve;
use crate::error::Result;

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &Array2<f64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn expm(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);
    let b = &PADE13;
    let ident = Array2::<f64>::eye(n);
    let a2 = a.dot(&a);
    let a4 = a2.dot(&a2);
    let a6 = a4.dot(&a2);

    let u_inner = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_tail = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = a.dot(&(a6.dot(&u_inner) + u_tail));
    let v_inner = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = a6.dot(&v_inner) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let mut r = solve(&(&v - &u), &(&v + &u))?;
    for _ in 0..squarings {
        r = r.dot(&r);
    }
    Ok(r)
}

/// Fréchet derivative `L(A, E)` of the exponential, read off the upper-right
/// block of `exp([[A, E], [0, A]])`.
pub fn expm_frechet(a: &Array2<f64>, e: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut big = Array2::<f64>::zeros((2 * n, 2 * n));
    big.slice_mut(s![..n, ..n]).assign(a);
    big.slice_mut(s![n.., n..]).assign(a);
    big.slice_mut(s![..n, n..]).assign(e);
    let ex = expm(&big)?;
    Ok(ex.slice(s![..n, n..]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::{frobenius, gram_deviation};
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn exp_of_zero_is_identity() {
        let z = Array2::<f64>::zeros((4, 4));
        assert_eq!(expm(&z).unwrap(), Array2::<f64>::eye(4));
    }

    #[test]
    fn exp_of_planar_rotation_generator() {
        let t = 2.7f64;
        let a = ndarray::array![[0.0, -t], [t, 0.0]];
        let r = expm(&a).unwrap();
        let want = ndarray::array![[t.cos(), -t.sin()], [t.sin(), t.cos()]];
        assert!(frobenius(&(&r - &want).view()) < 1e-13);
    }

    #[test]
    fn exp_of_diagonal() {
        let a = ndarray::array![[1.5, 0.0], [0.0, -20.0]];
        let r = expm(&a).unwrap();
        assert!((r[[0, 0]] - 1.5f64.exp()).abs() < 1e-13);
        assert!((r[[1, 1]] / (-20.0f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp_of_skew_is_orthogonal() {
        let mut rng = stream(1, 0);
        let mut a = Array2::<f64>::zeros((10, 10));
        for i in 0..10 {
            for j in (i + 1)..10 {
                let v = 3.0 * (rng.random::<f64>() - 0.5);
                a[[i, j]] = v;
                a[[j, i]] = -v;
            }
        }
        let r = expm(&a).unwrap();
        assert!(gram_deviation(&r.view()) < 1e-12);
    }

    #[test]
    fn frechet_matches_finite_difference() {
        let mut rng = stream(2, 0);
        let a = Array2::from_shape_fn((5, 5), |_| rng.random::<f64>() - 0.5);
        let e = Array2::from_shape_fn((5, 5), |_| rng.random::<f64>() - 0.5);
        let l = expm_frechet(&a, &e).unwrap();
        let h = 1e-6;
        let fd = (expm(&(&a + &(&e * h))).unwrap() - expm(&(&a - &(&e * h))).unwrap()) / (2.0 * h);
        assert!(frobenius(&(&l - &fd).view()) < 1e-8);
    }
}
