//! Small dense helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Row = RowDVector<f64>;

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn row_sums(m: &Mat) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).sum())
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Inverse of a square matrix, reporting `what` when it is singular.
pub fn inverse(m: &Mat, what: &str) -> Result<Mat> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::SingularResolvent(what.to_string()))
}

/// Solves `x A = b` for a row vector `x`.
pub fn solve_left(a: &Mat, b: &Row, what: &str) -> Result<Row> {
    let lu = a.transpose().lu();
    let x = lu
        .solve(&b.transpose())
        .ok_or_else(|| Error::SingularSystem(what.to_string()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(what.to_string()));
    }
    Ok(x.transpose())
}

/// Solves `x A' = b'` where `A'` is `A` with its last column replaced by
/// `col` and `b'` is `b` with its last entry replaced by `value`.
///
/// This is how every "null vector plus one scalar constraint" system in the
/// crate is closed: the columns of a generator are linearly dependent, so
/// dropping the last one loses nothing.
pub fn solve_left_replacing_last(
    a: &Mat,
    b: &Row,
    col: &DVector<f64>,
    value: f64,
    what: &str,
) -> Result<Row> {
    let n = a.nrows();
    let mut aa = a.clone();
    aa.set_column(n - 1, col);
    let mut bb = b.clone();
    bb[n - 1] = value;
    solve_left(&aa, &bb, what)
}

/// Stationary row vector of a generator (or of `P - I` for a stochastic P):
/// `x G = 0`, `x e = 1`.
pub fn stationary_vector(generator: &Mat, what: &str) -> Result<Row> {
    let n = generator.nrows();
    solve_left_replacing_last(generator, &Row::zeros(n), &ones(n), 1.0, what)
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Copies a matrix into a row-major flat buffer.
pub fn to_row_major(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

/// `out += a * b` on row-major buffers; `a` is `r x k`, `b` is `k x c`.
#[inline]
pub fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += s * a` elementwise.
#[inline]
pub fn axpy(out: &mut [f64], s: f64, a: &[f64]) {
    for (o, &x) in out.iter_mut().zip(a) {
        *o += s * x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_two_state() {
        let g = mat_from_rows(&[vec![-0.1, 0.1], vec![0.2, -0.2]]).unwrap();
        let pi = stationary_vector(&g, "pi").unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gemm_matches_nalgebra() {
        let a = mat_from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]).unwrap();
        let b = mat_from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, -0.6]]).unwrap();
        let mut out = vec![0.0; 4];
        gemm_acc(&mut out, &to_row_major(&a), &to_row_major(&b), 2, 3, 2);
        let expect = to_row_major(&(&a * &b));
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_inverse_is_reported() {
        let m = mat_from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(inverse(&m, "x"), Err(Error::SingularResolvent(_))));
    }
}
