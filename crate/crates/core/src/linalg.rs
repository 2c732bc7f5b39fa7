//! Dense kernels: strided GEMM, Householder least squares, symmetric
//! eigendecomposition (tridiagonal reduction + implicit QL).

use crate::error::{Error, Result};

/// Strided matrix view: (buffer, offset, row stride, column stride).
pub type View<'a> = (&'a [f64], usize, isize, isize);
pub type ViewMut<'a> = (&'a mut [f64], usize, isize, isize);

fn last_index(off: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return off;
    }
    let r = (rows as isize - 1) * rs;
    let c = (cols as isize - 1) * cs;
    (off as isize + r.max(0) + c.max(0)) as usize
}

/// `c <- alpha * a(m x k) * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    let (abuf, aoff, rsa, csa) = a;
    let (bbuf, boff, rsb, csb) = b;
    let (cbuf, coff, rsc, csc) = c;
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(coff, m, n, rsc, csc) < cbuf.len(), "gemm: c out of bounds");
    if k > 0 {
        assert!(last_index(aoff, m, k, rsa, csa) < abuf.len(), "gemm: a out of bounds");
        assert!(last_index(boff, k, n, rsb, csb) < bbuf.len(), "gemm: b out of bounds");
    }
    // SAFETY: every index touched by dgemm lies within the bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            abuf.as_ptr().add(aoff),
            rsa,
            csa,
            bbuf.as_ptr().add(boff),
            rsb,
            csb,
            beta,
            cbuf.as_mut_ptr().add(coff),
            rsc,
            csc,
        );
    }
}

/// Least-squares solution of `a x = b` for a tall `rows x cols` matrix by
/// Householder QR. Fails when `a` is numerically rank deficient.
pub fn lstsq_qr(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Result<Vec<f64>> {
    if rows < cols {
        return Err(Error::Singular(format!("{rows} equations for {cols} unknowns")));
    }
    let mut r = a.to_vec();
    let mut y = b.to_vec();
    let mut diag_scale = 0.0f64;
    for j in 0..cols {
        let mut norm = 0.0;
        for i in j..rows {
            norm += r[i * cols + j] * r[i * cols + j];
        }
        let norm = norm.sqrt();
        diag_scale = diag_scale.max(norm);
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[j * cols + j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..rows).map(|i| r[i * cols + j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in j..cols {
            let dot: f64 = (j..rows).map(|i| v[i - j] * r[i * cols + c]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                r[i * cols + c] -= f * v[i - j];
            }
        }
        let dot: f64 = (j..rows).map(|i| v[i - j] * y[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for i in j..rows {
            y[i] -= f * v[i - j];
        }
    }
    let tol = diag_scale * 1e-12 * (rows.max(cols) as f64);
    let mut x = vec![0.0; cols];
    for j in (0..cols).rev() {
        let d = r[j * cols + j];
        if d.abs() <= tol {
            return Err(Error::Singular(format!(
                "rank deficient at column {j}; use a positive ridge strength"
            )));
        }
        let mut s = y[j];
        for c in j + 1..cols {
            s -= r[j * cols + c] * x[c];
        }
        x[j] = s / d;
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric `n x n` matrix.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// rows of the second vector (row `i` is the vector for value `i`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok((vec![], vec![]));
    }
    // Householder tridiagonalization followed by implicit QL (tred2/tql2).
    let mut z: Vec<Vec<f64>> = (0..n).map(|i| a[i * n..(i + 1) * n].to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut z, &mut d, &mut e);
    tql2(&mut z, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &col in &order {
        for row in z.iter() {
            vectors.push(row[col]);
        }
    }
    Ok((values, vectors))
}

fn tred2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn tql2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 200 {
                    return Err(Error::Singular("eigen iteration did not converge".into()));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2,3],[4,5,6]]; a^T a via strided view
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0; 9];
        gemm(3, 2, 3, 1.0, (&a, 0, 1, 3), (&a, 0, 3, 1), 0.0, (&mut c, 0, 3, 1));
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn qr_solves_square_and_tall() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let x = lstsq_qr(&a, 2, 2, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        let a = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let x = lstsq_qr(&a, 3, 2, &[1.0, 2.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        let sing = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(lstsq_qr(&sing, 2, 2, &[1.0, 2.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn eigen_diag_and_rotation() {
        let (vals, vecs) = symmetric_eigen(&[1.0, 0.0, 0.0, 2.0], 2).unwrap();
        assert!((vals[0] - 2.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        assert!((vecs[1].abs() - 1.0).abs() < 1e-14);
        let (vals, _) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
    }
}
