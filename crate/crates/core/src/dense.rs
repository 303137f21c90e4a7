//! Dense column-major kernels: strided GEMM, blocked Cholesky and blocked
//! triangular solves on `nalgebra::DMatrix<f64>`.
//!
//! Everything here is single-threaded and deterministic; the blocking only
//! changes the order of floating point operations relative to a textbook
//! loop, never between runs.

use nalgebra::DMatrix;

const BLOCK: usize = 64;

/// Strided view into a column-major buffer, used to address sub-blocks and
/// transposes without copying.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn of(m: &DMatrix<f64>, transpose: bool) -> Self {
        let ld = m.nrows() as isize;
        if transpose {
            View { offset: 0, rows: m.ncols(), cols: m.nrows(), rs: ld, cs: 1 }
        } else {
            View { offset: 0, rows: m.nrows(), cols: m.ncols(), rs: 1, cs: ld }
        }
    }

    fn block(ld: usize, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        View { offset: r0 + c0 * ld, rows, cols, rs: 1, cs: ld as isize }
    }

    fn t(self) -> Self {
        View { offset: self.offset, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    /// Largest linear index touched, for bounds checking.
    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        let last = self.offset as isize
            + (self.rows as isize - 1) * self.rs
            + (self.cols as isize - 1) * self.cs;
        last as usize
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over views. `a`/`b` may not alias `c`.
fn gemm_views(alpha: f64, a: &[f64], va: View, b: &[f64], vb: View, beta: f64, c: &mut [f64], vc: View) {
    assert_eq!(va.rows, vc.rows, "gemm: row mismatch");
    assert_eq!(vb.cols, vc.cols, "gemm: col mismatch");
    assert_eq!(va.cols, vb.rows, "gemm: inner mismatch");
    if vc.rows == 0 || vc.cols == 0 {
        return;
    }
    if va.cols == 0 {
        for j in 0..vc.cols {
            for i in 0..vc.rows {
                let idx = (vc.offset as isize + i as isize * vc.rs + j as isize * vc.cs) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(va.extent() < a.len() && vb.extent() < b.len() && vc.extent() < c.len());
    // SAFETY: all three views were bounds-checked against their buffers above,
    // and `c` is a distinct mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            vc.rows,
            va.cols,
            vc.cols,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs,
            va.cs,
            b.as_ptr().add(vb.offset),
            vb.rs,
            vb.cs,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs,
            vc.cs,
        );
    }
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub fn matmul(a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool) -> DMatrix<f64> {
    let va = View::of(a, ta);
    let vb = View::of(b, tb);
    let mut c = DMatrix::zeros(va.rows, vb.cols);
    let vc = View::of(&c, false);
    gemm_views(1.0, a.as_slice(), va, b.as_slice(), vb, 0.0, c.as_mut_slice(), vc);
    c
}

/// Failure of an unjittered factorization: the pivot index that went non-positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub pivot: usize,
}

/// Lower Cholesky factor of the lower triangle of `k + shift * I`.
/// Only the lower triangle of `k` is read. The result has an exactly zero
/// upper triangle.
pub fn cholesky_lower(k: &DMatrix<f64>, shift: f64) -> Result<DMatrix<f64>, NotPositiveDefinite> {
    let n = k.nrows();
    assert_eq!(n, k.ncols(), "cholesky of a non-square matrix");
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += shift;
    }
    let buf = a.as_mut_slice();
    let ld = n;
    let mut kb = 0;
    while kb < n {
        let ke = (kb + BLOCK).min(n);
        // Diagonal block, unblocked.
        for j in kb..ke {
            let mut d = buf[j + j * ld];
            for p in kb..j {
                let v = buf[j + p * ld];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            buf[j + j * ld] = djj;
            for i in (j + 1)..ke {
                let mut s = buf[i + j * ld];
                for p in kb..j {
                    s -= buf[i + p * ld] * buf[j + p * ld];
                }
                buf[i + j * ld] = s / djj;
            }
        }
        if ke < n {
            // Panel below the diagonal block: P <- P * L_kk^{-T}, column by column.
            for p in kb..ke {
                for q in kb..p {
                    let l_pq = buf[p + q * ld];
                    if l_pq != 0.0 {
                        for i in ke..n {
                            buf[i + p * ld] -= buf[i + q * ld] * l_pq;
                        }
                    }
                }
                let inv = 1.0 / buf[p + p * ld];
                for i in ke..n {
                    buf[i + p * ld] *= inv;
                }
            }
            // Trailing update A22 -= P P^T.
            let rows = n - ke;
            let width = ke - kb;
            let panel: Vec<f64> = {
                let mut v = Vec::with_capacity(rows * width);
                for c in kb..ke {
                    v.extend_from_slice(&buf[ke + c * ld..n + c * ld]);
                }
                v
            };
            let vp = View::block(rows, 0, 0, rows, width);
            let vc = View::block(ld, ke, ke, rows, rows);
            gemm_views(-1.0, &panel, vp, &panel, vp.t(), 1.0, buf, vc);
        }
        kb = ke;
    }
    for j in 0..n {
        for i in 0..j {
            buf[i + j * ld] = 0.0;
        }
    }
    Ok(a)
}

/// Zero diagonal entry encountered in a triangular solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularTriangular {
    pub index: usize,
}

fn check_diag(l: &DMatrix<f64>) -> Result<(), SingularTriangular> {
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if d == 0.0 || !d.is_finite() {
            return Err(SingularTriangular { index: i });
        }
    }
    Ok(())
}

/// Solve `L X = B` in place for lower-triangular `L`. Only the lower triangle of `L` is read.
pub fn solve_lower_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) -> Result<(), SingularTriangular> {
    let n = l.nrows();
    assert_eq!(n, l.ncols());
    assert_eq!(n, b.nrows(), "triangular solve: shape mismatch");
    check_diag(l)?;
    let nrhs = b.ncols();
    let ls = l.as_slice();
    let mut kb = 0;
    while kb < n {
        let ke = (kb + BLOCK).min(n);
        {
            let bs = b.as_mut_slice();
            for j in 0..nrhs {
                let col = &mut bs[j * n..(j + 1) * n];
                for p in kb..ke {
                    let xp = col[p] / ls[p + p * n];
                    col[p] = xp;
                    if xp != 0.0 {
                        let lcol = &ls[p * n..(p + 1) * n];
                        for i in (p + 1)..ke {
                            col[i] -= lcol[i] * xp;
                        }
                    }
                }
            }
        }
        if ke < n {
            // B[ke.., :] -= L[ke.., kb..ke] * X[kb..ke, :]
            let xblk: Vec<f64> = {
                let bs = b.as_slice();
                let mut v = Vec::with_capacity((ke - kb) * nrhs);
                for j in 0..nrhs {
                    v.extend_from_slice(&bs[kb + j * n..ke + j * n]);
                }
                v
            };
            let vl = View::block(n, ke, kb, n - ke, ke - kb);
            let vx = View::block(ke - kb, 0, 0, ke - kb, nrhs);
            let vb = View::block(n, ke, 0, n - ke, nrhs);
            gemm_views(-1.0, ls, vl, &xblk, vx, 1.0, b.as_mut_slice(), vb);
        }
        kb = ke;
    }
    Ok(())
}

/// Solve `L^T X = B` in place for lower-triangular `L`.
pub fn solve_lower_transpose_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) -> Result<(), SingularTriangular> {
    let n = l.nrows();
    assert_eq!(n, l.ncols());
    assert_eq!(n, b.nrows(), "triangular solve: shape mismatch");
    check_diag(l)?;
    let nrhs = b.ncols();
    let ls = l.as_slice();
    let nblocks = n.div_ceil(BLOCK);
    for blk in (0..nblocks).rev() {
        let kb = blk * BLOCK;
        let ke = (kb + BLOCK).min(n);
        {
            let bs = b.as_mut_slice();
            for j in 0..nrhs {
                let col = &mut bs[j * n..(j + 1) * n];
                for p in (kb..ke).rev() {
                    let lcol = &ls[p * n..(p + 1) * n];
                    let mut s = col[p];
                    for i in (p + 1)..ke {
                        s -= lcol[i] * col[i];
                    }
                    col[p] = s / lcol[p];
                }
            }
        }
        if kb > 0 {
            // B[0..kb, :] -= L[kb..ke, 0..kb]^T * X[kb..ke, :]
            let xblk: Vec<f64> = {
                let bs = b.as_slice();
                let mut v = Vec::with_capacity((ke - kb) * nrhs);
                for j in 0..nrhs {
                    v.extend_from_slice(&bs[kb + j * n..ke + j * n]);
                }
                v
            };
            let vl = View::block(n, kb, 0, ke - kb, kb).t();
            let vx = View::block(ke - kb, 0, 0, ke - kb, nrhs);
            let vb = View::block(n, 0, 0, kb, nrhs);
            gemm_views(-1.0, ls, vl, &xblk, vx, 1.0, b.as_mut_slice(), vb);
        }
    }
    Ok(())
}

/// Per-column sum of squares: `out[j] = sum_i a[i, j]^2`.
pub fn col_sum_squares(a: &DMatrix<f64>) -> Vec<f64> {
    a.column_iter().map(|c| c.iter().map(|v| v * v).sum()).collect()
}
