use crate::error::{DiffError, Result};
use crate::tape::{GradStore, Op, Tape, Var};

/// Strided view of a row-major matrix operand.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: 1, cs: cols as isize }
    }
}

/// `c += a · b` with `a` m×k and `b` k×n; `c` is row-major m×n.
fn gemm_acc(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: the views cover m×k and k×n elements under the given strides,
    // and `c` holds m×n contiguous row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of row-major buffers, `a` m×k times `b` k×n.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, View::rows(a, k), View::rows(b, n), &mut c);
    c
}

/// `a · bᵀ` of row-major buffers, `a` m×k and `b` n×k.
pub fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, View::rows(a, k), View::transposed(b, k), &mut c);
    c
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(DiffError::InvalidArgument {
            op,
            msg: format!("expected a 2-D array, got shape {shape:?}"),
        }),
    }
}

impl Tape {
    /// Matrix product of an m×k and a k×n array.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for an m×k `a` and an n×k `b`; the usual dense layer form
    /// with weights stored output-major.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, va, ga) = self.fetch(a)?;
        let (sb, vb, gb) = self.fetch(b)?;
        let (m, k) = matrix_dims(op, &sa)?;
        let (rb, cb) = matrix_dims(op, &sb)?;
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(DiffError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        let out = if trans_b {
            matmul_nt_raw(&va, &vb, m, k, n)
        } else {
            matmul_raw(&va, &vb, m, k, n)
        };
        Ok(self.push_node(
            vec![m, n],
            out,
            Op::MatMul { a, b, trans_b, m, k, n },
            ga || gb,
        ))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        let (r, c) = matrix_dims("transpose", &sx)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = vx[i * c + j];
            }
        }
        Ok(self.push_node(vec![c, r], out, Op::Transpose { x }, gx))
    }
}

pub(crate) fn matmul_backward(
    a: Var,
    b: Var,
    trans_b: bool,
    (m, k, n): (usize, usize, usize),
    g: &[f64],
    store: &mut GradStore<'_>,
) {
    let nodes = store.nodes;
    let va = &nodes[a.0].value;
    let vb = &nodes[b.0].value;
    let dc = View::rows(g, n);
    if let Some(da) = store.slot(a) {
        // dA = dC · op(B)ᵀ
        let bt = if trans_b { View::rows(vb, k) } else { View::transposed(vb, n) };
        gemm_acc(m, n, k, dc, bt, da);
    }
    if let Some(db) = store.slot(b) {
        if trans_b {
            // B stored n×k: dB = dCᵀ · A
            gemm_acc(n, m, k, View::transposed(g, n), View::rows(va, k), db);
        } else {
            // dB = Aᵀ · dC
            gemm_acc(k, m, n, View::transposed(va, k), dc, db);
        }
    }
}

pub(crate) fn transpose_backward(x: Var, out_shape: &[usize], g: &[f64], store: &mut GradStore<'_>) {
    // out is c×r, x is r×c
    let (c, r) = (out_shape[0], out_shape[1]);
    if let Some(dx) = store.slot(x) {
        for i in 0..r {
            for j in 0..c {
                dx[i * c + j] += g[j * r + i];
            }
        }
    }
}
