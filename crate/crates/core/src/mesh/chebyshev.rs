//! Chebyshev spectral filtering on mesh graphs, plus the row-gather op used
//! for vertex pooling.
//!
//! Features are batched as `[batch * |V|, F]`. The basis matrix
//! `Z = [T_0 x | T_1 x | ... | T_{K-1} x]` has shape `[batch * |V|, K * F]`
//! and the filter output is `Z W` with `W` laid out `[K * F_in, F_out]`,
//! i.e. row `k * F_in + j`, column `i` holds `(theta_{j,i})_k`.

use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2};

use super::{CsrMatrix, MeshTopology};
use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

/// `dst_block[r] += alpha * sum_j L[i, j] src_block[b*|V| + j]` over all rows.
#[inline]
fn sparse_accumulate(
    lap: &CsrMatrix,
    data: &mut [f64],
    stride: usize,
    rows: usize,
    src_col: usize,
    dst_col: usize,
    width: usize,
    alpha: f64,
) {
    let v = lap.dim();
    for r in 0..rows {
        let base = (r / v) * v;
        let i = r % v;
        for (j, w) in lap.row(i) {
            let w = alpha * w;
            let src = (base + j) * stride + src_col;
            let dst = r * stride + dst_col;
            for c in 0..width {
                let value = data[src + c];
                data[dst + c] += w * value;
            }
        }
    }
}

/// Chebyshev basis `[T_0(L) x | ... | T_{K-1}(L) x]` via the three-term
/// recurrence with sparse products.
pub fn chebyshev_basis(lap: &CsrMatrix, x: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    assert!(k >= 1, "Chebyshev order must be at least 1");
    let (rows, f) = x.dim();
    assert_eq!(rows % lap.dim(), 0, "row count is not a multiple of |V|");
    let stride = k * f;
    let mut z = Array2::<f64>::zeros((rows, stride));
    z.slice_mut(s![.., 0..f]).assign(&x);
    let data = z.as_slice_mut().expect("standard layout");
    if k > 1 {
        sparse_accumulate(lap, data, stride, rows, 0, f, f, 1.0);
    }
    for order in 2..k {
        sparse_accumulate(lap, data, stride, rows, (order - 1) * f, order * f, f, 2.0);
        for r in 0..rows {
            let row = &mut data[r * stride..(r + 1) * stride];
            for c in 0..f {
                row[order * f + c] -= row[(order - 2) * f + c];
            }
        }
    }
    z
}

/// Adjoint of [`chebyshev_basis`]: maps `dL/dZ` to `dL/dx` for symmetric `L`.
pub fn chebyshev_basis_adjoint(lap: &CsrMatrix, dz: &Array2<f64>, k: usize, f: usize) -> Array2<f64> {
    let rows = dz.nrows();
    let stride = k * f;
    assert_eq!(dz.ncols(), stride);
    let mut acc = dz.as_standard_layout().into_owned();
    let data = acc.as_slice_mut().expect("standard layout");
    for order in (2..k).rev() {
        sparse_accumulate(lap, data, stride, rows, order * f, (order - 1) * f, f, 2.0);
        for r in 0..rows {
            let row = &mut data[r * stride..(r + 1) * stride];
            for c in 0..f {
                row[(order - 2) * f + c] -= row[order * f + c];
            }
        }
    }
    if k > 1 {
        sparse_accumulate(lap, data, stride, rows, f, 0, f, 1.0);
    }
    acc.slice(s![.., 0..f]).to_owned()
}

/// `y_i = sum_j sum_k (theta_{j,i})_k T_k(L~) x_j` on a single mesh.
///
/// `theta` has shape `[K, F_in, F_out]`.
pub fn cheb_filter(
    topology: &MeshTopology,
    x: ArrayView2<'_, f64>,
    theta: &Array3<f64>,
) -> Result<Array2<f64>> {
    let (k, f_in, f_out) = theta.dim();
    if k == 0 {
        return Err(Error::DimensionMismatch("Chebyshev order K must be >= 1".into()));
    }
    if x.nrows() != topology.vertex_count() || x.ncols() != f_in {
        return Err(Error::DimensionMismatch(format!(
            "features {:?} vs |V| = {}, F_in = {}",
            x.dim(),
            topology.vertex_count(),
            f_in
        )));
    }
    let z = chebyshev_basis(&topology.scale_laplacian(), x, k);
    let w = theta
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((k * f_in, f_out))
        .expect("contiguous");
    Ok(z.dot(&w))
}

/// Batched differentiable Chebyshev convolution (no bias).
///
/// `x` is `[batch * |V|, F_in]`, `weight` is `[K * F_in, F_out]`.
pub fn cheb_conv(tape: &Tape, lap: &Arc<CsrMatrix>, x: Var, weight: Var, k: usize) -> Var {
    let f_in = tape.shape(x).1;
    assert_eq!(tape.shape(weight).0, k * f_in, "weight rows must be K * F_in");
    let z = chebyshev_basis(lap, tape.value(x).view(), k);
    let value = z.dot(&*tape.value(weight));
    let lap = Arc::clone(lap);
    tape.custom(
        &[x, weight],
        value,
        Box::new(move |c| {
            let dx = c.needs[0].then(|| {
                let dz = c.grad.dot(&c.inputs[1].t());
                chebyshev_basis_adjoint(&lap, &dz, k, f_in)
            });
            let dw = c.needs[1].then(|| z.t().dot(c.grad));
            vec![dx, dw]
        }),
    )
}

/// Batched row gather: output row `b * index.len() + i` is input row
/// `b * rows_in + index[i]`. Used for both down- and up-transfer between
/// simplification levels.
pub fn gather_rows(tape: &Tape, x: Var, index: &Arc<Vec<usize>>, rows_in: usize) -> Var {
    let value = {
        let xv = tape.value(x);
        let (rows, f) = xv.dim();
        assert_eq!(rows % rows_in, 0, "row count is not a multiple of the level size");
        let batch = rows / rows_in;
        let mut out = Array2::zeros((batch * index.len(), f));
        for b in 0..batch {
            for (i, &src) in index.iter().enumerate() {
                out.row_mut(b * index.len() + i)
                    .assign(&xv.row(b * rows_in + src));
            }
        }
        out
    };
    let index = Arc::clone(index);
    tape.custom(
        &[x],
        value,
        Box::new(move |c| {
            let mut g = Array2::zeros(c.inputs[0].dim());
            let batch = c.grad.nrows() / index.len();
            for b in 0..batch {
                for (i, &src) in index.iter().enumerate() {
                    let mut row = g.row_mut(b * rows_in + src);
                    row += &c.grad.row(b * index.len() + i);
                }
            }
            vec![Some(g)]
        }),
    )
}
