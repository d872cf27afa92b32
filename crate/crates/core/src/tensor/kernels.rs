//! Raw numeric kernels shared by forward and backward passes.

use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape; broadcast axes
/// get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` in row-major order together with the
/// matching flat offsets in the two broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            base_a += sa[axis];
            base_b += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            base_a -= sa[axis] * out[axis];
            base_b -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `out += Σ_p coef(p) · mat[p]` for the `count` rows of `mat` (row length
/// `out.len()`), adding rows in index order. Four rows are fused per pass;
/// each element still sees the additions one by one in the same order.
#[inline]
fn accumulate_rows(out: &mut [f64], count: usize, coef: impl Fn(usize) -> f64, mat: &[f64]) {
    let n = out.len();
    let row = |p: usize| &mat[p * n..(p + 1) * n];
    let mut p = 0;
    while p + 4 <= count {
        let (c0, c1, c2, c3) = (coef(p), coef(p + 1), coef(p + 2), coef(p + 3));
        let (r0, r1, r2, r3) = (row(p), row(p + 1), row(p + 2), row(p + 3));
        for ((((o, &x0), &x1), &x2), &x3) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            let mut v = *o;
            v += c0 * x0;
            v += c1 * x1;
            v += c2 * x2;
            v += c3 * x3;
            *o = v;
        }
        p += 4;
    }
    while p < count {
        let c = coef(p);
        for (o, &x) in out.iter_mut().zip(row(p)) {
            *o += c * x;
        }
        p += 1;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`, accumulating over `k` in index order.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        accumulate_rows(&mut out[i * n..(i + 1) * n], k, |p| arow[p], &b[..k * n]);
    }
}

/// `da[m,k] += dout[m,n] · bᵀ`. `b` is transposed once so the inner loop
/// runs over contiguous memory.
pub(crate) fn gemm_grad_a(dout: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        accumulate_rows(&mut da[i * k..(i + 1) * k], n, |j| drow[j], &bt);
    }
}

/// `db[k,n] += aᵀ · dout`.
pub(crate) fn gemm_grad_b(a: &[f64], dout: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        accumulate_rows(&mut db[p * n..(p + 1) * n], m, |i| a[i * k + p], &dout[..m * n]);
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `permute(shape, axes)`, the flat source offset.
pub(crate) fn permute_source_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let zeros = vec![0; out_shape.len()];
    for_each_broadcast(&out_shape, &perm_strides, &zeros, |_, ia, _| offsets.push(ia));
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn broadcast_iteration_matches_naive_indexing() {
        let out = [2, 3, 4];
        let a = [3, 1];
        let b = [2, 1, 4];
        let sa = broadcast_strides(&a, &out);
        let sb = broadcast_strides(&b, &out);
        let mut seen = Vec::new();
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| seen.push((o, ia, ib)));
        assert_eq!(seen.len(), 24);
        for (o, ia, ib) in seen {
            let (i, j, k) = (o / 12, (o / 4) % 3, o % 4);
            assert_eq!(ia, j);
            assert_eq!(ib, i * 4 + k);
        }
    }

    #[test]
    fn permute_offsets_transpose() {
        // 2x3 transposed to 3x2
        assert_eq!(permute_source_offsets(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }
}
