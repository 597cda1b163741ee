//! Raw numeric kernels shared by the tape's forward and backward passes.
//!
//! Everything here is a plain sequential loop over row-major buffers; the
//! tape owns all bookkeeping. Loops are written index-decoded per element,
//! which keeps broadcasting obviously correct at the tensor sizes this crate
//! targets.

use super::ShapeError;
use crate::scalar::Scalar;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Shape produced by broadcasting `a` against `b` under the usual
/// trailing-alignment rules (axes of size 1 stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, ShapeError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(ShapeError::BroadcastMismatch {
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Strides of `shape` when broadcast up to `out_shape`: zero on stretched
/// axes, so that dotting with an output coordinate gives the input offset.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out_shape.len() - shape.len();
    let mut s = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 && out_shape[pad + i] != 1 { 0 } else { own[i] };
    }
    s
}

/// Offset into a broadcast input for the `flat`-th element of the output.
pub fn broadcast_offset(flat: usize, out_shape: &[usize], in_strides: &[usize]) -> usize {
    let mut rem = flat;
    let mut off = 0;
    for i in (0..out_shape.len()).rev() {
        let c = rem % out_shape[i];
        rem /= out_shape[i];
        off += c * in_strides[i];
    }
    off
}

/// Batched matrix product geometry: both inputs are stacks of matrices whose
/// leading axes broadcast against each other.
pub struct MatmulGeom {
    pub lead: Vec<usize>,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub a_lead_strides: Vec<usize>,
    pub b_lead_strides: Vec<usize>,
}

pub fn matmul_geom(a: &[usize], b: &[usize]) -> Result<MatmulGeom, ShapeError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(ShapeError::RankTooLow {
            rank: a.len().min(b.len()),
            min: 2,
        });
    }
    let (p, qa) = (a[a.len() - 2], a[a.len() - 1]);
    let (qb, r) = (b[b.len() - 2], b[b.len() - 1]);
    if qa != qb {
        return Err(ShapeError::MatmulMismatch {
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    let a_lead = &a[..a.len() - 2];
    let b_lead = &b[..b.len() - 2];
    let lead = broadcast_shape(a_lead, b_lead).map_err(|_| ShapeError::MatmulMismatch {
        left: a.to_vec(),
        right: b.to_vec(),
    })?;
    let a_lead_strides = scaled_lead_strides(a_lead, &lead, p * qa);
    let b_lead_strides = scaled_lead_strides(b_lead, &lead, qb * r);
    Ok(MatmulGeom {
        lead,
        p,
        q: qa,
        r,
        a_lead_strides,
        b_lead_strides,
    })
}

fn scaled_lead_strides(own_lead: &[usize], lead: &[usize], mat_size: usize) -> Vec<usize> {
    let mut s = broadcast_strides(own_lead, lead);
    for v in &mut s {
        *v *= mat_size;
    }
    s
}

pub fn lead_offset(flat_batch: usize, lead: &[usize], lead_strides: &[usize]) -> usize {
    let mut rem = flat_batch;
    let mut off = 0;
    for i in (0..lead.len()).rev() {
        let c = rem % lead[i];
        rem /= lead[i];
        off += c * lead_strides[i];
    }
    off
}

pub fn matmul_forward<S: Scalar>(a: &[S], b: &[S], g: &MatmulGeom) -> Vec<S> {
    let batches = numel(&g.lead);
    let mut out = vec![S::zero(); batches * g.p * g.r];
    for batch in 0..batches {
        let ao = lead_offset(batch, &g.lead, &g.a_lead_strides);
        let bo = lead_offset(batch, &g.lead, &g.b_lead_strides);
        let oo = batch * g.p * g.r;
        for i in 0..g.p {
            for k in 0..g.q {
                let av = a[ao + i * g.q + k];
                if av == S::zero() {
                    continue;
                }
                for j in 0..g.r {
                    out[oo + i * g.r + j] += av * b[bo + k * g.r + j];
                }
            }
        }
    }
    out
}

/// Accumulates matmul input gradients. Broadcast leading axes of an input
/// revisit the same offsets, which performs the gradient reduction in place.
pub fn matmul_backward<S: Scalar>(
    grad: &[S],
    a: &[S],
    b: &[S],
    g: &MatmulGeom,
    da: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let batches = numel(&g.lead);
    if let Some(da) = da {
        for batch in 0..batches {
            let ao = lead_offset(batch, &g.lead, &g.a_lead_strides);
            let bo = lead_offset(batch, &g.lead, &g.b_lead_strides);
            let go = batch * g.p * g.r;
            for i in 0..g.p {
                for k in 0..g.q {
                    let mut acc = S::zero();
                    for j in 0..g.r {
                        acc += grad[go + i * g.r + j] * b[bo + k * g.r + j];
                    }
                    da[ao + i * g.q + k] += acc;
                }
            }
        }
    }
    if let Some(db) = db {
        for batch in 0..batches {
            let ao = lead_offset(batch, &g.lead, &g.a_lead_strides);
            let bo = lead_offset(batch, &g.lead, &g.b_lead_strides);
            let go = batch * g.p * g.r;
            for k in 0..g.q {
                for j in 0..g.r {
                    let mut acc = S::zero();
                    for i in 0..g.p {
                        acc += a[ao + i * g.q + k] * grad[go + i * g.r + j];
                    }
                    db[bo + k * g.r + j] += acc;
                }
            }
        }
    }
}

/// 1-D cross-correlation with same padding: input `[n, c_in, len]`, kernel
/// `[c_out, c_in, width]` (odd width), bias `[c_out]`.
pub fn conv1d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    n: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    width: usize,
) -> Vec<S> {
    let pad = width / 2;
    let mut out = vec![S::zero(); n * c_out * len];
    for s in 0..n {
        for co in 0..c_out {
            for l in 0..len {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for t in 0..width {
                        let src = l + t;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        acc += x[(s * c_in + ci) * len + (src - pad)]
                            * w[(co * c_in + ci) * width + t];
                    }
                }
                out[(s * c_out + co) * len + l] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<S: Scalar>(
    grad: &[S],
    x: &[S],
    w: &[S],
    n: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    width: usize,
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let pad = width / 2;
    if let Some(dx) = dx {
        for s in 0..n {
            for co in 0..c_out {
                for l in 0..len {
                    let g = grad[(s * c_out + co) * len + l];
                    for ci in 0..c_in {
                        for t in 0..width {
                            let src = l + t;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            dx[(s * c_in + ci) * len + (src - pad)] +=
                                g * w[(co * c_in + ci) * width + t];
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for s in 0..n {
            for co in 0..c_out {
                for l in 0..len {
                    let g = grad[(s * c_out + co) * len + l];
                    for ci in 0..c_in {
                        for t in 0..width {
                            let src = l + t;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            dw[(co * c_in + ci) * width + t] +=
                                g * x[(s * c_in + ci) * len + (src - pad)];
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for s in 0..n {
            for co in 0..c_out {
                for l in 0..len {
                    db[co] += grad[(s * c_out + co) * len + l];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_stretches_ones() {
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn matmul_matches_a_double_loop() {
        // 2x3 times 3x2, checked against by-hand dot products.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let g = matmul_geom(&[2, 3], &[3, 2]).unwrap();
        let out = matmul_forward(&a, &b, &g);
        assert_eq!(out, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn batched_matmul_broadcasts_a_plain_matrix_rhs() {
        // [2,1,2] x [2,2]: each batch multiplies the same rhs.
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let g = matmul_geom(&[2, 1, 2], &[2, 2]).unwrap();
        let out = matmul_forward(&a, &b, &g);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_box_filter_spreads_an_impulse() {
        let x = [0.0, 0.0, 1.0, 0.0, 0.0];
        let w = [1.0, 1.0, 1.0];
        let b = [0.0];
        let out = conv1d_forward(&x, &w, &b, 1, 1, 5, 1, 3);
        assert_eq!(out, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }
}
