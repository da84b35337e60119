//! Trailing-dimension broadcasting: shapes are right-aligned, and a dimension
//! of size 1 (or a missing leading dimension) stretches to match the other.

use crate::tensor::strides_of;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        if i + s.len() >= rank {
            s[i + s.len() - rank]
        } else {
            1
        }
    };
    (0..rank)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            match (da, db) {
                _ if da == db => Some(da),
                (1, _) => Some(db),
                (_, 1) => Some(da),
                _ => None,
            }
        })
        .collect()
}

/// Strides of `shape` expressed in the index space of `out`, zero on broadcast axes.
pub(crate) fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let strides = strides_of(shape);
    (0..out.len())
        .map(|i| {
            if i < offset || (shape[i - offset] == 1 && out[i] != 1) {
                0
            } else {
                strides[i - offset]
            }
        })
        .collect()
}

/// Visits every element of `out` in row-major order together with the matching
/// offsets into two broadcast operands.
pub(crate) fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut i) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(i, oa + j * ia, ob + j * ib);
            i += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}
