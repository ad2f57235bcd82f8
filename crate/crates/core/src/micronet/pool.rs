use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Argmax bookkeeping for [`set_maxpool`]'s backward pass.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    in_rows: usize,
    /// Absolute input row of the winner, per (group, channel).
    argmax: Vec<usize>,
    cols: usize,
}

/// Channel-wise max over consecutive row groups. `group_sizes` partitions the
/// rows of `x` in order; each group yields one output row.
pub fn set_maxpool(x: &Tensor2, group_sizes: &[usize]) -> Result<(Tensor2, MaxPoolCache)> {
    let total: usize = group_sizes.iter().sum();
    if total != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "groups cover {total} rows, input has {}",
            x.rows()
        )));
    }
    let cols = x.cols();
    let mut out = Tensor2::zeros(group_sizes.len(), cols);
    let mut argmax = vec![0usize; group_sizes.len() * cols];
    let mut start = 0;
    for (g, &size) in group_sizes.iter().enumerate() {
        if size == 0 {
            return Err(Error::EmptyGroup(g));
        }
        let o = out.row_mut(g);
        o.copy_from_slice(x.row(start));
        let am = &mut argmax[g * cols..(g + 1) * cols];
        am.iter_mut().for_each(|a| *a = start);
        for r in start + 1..start + size {
            for (c, &v) in x.row(r).iter().enumerate() {
                // strict: first index wins ties
                if v > o[c] {
                    o[c] = v;
                    am[c] = r;
                }
            }
        }
        start += size;
    }
    Ok((
        out,
        MaxPoolCache {
            in_rows: x.rows(),
            argmax,
            cols,
        },
    ))
}

/// Routes each output gradient to the row that won that channel.
pub fn set_maxpool_backward(cache: &MaxPoolCache, grad_out: &Tensor2) -> Tensor2 {
    let mut grad_in = Tensor2::zeros(cache.in_rows, cache.cols);
    for g in 0..grad_out.rows() {
        for (c, &go) in grad_out.row(g).iter().enumerate() {
            let r = cache.argmax[g * cache.cols + c];
            let cur = grad_in.get(r, c);
            grad_in.set(r, c, cur + go);
        }
    }
    grad_in
}
