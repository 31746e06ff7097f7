//! Raw buffer kernels shared by the tape operations.

/// `c (+)= a · b` for an `m×k` by `k×n` product. Strides are `(row, col)` in
/// elements, so transposed operands are expressed without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Whether `small` broadcasts into `big` (right-aligned, extents equal or 1).
pub(crate) fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let offset = big.len() - small.len();
    small.iter().enumerate().all(|(i, &s)| s == 1 || s == big[offset + i])
}

/// Calls `f(i, j)` for every flat index `i` of `big` with `j` the matching
/// flat index of the broadcast operand `small`.
pub(crate) fn for_each_broadcast(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = big.iter().product();
    let small_len: usize = small.iter().product();
    if small_len == total {
        (0..total).for_each(|i| f(i, i));
        return;
    }
    if small_len == 1 {
        (0..total).for_each(|i| f(i, 0));
        return;
    }
    let rank = big.len();
    let offset = rank - small.len();
    let mut padded = vec![1usize; rank];
    padded[offset..].copy_from_slice(small);

    // Split off the longest trailing run that is either copied
    // (equal extents) or broadcast (small extent 1) as a whole.
    let copy_run = padded[rank - 1] == big[rank - 1];
    let mut split = rank;
    let mut run = 1usize;
    while split > 0 {
        let d = split - 1;
        let same = padded[d] == big[d];
        let bcast = padded[d] == 1;
        if (copy_run && same) || (!copy_run && bcast) {
            run *= big[d];
            split -= 1;
        } else {
            break;
        }
    }
    let step = if copy_run { run } else { 1 };

    let mut strides = vec![0usize; split];
    let mut acc = step;
    for d in (0..split).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let mut counter = vec![0usize; split];
    let mut j = 0usize;
    let mut i = 0usize;
    while i < total {
        if copy_run {
            for r in 0..run {
                f(i + r, j + r);
            }
        } else {
            for r in 0..run {
                f(i + r, j);
            }
        }
        i += run;
        for d in (0..split).rev() {
            counter[d] += 1;
            j += strides[d];
            if counter[d] < big[d] {
                break;
            }
            j -= strides[d] * big[d];
            counter[d] = 0;
        }
    }
}

/// Source index (into the input) of every element of the permuted output.
pub(crate) fn permute_sources(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
