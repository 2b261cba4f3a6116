//! Shape helpers and raw loops shared by forward and backward passes.

use crate::scalar::Scalar;

/// Numpy-style broadcast: shapes are right-aligned and each dimension pair
/// must be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, with 0 on broadcast axes.
fn bstrides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + r - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
pub fn for_each_bcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == out && out.ends_with(b) {
        (0..n).for_each(|i| f(i, i, i % nb));
        return;
    }
    if b == out && out.ends_with(a) {
        (0..n).for_each(|i| f(i, i % na, i));
        return;
    }
    let (dims, sa, sb) = coalesce(out, &bstrides(a, out), &bstrides(b, out));
    let r = dims.len();
    let inner = dims[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        // Advance the outer (all but last) coalesced dimensions.
        let mut d = r - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < dims[d] {
                break;
            }
            ia -= sa[d] * dims[d];
            ib -= sb[d] * dims[d];
            idx[d] = 0;
        }
    }
}

/// Merges adjacent axes that both operands traverse contiguously.
fn coalesce(out: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut dims: Vec<usize> = Vec::with_capacity(out.len());
    let mut na: Vec<usize> = Vec::with_capacity(out.len());
    let mut nb: Vec<usize> = Vec::with_capacity(out.len());
    for i in 0..out.len() {
        if out[i] == 1 {
            continue;
        }
        if let Some(last) = dims.len().checked_sub(1) {
            if na[last] == sa[i] * out[i] && nb[last] == sb[i] * out[i] {
                dims[last] *= out[i];
                na[last] = sa[i];
                nb[last] = sb[i];
                continue;
            }
        }
        dims.push(out[i]);
        na.push(sa[i]);
        nb.push(sb[i]);
    }
    if dims.is_empty() {
        return (vec![1], vec![0], vec![0]);
    }
    (dims, na, nb)
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output offset of `permute(perm)`, the matching input offset.
pub fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let r = shape.len();
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    if n == 0 {
        return map;
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// `(outer, len, inner)` split of `shape` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                out[at(j)] /= s;
            }
        }
    }
    out
}

/// Gathers zero-padded patches: row `(b, h, w)`, column `(dy, dx, c)`.
pub fn im2col<T: Scalar>(
    x: &[T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let kc = kh * kw * c;
    let mut cols = vec![T::zero(); b * h * w * kc];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * kc;
                for dy in 0..kh {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (dy * kw + dx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let kc = kh * kw * c;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * kc;
                for dy in 0..kh {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dxk in 0..kw {
                        let sx = xx as isize + dxk as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (dy * kw + dxk) * c;
                        for ci in 0..c {
                            dx[dst + ci] += cols[src + ci];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 1, 5], &[4, 2, 3, 5]), Some(vec![4, 2, 3, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn general_broadcast_walk_matches_index_math() {
        let a = [2, 1, 3];
        let b = [1, 4, 1];
        let out = broadcast_shape(&a, &b).unwrap();
        let mut seen = Vec::new();
        for_each_bcast(&a, &b, &out, |o, ia, ib| seen.push((o, ia, ib)));
        for (o, ia, ib) in seen {
            let (i, j, k) = (o / 12, (o / 3) % 4, o % 3);
            assert_eq!(ia, i * 3 + k);
            assert_eq!(ib, j);
        }
    }

    #[test]
    fn permute_map_transposes() {
        let map = permute_map(&[2, 3], &[1, 0]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }
}
