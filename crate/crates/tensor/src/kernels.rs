//! Plain-loop f32 kernels. Every loop runs in a fixed order so results are
//! bitwise reproducible.

use crate::error::{Result, TensorError};

/// Output spatial size of a stride-1 convolution.
pub(crate) fn conv_out(size: usize, k: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v + 1)
}

/// Range of output positions `i` for which `i + a - pad` lands inside `[0, size)`.
#[inline]
fn valid_range(out: usize, size: usize, a: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(a);
    let hi = (size + pad).saturating_sub(a).min(out);
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(x: &[usize], w: &[usize], pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let k = w[2];
        let (ho, wo) = match (conv_out(x[2], k, pad), conv_out(x[3], k, pad)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    reason: format!("kernel {k} too large for input {x:?} with padding {pad}"),
                })
            }
        };
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            k,
            pad,
            ho,
            wo,
        })
    }

    pub fn x_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn w_shape(&self) -> Vec<usize> {
        vec![self.o, self.c, self.k, self.k]
    }

    pub fn y_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }
}

pub(crate) fn conv2d(d: &ConvDims, x: &[f32], w: &[f32]) -> Vec<f32> {
    let mut y = vec![0f32; d.n * d.o * d.ho * d.wo];
    for n in 0..d.n {
        for o in 0..d.o {
            let yb = (n * d.o + o) * d.ho * d.wo;
            for c in 0..d.c {
                let xb = (n * d.c + c) * d.h * d.w;
                for a in 0..d.k {
                    let (i0, i1) = valid_range(d.ho, d.h, a, d.pad);
                    for b in 0..d.k {
                        let wv = w[((o * d.c + c) * d.k + a) * d.k + b];
                        let (j0, j1) = valid_range(d.wo, d.w, b, d.pad);
                        for i in i0..i1 {
                            let xr = xb + (i + a - d.pad) * d.w + b;
                            let yr = yb + i * d.wo;
                            for j in j0..j1 {
                                y[yr + j] += wv * x[xr + j - d.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_input_grad(d: &ConvDims, dy: &[f32], w: &[f32]) -> Vec<f32> {
    let mut dx = vec![0f32; d.n * d.c * d.h * d.w];
    for n in 0..d.n {
        for o in 0..d.o {
            let yb = (n * d.o + o) * d.ho * d.wo;
            for c in 0..d.c {
                let xb = (n * d.c + c) * d.h * d.w;
                for a in 0..d.k {
                    let (i0, i1) = valid_range(d.ho, d.h, a, d.pad);
                    for b in 0..d.k {
                        let wv = w[((o * d.c + c) * d.k + a) * d.k + b];
                        let (j0, j1) = valid_range(d.wo, d.w, b, d.pad);
                        for i in i0..i1 {
                            let xr = xb + (i + a - d.pad) * d.w + b;
                            let yr = yb + i * d.wo;
                            for j in j0..j1 {
                                dx[xr + j - d.pad] += wv * dy[yr + j];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub(crate) fn conv2d_weight_grad(d: &ConvDims, x: &[f32], dy: &[f32]) -> Vec<f32> {
    let mut dw = vec![0f32; d.o * d.c * d.k * d.k];
    for n in 0..d.n {
        for o in 0..d.o {
            let yb = (n * d.o + o) * d.ho * d.wo;
            for c in 0..d.c {
                let xb = (n * d.c + c) * d.h * d.w;
                for a in 0..d.k {
                    let (i0, i1) = valid_range(d.ho, d.h, a, d.pad);
                    for b in 0..d.k {
                        let (j0, j1) = valid_range(d.wo, d.w, b, d.pad);
                        let mut acc = 0f32;
                        for i in i0..i1 {
                            let xr = xb + (i + a - d.pad) * d.w + b;
                            let yr = yb + i * d.wo;
                            for j in j0..j1 {
                                acc += dy[yr + j] * x[xr + j - d.pad];
                            }
                        }
                        dw[((o * d.c + c) * d.k + a) * d.k + b] += acc;
                    }
                }
            }
        }
    }
    dw
}

pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn avg_pool(x: &[f32], shape: &[usize], k: usize) -> Vec<f32> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f32;
    let mut y = vec![0f32; nc * ho * wo];
    for p in 0..nc {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0f32;
                for a in 0..k {
                    for b in 0..k {
                        acc += x[(p * h + i * k + a) * w + j * k + b];
                    }
                }
                y[(p * ho + i) * wo + j] = acc * scale;
            }
        }
    }
    y
}

/// Adjoint of [`avg_pool`]: spreads each output cell uniformly over its window.
pub(crate) fn avg_pool_adjoint(dy: &[f32], in_shape: &[usize], k: usize) -> Vec<f32> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f32;
    let mut dx = vec![0f32; nc * h * w];
    for p in 0..nc {
        for i in 0..ho {
            for j in 0..wo {
                let g = dy[(p * ho + i) * wo + j] * scale;
                for a in 0..k {
                    for b in 0..k {
                        dx[(p * h + i * k + a) * w + j * k + b] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Flat input index of each window maximum; ties go to the lowest index.
pub(crate) fn max_pool_indices(x: &[f32], shape: &[usize], k: usize) -> Vec<usize> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / k, w / k);
    let mut idx = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        for i in 0..ho {
            for j in 0..wo {
                let mut best = (p * h + i * k) * w + j * k;
                for a in 0..k {
                    for b in 0..k {
                        let f = (p * h + i * k + a) * w + j * k + b;
                        if x[f] > x[best] {
                            best = f;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Right-aligned broadcast strides of `src` viewed with `dst` shape.
fn broadcast_strides(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let offset = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1usize;
    for i in (0..src.len()).rev() {
        let (s, d) = (src[i], dst[i + offset]);
        if s == d {
            strides[i + offset] = acc;
        } else if s != 1 {
            return None;
        }
        acc *= s;
    }
    Some(strides)
}

pub(crate) fn can_broadcast(src: &[usize], dst: &[usize]) -> bool {
    broadcast_strides(src, dst).is_some()
}

/// Numpy-style common shape of two operands.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Visit every destination offset paired with its source offset.
fn for_each_broadcast(src: &[usize], dst: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(src, dst).expect("shapes checked by caller");
    let n: usize = dst.iter().product();
    let rank = dst.len();
    let mut counter = vec![0usize; rank];
    let mut s = 0usize;
    for d in 0..n {
        f(d, s);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            s += strides[ax];
            if counter[ax] < dst[ax] {
                break;
            }
            s -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_to(x: &[f32], src: &[usize], dst: &[usize]) -> Vec<f32> {
    let mut out = vec![0f32; dst.iter().product()];
    for_each_broadcast(src, dst, |d, s| out[d] = x[s]);
    out
}

/// Adjoint of [`broadcast_to`]: sums `x` (shaped `src`) down to `dst`.
pub(crate) fn sum_to(x: &[f32], src: &[usize], dst: &[usize]) -> Vec<f32> {
    let mut out = vec![0f32; dst.iter().product()];
    for_each_broadcast(dst, src, |s, d| out[d] += x[s]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let d = ConvDims::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1).unwrap();
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let mut w = vec![0f32; 9];
        w[4] = 1.0;
        assert_eq!(conv2d(&d, &x, &w), x);
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x,w), dy> = <x, input_grad(dy,w)> = <w, weight_grad(x,dy)>
        let d = ConvDims::new(&[2, 3, 5, 4], &[2, 3, 3, 3], 1).unwrap();
        let x: Vec<f32> = (0..2 * 3 * 5 * 4).map(|i| ((i * 7 % 13) as f32) / 13.0 - 0.4).collect();
        let w: Vec<f32> = (0..2 * 3 * 9).map(|i| ((i * 5 % 11) as f32) / 11.0 - 0.5).collect();
        let y = conv2d(&d, &x, &w);
        let dy: Vec<f32> = (0..y.len()).map(|i| ((i * 3 % 17) as f32) / 17.0 - 0.5).collect();
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| (*p as f64) * (*q as f64)).sum::<f64>();
        let lhs = dot(&y, &dy);
        let via_x = dot(&x, &conv2d_input_grad(&d, &dy, &w));
        let via_w = dot(&w, &conv2d_weight_grad(&d, &x, &dy));
        assert!((lhs - via_x).abs() < 1e-4, "{lhs} vs {via_x}");
        assert!((lhs - via_w).abs() < 1e-4, "{lhs} vs {via_w}");
    }

    #[test]
    fn broadcast_and_sum_to() {
        let x = [1.0, 2.0];
        let b = broadcast_to(&x, &[2, 1], &[2, 3]);
        assert_eq!(b, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(sum_to(&b, &[2, 3], &[2, 1]), vec![3.0, 6.0]);
        assert_eq!(sum_to(&b, &[2, 3], &[3]), vec![3.0, 3.0, 3.0]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let x = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(max_pool_indices(&x, &[1, 1, 2, 2], 2), vec![0]);
    }
}
