//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! All matrices are row-major. Callers are responsible for shape checks;
//! these functions only assert lengths in debug builds.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`
pub(crate) fn matmul_tn_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += aip * cv;
            }
        }
    }
}

/// Geometry of a 3×3, stride-1, pad-1 convolution over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.c_in * 9
    }
}

/// Unfolds one `[c_in×h×w]` image into `[c_in·9 × h·w]` columns with zero padding.
fn im2col(img: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.hw();
    for c in 0..g.c_in {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (c * 9 + (ky * 3 + kx) as usize) * hw;
                for y in 0..h {
                    let sy = y + ky - 1;
                    for x in 0..w {
                        let sx = x + kx - 1;
                        cols[row + (y * w + x) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto a `[c_in×h×w]` image gradient (accumulating).
fn col2im_acc(cols: &[f64], g: ConvGeom, img: &mut [f64]) {
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.hw();
    for c in 0..g.c_in {
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (c * 9 + (ky * 3 + kx) as usize) * hw;
                for y in 0..h {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kx - 1;
                        if sx >= 0 && sx < w {
                            img[c * hw + (sy * w + sx) as usize] += cols[row + (y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation for a batch of images.
pub(crate) fn conv3x3_forward(
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    batch: usize,
    g: ConvGeom,
) -> Vec<f64> {
    let hw = g.hw();
    let mut out = vec![0.0; batch * g.c_out * hw];
    let mut cols = vec![0.0; g.patch() * hw];
    for b in 0..batch {
        let img = &input[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        im2col(img, g, &mut cols);
        let o = &mut out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        for (co, plane) in o.chunks_mut(hw).enumerate() {
            plane.fill(bias[co]);
        }
        matmul_acc(kernels, &cols, o, g.c_out, g.patch(), hw);
    }
    out
}

/// Accumulates gradients of a batched 3×3 convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    kernels: &[f64],
    d_out: &[f64],
    batch: usize,
    g: ConvGeom,
    mut d_input: Option<&mut [f64]>,
    mut d_kernels: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
) {
    let hw = g.hw();
    let mut cols = vec![0.0; g.patch() * hw];
    let mut d_cols = vec![0.0; g.patch() * hw];
    for b in 0..batch {
        let dy = &d_out[b * g.c_out * hw..(b + 1) * g.c_out * hw];
        if let Some(db) = d_bias.as_deref_mut() {
            for (co, plane) in dy.chunks(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
        if let Some(dk) = d_kernels.as_deref_mut() {
            let img = &input[b * g.c_in * hw..(b + 1) * g.c_in * hw];
            im2col(img, g, &mut cols);
            matmul_nt_acc(dy, &cols, dk, g.c_out, hw, g.patch());
        }
        if let Some(dx) = d_input.as_deref_mut() {
            d_cols.fill(0.0);
            matmul_tn_acc(kernels, dy, &mut d_cols, g.c_out, g.patch(), hw);
            col2im_acc(&d_cols, g, &mut dx[b * g.c_in * hw..(b + 1) * g.c_in * hw]);
        }
    }
}

/// 2×2 max-pooling over `planes` planes of size `h×w`. Returns the pooled
/// values and, for every output, the flat input index of its maximum.
/// Ties go to the first element in row-major window order.
pub(crate) fn maxpool2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], k: &[f64], bias: &[f64], g: ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.h * g.w];
        for co in 0..g.c_out {
            for y in 0..g.h as isize {
                for x in 0..g.w as isize {
                    let mut acc = bias[co];
                    for ci in 0..g.c_in {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                    continue;
                                }
                                let iv = input[ci * g.h * g.w + (sy as usize) * g.w + sx as usize];
                                let kv = k[((co * g.c_in + ci) * 3 + ky as usize) * 3 + kx as usize];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[co * g.h * g.w + (y as usize) * g.w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom { c_in: 2, c_out: 3, h: 5, w: 4 };
        let input: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..54).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.5).collect();
        let bias = [0.1, -0.2, 0.3];
        let fast = conv3x3_forward(&input, &k, &bias, 1, g);
        let slow = naive_conv(&input, &k, &bias, g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5]; // 2×3
        let mut nt = [0.0; 4];
        matmul_nt_acc(&a, &b, &mut nt, 2, 3, 2);
        assert_eq!(nt, [-2.0, 5.5, -2.0, 16.0]);
        let mut tn = [0.0; 9];
        matmul_tn_acc(&a, &b, &mut tn, 2, 3, 3);
        // aᵀ·b, with a,b as 2×3
        assert_eq!(tn, [9.0, 4.0, 1.0, 12.0, 5.0, 0.5, 15.0, 6.0, 0.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let (out, arg) = maxpool2_forward(&[2.0; 4], 1, 2, 2);
        assert_eq!(out, vec![2.0]);
        assert_eq!(arg, vec![0]);
    }
}
