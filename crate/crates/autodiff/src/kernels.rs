//! Forward numerical kernels. Every function validates its operands and
//! returns a freshly allocated tensor; nothing aliases its inputs.

use crate::error::{AutodiffError, Result};
use crate::tensor::{strides_of, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(AutodiffError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
    }
}

fn bad(op: &'static str, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::BadOperand { op, reason: reason.into() }
}

pub fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(AutodiffError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn conv_out_dim(op: &'static str, input: usize, kernel: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(bad(op, format!("kernel extent {kernel} exceeds padded input {padded}")));
    }
    Ok(padded - kernel + 1)
}

/// Accumulates `weight * input[y + i - ph, x + j - pw]` into `out` for one
/// kernel tap, restricted to the in-bounds region.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap(
    out: &mut [f64],
    input: &[f64],
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (i, j): (usize, usize),
    (ph, pw): (usize, usize),
    weight: f64,
) {
    let y_lo = ph.saturating_sub(i);
    let y_hi = (h + ph).saturating_sub(i).min(ho);
    let x_lo = pw.saturating_sub(j);
    let x_hi = (w + pw).saturating_sub(j).min(wo);
    if y_lo >= y_hi || x_lo >= x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let iy = y + i - ph;
        let in_row = &input[iy * w + (x_lo + j - pw)..iy * w + (x_hi + j - pw)];
        let out_row = &mut out[y * wo + x_lo..y * wo + x_hi];
        for (o, &v) in out_row.iter_mut().zip(in_row) {
            *o += weight * v;
        }
    }
}

/// Adds the correlation of one input plane with one kernel plane to
/// `out`. Small kernels are applied tap by tap over whole rows; kernels
/// larger than the output (as in weight gradients) are applied as one dot
/// product per output position.
fn correlate_plane(
    out: &mut [f64],
    input: &[f64],
    kernel: &[f64],
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    pad: (usize, usize),
) {
    if ho * wo >= kh * kw {
        for i in 0..kh {
            for j in 0..kw {
                let k = kernel[i * kw + j];
                if k != 0.0 {
                    accumulate_tap(out, input, (h, w), (ho, wo), (i, j), pad, k);
                }
            }
        }
        return;
    }
    let (ph, pw) = pad;
    for y in 0..ho {
        let i_lo = ph.saturating_sub(y);
        let i_hi = (h + ph).saturating_sub(y).min(kh);
        for x in 0..wo {
            let j_lo = pw.saturating_sub(x);
            let j_hi = (w + pw).saturating_sub(x).min(kw);
            if i_lo >= i_hi || j_lo >= j_hi {
                continue;
            }
            let mut acc = 0.0;
            for i in i_lo..i_hi {
                let iy = y + i - ph;
                let in_row = &input[iy * w + (x + j_lo - pw)..iy * w + (x + j_hi - pw)];
                let k_row = &kernel[i * kw + j_lo..i * kw + j_hi];
                acc += in_row.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>();
            }
            out[y * wo + x] += acc;
        }
    }
}

/// Batched multi-channel 2-D cross-correlation with stride 1 and zero padding.
///
/// `input` is `[B, Ci, H, W]`, `kernel` is `[Co, Ci, Kh, Kw]`; the result is
/// `[B, Co, H + 2 ph - Kh + 1, W + 2 pw - Kw + 1]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, pad: (usize, usize)) -> Result<Tensor> {
    const OP: &str = "conv2d";
    if input.rank() != 4 || kernel.rank() != 4 || input.shape()[1] != kernel.shape()[1] {
        return Err(AutodiffError::Shape {
            op: OP,
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let [b, ci, h, w] = dims4(input);
    let [co, _, kh, kw] = dims4(kernel);
    let ho = conv_out_dim(OP, h, kh, pad.0)?;
    let wo = conv_out_dim(OP, w, kw, pad.1)?;
    // Unfold to [Ci*Kh*Kw, B*Ho*Wo] so one matrix product covers the batch.
    let (rows, cols) = (ci * kh * kw, b * ho * wo);
    let mut unfolded = vec![0.0; rows * cols];
    let (ph, pw) = pad;
    let id = input.data();
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut unfolded[((c * kh + i) * kw + j) * cols..][..cols];
                let x_lo = pw.saturating_sub(j);
                let x_hi = (w + pw).saturating_sub(j).min(wo);
                if x_lo >= x_hi {
                    continue;
                }
                for bi in 0..b {
                    let plane = &id[(bi * ci + c) * h * w..][..h * w];
                    for y in 0..ho {
                        let iy = y + i;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let src = &plane[(iy - ph) * w + x_lo + j - pw..][..x_hi - x_lo];
                        row[(bi * ho + y) * wo + x_lo..][..x_hi - x_lo].copy_from_slice(src);
                    }
                }
            }
        }
    }
    let weights = Tensor::from_parts(vec![co, rows], kernel.data().to_vec());
    let product = matmul(&weights, &Tensor::from_parts(vec![rows, cols], unfolded))?;
    let pd = product.data();
    let plane = ho * wo;
    let mut out = vec![0.0; b * co * plane];
    for o in 0..co {
        for bi in 0..b {
            out[(bi * co + o) * plane..][..plane].copy_from_slice(&pd[o * cols + bi * plane..][..plane]);
        }
    }
    Ok(Tensor::from_parts(vec![b, co, ho, wo], out))
}

/// Per-channel 2-D cross-correlation: channel `c` of example `b` in `input`
/// is correlated only with channel `c` of example `b` in `kernel`.
///
/// `input` is `[B, C, H, W]`, `kernel` is `[B, C, Kh, Kw]`.
pub fn depthwise_xcorr(input: &Tensor, kernel: &Tensor, pad: (usize, usize)) -> Result<Tensor> {
    const OP: &str = "depthwise_xcorr";
    if input.rank() != 4 || kernel.rank() != 4 || input.shape()[..2] != kernel.shape()[..2] {
        return Err(AutodiffError::Shape {
            op: OP,
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let [b, c, h, w] = dims4(input);
    let [_, _, kh, kw] = dims4(kernel);
    let ho = conv_out_dim(OP, h, kh, pad.0)?;
    let wo = conv_out_dim(OP, w, kw, pad.1)?;
    let mut out = vec![0.0; b * c * ho * wo];
    let (id, kd) = (input.data(), kernel.data());
    for plane in 0..b * c {
        let out_plane = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        let in_plane = &id[plane * h * w..(plane + 1) * h * w];
        let k_plane = &kd[plane * kh * kw..(plane + 1) * kh * kw];
        correlate_plane(out_plane, in_plane, k_plane, (h, w), (kh, kw), (ho, wo), pad);
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

fn check_axes(op: &'static str, t: &Tensor, axes: &[usize]) -> Result<()> {
    for (n, &a) in axes.iter().enumerate() {
        if a >= t.rank() {
            return Err(bad(op, format!("axis {a} out of range for shape {:?}", t.shape())));
        }
        if axes[..n].contains(&a) {
            return Err(bad(op, format!("axis {a} repeated")));
        }
    }
    Ok(())
}

/// Sum over `axes`, keeping each reduced axis with extent 1.
pub fn sum_axes(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_axes("sum", t, axes)?;
    let out_shape: Vec<usize> = t
        .shape()
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    let shape = t.shape();
    let mut index = vec![0usize; shape.len()];
    for &v in t.data() {
        let o: usize = index
            .iter()
            .zip(&out_shape)
            .zip(&out_strides)
            .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
            .sum();
        out[o] += v;
        advance(&mut index, shape);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Maximum along one axis (kept with extent 1) and the one-hot indicator of
/// the first maximizing position.
pub fn max_axis(t: &Tensor, axis: usize) -> Result<(Tensor, Tensor)> {
    check_axes("max_axis", t, &[axis])?;
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 1;
    let mut out = vec![0.0; outer * inner];
    let mut indicator = vec![0.0; t.len()];
    let d = t.data();
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            for k in 1..extent {
                if d[(o * extent + k) * inner + i] > d[(o * extent + best) * inner + i] {
                    best = k;
                }
            }
            out[o * inner + i] = d[(o * extent + best) * inner + i];
            indicator[(o * extent + best) * inner + i] = 1.0;
        }
    }
    Ok((Tensor::from_parts(out_shape, out), Tensor::from_parts(shape.to_vec(), indicator)))
}

fn advance(index: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        index[k] += 1;
        if index[k] < shape[k] {
            return;
        }
        index[k] = 0;
    }
}

/// Range selection along an axis: `count` elements starting at `start`,
/// taking every `step`-th one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisRange {
    pub axis: usize,
    pub start: usize,
    pub count: usize,
    pub step: usize,
}

impl AxisRange {
    fn validate(&self, op: &'static str, extent: usize) -> Result<()> {
        if self.count == 0 || self.step == 0 {
            return Err(bad(op, "count and step must be positive"));
        }
        let last = self.start + (self.count - 1) * self.step;
        if last >= extent {
            return Err(bad(
                op,
                format!(
                    "range start={} count={} step={} exceeds extent {extent}",
                    self.start, self.count, self.step
                ),
            ));
        }
        Ok(())
    }
}

pub fn slice(t: &Tensor, range: AxisRange) -> Result<Tensor> {
    check_axes("slice", t, &[range.axis])?;
    let shape = t.shape();
    range.validate("slice", shape[range.axis])?;
    let outer: usize = shape[..range.axis].iter().product();
    let extent = shape[range.axis];
    let inner: usize = shape[range.axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * range.count * inner);
    let d = t.data();
    for o in 0..outer {
        for k in 0..range.count {
            let src = (o * extent + range.start + k * range.step) * inner;
            out.extend_from_slice(&d[src..src + inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[range.axis] = range.count;
    Ok(Tensor::from_parts(out_shape, out))
}

/// Adjoint of [`slice`]: places `t` at the selected positions of a zero
/// tensor whose `range.axis` extent is `extent`.
pub fn embed(t: &Tensor, range: AxisRange, extent: usize) -> Result<Tensor> {
    check_axes("embed", t, &[range.axis])?;
    let shape = t.shape();
    if shape[range.axis] != range.count {
        return Err(bad(
            "embed",
            format!("axis {} has extent {}, range expects {}", range.axis, shape[range.axis], range.count),
        ));
    }
    range.validate("embed", extent)?;
    let outer: usize = shape[..range.axis].iter().product();
    let inner: usize = shape[range.axis + 1..].iter().product();
    let mut out = vec![0.0; outer * extent * inner];
    let d = t.data();
    for o in 0..outer {
        for k in 0..range.count {
            let dst = (o * extent + range.start + k * range.step) * inner;
            let src = (o * range.count + k) * inner;
            out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[range.axis] = extent;
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| bad("concat", "no operands"))?;
    check_axes("concat", first, &[axis])?;
    for p in &parts[1..] {
        let compatible = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(AutodiffError::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total;
    Ok(Tensor::from_parts(out_shape, out))
}

/// Expands extent-1 axes to `target`. Ranks must agree, except that a
/// rank-0 tensor broadcasts to any shape.
pub fn broadcast(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.rank() == 0 {
        return Ok(Tensor::full(target, t.data()[0]));
    }
    let compatible = t.rank() == target.len()
        && t.shape().iter().zip(target).all(|(&s, &d)| s == d || s == 1);
    if !compatible || target.contains(&0) {
        return Err(AutodiffError::Shape {
            op: "broadcast",
            lhs: t.shape().to_vec(),
            rhs: target.to_vec(),
        });
    }
    let src_strides = strides_of(t.shape());
    let eff: Vec<usize> = t
        .shape()
        .iter()
        .zip(&src_strides)
        .map(|(&s, &st)| if s == 1 { 0 } else { st })
        .collect();
    let n: usize = target.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut index = vec![0usize; target.len()];
    let d = t.data();
    for _ in 0..n {
        let src: usize = index.iter().zip(&eff).map(|(i, s)| i * s).sum();
        out.push(d[src]);
        advance(&mut index, target);
    }
    Ok(Tensor::from_parts(target.to_vec(), out))
}

pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(bad("permute", format!("{perm:?} is not a permutation of {rank} axes")));
    }
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides_of(shape);
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut index = vec![0usize; rank];
    let d = t.data();
    for _ in 0..t.len() {
        let src: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(d[src]);
        advance(&mut index, &out_shape);
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Reverses element order along each listed axis.
pub fn flip(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_axes("flip", t, axes)?;
    let shape = t.shape();
    let strides = strides_of(shape);
    let mut out = Vec::with_capacity(t.len());
    let mut index = vec![0usize; shape.len()];
    let d = t.data();
    for _ in 0..t.len() {
        let src: usize = index
            .iter()
            .enumerate()
            .map(|(k, &i)| if axes.contains(&k) { shape[k] - 1 - i } else { i } * strides[k])
            .sum();
        out.push(d[src]);
        advance(&mut index, shape);
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[58., 64., 139., 154.]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn conv2d_matches_nested_loops() {
        let input = Tensor::from_fn(&[2, 3, 5, 4], |i| ((i * 37) % 11) as f64 - 5.0);
        let kernel = Tensor::from_fn(&[2, 3, 3, 2], |i| ((i * 13) % 7) as f64 - 3.0);
        let pad = (1, 1);
        let out = conv2d(&input, &kernel, pad).unwrap();
        assert_eq!(out.shape(), &[2, 2, 5, 5]);
        for b in 0..2 {
            for o in 0..2 {
                for y in 0..5 {
                    for x in 0..5 {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for i in 0..3 {
                                for j in 0..2 {
                                    let iy = y as isize + i as isize - 1;
                                    let ix = x as isize + j as isize - 1;
                                    if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                        acc += kernel.at(&[o, c, i, j])
                                            * input.at(&[b, c, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        assert_eq!(out.at(&[b, o, y, x]), acc);
                    }
                }
            }
        }
    }

    #[test]
    fn slice_embed_are_adjoint_on_positions() {
        let x = Tensor::from_fn(&[2, 7], |i| i as f64);
        let r = AxisRange { axis: 1, start: 1, count: 3, step: 2 };
        let s = slice(&x, r).unwrap();
        assert_eq!(s.data(), &[1., 3., 5., 8., 10., 12.]);
        let e = embed(&s, r, 7).unwrap();
        assert_eq!(e.data(), &[0., 1., 0., 3., 0., 5., 0., 0., 8., 0., 10., 0., 12., 0.]);
        assert!(slice(&x, AxisRange { axis: 1, start: 2, count: 3, step: 3 }).is_err());
    }

    #[test]
    fn broadcast_and_sum() {
        let x = t(&[2, 1], &[1., 2.]);
        let b = broadcast(&x, &[2, 3]).unwrap();
        assert_eq!(b.data(), &[1., 1., 1., 2., 2., 2.]);
        let s = sum_axes(&b, &[1]).unwrap();
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.data(), &[3., 6.]);
        assert!(broadcast(&x, &[3, 3]).is_err());
    }

    #[test]
    fn permute_and_flip() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(permute(&x, &[1, 0]).unwrap().data(), &[0., 3., 1., 4., 2., 5.]);
        assert_eq!(flip(&x, &[1]).unwrap().data(), &[2., 1., 0., 5., 4., 3.]);
        assert!(permute(&x, &[0, 0]).is_err());
    }

    #[test]
    fn max_axis_picks_first_maximum() {
        let x = t(&[2, 3], &[1., 5., 5., -1., -2., -3.]);
        let (m, ind) = max_axis(&x, 1).unwrap();
        assert_eq!(m.data(), &[5., -1.]);
        assert_eq!(ind.data(), &[0., 1., 0., 1., 0., 0.]);
    }

    #[test]
    fn concat_middle_axis() {
        let a = Tensor::from_fn(&[2, 1, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]);
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
    }
}
