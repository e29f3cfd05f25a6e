//! Grouped 2-D convolution with zero padding.
//!
//! Every kernel here walks output planes in `(n, out_c, in_c, ky, kx, oy, ox)`
//! order, so each output element is always summed in the same sequence.

use super::param::Parameter;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub const fn pointwise() -> Self {
        Self::new(1, 0, 1)
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            None
        } else {
            Some((padded - kernel) / self.stride + 1)
        }
    }
}

struct Plan {
    input: Shape,
    output: Shape,
    kh: usize,
    kw: usize,
    in_per_group: usize,
    out_per_group: usize,
}

fn plan(input: Shape, weight: Shape, geom: ConvGeom) -> Result<Plan> {
    let g = geom.groups;
    if g == 0 || input.c % g != 0 || weight.n % g != 0 {
        return Err(Error::dim(format!(
            "groups {g} must divide input channels {} and output channels {}",
            input.c, weight.n
        )));
    }
    if weight.c * g != input.c {
        return Err(Error::dim(format!(
            "channel axis: input has {} channels but weight expects {} (in_c/groups={} x groups={g})",
            input.c,
            weight.c * g,
            weight.c
        )));
    }
    let oh = geom.out_extent(input.h, weight.h).ok_or_else(|| {
        Error::dim(format!(
            "height axis: kernel {} exceeds padded input {}",
            weight.h,
            input.h + 2 * geom.padding
        ))
    })?;
    let ow = geom.out_extent(input.w, weight.w).ok_or_else(|| {
        Error::dim(format!(
            "width axis: kernel {} exceeds padded input {}",
            weight.w,
            input.w + 2 * geom.padding
        ))
    })?;
    Ok(Plan {
        input,
        output: Shape::new(input.n, weight.n, oh, ow),
        kh: weight.h,
        kw: weight.w,
        in_per_group: weight.c,
        out_per_group: weight.n / g,
    })
}

/// Output positions `o` with `0 <= o*stride + k - pad < len`.
#[inline]
fn valid(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Forward convolution. `weight` has shape `(out_c, in_c/groups, kh, kw)`.
pub fn conv2d(input: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let p = plan(input.shape(), weight.shape(), geom)?;
    let mut out = Tensor::zeros(p.output);
    let (ih, iw) = (p.input.h, p.input.w);
    let (oh, ow) = (p.output.h, p.output.w);
    let (s, pad) = (geom.stride, geom.padding);
    let wdata = weight.data();
    for n in 0..p.input.n {
        for oc in 0..p.output.c {
            let g = oc / p.out_per_group;
            let mut acc = vec![0.0f32; oh * ow];
            for icl in 0..p.in_per_group {
                let ic = g * p.in_per_group + icl;
                let inp = input.plane(n, ic);
                let wbase = (oc * p.in_per_group + icl) * p.kh * p.kw;
                for ky in 0..p.kh {
                    let (oy0, oy1) = valid(ky, pad, s, ih, oh);
                    for kx in 0..p.kw {
                        let wv = wdata[wbase + ky * p.kw + kx];
                        let (ox0, ox1) = valid(kx, pad, s, iw, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - pad;
                            let orow = &mut acc[oy * ow + ox0..oy * ow + ox1];
                            if s == 1 {
                                let ix0 = ox0 + kx - pad;
                                let irow = &inp[iy * iw + ix0..iy * iw + ix0 + (ox1 - ox0)];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox0 + j) * s + kx - pad;
                                    *o += wv * inp[iy * iw + ix];
                                }
                            }
                        }
                    }
                }
            }
            out.plane_mut(n, oc).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
) -> Result<(Tensor, Tensor)> {
    let p = plan(input.shape(), weight.shape(), geom)?;
    if grad_out.shape() != p.output {
        return Err(Error::dim(format!(
            "upstream gradient shape {} does not match conv output {}",
            grad_out.shape(),
            p.output
        )));
    }
    let mut gin = Tensor::zeros(p.input);
    let mut gw = Tensor::zeros(weight.shape());
    let (ih, iw) = (p.input.h, p.input.w);
    let (oh, ow) = (p.output.h, p.output.w);
    let (s, pad) = (geom.stride, geom.padding);
    let wdata = weight.data();
    let plane = ih * iw;
    for n in 0..p.input.n {
        for oc in 0..p.output.c {
            let g = oc / p.out_per_group;
            let gout = grad_out.plane(n, oc);
            for icl in 0..p.in_per_group {
                let ic = g * p.in_per_group + icl;
                let inp = input.plane(n, ic);
                let gin_start = (n * p.input.c + ic) * plane;
                let wbase = (oc * p.in_per_group + icl) * p.kh * p.kw;
                for ky in 0..p.kh {
                    let (oy0, oy1) = valid(ky, pad, s, ih, oh);
                    for kx in 0..p.kw {
                        let widx = wbase + ky * p.kw + kx;
                        let wv = wdata[widx];
                        let (ox0, ox1) = valid(kx, pad, s, iw, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut wacc = 0.0f32;
                        let gplane = &mut gin.data_mut()[gin_start..gin_start + plane];
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - pad;
                            let grow = &gout[oy * ow + ox0..oy * ow + ox1];
                            if s == 1 {
                                let ix0 = iy * iw + ox0 + kx - pad;
                                let irow = &inp[ix0..ix0 + (ox1 - ox0)];
                                for (gv, iv) in grow.iter().zip(irow) {
                                    wacc += gv * iv;
                                }
                                let girow = &mut gplane[ix0..ix0 + (ox1 - ox0)];
                                for (gi, gv) in girow.iter_mut().zip(grow) {
                                    *gi += wv * gv;
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    let ix = iy * iw + (ox0 + j) * s + kx - pad;
                                    wacc += gv * inp[ix];
                                    gplane[ix] += wv * gv;
                                }
                            }
                        }
                        gw.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    Ok((gin, gw))
}

/// A convolution layer owning its weight and the activation cached for backward.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub geom: ConvGeom,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(weight: Parameter, geom: ConvGeom) -> Self {
        Self {
            weight,
            geom,
            cached_input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.geom.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight.value, self.geom)?;
        self.cached_input = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight.value, self.geom)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::State("conv backward called before forward".into()))?;
        let (gx, gw) = conv2d_backward(x, &self.weight.value, grad, self.geom)?;
        self.weight.accumulate(&gw)?;
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: Shape, v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Direct definition: sum over the receptive field, zero outside.
    fn naive(input: &Tensor, weight: &Tensor, geom: ConvGeom) -> Tensor {
        let is = input.shape();
        let ws = weight.shape();
        let oh = (is.h + 2 * geom.padding - ws.h) / geom.stride + 1;
        let ow = (is.w + 2 * geom.padding - ws.w) / geom.stride + 1;
        let ocg = ws.n / geom.groups;
        let mut out = Tensor::zeros(Shape::new(is.n, ws.n, oh, ow));
        for n in 0..is.n {
            for oc in 0..ws.n {
                let g = oc / ocg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for icl in 0..ws.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= is.h as isize || ix >= is.w as isize {
                                        continue;
                                    }
                                    acc += weight.at(oc, icl, ky, kx) as f64
                                        * input.at(n, g * ws.c + icl, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                        let i = out.index(n, oc, oy, ox);
                        out.data_mut()[i] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn hand_computed_3x3_ones() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, ConvGeom::new(1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn zero_weight_annihilates() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(Shape::new(2, 3, 5, 5), 1.0, &mut rng);
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        let y = conv2d(&x, &w, ConvGeom::new(1, 1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_pointwise_is_identity() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(Shape::new(2, 4, 3, 3), 1.0, &mut rng);
        let mut w = Tensor::zeros(Shape::new(4, 4, 1, 1));
        for c in 0..4 {
            let i = w.index(c, c, 0, 0);
            w.data_mut()[i] = 1.0;
        }
        let y = conv2d(&x, &w, ConvGeom::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_definition_across_geometries() {
        let mut rng = Rng::new(3);
        for &(c_in, c_out, k, s, p, g) in &[
            (3, 4, 3, 1, 1, 1),
            (3, 4, 3, 2, 1, 1),
            (4, 4, 5, 1, 2, 4),
            (4, 8, 1, 1, 0, 2),
            (2, 2, 3, 2, 0, 1),
        ] {
            let x = Tensor::randn(Shape::new(2, c_in, 7, 6), 1.0, &mut rng);
            let w = Tensor::randn(Shape::new(c_out, c_in / g, k, k), 1.0, &mut rng);
            let geom = ConvGeom::new(s, p, g);
            let fast = conv2d(&x, &w, geom).unwrap();
            let slow = naive(&x, &w, geom);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-4, "{c_in} {c_out} {k} {s} {p} {g}");
        }
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(2, 2, 3, 3));
        let err = conv2d(&x, &w, ConvGeom::new(1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let w = Parameter::new("w", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let mut conv = Conv2d::new(w, ConvGeom::pointwise());
        let g = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(conv.backward(&g), Err(Error::State(_))));
    }
}
