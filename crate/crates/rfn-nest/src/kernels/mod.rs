//! Pure compute kernels behind the autodiff ops.
//!
//! Everything here is deterministic: parallel dispatch only splits work over
//! disjoint output regions (see [`par`]), so a fixed input produces
//! bit-identical output whether or not rayon is enabled.

pub mod par;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Border handling for convolutions and network input padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    #[default]
    Zeros,
    /// Mirror without repeating the edge sample; requires pad < dim.
    Reflect,
}

fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let j = if i < 0 {
        -i
    } else if i >= len {
        2 * len - 2 - i
    } else {
        i
    };
    debug_assert!(j >= 0 && j < len);
    j as usize
}

/// Pad the two spatial dims of an NCHW tensor by `p` on every side.
pub fn pad2d<T: Scalar>(x: &Tensor<T>, p: usize, mode: PadMode) -> Result<Tensor<T>> {
    if p == 0 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    if mode == PadMode::Reflect && (p >= h || p >= w) {
        return Err(Error::shape(format!(
            "reflect padding {p} needs spatial dims > {p}, got {h}x{w}"
        )));
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(&[n, c, hp, wp]);
    let planes = n * c;
    par::for_each_chunk(out.data_mut(), hp * wp, |idx, plane| {
        let src = x.plane(idx / c, idx % c);
        for y in 0..hp {
            let row = &mut plane[y * wp..(y + 1) * wp];
            match mode {
                PadMode::Zeros => {
                    let sy = y as isize - p as isize;
                    if sy >= 0 && (sy as usize) < h {
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        row[p..p + w].copy_from_slice(srow);
                    }
                }
                PadMode::Reflect => {
                    let sy = reflect_index(y as isize - p as isize, h);
                    let srow = &src[sy * w..(sy + 1) * w];
                    for (xo, v) in row.iter_mut().enumerate() {
                        *v = srow[reflect_index(xo as isize - p as isize, w)];
                    }
                }
            }
        }
        let _ = planes;
    });
    Ok(out)
}

/// Adjoint of [`pad2d`]: fold gradients on the padded tensor back onto the
/// original positions.
pub fn pad2d_backward<T: Scalar>(
    gpad: &Tensor<T>,
    p: usize,
    mode: PadMode,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if p == 0 {
        return Ok(gpad.clone());
    }
    let (n, c, hp, wp) = gpad.dims4()?;
    debug_assert_eq!((hp, wp), (h + 2 * p, w + 2 * p));
    let mut out = Tensor::zeros(&[n, c, h, w]);
    par::for_each_chunk(out.data_mut(), h * w, |idx, plane| {
        let src = gpad.plane(idx / c, idx % c);
        for y in 0..hp {
            for xo in 0..wp {
                let g = src[y * wp + xo];
                match mode {
                    PadMode::Zeros => {
                        let sy = y as isize - p as isize;
                        let sx = xo as isize - p as isize;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            plane[sy as usize * w + sx as usize] += g;
                        }
                    }
                    PadMode::Reflect => {
                        let sy = reflect_index(y as isize - p as isize, h);
                        let sx = reflect_index(xo as isize - p as isize, w);
                        plane[sy * w + sx] += g;
                    }
                }
            }
        }
    });
    Ok(out)
}

fn conv_check<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if kh != kw {
        return Err(Error::config(format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::config(format!("kernel size must be odd, got {kh}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv input has {cin} channels but weight expects {wcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < kh || wp < kw {
        return Err(Error::shape(format!(
            "padded input {hp}x{wp} smaller than kernel {kh}"
        )));
    }
    Ok((n, cin, h, w, cout, kh, hp - kh + 1, wp - kw + 1))
}

/// Direct 2-D cross-correlation with stride 1.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
    mode: PadMode,
) -> Result<Tensor<T>> {
    let (n, cin, _h, _w, cout, k, ho, wo) = conv_check(x, weight, bias, pad)?;
    let padded = pad2d(x, pad, mode)?;
    let wp = padded.shape()[3];
    let wdat = weight.data();
    let bdat = bias.data();
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    par::for_each_chunk(out.data_mut(), ho * wo, |idx, plane| {
        let (ni, co) = (idx / cout, idx % cout);
        plane.fill(bdat[co]);
        for ci in 0..cin {
            let src = padded.plane(ni, ci);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let srow = &src[(oy + ky) * wp + kx..(oy + ky) * wp + kx + wo];
                        let orow = &mut plane[oy * wo..oy * wo + wo];
                        for (o, &s) in orow.iter_mut().zip(srow) {
                            *o += wv * s;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    mode: PadMode,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, _, k, _) = weight.dims4()?;
    let (gn, gc, ho, wo) = gout.dims4()?;
    debug_assert_eq!((gn, gc), (n, cout));
    let padded = pad2d(x, pad, mode)?;
    let (hp, wp) = (padded.shape()[2], padded.shape()[3]);
    let wdat = weight.data();

    // d/d bias: plain sums over each output channel.
    let gb_cols = par::map_indexed(cout, |co| {
        let mut acc = T::zero();
        for ni in 0..n {
            for &g in gout.plane(ni, co) {
                acc += g;
            }
        }
        acc
    });
    let gbias = Tensor::new(vec![cout], gb_cols)?;

    // d/d weight: correlation of the padded input with the output gradient.
    let mut gweight = Tensor::zeros(&[cout, cin, k, k]);
    par::for_each_chunk(gweight.data_mut(), cin * k * k, |co, chunk| {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for ni in 0..n {
                        let gplane = gout.plane(ni, co);
                        let pplane = padded.plane(ni, ci);
                        for oy in 0..ho {
                            let grow = &gplane[oy * wo..oy * wo + wo];
                            let prow = &pplane[(oy + ky) * wp + kx..(oy + ky) * wp + kx + wo];
                            for (&g, &p) in grow.iter().zip(prow) {
                                acc += g * p;
                            }
                        }
                    }
                    chunk[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    // d/d input: scatter through the kernel into the padded grid, then fold
    // the padding back.
    let mut gpadded = Tensor::zeros(&[n, cin, hp, wp]);
    par::for_each_chunk(gpadded.data_mut(), hp * wp, |idx, plane| {
        let (ni, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let gplane = gout.plane(ni, co);
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let grow = &gplane[oy * wo..oy * wo + wo];
                        let prow = &mut plane[(oy + ky) * wp + kx..(oy + ky) * wp + kx + wo];
                        for (p, &g) in prow.iter_mut().zip(grow) {
                            *p += wv * g;
                        }
                    }
                }
            }
        }
    });
    let gx = pad2d_backward(&gpadded, pad, mode, h, w)?;
    Ok((gx, gweight, gbias))
}

/// 2x2 max pooling, stride 2. Also returns the flat input-plane index of
/// each window's argmax (first occurrence in row-major window order).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0u32; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let base = (ni * c + ci) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    out.data_mut()[base + oy * wo + ox] = best;
                    argmax[base + oy * wo + ox] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Route output gradients to each window's argmax position.
pub fn maxpool2_backward<T: Scalar>(
    argmax: &[u32],
    gout: &Tensor<T>,
    in_shape: &[usize],
) -> Tensor<T> {
    let (n, c, ho, wo) = gout.dims4().expect("pool gradient is rank 4");
    let hw_in = in_shape[2] * in_shape[3];
    let mut gx = Tensor::zeros(in_shape);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * ho * wo;
            let gplane = gout.plane(ni, ci);
            let dst = &mut gx.data_mut()[(ni * c + ci) * hw_in..(ni * c + ci + 1) * hw_in];
            for (i, &g) in gplane.iter().enumerate() {
                dst[argmax[base + i] as usize] += g;
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    par::for_each_chunk(out.data_mut(), 4 * h * w, |idx, plane| {
        let src = x.plane(idx / c, idx % c);
        for y in 0..2 * h {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let orow = &mut plane[y * 2 * w..(y + 1) * 2 * w];
            for (xo, v) in orow.iter_mut().enumerate() {
                *v = srow[xo / 2];
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`upsample2_forward`]: each input position accumulates its four
/// replicas.
pub fn upsample2_backward<T: Scalar>(gout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = gout.dims4().expect("upsample gradient is rank 4");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    par::for_each_chunk(gx.data_mut(), h * w, |idx, plane| {
        let src = gout.plane(idx / c, idx % c);
        for y in 0..h {
            for xo in 0..w {
                let mut acc = T::zero();
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += src[(2 * y + dy) * w2 + 2 * xo + dx];
                    }
                }
                plane[y * w + xo] = acc;
            }
        }
    });
    gx
}

/// Channel-axis concatenation in argument order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::shape("concat of zero tensors".to_string()));
    }
    let (n, _, h, w) = xs[0].dims4()?;
    let mut c_total = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat spatial/batch mismatch: {:?} vs {:?}",
                xs[0].shape(),
                x.shape()
            )));
        }
        c_total += xc;
    }
    let mut out = Tensor::zeros(&[n, c_total, h, w]);
    let hw = h * w;
    for ni in 0..n {
        let mut c_off = 0;
        for x in xs {
            let xc = x.shape()[1];
            for ci in 0..xc {
                let dst_start = ((ni * c_total) + c_off + ci) * hw;
                out.data_mut()[dst_start..dst_start + hw].copy_from_slice(x.plane(ni, ci));
            }
            c_off += xc;
        }
    }
    Ok(out)
}

/// Extract channels `[c_start, c_start + c_len)`; inverse of a concat block.
pub fn slice_channels<T: Scalar>(
    x: &Tensor<T>,
    c_start: usize,
    c_len: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c_start + c_len > c {
        return Err(Error::shape(format!(
            "channel slice {c_start}..{} out of range for {c} channels",
            c_start + c_len
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c_len, h, w]);
    for ni in 0..n {
        for ci in 0..c_len {
            let dst = (ni * c_len + ci) * hw;
            out.data_mut()[dst..dst + hw].copy_from_slice(x.plane(ni, c_start + ci));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 0, PadMode::Zeros).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_pixel_all_ones_kernel_hits_center_tap_only() {
        // Zero padding: the eight border taps read zero, so the output is the
        // center tap alone.
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 2.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, PadMode::Zeros).unwrap();
        assert_eq!(y.data(), &[2.0]);
    }

    #[test]
    fn conv_shape_arithmetic() {
        let x = Tensor::<f32>::zeros(&[4, 16, 64, 64]);
        let w = Tensor::zeros(&[64, 16, 3, 3]);
        let b = Tensor::zeros(&[64]);
        let y = conv2d_forward(&x, &w, &b, 1, PadMode::Zeros).unwrap();
        assert_eq!(y.shape(), &[4, 64, 64, 64]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, PadMode::Zeros),
            Err(Error::Shape(_))
        ));
        let w = Tensor::zeros(&[2, 3, 2, 2]);
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, PadMode::Zeros),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad2d(&x, 0, PadMode::Reflect).unwrap();
        assert_eq!(p, x);
        let x = Tensor::<f64>::new(vec![1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad2d(&x, 2, PadMode::Reflect).unwrap();
        assert_eq!(p.data(), &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn reflect_pad_too_wide_errors() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(pad2d(&x, 2, PadMode::Reflect).is_err());
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_constant_halves_resolution() {
        let x = Tensor::<f64>::full(&[2, 3, 8, 6], 0.7);
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2_forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_row_major_order() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 5.0);
        let (_, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn upsample_replicates_each_pixel() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let y = upsample2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn maxpool_inverts_upsample() {
        let mut r = rng(7);
        let x = crate::tensor::random_uniform::<f64, _>(&mut r, &[2, 3, 4, 5], -1.0, 1.0);
        let up = upsample2_forward(&x).unwrap();
        let (down, _) = maxpool2_forward(&up).unwrap();
        assert_eq!(down, x);
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut r = rng(3);
        let a = crate::tensor::random_uniform::<f64, _>(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
        let b = crate::tensor::random_uniform::<f64, _>(&mut r, &[1, 3, 4, 4], -1.0, 1.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[1, 5, 4, 4]);
        assert_eq!(slice_channels(&cat, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&cat, 2, 3).unwrap(), b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 2, 4, 5]);
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(Error::Shape(_))
        ));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_paths_are_bit_identical() {
        let mut r = rng(11);
        let x = crate::tensor::random_uniform::<f64, _>(&mut r, &[2, 3, 12, 12], -1.0, 1.0);
        let w = crate::tensor::random_uniform::<f64, _>(&mut r, &[5, 3, 3, 3], -0.5, 0.5);
        let b = crate::tensor::random_uniform::<f64, _>(&mut r, &[5], -0.1, 0.1);
        let g = crate::tensor::random_uniform::<f64, _>(&mut r, &[2, 5, 12, 12], -1.0, 1.0);

        par::set_parallel(true);
        let y_par = conv2d_forward(&x, &w, &b, 1, PadMode::Reflect).unwrap();
        let bw_par = conv2d_backward(&x, &w, 1, PadMode::Reflect, &g).unwrap();
        par::set_parallel(false);
        let y_seq = conv2d_forward(&x, &w, &b, 1, PadMode::Reflect).unwrap();
        let bw_seq = conv2d_backward(&x, &w, 1, PadMode::Reflect, &g).unwrap();
        par::set_parallel(true);

        assert_eq!(y_par, y_seq);
        assert_eq!(bw_par.0, bw_seq.0);
        assert_eq!(bw_par.1, bw_seq.1);
        assert_eq!(bw_par.2, bw_seq.2);
    }
}
