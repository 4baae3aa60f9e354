//! Direct (loop-nest) convolution kernels shared by forward and backward
//! passes. Loops are ordered so the innermost dimension walks contiguous
//! memory; valid output ranges are precomputed per kernel tap so the hot
//! loops carry no bounds branches.

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Conv2dDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConvT2dDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output positions `o` in `0..out_len` with `0 <= o*stride + off < limit`.
fn valid_span(limit: usize, off: isize, stride: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (limit as isize - 1 - off).div_euclid(s) + 1;
    let lo = lo.clamp(0, out_len as isize) as usize;
    let hi = hi.clamp(lo as isize, out_len as isize) as usize;
    (lo, hi)
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    d: &Conv2dDims,
    out: &mut [f64],
) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for n in 0..d.n {
        let xn = &x[n * d.ci * plane_in..(n + 1) * d.ci * plane_in];
        for co in 0..d.co {
            let op = &mut out[(n * d.co + co) * plane_out..(n * d.co + co + 1) * plane_out];
            if let Some(b) = bias {
                op.fill(b[co]);
            }
            for ci in 0..d.ci {
                let xp = &xn[ci * plane_in..(ci + 1) * plane_in];
                for ky in 0..d.kh {
                    let oy_off = ky as isize - d.pad as isize;
                    let (oy_lo, oy_hi) = valid_span(d.h, oy_off, d.stride, d.oh);
                    for kx in 0..d.kw {
                        let wv = w[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
                        let ox_off = kx as isize - d.pad as isize;
                        let (ox_lo, ox_hi) = valid_span(d.w, ox_off, d.stride, d.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * d.stride) as isize + oy_off;
                            let xrow = &xp[iy as usize * d.w..(iy as usize + 1) * d.w];
                            let orow = &mut op[oy * d.ow..(oy + 1) * d.ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * d.stride) as isize + ox_off) as usize;
                                orow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gin += dL/dx` for `conv2d`: the same loop nest as the forward pass with
/// reads and writes exchanged.
pub(crate) fn conv2d_grad_input(gout: &[f64], w: &[f64], d: &Conv2dDims, gin: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for n in 0..d.n {
        for ci in 0..d.ci {
            let gi = &mut gin[(n * d.ci + ci) * plane_in..(n * d.ci + ci + 1) * plane_in];
            for co in 0..d.co {
                let gp = &gout[(n * d.co + co) * plane_out..(n * d.co + co + 1) * plane_out];
                for ky in 0..d.kh {
                    let oy_off = ky as isize - d.pad as isize;
                    let (oy_lo, oy_hi) = valid_span(d.h, oy_off, d.stride, d.oh);
                    for kx in 0..d.kw {
                        let wv = w[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
                        let ox_off = kx as isize - d.pad as isize;
                        let (ox_lo, ox_hi) = valid_span(d.w, ox_off, d.stride, d.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * d.stride) as isize + oy_off) as usize;
                            let irow = &mut gi[iy * d.w..(iy + 1) * d.w];
                            let grow = &gp[oy * d.ow..(oy + 1) * d.ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * d.stride) as isize + ox_off) as usize;
                                irow[ix] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_weight(gout: &[f64], x: &[f64], d: &Conv2dDims, gw: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for co in 0..d.co {
        for ci in 0..d.ci {
            for ky in 0..d.kh {
                let oy_off = ky as isize - d.pad as isize;
                let (oy_lo, oy_hi) = valid_span(d.h, oy_off, d.stride, d.oh);
                for kx in 0..d.kw {
                    let ox_off = kx as isize - d.pad as isize;
                    let (ox_lo, ox_hi) = valid_span(d.w, ox_off, d.stride, d.ow);
                    let mut acc = 0.0;
                    for n in 0..d.n {
                        let xp = &x[(n * d.ci + ci) * plane_in..(n * d.ci + ci + 1) * plane_in];
                        let gp = &gout[(n * d.co + co) * plane_out..(n * d.co + co + 1) * plane_out];
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * d.stride) as isize + oy_off) as usize;
                            let xrow = &xp[iy * d.w..(iy + 1) * d.w];
                            let grow = &gp[oy * d.ow..(oy + 1) * d.ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * d.stride) as isize + ox_off) as usize;
                                acc += grow[ox] * xrow[ix];
                            }
                        }
                    }
                    gw[((co * d.ci + ci) * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_grad_bias(gout: &[f64], d: &Conv2dDims, gb: &mut [f64]) {
    let plane_out = d.oh * d.ow;
    for n in 0..d.n {
        for co in 0..d.co {
            let gp = &gout[(n * d.co + co) * plane_out..(n * d.co + co + 1) * plane_out];
            gb[co] += gp.iter().sum::<f64>();
        }
    }
}

/// Transposed convolution: every input pixel scatters `weight[ci, co, :, :]`
/// into the output at `(iy*stride + ky, ix*stride + kx)`.
pub(crate) fn convt2d_forward(x: &[f64], w: &[f64], d: &ConvT2dDims, out: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for n in 0..d.n {
        for co in 0..d.co {
            let op = &mut out[(n * d.co + co) * plane_out..(n * d.co + co + 1) * plane_out];
            for ci in 0..d.ci {
                let xp = &x[(n * d.ci + ci) * plane_in..(n * d.ci + ci + 1) * plane_in];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = w[((ci * d.co + co) * d.kh + ky) * d.kw + kx];
                        for iy in 0..d.h {
                            let xrow = &xp[iy * d.w..(iy + 1) * d.w];
                            let obase = (iy * d.stride + ky) * d.ow + kx;
                            for (ix, xv) in xrow.iter().enumerate() {
                                op[obase + ix * d.stride] += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gin += dL/dx` for the transposed convolution: a gather of the scattered
/// output gradient.
pub(crate) fn convt2d_grad_input(gout: &[f64], w: &[f64], d: &ConvT2dDims, gin: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for n in 0..d.n {
        for ci in 0..d.ci {
            let gi = &mut gin[(n * d.ci + ci) * plane_in..(n * d.ci + ci + 1) * plane_in];
            for co in 0..d.co {
                let gp = &gout[(n * d.co + co) * plane_out..(n * d.co + co + 1) * plane_out];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = w[((ci * d.co + co) * d.kh + ky) * d.kw + kx];
                        for iy in 0..d.h {
                            let irow = &mut gi[iy * d.w..(iy + 1) * d.w];
                            let gbase = (iy * d.stride + ky) * d.ow + kx;
                            for (ix, iv) in irow.iter_mut().enumerate() {
                                *iv += wv * gp[gbase + ix * d.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn convt2d_grad_weight(gout: &[f64], x: &[f64], d: &ConvT2dDims, gw: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    for ci in 0..d.ci {
        for co in 0..d.co {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = 0.0;
                    for n in 0..d.n {
                        let xp = &x[(n * d.ci + ci) * plane_in..(n * d.ci + ci + 1) * plane_in];
                        let gp = &gout[(n * d.co + co) * plane_out..(n * d.co + co + 1) * plane_out];
                        for iy in 0..d.h {
                            let xrow = &xp[iy * d.w..(iy + 1) * d.w];
                            let gbase = (iy * d.stride + ky) * d.ow + kx;
                            for (ix, xv) in xrow.iter().enumerate() {
                                acc += xv * gp[gbase + ix * d.stride];
                            }
                        }
                    }
                    gw[((ci * d.co + co) * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
}
