//! Scalar kernels behind the tape ops. Fixed-order sequential loops so a
//! given build produces bit-identical results run to run.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use super::Real;

pub(super) fn sigmoid<E: Real>(z: E) -> E {
    if z >= E::zero() {
        E::one() / (E::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (E::one() + e)
    }
}

/// Output spatial size of a strided convolution.
pub fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = extent + 2 * pad;
    if span < k || stride == 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn convt_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (extent - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Range of output indices `o` with `0 <= o*stride + off < extent`.
fn valid_range(out_len: usize, stride: usize, off: isize, extent: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_inc = (extent as isize - 1 - off).div_euclid(s);
    let lo = lo.max(0) as usize;
    if hi_inc < lo as isize {
        return (0, 0);
    }
    (lo, (hi_inc as usize).min(out_len - 1) + 1)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_fwd<E: Real>(
    x: &[E],
    (c_in, h, w): (usize, usize, usize),
    wgt: &[E],
    (c_out, kh, kw): (usize, usize, usize),
    bias: &[E],
    stride: usize,
    pad: usize,
    out: &mut [E],
    (oh, ow): (usize, usize),
) {
    for o in 0..c_out {
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias[o]);
    }
    for o in 0..c_out {
        let yplane = o * oh * ow;
        for c in 0..c_in {
            let xplane = c * h * w;
            for ky in 0..kh {
                let offy = ky as isize - pad as isize;
                let (oy0, oy1) = valid_range(oh, stride, offy, h);
                for kx in 0..kw {
                    let wv = wgt[((o * c_in + c) * kh + ky) * kw + kx];
                    if wv == E::zero() {
                        continue;
                    }
                    let offx = kx as isize - pad as isize;
                    let (ox0, ox1) = valid_range(ow, stride, offx, w);
                    for oy in oy0..oy1 {
                        let iy = (oy * stride) as isize + offy;
                        let xrow = xplane + iy as usize * w;
                        let yrow = yplane + oy * ow;
                        for ox in ox0..ox1 {
                            let ix = (ox * stride) as isize + offx;
                            out[yrow + ox] += wv * x[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_bwd<E: Real>(
    x: &[E],
    (c_in, h, w): (usize, usize, usize),
    wgt: &[E],
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    dy: &[E],
    (oh, ow): (usize, usize),
    dx: &mut [E],
    dw: &mut [E],
    db: &mut [E],
) {
    for o in 0..c_out {
        let mut acc = E::zero();
        for v in &dy[o * oh * ow..(o + 1) * oh * ow] {
            acc += *v;
        }
        db[o] += acc;
    }
    for o in 0..c_out {
        let yplane = o * oh * ow;
        for c in 0..c_in {
            let xplane = c * h * w;
            for ky in 0..kh {
                let offy = ky as isize - pad as isize;
                let (oy0, oy1) = valid_range(oh, stride, offy, h);
                for kx in 0..kw {
                    let widx = ((o * c_in + c) * kh + ky) * kw + kx;
                    let wv = wgt[widx];
                    let offx = kx as isize - pad as isize;
                    let (ox0, ox1) = valid_range(ow, stride, offx, w);
                    let mut wacc = E::zero();
                    for oy in oy0..oy1 {
                        let iy = (oy * stride) as isize + offy;
                        let xrow = xplane + iy as usize * w;
                        let yrow = yplane + oy * ow;
                        for ox in ox0..ox1 {
                            let ix = xrow + ((ox * stride) as isize + offx) as usize;
                            let g = dy[yrow + ox];
                            wacc += g * x[ix];
                            dx[ix] += g * wv;
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn convt2d_fwd<E: Real>(
    x: &[E],
    (c_in, h, w): (usize, usize, usize),
    wgt: &[E],
    (c_out, kh, kw): (usize, usize, usize),
    bias: &[E],
    stride: usize,
    pad: usize,
    out: &mut [E],
    (oh, ow): (usize, usize),
) {
    for o in 0..c_out {
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias[o]);
    }
    for c in 0..c_in {
        let xplane = c * h * w;
        for o in 0..c_out {
            let yplane = o * oh * ow;
            for ky in 0..kh {
                let offy = ky as isize - pad as isize;
                let (iy0, iy1) = valid_range(h, stride, offy, oh);
                for kx in 0..kw {
                    let wv = wgt[((c * c_out + o) * kh + ky) * kw + kx];
                    if wv == E::zero() {
                        continue;
                    }
                    let offx = kx as isize - pad as isize;
                    let (ix0, ix1) = valid_range(w, stride, offx, ow);
                    for iy in iy0..iy1 {
                        let oy = (iy * stride) as isize + offy;
                        let yrow = yplane + oy as usize * ow;
                        let xrow = xplane + iy * w;
                        for ix in ix0..ix1 {
                            let ox = (ix * stride) as isize + offx;
                            out[yrow + ox as usize] += wv * x[xrow + ix];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn convt2d_bwd<E: Real>(
    x: &[E],
    (c_in, h, w): (usize, usize, usize),
    wgt: &[E],
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    dy: &[E],
    (oh, ow): (usize, usize),
    dx: &mut [E],
    dw: &mut [E],
    db: &mut [E],
) {
    for o in 0..c_out {
        let mut acc = E::zero();
        for v in &dy[o * oh * ow..(o + 1) * oh * ow] {
            acc += *v;
        }
        db[o] += acc;
    }
    for c in 0..c_in {
        let xplane = c * h * w;
        for o in 0..c_out {
            let yplane = o * oh * ow;
            for ky in 0..kh {
                let offy = ky as isize - pad as isize;
                let (iy0, iy1) = valid_range(h, stride, offy, oh);
                for kx in 0..kw {
                    let widx = ((c * c_out + o) * kh + ky) * kw + kx;
                    let wv = wgt[widx];
                    let offx = kx as isize - pad as isize;
                    let (ix0, ix1) = valid_range(w, stride, offx, ow);
                    let mut wacc = E::zero();
                    for iy in iy0..iy1 {
                        let oy = (iy * stride) as isize + offy;
                        let yrow = yplane + oy as usize * ow;
                        let xrow = xplane + iy * w;
                        for ix in ix0..ix1 {
                            let ox = yrow + ((ix * stride) as isize + offx) as usize;
                            let g = dy[ox];
                            wacc += g * x[xrow + ix];
                            dx[xrow + ix] += g * wv;
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
}

pub(super) fn dense_fwd<E: Real>(x: &[E], w: &[E], b: &[E], out: &mut [E]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = b[i];
        for j in 0..n {
            acc += row[j] * x[j];
        }
        *o = acc;
    }
}

pub(super) fn dense_bwd<E: Real>(
    x: &[E],
    w: &[E],
    dy: &[E],
    dx: &mut [E],
    dw: &mut [E],
    db: &mut [E],
) {
    let n = x.len();
    for (i, &g) in dy.iter().enumerate() {
        db[i] += g;
        let row = &w[i * n..(i + 1) * n];
        let drow = &mut dw[i * n..(i + 1) * n];
        for j in 0..n {
            dx[j] += g * row[j];
            drow[j] += g * x[j];
        }
    }
}

/// Bilinear tap table for one axis (half-pixel centers, edge clamped).
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let f = (o as f64 + 0.5) * scale - 0.5;
            let f0 = f.floor();
            let t = f - f0;
            let i0 = (f0 as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = (f0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

pub(super) fn resize_fwd<E: Real>(
    x: &[E],
    (c_in, h, w): (usize, usize, usize),
    out: &mut [E],
    (oh, ow): (usize, usize),
) {
    let ty = resize_taps(oh, h);
    let tx = resize_taps(ow, w);
    for c in 0..c_in {
        let xp = c * h * w;
        let yp = c * oh * ow;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = E::from_f64(fy);
            let r0 = xp + y0 * w;
            let r1 = xp + y1 * w;
            let orow = yp + oy * ow;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = E::from_f64(fx);
                let top = x[r0 + x0] + (x[r0 + x1] - x[r0 + x0]) * fx;
                let bot = x[r1 + x0] + (x[r1 + x1] - x[r1 + x0]) * fx;
                out[orow + ox] = top + (bot - top) * fy;
            }
        }
    }
}

pub(super) fn resize_bwd<E: Real>(
    (c_in, h, w): (usize, usize, usize),
    dy: &[E],
    (oh, ow): (usize, usize),
    dx: &mut [E],
) {
    let ty = resize_taps(oh, h);
    let tx = resize_taps(ow, w);
    for c in 0..c_in {
        let xp = c * h * w;
        let yp = c * oh * ow;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = E::from_f64(fy);
            let one_fy = E::one() - fy;
            let r0 = xp + y0 * w;
            let r1 = xp + y1 * w;
            let orow = yp + oy * ow;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = E::from_f64(fx);
                let one_fx = E::one() - fx;
                let g = dy[orow + ox];
                dx[r0 + x0] += g * one_fy * one_fx;
                dx[r0 + x1] += g * one_fy * fx;
                dx[r1 + x0] += g * fy * one_fx;
                dx[r1 + x1] += g * fy * fx;
            }
        }
    }
}

/// LSTM cell forward. Gate order i, f, g, o. The cell output is
/// `h' = o * c'` (no output squashing), so zeroing the recurrent matrix and
/// pinning i/o open and f closed reduces the cell exactly to
/// `tanh(w_ih x + b)` — the plain fully-connected layer it generalizes.
#[allow(clippy::too_many_arguments)]
pub(super) fn lstm_fwd<E: Real>(
    x: &[E],
    h: &[E],
    c: &[E],
    w_ih: &[E],
    w_hh: &[E],
    b: &[E],
    out: &mut [E],
    gates: &mut Vec<E>,
) {
    let nh = h.len();
    let nin = x.len();
    let mut z = vec![E::zero(); 4 * nh];
    for r in 0..4 * nh {
        let mut acc = b[r];
        let wr = &w_ih[r * nin..(r + 1) * nin];
        for j in 0..nin {
            acc += wr[j] * x[j];
        }
        let ur = &w_hh[r * nh..(r + 1) * nh];
        for j in 0..nh {
            acc += ur[j] * h[j];
        }
        z[r] = acc;
    }
    gates.clear();
    gates.reserve(4 * nh);
    for r in 0..nh {
        gates.push(sigmoid(z[r]));
    }
    for r in nh..2 * nh {
        gates.push(sigmoid(z[r]));
    }
    for r in 2 * nh..3 * nh {
        gates.push(z[r].tanh());
    }
    for r in 3 * nh..4 * nh {
        gates.push(sigmoid(z[r]));
    }
    for j in 0..nh {
        let (i, f, g, o) = (gates[j], gates[nh + j], gates[2 * nh + j], gates[3 * nh + j]);
        let cn = f * c[j] + i * g;
        out[j] = o * cn; // h'
        out[nh + j] = cn; // c'
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn lstm_bwd<E: Real>(
    x: &[E],
    h: &[E],
    c: &[E],
    w_ih: &[E],
    w_hh: &[E],
    gates: &[E],
    out: &[E],
    dout: &[E],
    dx: &mut [E],
    dh: &mut [E],
    dc: &mut [E],
    dw_ih: &mut [E],
    dw_hh: &mut [E],
    db: &mut [E],
) {
    let nh = h.len();
    let nin = x.len();
    let one = E::one();
    let mut dz = vec![E::zero(); 4 * nh];
    for j in 0..nh {
        let (i, f, g, o) = (gates[j], gates[nh + j], gates[2 * nh + j], gates[3 * nh + j]);
        let cn = out[nh + j];
        let dh_out = dout[j];
        let dcn = dout[nh + j] + dh_out * o;
        let do_ = dh_out * cn;
        let df = dcn * c[j];
        let di = dcn * g;
        let dg = dcn * i;
        dc[j] += dcn * f;
        dz[j] = di * i * (one - i);
        dz[nh + j] = df * f * (one - f);
        dz[2 * nh + j] = dg * (one - g * g);
        dz[3 * nh + j] = do_ * o * (one - o);
    }
    for r in 0..4 * nh {
        let g = dz[r];
        db[r] += g;
        let wr = &w_ih[r * nin..(r + 1) * nin];
        let dwr = &mut dw_ih[r * nin..(r + 1) * nin];
        for j in 0..nin {
            dx[j] += g * wr[j];
            dwr[j] += g * x[j];
        }
        let ur = &w_hh[r * nh..(r + 1) * nh];
        let dur = &mut dw_hh[r * nh..(r + 1) * nh];
        for j in 0..nh {
            dh[j] += g * ur[j];
            dur[j] += g * h[j];
        }
    }
}

/// GRU cell forward (reset applied to the recurrent candidate term, two
/// bias vectors). Gate order r, z, n. Saved layout: [r | z | n | hn_pre].
#[allow(clippy::too_many_arguments)]
pub(super) fn gru_fwd<E: Real>(
    x: &[E],
    h: &[E],
    w_ih: &[E],
    w_hh: &[E],
    b_ih: &[E],
    b_hh: &[E],
    out: &mut [E],
    saved: &mut Vec<E>,
) {
    let nh = h.len();
    let nin = x.len();
    let mut gi = vec![E::zero(); 3 * nh];
    let mut gh = vec![E::zero(); 3 * nh];
    for r in 0..3 * nh {
        let mut acc = b_ih[r];
        let wr = &w_ih[r * nin..(r + 1) * nin];
        for j in 0..nin {
            acc += wr[j] * x[j];
        }
        gi[r] = acc;
        let mut acc = b_hh[r];
        let ur = &w_hh[r * nh..(r + 1) * nh];
        for j in 0..nh {
            acc += ur[j] * h[j];
        }
        gh[r] = acc;
    }
    saved.clear();
    saved.reserve(4 * nh);
    for j in 0..nh {
        saved.push(sigmoid(gi[j] + gh[j])); // r
    }
    for j in 0..nh {
        saved.push(sigmoid(gi[nh + j] + gh[nh + j])); // z
    }
    for j in 0..nh {
        let r = saved[j];
        saved.push((gi[2 * nh + j] + r * gh[2 * nh + j]).tanh()); // n
    }
    for j in 0..nh {
        saved.push(gh[2 * nh + j]); // hn_pre
    }
    for j in 0..nh {
        let z = saved[nh + j];
        let n = saved[2 * nh + j];
        out[j] = (E::one() - z) * n + z * h[j];
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn gru_bwd<E: Real>(
    x: &[E],
    h: &[E],
    w_ih: &[E],
    w_hh: &[E],
    saved: &[E],
    dout: &[E],
    dx: &mut [E],
    dh: &mut [E],
    dw_ih: &mut [E],
    dw_hh: &mut [E],
    db_ih: &mut [E],
    db_hh: &mut [E],
) {
    let nh = h.len();
    let nin = x.len();
    let one = E::one();
    let mut dgi = vec![E::zero(); 3 * nh];
    let mut dgh = vec![E::zero(); 3 * nh];
    for j in 0..nh {
        let r = saved[j];
        let z = saved[nh + j];
        let n = saved[2 * nh + j];
        let hn_pre = saved[3 * nh + j];
        let g = dout[j];
        let dn = g * (one - z);
        dh[j] += g * z;
        let dzg = g * (h[j] - n);
        let dpre = dn * (one - n * n);
        let dr = dpre * hn_pre;
        dgi[2 * nh + j] = dpre;
        dgh[2 * nh + j] = dpre * r;
        let dzr = dr * r * (one - r);
        let dzz = dzg * z * (one - z);
        dgi[j] = dzr;
        dgh[j] = dzr;
        dgi[nh + j] = dzz;
        dgh[nh + j] = dzz;
    }
    for r in 0..3 * nh {
        let gi = dgi[r];
        let gh = dgh[r];
        db_ih[r] += gi;
        db_hh[r] += gh;
        let wr = &w_ih[r * nin..(r + 1) * nin];
        let dwr = &mut dw_ih[r * nin..(r + 1) * nin];
        for j in 0..nin {
            dx[j] += gi * wr[j];
            dwr[j] += gi * x[j];
        }
        let ur = &w_hh[r * nh..(r + 1) * nh];
        let dur = &mut dw_hh[r * nh..(r + 1) * nh];
        for j in 0..nh {
            dh[j] += gh * ur[j];
            dur[j] += gh * h[j];
        }
    }
}
