//! Slice-level numeric kernels backing the graph operations.
//!
//! Every kernel works on flat row-major buffers with explicit extents. Forward
//! and backward kernels live side by side so the adjoint of each is easy to
//! audit against its primal.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Adjoint of [`matmul`]: returns `(da, db)` given `dout`.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    dout: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &g) in dbrow.iter_mut().zip(drow) {
                *o += av * g;
            }
        }
    }
    (da, db)
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kh) / self.stride + 1,
            (self.width + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    /// Output columns `ox` for which `ox*stride + kx - pad` lands inside the input.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Zero-padded cross-correlation (no kernel flip). Input `B×C×H×W`, kernel `O×C×kh×kw`.
pub fn conv2d(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    let hw = g.height * g.width;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let obase = (b * g.out_ch + o) * oh * ow;
            for c in 0..g.in_ch {
                let ibase = (b * g.in_ch + c) * hw;
                for ky in 0..g.kh {
                    let (ylo, yhi) = g.valid_range(ky, g.height, oh);
                    for kx in 0..g.kw {
                        let w = kernel[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = g.valid_range(kx, g.width, ow);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut out[obase + oy * ow..obase + (oy + 1) * ow];
                            let irow = &input[ibase + iy * g.width..ibase + (iy + 1) * g.width];
                            if g.stride == 1 {
                                let ix0 = xlo + kx - g.pad;
                                for (o_, &i_) in orow[xlo..xhi]
                                    .iter_mut()
                                    .zip(&irow[ix0..ix0 + (xhi - xlo)])
                                {
                                    *o_ += w * i_;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    orow[ox] += w * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`]: returns `(dinput, dkernel)`.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_hw();
    let hw = g.height * g.width;
    let mut din = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let obase = (b * g.out_ch + o) * oh * ow;
            for c in 0..g.in_ch {
                let ibase = (b * g.in_ch + c) * hw;
                for ky in 0..g.kh {
                    let (ylo, yhi) = g.valid_range(ky, g.height, oh);
                    for kx in 0..g.kw {
                        let kidx = ((o * g.in_ch + c) * g.kh + ky) * g.kw + kx;
                        let w = kernel[kidx];
                        let (xlo, xhi) = g.valid_range(kx, g.width, ow);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &dout[obase + oy * ow..obase + (oy + 1) * ow];
                            let ioff = ibase + iy * g.width;
                            if g.stride == 1 {
                                let ix0 = xlo + kx - g.pad;
                                let n = xhi - xlo;
                                let irow = &input[ioff + ix0..ioff + ix0 + n];
                                let gsl = &grow[xlo..xhi];
                                acc += irow.iter().zip(gsl).map(|(a, b)| a * b).sum::<f64>();
                                let drow = &mut din[ioff + ix0..ioff + ix0 + n];
                                for (d, &gv) in drow.iter_mut().zip(gsl) {
                                    *d += w * gv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    acc += input[ioff + ix] * grow[ox];
                                    din[ioff + ix] += w * grow[ox];
                                }
                            }
                        }
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
    (din, dk)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Order-independent sum: terms are added in ascending order, so any
/// permutation of the same multiset yields identical bits.
pub fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Buffers for one selective-scan call. Sequences are `N×D` (token-major),
/// input-dependent projections `N×S`, the state matrix `D×S`.
pub struct ScanInputs<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub reverse: bool,
}

impl ScanInputs<'_> {
    fn order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.len).rev())
        } else {
            Box::new(0..self.len)
        }
    }
}

/// Diagonal selective scan with ZOH on `A` and Euler on `B`:
///
/// `h_k = exp(Δ_k A) ⊙ h_{k-1} + Δ_k B_k u_k`, `y_k = C_k · h_k + D u_k`.
///
/// Returns `(y, states)` where `states[k]` is `h_k` (`D×S`) indexed by token.
pub fn selective_scan(s: &ScanInputs<'_>) -> (Vec<f64>, Vec<f64>) {
    let (dn, sn) = (s.channels, s.state);
    let mut y = vec![0.0; s.len * dn];
    let mut states = vec![0.0; s.len * dn * sn];
    let mut h = vec![0.0; dn * sn];
    for k in s.order() {
        let bk = &s.b[k * sn..(k + 1) * sn];
        let ck = &s.c[k * sn..(k + 1) * sn];
        for ch in 0..dn {
            let dt = s.delta[k * dn + ch];
            let uk = s.u[k * dn + ch];
            let hrow = &mut h[ch * sn..(ch + 1) * sn];
            let arow = &s.a[ch * sn..(ch + 1) * sn];
            let mut acc = 0.0;
            for j in 0..sn {
                hrow[j] = (dt * arow[j]).exp() * hrow[j] + dt * bk[j] * uk;
                acc += ck[j] * hrow[j];
            }
            y[k * dn + ch] = acc + s.d[ch] * uk;
        }
        states[k * dn * sn..(k + 1) * dn * sn].copy_from_slice(&h);
    }
    (y, states)
}

/// Gradients of [`selective_scan`] with respect to each input buffer.
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

pub fn selective_scan_backward(s: &ScanInputs<'_>, states: &[f64], dy: &[f64]) -> ScanGrads {
    let (n, dn, sn) = (s.len, s.channels, s.state);
    let mut g = ScanGrads {
        u: vec![0.0; n * dn],
        delta: vec![0.0; n * dn],
        a: vec![0.0; dn * sn],
        b: vec![0.0; n * sn],
        c: vec![0.0; n * sn],
        d: vec![0.0; dn],
    };
    let order: Vec<usize> = s.order().collect();
    let zeros = vec![0.0; dn * sn];
    let mut gh = vec![0.0; dn * sn];
    for (t, &k) in order.iter().enumerate().rev() {
        let hk = &states[k * dn * sn..(k + 1) * dn * sn];
        let hprev = if t == 0 {
            &zeros[..]
        } else {
            let p = order[t - 1];
            &states[p * dn * sn..(p + 1) * dn * sn]
        };
        let bk = &s.b[k * sn..(k + 1) * sn];
        let ck = &s.c[k * sn..(k + 1) * sn];
        for ch in 0..dn {
            let gy = dy[k * dn + ch];
            let dt = s.delta[k * dn + ch];
            let uk = s.u[k * dn + ch];
            g.d[ch] += gy * uk;
            let mut gu = gy * s.d[ch];
            let mut gdt = 0.0;
            for j in 0..sn {
                let idx = ch * sn + j;
                let ghj = gh[idx] + gy * ck[j];
                g.c[k * sn + j] += gy * hk[idx];
                let aj = s.a[idx];
                let abar = (dt * aj).exp();
                let ga = ghj * hprev[idx] * abar;
                gdt += ga * aj + ghj * bk[j] * uk;
                g.a[idx] += ga * dt;
                g.b[k * sn + j] += ghj * dt * uk;
                gu += ghj * dt * bk[j];
                gh[idx] = ghj * abar;
            }
            g.u[k * dn + ch] += gu;
            g.delta[k * dn + ch] += gdt;
        }
    }
    g
}

/// Depthwise 1-D convolution over tokens, causal in the scan direction.
///
/// Forward direction: `y_k = Σ_j w[c,j] x_{k-(W-1)+j}`; reverse direction
/// mirrors the window so that `y_k` only sees `x_k..x_{k+W-1}`.
pub fn causal_conv1d(x: &[f64], w: &[f64], len: usize, ch: usize, width: usize, reverse: bool) -> Vec<f64> {
    let mut y = vec![0.0; len * ch];
    for k in 0..len {
        for j in 0..width {
            let Some(src) = causal_source(k, j, len, width, reverse) else {
                continue;
            };
            for c in 0..ch {
                y[k * ch + c] += w[c * width + j] * x[src * ch + c];
            }
        }
    }
    y
}

pub fn causal_conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    len: usize,
    ch: usize,
    width: usize,
    reverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for k in 0..len {
        for j in 0..width {
            let Some(src) = causal_source(k, j, len, width, reverse) else {
                continue;
            };
            for c in 0..ch {
                let gv = dy[k * ch + c];
                dx[src * ch + c] += w[c * width + j] * gv;
                dw[c * width + j] += x[src * ch + c] * gv;
            }
        }
    }
    (dx, dw)
}

#[inline]
fn causal_source(k: usize, j: usize, len: usize, width: usize, reverse: bool) -> Option<usize> {
    let back = width - 1 - j;
    if reverse {
        let src = k + back;
        (src < len).then_some(src)
    } else {
        k.checked_sub(back)
    }
}
