// Dense loops behind the graph primitives. All buffers are row-major and
// every `*_grad_*` function accumulates into its output.

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Input position read by output `l` at kernel tap `k`, if inside.
    #[inline]
    fn tap(&self, l: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (l * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// `out[m, n] = a[m, k] * b[k, n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn conv1d_forward(geom: &ConvGeom, len_out: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    let kk = geom.kernel;
    for b in 0..geom.batch {
        for o in 0..geom.c_out {
            let orow = &mut out[(b * geom.c_out + o) * len_out..][..len_out];
            for c in 0..geom.c_in {
                let xrow = &x[(b * geom.c_in + c) * geom.len_in..][..geom.len_in];
                let wrow = &w[(o * geom.c_in + c) * kk..][..kk];
                for (l, acc) in orow.iter_mut().enumerate() {
                    for (k, &wv) in wrow.iter().enumerate() {
                        if let Some(pos) = geom.tap(l, k, geom.len_in) {
                            *acc += wv * xrow[pos];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_grad_input(geom: &ConvGeom, len_out: usize, w: &[f64], gy: &[f64], gx: &mut [f64]) {
    let kk = geom.kernel;
    for b in 0..geom.batch {
        for o in 0..geom.c_out {
            let grow = &gy[(b * geom.c_out + o) * len_out..][..len_out];
            for c in 0..geom.c_in {
                let gxrow = &mut gx[(b * geom.c_in + c) * geom.len_in..][..geom.len_in];
                let wrow = &w[(o * geom.c_in + c) * kk..][..kk];
                for (l, &gv) in grow.iter().enumerate() {
                    for (k, &wv) in wrow.iter().enumerate() {
                        if let Some(pos) = geom.tap(l, k, geom.len_in) {
                            gxrow[pos] += wv * gv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_grad_weight(geom: &ConvGeom, len_out: usize, x: &[f64], gy: &[f64], gw: &mut [f64]) {
    let kk = geom.kernel;
    for b in 0..geom.batch {
        for o in 0..geom.c_out {
            let grow = &gy[(b * geom.c_out + o) * len_out..][..len_out];
            for c in 0..geom.c_in {
                let xrow = &x[(b * geom.c_in + c) * geom.len_in..][..geom.len_in];
                let gwrow = &mut gw[(o * geom.c_in + c) * kk..][..kk];
                for (l, &gv) in grow.iter().enumerate() {
                    for (k, gwv) in gwrow.iter_mut().enumerate() {
                        if let Some(pos) = geom.tap(l, k, geom.len_in) {
                            *gwv += xrow[pos] * gv;
                        }
                    }
                }
            }
        }
    }
}

// Transposed convolution: input position `l` scatters into output position
// `l * stride + k - padding`, i.e. the same tap relation with roles swapped.

pub(crate) fn conv_transpose1d_forward(geom: &ConvGeom, len_out: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    let kk = geom.kernel;
    for b in 0..geom.batch {
        for c in 0..geom.c_in {
            let xrow = &x[(b * geom.c_in + c) * geom.len_in..][..geom.len_in];
            for o in 0..geom.c_out {
                let orow = &mut out[(b * geom.c_out + o) * len_out..][..len_out];
                let wrow = &w[(c * geom.c_out + o) * kk..][..kk];
                for (l, &xv) in xrow.iter().enumerate() {
                    for (k, &wv) in wrow.iter().enumerate() {
                        if let Some(pos) = geom.tap(l, k, len_out) {
                            orow[pos] += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose1d_grad_input(
    geom: &ConvGeom,
    len_out: usize,
    w: &[f64],
    gy: &[f64],
    gx: &mut [f64],
) {
    let kk = geom.kernel;
    for b in 0..geom.batch {
        for c in 0..geom.c_in {
            let gxrow = &mut gx[(b * geom.c_in + c) * geom.len_in..][..geom.len_in];
            for o in 0..geom.c_out {
                let grow = &gy[(b * geom.c_out + o) * len_out..][..len_out];
                let wrow = &w[(c * geom.c_out + o) * kk..][..kk];
                for (l, gxv) in gxrow.iter_mut().enumerate() {
                    for (k, &wv) in wrow.iter().enumerate() {
                        if let Some(pos) = geom.tap(l, k, len_out) {
                            *gxv += wv * grow[pos];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose1d_grad_weight(
    geom: &ConvGeom,
    len_out: usize,
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
) {
    let kk = geom.kernel;
    for b in 0..geom.batch {
        for c in 0..geom.c_in {
            let xrow = &x[(b * geom.c_in + c) * geom.len_in..][..geom.len_in];
            for o in 0..geom.c_out {
                let grow = &gy[(b * geom.c_out + o) * len_out..][..len_out];
                let gwrow = &mut gw[(c * geom.c_out + o) * kk..][..kk];
                for (l, &xv) in xrow.iter().enumerate() {
                    for (k, gwv) in gwrow.iter_mut().enumerate() {
                        if let Some(pos) = geom.tap(l, k, len_out) {
                            *gwv += xv * grow[pos];
                        }
                    }
                }
            }
        }
    }
}
