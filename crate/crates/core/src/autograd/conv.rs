//! Naive dense 3D convolution kernels shared by the tape's forward and
//! backward passes. Layout is channel-major: `[C, D0, D1, D2]`, row-major.
//!
//! Output extents follow the standard formulas:
//! - conv3d:            `out = (in + 2*pad - k) / stride + 1`
//! - conv_transpose3d:  `out = (in - 1) * stride + k`

use super::array::Scalar;

pub fn conv3d_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose3d_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}

pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
}

#[inline]
fn idx4(c: usize, z: usize, y: usize, x: usize, sp: &[usize; 3]) -> usize {
    ((c * sp[0] + z) * sp[1] + y) * sp[2] + x
}

/// Forward conv3d. `w` layout: `[cout, cin, k, k, k]`, `b` layout: `[cout]`.
pub fn conv3d_forward<F: Scalar>(x: &[F], w: &[F], b: &[F], g: &ConvGeom) -> Vec<F> {
    let mut out = vec![F::zero(); g.cout * g.out_sp[0] * g.out_sp[1] * g.out_sp[2]];
    for co in 0..g.cout {
        for oz in 0..g.out_sp[0] {
            for oy in 0..g.out_sp[1] {
                for ox in 0..g.out_sp[2] {
                    let mut acc = b[co];
                    for ci in 0..g.cin {
                        for kz in 0..g.k {
                            let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                            if iz < 0 || iz as usize >= g.in_sp[0] {
                                continue;
                            }
                            for ky in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy as usize >= g.in_sp[1] {
                                    continue;
                                }
                                for kx in 0..g.k {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix as usize >= g.in_sp[2] {
                                        continue;
                                    }
                                    let wi = (((co * g.cin + ci) * g.k + kz) * g.k + ky) * g.k + kx;
                                    acc += x[idx4(ci, iz as usize, iy as usize, ix as usize, &g.in_sp)]
                                        * w[wi];
                                }
                            }
                        }
                    }
                    out[idx4(co, oz, oy, ox, &g.out_sp)] = acc;
                }
            }
        }
    }
    out
}

/// Backward conv3d: accumulates into dx, dw, db (any may be empty to skip).
pub fn conv3d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    gout: &[F],
    g: &ConvGeom,
    dx: &mut [F],
    dw: &mut [F],
    db: &mut [F],
) {
    for co in 0..g.cout {
        for oz in 0..g.out_sp[0] {
            for oy in 0..g.out_sp[1] {
                for ox in 0..g.out_sp[2] {
                    let go = gout[idx4(co, oz, oy, ox, &g.out_sp)];
                    if !db.is_empty() {
                        db[co] += go;
                    }
                    for ci in 0..g.cin {
                        for kz in 0..g.k {
                            let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                            if iz < 0 || iz as usize >= g.in_sp[0] {
                                continue;
                            }
                            for ky in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy as usize >= g.in_sp[1] {
                                    continue;
                                }
                                for kx in 0..g.k {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix as usize >= g.in_sp[2] {
                                        continue;
                                    }
                                    let xi =
                                        idx4(ci, iz as usize, iy as usize, ix as usize, &g.in_sp);
                                    let wi = (((co * g.cin + ci) * g.k + kz) * g.k + ky) * g.k + kx;
                                    if !dx.is_empty() {
                                        dx[xi] += go * w[wi];
                                    }
                                    if !dw.is_empty() {
                                        dw[wi] += go * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward transposed conv3d. `w` layout: `[cin, cout, k, k, k]` (no padding).
pub fn conv_transpose3d_forward<F: Scalar>(x: &[F], w: &[F], b: &[F], g: &ConvGeom) -> Vec<F> {
    let out_n = g.cout * g.out_sp[0] * g.out_sp[1] * g.out_sp[2];
    let mut out = vec![F::zero(); out_n];
    for co in 0..g.cout {
        let base = co * g.out_sp[0] * g.out_sp[1] * g.out_sp[2];
        for v in &mut out[base..base + g.out_sp[0] * g.out_sp[1] * g.out_sp[2]] {
            *v = b[co];
        }
    }
    for ci in 0..g.cin {
        for iz in 0..g.in_sp[0] {
            for iy in 0..g.in_sp[1] {
                for ix in 0..g.in_sp[2] {
                    let xv = x[idx4(ci, iz, iy, ix, &g.in_sp)];
                    for co in 0..g.cout {
                        for kz in 0..g.k {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let wi = (((ci * g.cout + co) * g.k + kz) * g.k + ky) * g.k + kx;
                                    let oi = idx4(
                                        co,
                                        iz * g.stride + kz,
                                        iy * g.stride + ky,
                                        ix * g.stride + kx,
                                        &g.out_sp,
                                    );
                                    out[oi] += xv * w[wi];
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

pub fn conv_transpose3d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    gout: &[F],
    g: &ConvGeom,
    dx: &mut [F],
    dw: &mut [F],
    db: &mut [F],
) {
    if !db.is_empty() {
        for co in 0..g.cout {
            let base = co * g.out_sp[0] * g.out_sp[1] * g.out_sp[2];
            for v in &gout[base..base + g.out_sp[0] * g.out_sp[1] * g.out_sp[2]] {
                db[co] += *v;
            }
        }
    }
    for ci in 0..g.cin {
        for iz in 0..g.in_sp[0] {
            for iy in 0..g.in_sp[1] {
                for ix in 0..g.in_sp[2] {
                    let xi = idx4(ci, iz, iy, ix, &g.in_sp);
                    for co in 0..g.cout {
                        for kz in 0..g.k {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let wi = (((ci * g.cout + co) * g.k + kz) * g.k + ky) * g.k + kx;
                                    let oi = idx4(
                                        co,
                                        iz * g.stride + kz,
                                        iy * g.stride + ky,
                                        ix * g.stride + kx,
                                        &g.out_sp,
                                    );
                                    let go = gout[oi];
                                    if !dx.is_empty() {
                                        dx[xi] += go * w[wi];
                                    }
                                    if !dw.is_empty() {
                                        dw[wi] += go * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
