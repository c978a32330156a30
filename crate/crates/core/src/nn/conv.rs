//! 3D convolution, max pooling, and trilinear upsampling on [B, C, X, Y, Z]
//! tensors (z fastest). Stride is fixed at 1 for convolutions; pooling and
//! upsampling work in units of 2.

use rand_chacha::ChaCha20Rng;

use super::{Module, Param, Tensor};
use crate::error::{Error, Result};

/// Zero-padded 3D convolution with cubic kernels and stride 1.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param,
    pub b: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    cache_x: Option<Tensor>,
}

impl Conv3d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        rng: &mut ChaCha20Rng,
    ) -> Conv3d {
        let fan_in = cin * k * k * k;
        Conv3d {
            w: Param::kaiming(&format!("{name}.w"), &[cout, cin, k, k, k], fan_in, rng),
            b: Param::zeros(&format!("{name}.b"), &[cout]),
            cin,
            cout,
            k,
            pad,
            cache_x: None,
        }
    }

    fn out_spatial(&self, n: usize) -> usize {
        n + 2 * self.pad + 1 - self.k
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 5 || x.shape[1] != self.cin {
            return Err(Error::ShapeMismatch(format!(
                "conv3d (cin={}) got {:?}",
                self.cin, x.shape
            )));
        }
        let (bsz, _, nx, ny, nz) = dims5(&x.shape);
        if nx + 2 * self.pad < self.k || ny + 2 * self.pad < self.k || nz + 2 * self.pad < self.k {
            return Err(Error::ShapeMismatch(format!(
                "conv3d kernel {} exceeds padded input {:?}",
                self.k, x.shape
            )));
        }
        let (ox, oy, oz) = (
            self.out_spatial(nx),
            self.out_spatial(ny),
            self.out_spatial(nz),
        );
        let mut out = Tensor::zeros(&[bsz, self.cout, ox, oy, oz]);
        for bi in 0..bsz {
            for co in 0..self.cout {
                let obase = (bi * self.cout + co) * ox * oy * oz;
                let bias = self.b.value[co];
                out.data[obase..obase + ox * oy * oz]
                    .iter_mut()
                    .for_each(|v| *v = bias);
                for ci in 0..self.cin {
                    let ibase = (bi * self.cin + ci) * nx * ny * nz;
                    for kx in 0..self.k {
                        let sx = kx as isize - self.pad as isize;
                        let (x_lo, x_hi) = tap_range(ox, nx, sx);
                        for ky in 0..self.k {
                            let sy = ky as isize - self.pad as isize;
                            let (y_lo, y_hi) = tap_range(oy, ny, sy);
                            for kz in 0..self.k {
                                let sz = kz as isize - self.pad as isize;
                                let (z_lo, z_hi) = tap_range(oz, nz, sz);
                                if z_lo >= z_hi {
                                    continue;
                                }
                                let wv = self.w.value
                                    [((co * self.cin + ci) * self.k * self.k + kx * self.k + ky)
                                        * self.k
                                        + kz];
                                if wv == 0.0 {
                                    continue;
                                }
                                for xo in x_lo..x_hi {
                                    let xi = (xo as isize + sx) as usize;
                                    for yo in y_lo..y_hi {
                                        let yi = (yo as isize + sy) as usize;
                                        let orow = obase + (xo * oy + yo) * oz;
                                        let irow = ibase
                                            + (xi * ny + yi) * nz
                                            + (z_lo as isize + sz) as usize;
                                        let src = &x.data[irow..irow + (z_hi - z_lo)];
                                        let dst =
                                            &mut out.data[orow + z_lo..orow + z_hi];
                                        for (d, s) in dst.iter_mut().zip(src) {
                                            *d += wv * s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("backward before forward");
        let (bsz, _, nx, ny, nz) = dims5(&x.shape);
        let (_, _, ox, oy, oz) = dims5(&gout.shape);
        let mut gx = Tensor::zeros(&x.shape);
        for bi in 0..bsz {
            for co in 0..self.cout {
                let obase = (bi * self.cout + co) * ox * oy * oz;
                let gb: f64 = gout.data[obase..obase + ox * oy * oz].iter().sum();
                self.b.grad[co] += gb;
                for ci in 0..self.cin {
                    let ibase = (bi * self.cin + ci) * nx * ny * nz;
                    for kx in 0..self.k {
                        let sx = kx as isize - self.pad as isize;
                        let (x_lo, x_hi) = tap_range(ox, nx, sx);
                        for ky in 0..self.k {
                            let sy = ky as isize - self.pad as isize;
                            let (y_lo, y_hi) = tap_range(oy, ny, sy);
                            for kz in 0..self.k {
                                let sz = kz as isize - self.pad as isize;
                                let (z_lo, z_hi) = tap_range(oz, nz, sz);
                                if z_lo >= z_hi {
                                    continue;
                                }
                                let widx = ((co * self.cin + ci) * self.k * self.k
                                    + kx * self.k
                                    + ky)
                                    * self.k
                                    + kz;
                                let wv = self.w.value[widx];
                                let mut gw = 0.0;
                                for xo in x_lo..x_hi {
                                    let xi = (xo as isize + sx) as usize;
                                    for yo in y_lo..y_hi {
                                        let yi = (yo as isize + sy) as usize;
                                        let orow = obase + (xo * oy + yo) * oz;
                                        let irow = ibase
                                            + (xi * ny + yi) * nz
                                            + (z_lo as isize + sz) as usize;
                                        let gslice = &gout.data[orow + z_lo..orow + z_hi];
                                        let xslice = &x.data[irow..irow + (z_hi - z_lo)];
                                        for (g, xv) in gslice.iter().zip(xslice) {
                                            gw += g * xv;
                                        }
                                        let gxslice =
                                            &mut gx.data[irow..irow + (z_hi - z_lo)];
                                        for (gxv, g) in gxslice.iter_mut().zip(gslice) {
                                            *gxv += wv * g;
                                        }
                                    }
                                }
                                self.w.grad[widx] += gw;
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

fn dims5(shape: &[usize]) -> (usize, usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3], shape[4])
}

/// Output index range [lo, hi) for which `idx + shift` stays inside an input
/// axis of length `n_in`.
fn tap_range(n_out: usize, n_in: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi_signed = (n_in as isize - shift).min(n_out as isize);
    (lo.min(n_out), hi_signed.max(0) as usize)
}

/// 2×2×2 max pooling with stride 2. Spatial dims must be even.
#[derive(Debug, Clone, Default)]
pub struct MaxPool3d {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool3d {
    pub fn new() -> MaxPool3d {
        MaxPool3d::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, nx, ny, nz) = dims5(&x.shape);
        if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "max pool needs even spatial dims, got {:?}",
                x.shape
            )));
        }
        let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
        let mut out = Tensor::zeros(&[bsz, c, ox, oy, oz]);
        self.argmax = vec![0; out.data.len()];
        self.in_shape = x.shape.clone();
        for bc in 0..bsz * c {
            let ibase = bc * nx * ny * nz;
            let obase = bc * ox * oy * oz;
            for xo in 0..ox {
                for yo in 0..oy {
                    for zo in 0..oz {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dx in 0..2 {
                            for dy in 0..2 {
                                for dz in 0..2 {
                                    let idx = ibase
                                        + ((2 * xo + dx) * ny + 2 * yo + dy) * nz
                                        + 2 * zo
                                        + dz;
                                    if x.data[idx] > best {
                                        best = x.data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let oidx = obase + (xo * oy + yo) * oz + zo;
                        out.data[oidx] = best;
                        self.argmax[oidx] = best_idx;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, gout: &Tensor) -> Tensor {
        let mut gx = Tensor::zeros(&self.in_shape);
        for (oidx, &iidx) in self.argmax.iter().enumerate() {
            gx.data[iidx] += gout.data[oidx];
        }
        gx
    }
}

/// Trilinear ×2 upsampling with half-pixel centers (source coordinate
/// `(o + 0.5)/2 − 0.5`, clamped). The operation is linear, so the backward
/// pass scatters with the same recomputed weights.
#[derive(Debug, Clone, Default)]
pub struct Upsample2x {
    in_shape: Vec<usize>,
}

/// Per-output-index interpolation taps for one axis of length `n_in`.
fn axis_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Upsample2x {
    pub fn new() -> Upsample2x {
        Upsample2x::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "upsample expects [B, C, X, Y, Z], got {:?}",
                x.shape
            )));
        }
        let (bsz, c, nx, ny, nz) = dims5(&x.shape);
        self.in_shape = x.shape.clone();
        let (tx, ty, tz) = (axis_taps(nx), axis_taps(ny), axis_taps(nz));
        let mut out = Tensor::zeros(&[bsz, c, 2 * nx, 2 * ny, 2 * nz]);
        for bc in 0..bsz * c {
            let ibase = bc * nx * ny * nz;
            let obase = bc * 8 * nx * ny * nz;
            let mut oidx = obase;
            for &(x0, x1, fx) in &tx {
                for &(y0, y1, fy) in &ty {
                    for &(z0, z1, fz) in &tz {
                        let at = |xi: usize, yi: usize, zi: usize| {
                            x.data[ibase + (xi * ny + yi) * nz + zi]
                        };
                        let c00 = at(x0, y0, z0) * (1.0 - fz) + at(x0, y0, z1) * fz;
                        let c01 = at(x0, y1, z0) * (1.0 - fz) + at(x0, y1, z1) * fz;
                        let c10 = at(x1, y0, z0) * (1.0 - fz) + at(x1, y0, z1) * fz;
                        let c11 = at(x1, y1, z0) * (1.0 - fz) + at(x1, y1, z1) * fz;
                        let c0 = c00 * (1.0 - fy) + c01 * fy;
                        let c1 = c10 * (1.0 - fy) + c11 * fy;
                        out.data[oidx] = c0 * (1.0 - fx) + c1 * fx;
                        oidx += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, gout: &Tensor) -> Tensor {
        let (bsz, c, nx, ny, nz) = dims5(&self.in_shape);
        let (tx, ty, tz) = (axis_taps(nx), axis_taps(ny), axis_taps(nz));
        let mut gx = Tensor::zeros(&self.in_shape);
        for bc in 0..bsz * c {
            let ibase = bc * nx * ny * nz;
            let obase = bc * 8 * nx * ny * nz;
            let mut oidx = obase;
            for &(x0, x1, fx) in &tx {
                for &(y0, y1, fy) in &ty {
                    for &(z0, z1, fz) in &tz {
                        let g = gout.data[oidx];
                        oidx += 1;
                        if g == 0.0 {
                            continue;
                        }
                        let mut add = |xi: usize, yi: usize, zi: usize, w: f64| {
                            gx.data[ibase + (xi * ny + yi) * nz + zi] += g * w;
                        };
                        add(x0, y0, z0, (1.0 - fx) * (1.0 - fy) * (1.0 - fz));
                        add(x0, y0, z1, (1.0 - fx) * (1.0 - fy) * fz);
                        add(x0, y1, z0, (1.0 - fx) * fy * (1.0 - fz));
                        add(x0, y1, z1, (1.0 - fx) * fy * fz);
                        add(x1, y0, z0, fx * (1.0 - fy) * (1.0 - fz));
                        add(x1, y0, z1, fx * (1.0 - fy) * fz);
                        add(x1, y1, z0, fx * fy * (1.0 - fz));
                        add(x1, y1, z1, fx * fy * fz);
                    }
                }
            }
        }
        gx
    }
}
