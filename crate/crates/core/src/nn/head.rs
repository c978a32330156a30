//! Per-class dynamic segmentation head: a small generator network maps each
//! fused class embedding to the flat parameter vector of a three-layer
//! 1×1×1 conv head, which is then applied voxelwise to the decoder output.

use rand_chacha::ChaCha20Rng;

use super::linear::Linear;
use super::{relu_backward, relu_forward, sigmoid, Module, Param, Tensor};
use crate::error::{Error, Result};
use crate::volume::Grid3;

/// Length of the flat parameter vector for a head with `c_dec` input
/// channels and `c_mid` hidden channels:
/// `[w1 (c_mid×c_dec), b1, w2 (c_mid×c_mid), b2, w3 (1×c_mid), b3]`.
pub fn theta_len(c_dec: usize, c_mid: usize) -> usize {
    (c_dec * c_mid + c_mid) + (c_mid * c_mid + c_mid) + (c_mid + 1)
}

/// Maps fused embeddings [B, K, D] to head parameters [B, K, theta_len].
#[derive(Debug, Clone)]
pub struct ThetaGenerator {
    pub hidden: Linear,
    pub out: Linear,
    pub c_dec: usize,
    pub c_mid: usize,
    mask: Vec<bool>,
}

impl ThetaGenerator {
    pub fn new(
        name: &str,
        dim: usize,
        c_dec: usize,
        c_mid: usize,
        rng: &mut ChaCha20Rng,
    ) -> ThetaGenerator {
        let mut out = Linear::new(&format!("{name}.out"), dim, theta_len(c_dec, c_mid), true, rng);
        // The last theta slot is the head's final bias b3. Start it at the
        // foreground-prior logit (σ(−4) ≈ 2%, the typical vessel fraction)
        // so fresh heads predict background softly; otherwise the background
        // cross-entropy saturates every class head early and they recover
        // one by one instead of together.
        if let Some(b) = out.b.as_mut() {
            *b.value.last_mut().expect("theta_len ≥ 1") = -4.0;
        }
        ThetaGenerator {
            hidden: Linear::new(&format!("{name}.hidden"), dim, dim, true, rng),
            out,
            c_dec,
            c_mid,
            mask: Vec::new(),
        }
    }

    pub fn forward(&mut self, h: &Tensor) -> Result<Tensor> {
        if h.shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "theta generator expects [B, K, D], got {:?}",
                h.shape
            )));
        }
        let mut z = self.hidden.forward(h)?;
        self.mask = relu_forward(&mut z.data);
        self.out.forward(&z)
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let mut g = self.out.backward(gout);
        relu_backward(&mut g.data, &self.mask);
        self.hidden.backward(&g)
    }
}

impl Module for ThetaGenerator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hidden.visit_params(f);
        self.out.visit_params(f);
    }
}

/// Applies generated head parameters voxelwise to decoder features.
///
/// Features are [B, C, X, Y, Z], parameters [B, K, theta_len(C, c_mid)];
/// the output holds per-class foreground probabilities [B, K, X, Y, Z].
/// The head at each voxel is linear(C→c_mid) + ReLU, linear(c_mid→c_mid) +
/// ReLU, linear(c_mid→1) + sigmoid. The backward pass recomputes hidden
/// activations from the cached inputs instead of storing them per voxel.
#[derive(Debug, Clone)]
pub struct DynamicHead {
    pub c_mid: usize,
    cache: Option<(Tensor, Tensor)>,
}

impl DynamicHead {
    pub fn new(c_mid: usize) -> DynamicHead {
        DynamicHead { c_mid, cache: None }
    }

    pub fn forward(&mut self, f: &Tensor, theta: &Tensor) -> Result<Tensor> {
        let c_mid = self.c_mid;
        if f.shape.len() != 5 || theta.shape.len() != 3 || f.shape[0] != theta.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "dynamic head got features {:?}, theta {:?}",
                f.shape, theta.shape
            )));
        }
        let (bsz, c) = (f.shape[0], f.shape[1]);
        let kc = theta.shape[1];
        if theta.shape[2] != theta_len(c, c_mid) {
            return Err(Error::ShapeMismatch(format!(
                "theta length {} != expected {} for C={c}, mid={c_mid}",
                theta.shape[2],
                theta_len(c, c_mid)
            )));
        }
        let nvox: usize = f.shape[2..].iter().product();
        let mut out = Tensor::zeros(&[bsz, kc, f.shape[2], f.shape[3], f.shape[4]]);
        let mut h1 = vec![0.0; c_mid];
        let mut h2 = vec![0.0; c_mid];
        for bi in 0..bsz {
            for k in 0..kc {
                let th = &theta.data[(bi * kc + k) * theta.shape[2]..];
                let (w1, b1, w2, b2, w3, b3) = split_theta(th, c, c_mid);
                let obase = (bi * kc + k) * nvox;
                for v in 0..nvox {
                    for m in 0..c_mid {
                        let mut acc = b1[m];
                        for ci in 0..c {
                            acc += w1[m * c + ci] * f.data[(bi * c + ci) * nvox + v];
                        }
                        h1[m] = acc.max(0.0);
                    }
                    for m in 0..c_mid {
                        let mut acc = b2[m];
                        for j in 0..c_mid {
                            acc += w2[m * c_mid + j] * h1[j];
                        }
                        h2[m] = acc.max(0.0);
                    }
                    let mut z = b3[0];
                    for j in 0..c_mid {
                        z += w3[j] * h2[j];
                    }
                    out.data[obase + v] = sigmoid(z);
                }
            }
        }
        self.cache = Some((f.clone(), theta.clone()));
        Ok(out)
    }

    /// Backward from dL/d probabilities; returns (dL/d features, dL/d theta).
    pub fn backward(&mut self, gout: &Tensor) -> (Tensor, Tensor) {
        let (f, theta) = self.cache.as_ref().expect("backward before forward");
        let c_mid = self.c_mid;
        let (bsz, c) = (f.shape[0], f.shape[1]);
        let kc = theta.shape[1];
        let tlen = theta.shape[2];
        let nvox: usize = f.shape[2..].iter().product();
        let mut gf = Tensor::zeros(&f.shape);
        let mut gtheta = Tensor::zeros(&theta.shape);
        let mut h1 = vec![0.0; c_mid];
        let mut h2 = vec![0.0; c_mid];
        let mut g1 = vec![0.0; c_mid];
        let mut g2 = vec![0.0; c_mid];
        for bi in 0..bsz {
            for k in 0..kc {
                let th = &theta.data[(bi * kc + k) * tlen..(bi * kc + k + 1) * tlen];
                let (w1, b1, w2, b2, w3, b3) = split_theta(th, c, c_mid);
                let obase = (bi * kc + k) * nvox;
                let gt = &mut gtheta.data[(bi * kc + k) * tlen..(bi * kc + k + 1) * tlen];
                for v in 0..nvox {
                    // Recompute the voxel's forward pass.
                    for m in 0..c_mid {
                        let mut acc = b1[m];
                        for ci in 0..c {
                            acc += w1[m * c + ci] * f.data[(bi * c + ci) * nvox + v];
                        }
                        h1[m] = acc.max(0.0);
                    }
                    for m in 0..c_mid {
                        let mut acc = b2[m];
                        for j in 0..c_mid {
                            acc += w2[m * c_mid + j] * h1[j];
                        }
                        h2[m] = acc.max(0.0);
                    }
                    let mut z = b3[0];
                    for j in 0..c_mid {
                        z += w3[j] * h2[j];
                    }
                    let p = sigmoid(z);
                    let gz = gout.data[obase + v] * p * (1.0 - p);
                    if gz == 0.0 {
                        continue;
                    }
                    // Layer 3.
                    let (o_w3, o_b3) = w3_offsets(c, c_mid);
                    for j in 0..c_mid {
                        gt[o_w3 + j] += gz * h2[j];
                        g2[j] = if h2[j] > 0.0 { gz * w3[j] } else { 0.0 };
                    }
                    gt[o_b3] += gz;
                    // Layer 2.
                    let (o_w2, o_b2) = w2_offsets(c, c_mid);
                    g1.iter_mut().for_each(|g| *g = 0.0);
                    for m in 0..c_mid {
                        if g2[m] == 0.0 {
                            continue;
                        }
                        gt[o_b2 + m] += g2[m];
                        for j in 0..c_mid {
                            gt[o_w2 + m * c_mid + j] += g2[m] * h1[j];
                            g1[j] += g2[m] * w2[m * c_mid + j];
                        }
                    }
                    // Layer 1.
                    for m in 0..c_mid {
                        let gm = if h1[m] > 0.0 { g1[m] } else { 0.0 };
                        if gm == 0.0 {
                            continue;
                        }
                        gt[c * c_mid + m] += gm; // b1
                        for ci in 0..c {
                            gt[m * c + ci] += gm * f.data[(bi * c + ci) * nvox + v];
                            gf.data[(bi * c + ci) * nvox + v] += gm * w1[m * c + ci];
                        }
                    }
                }
            }
        }
        (gf, gtheta)
    }
}

fn w2_offsets(c: usize, c_mid: usize) -> (usize, usize) {
    let o_w2 = c * c_mid + c_mid;
    (o_w2, o_w2 + c_mid * c_mid)
}

fn w3_offsets(c: usize, c_mid: usize) -> (usize, usize) {
    let (o_w2, o_b2) = w2_offsets(c, c_mid);
    let _ = o_w2;
    let o_w3 = o_b2 + c_mid;
    (o_w3, o_w3 + c_mid)
}

/// Splits a flat parameter vector into the six head pieces.
fn split_theta(th: &[f64], c: usize, c_mid: usize) -> (&[f64], &[f64], &[f64], &[f64], &[f64], &[f64]) {
    let (w1, rest) = th.split_at(c_mid * c);
    let (b1, rest) = rest.split_at(c_mid);
    let (w2, rest) = rest.split_at(c_mid * c_mid);
    let (b2, rest) = rest.split_at(c_mid);
    let (w3, rest) = rest.split_at(c_mid);
    (w1, b1, w2, b2, w3, &rest[..1])
}

/// Collapses per-class probability maps [B, K, X, Y, Z] into label grids:
/// each voxel takes `argmax_k + 1` when the winning probability reaches
/// `threshold`, else background 0. Ties go to the smallest class index.
pub fn merge_predictions(probs: &Tensor, threshold: f64) -> Result<Vec<Grid3<u8>>> {
    if probs.shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "merge expects [B, K, X, Y, Z], got {:?}",
            probs.shape
        )));
    }
    let (bsz, kc) = (probs.shape[0], probs.shape[1]);
    let (nx, ny, nz) = (probs.shape[2], probs.shape[3], probs.shape[4]);
    if kc > u8::MAX as usize {
        return Err(Error::invalid("too many classes for u8 labels"));
    }
    let nvox = nx * ny * nz;
    let mut out = Vec::with_capacity(bsz);
    for bi in 0..bsz {
        let mut grid = Grid3::<u8>::new([nx, ny, nz]);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let v = (x * ny + y) * nz + z;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0usize;
                    for k in 0..kc {
                        let p = probs.data[(bi * kc + k) * nvox + v];
                        if p > best {
                            best = p;
                            best_k = k;
                        }
                    }
                    if best >= threshold {
                        grid.set(x, y, z, (best_k + 1) as u8);
                    }
                }
            }
        }
        out.push(grid);
    }
    Ok(out)
}
