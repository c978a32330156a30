//! Attention blocks: class-axis self-attention for the text adapter stack
//! and the text-queries/image-values cross-attention fusion.

use rand_chacha::ChaCha20Rng;

use super::linear::Linear;
use super::{softmax_rows, softmax_rows_backward, Module, Param, Tensor};
use crate::error::{Error, Result};

/// Single-head self-attention over the K rows of a [K, D] stack with an
/// output projection and a residual connection around the whole sublayer:
/// `out = x + W_o · softmax(QKᵀ/√D) V`.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
    /// Attention weights of the most recent forward, shape [K, K].
    pub last_attention: Option<Tensor>,
    cache: Option<AttnCache>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
}

impl SelfAttentionBlock {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha20Rng) -> SelfAttentionBlock {
        SelfAttentionBlock {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, true, rng),
            // Only the output projection starts at zero: the block begins
            // as the identity (the residual passes through untouched), yet
            // `wo` still receives gradient at the first step because the
            // value path is live. Zeroing the value path too would make the
            // two gradients gate each other and freeze the block forever.
            wv: Linear::new(&format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::zeros(&format!("{name}.wo"), dim, dim, true),
            dim,
            last_attention: None,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[1] != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "self-attention (D={}) got {:?}",
                self.dim, x.shape
            )));
        }
        let (k_rows, d) = (x.shape[0], x.shape[1]);
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut scores = vec![0.0; k_rows * k_rows];
        for i in 0..k_rows {
            for j in 0..k_rows {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += q.data[i * d + t] * k.data[j * d + t];
                }
                scores[i * k_rows + j] = acc * scale;
            }
        }
        softmax_rows(&mut scores, k_rows);
        let attn = Tensor::from_vec(&[k_rows, k_rows], scores)?;
        let mut ctx = Tensor::zeros(&[k_rows, d]);
        for i in 0..k_rows {
            for j in 0..k_rows {
                let a = attn.data[i * k_rows + j];
                for t in 0..d {
                    ctx.data[i * d + t] += a * v.data[j * d + t];
                }
            }
        }
        let proj = self.wo.forward(&ctx)?;
        let mut out = x.clone();
        for (o, p) in out.data.iter_mut().zip(&proj.data) {
            *o += p;
        }
        self.last_attention = Some(attn.clone());
        self.cache = Some(AttnCache { q, k, v, attn });
        Ok(out)
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("backward before forward");
        let (k_rows, d) = (cache.q.shape[0], cache.q.shape[1]);
        let scale = 1.0 / (d as f64).sqrt();

        let g_ctx = self.wo.backward(gout);
        // ctx = A · V
        let mut g_attn = vec![0.0; k_rows * k_rows];
        let mut g_v = Tensor::zeros(&[k_rows, d]);
        for i in 0..k_rows {
            for j in 0..k_rows {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += g_ctx.data[i * d + t] * cache.v.data[j * d + t];
                    g_v.data[j * d + t] += cache.attn.data[i * k_rows + j] * g_ctx.data[i * d + t];
                }
                g_attn[i * k_rows + j] = acc;
            }
        }
        let g_scores = softmax_rows_backward(&cache.attn.data, &g_attn, k_rows);
        let mut g_q = Tensor::zeros(&[k_rows, d]);
        let mut g_k = Tensor::zeros(&[k_rows, d]);
        for i in 0..k_rows {
            for j in 0..k_rows {
                let gs = g_scores[i * k_rows + j] * scale;
                for t in 0..d {
                    g_q.data[i * d + t] += gs * cache.k.data[j * d + t];
                    g_k.data[j * d + t] += gs * cache.q.data[i * d + t];
                }
            }
        }
        let mut gx = gout.clone(); // residual branch
        for (g, v) in gx.data.iter_mut().zip(self.wq.backward(&g_q).data) {
            *g += v;
        }
        for (g, v) in gx.data.iter_mut().zip(self.wk.backward(&g_k).data) {
            *g += v;
        }
        for (g, v) in gx.data.iter_mut().zip(self.wv.backward(&g_v).data) {
            *g += v;
        }
        gx
    }
}

impl Module for SelfAttentionBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
    }
}

/// Cross-attention fusion of adapted text and image embeddings, batched over
/// items: queries from the text stack, keys from the elementwise sum of text
/// and image stacks, values from the image stack. No output projection and
/// no residual; for a single class the output is exactly `v(image)`.
#[derive(Debug, Clone)]
pub struct CrossAttentionFusion {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub dim: usize,
    /// Attention weights of the most recent forward, shape [B, K, K].
    pub last_attention: Option<Tensor>,
    cache: Option<XAttnCache>,
}

#[derive(Debug, Clone)]
struct XAttnCache {
    qm: Tensor,
    km: Tensor,
    vm: Tensor,
    attn: Tensor,
}

impl CrossAttentionFusion {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha20Rng) -> CrossAttentionFusion {
        CrossAttentionFusion {
            q: Linear::new(&format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(&format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(&format!("{name}.v"), dim, dim, true, rng),
            dim,
            last_attention: None,
            cache: None,
        }
    }

    /// `text` and `image` are [B, K, D]; the result H_f is [B, K, D],
    /// computed independently per batch item.
    pub fn forward(&mut self, text: &Tensor, image: &Tensor) -> Result<Tensor> {
        if text.shape != image.shape || text.shape.len() != 3 || text.shape[2] != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "cross-attention (D={}) got text {:?} image {:?}",
                self.dim, text.shape, image.shape
            )));
        }
        let (b, kc, d) = (text.shape[0], text.shape[1], text.shape[2]);
        let mut sum = text.clone();
        for (s, i) in sum.data.iter_mut().zip(&image.data) {
            *s += i;
        }
        let qm = self.q.forward(text)?;
        let km = self.k.forward(&sum)?;
        let vm = self.v.forward(image)?;
        let scale = 1.0 / (d as f64).sqrt();

        let mut attn = Tensor::zeros(&[b, kc, kc]);
        let mut out = Tensor::zeros(&[b, kc, d]);
        for bi in 0..b {
            let qb = &qm.data[bi * kc * d..(bi + 1) * kc * d];
            let kb = &km.data[bi * kc * d..(bi + 1) * kc * d];
            let vb = &vm.data[bi * kc * d..(bi + 1) * kc * d];
            let ab = &mut attn.data[bi * kc * kc..(bi + 1) * kc * kc];
            for i in 0..kc {
                for j in 0..kc {
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += qb[i * d + t] * kb[j * d + t];
                    }
                    ab[i * kc + j] = acc * scale;
                }
            }
            softmax_rows(ab, kc);
            let ob = &mut out.data[bi * kc * d..(bi + 1) * kc * d];
            for i in 0..kc {
                for j in 0..kc {
                    let a = ab[i * kc + j];
                    for t in 0..d {
                        ob[i * d + t] += a * vb[j * d + t];
                    }
                }
            }
        }
        self.last_attention = Some(attn.clone());
        self.cache = Some(XAttnCache { qm, km, vm, attn });
        Ok(out)
    }

    /// Returns (dL/d text, dL/d image).
    pub fn backward(&mut self, gout: &Tensor) -> (Tensor, Tensor) {
        let cache = self.cache.as_ref().expect("backward before forward");
        let (b, kc, d) = (
            cache.qm.shape[0],
            cache.qm.shape[1],
            cache.qm.shape[2],
        );
        let scale = 1.0 / (d as f64).sqrt();
        let mut g_q = Tensor::zeros(&[b, kc, d]);
        let mut g_k = Tensor::zeros(&[b, kc, d]);
        let mut g_v = Tensor::zeros(&[b, kc, d]);
        for bi in 0..b {
            let base = bi * kc * d;
            let abase = bi * kc * kc;
            let mut g_attn = vec![0.0; kc * kc];
            for i in 0..kc {
                for j in 0..kc {
                    let mut acc = 0.0;
                    let a = cache.attn.data[abase + i * kc + j];
                    for t in 0..d {
                        acc += gout.data[base + i * d + t] * cache.vm.data[base + j * d + t];
                        g_v.data[base + j * d + t] += a * gout.data[base + i * d + t];
                    }
                    g_attn[i * kc + j] = acc;
                }
            }
            let g_scores = softmax_rows_backward(
                &cache.attn.data[abase..abase + kc * kc],
                &g_attn,
                kc,
            );
            for i in 0..kc {
                for j in 0..kc {
                    let gs = g_scores[i * kc + j] * scale;
                    for t in 0..d {
                        g_q.data[base + i * d + t] += gs * cache.km.data[base + j * d + t];
                        g_k.data[base + j * d + t] += gs * cache.qm.data[base + i * d + t];
                    }
                }
            }
        }
        let g_text_q = self.q.backward(&g_q);
        let g_sum = self.k.backward(&g_k);
        let g_image_v = self.v.backward(&g_v);
        let mut g_text = g_text_q;
        for (g, s) in g_text.data.iter_mut().zip(&g_sum.data) {
            *g += s;
        }
        let mut g_image = g_image_v;
        for (g, s) in g_image.data.iter_mut().zip(&g_sum.data) {
            *g += s;
        }
        (g_text, g_image)
    }
}

impl Module for CrossAttentionFusion {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.q.visit_params(f);
        self.k.visit_params(f);
        self.v.visit_params(f);
    }
}
