//! Texture network: residual MLP blocks conditioned on a per-part texture
//! code. Input is the local point and time, output a sigmoid-bounded RGB.
//! Each block is two fully-connected layers with a skip from the block input
//! to the second layer; the encoded code feature is added to every block
//! input.

use super::mlp::Act;
use crate::util::DetRng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub code_dim: usize,
    /// Local point plus time.
    pub coord_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub act: Act,
    pub coord_scale: f64,
}

impl TextureSpec {
    pub fn paper(code_dim: usize, coord_scale: f64) -> TextureSpec {
        TextureSpec {
            code_dim,
            coord_dim: 4,
            width: 128,
            blocks: 5,
            act: Act::LeakyRelu { alpha: 0.2 },
            coord_scale,
        }
    }

    pub fn desk(code_dim: usize, coord_scale: f64) -> TextureSpec {
        TextureSpec {
            width: 32,
            blocks: 3,
            ..TextureSpec::paper(code_dim, coord_scale)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Offsets {
    w_in: usize,
    b_in: usize,
    w_code: usize,
    b_code: usize,
    blocks: usize, // start of block params; each block: w1, b1, w2, b2
    w_out: usize,
    b_out: usize,
    block_stride: usize,
}

#[derive(Clone, Debug)]
pub struct TextureNet {
    pub spec: TextureSpec,
    off: Offsets,
    pub n_params: usize,
}

impl TextureNet {
    pub fn new(spec: TextureSpec) -> TextureNet {
        let w = spec.width;
        let mut o = 0usize;
        let w_in = o;
        o += w * spec.coord_dim;
        let b_in = o;
        o += w;
        let w_code = o;
        o += w * spec.code_dim;
        let b_code = o;
        o += w;
        let blocks = o;
        let block_stride = 2 * (w * w + w);
        o += spec.blocks * block_stride;
        let w_out = o;
        o += 3 * w;
        let b_out = o;
        o += 3;
        TextureNet {
            spec,
            off: Offsets {
                w_in,
                b_in,
                w_code,
                b_code,
                blocks,
                w_out,
                b_out,
                block_stride,
            },
            n_params: o,
        }
    }

    pub fn init_weights(&self, seed: u64) -> Vec<f64> {
        let mut rng = DetRng::from_parts(&[seed, 0x746578]);
        let w = self.spec.width;
        let mut p = vec![0.0; self.n_params];
        let fill = |p: &mut [f64], rng: &mut DetRng, fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            for v in p.iter_mut() {
                *v = std * rng.normal();
            }
        };
        fill(&mut p[self.off.w_in..self.off.w_in + w * self.spec.coord_dim], &mut rng, self.spec.coord_dim);
        fill(&mut p[self.off.w_code..self.off.w_code + w * self.spec.code_dim], &mut rng, self.spec.code_dim);
        for b in 0..self.spec.blocks {
            let base = self.off.blocks + b * self.off.block_stride;
            fill(&mut p[base..base + w * w], &mut rng, w);
            // second layer small so blocks start near identity
            let std = 0.1 * (2.0 / w as f64).sqrt();
            for v in &mut p[base + w * w + w..base + 2 * w * w + w] {
                *v = std * rng.normal();
            }
        }
        fill(&mut p[self.off.w_out..self.off.w_out + 3 * w], &mut rng, w);
        p
    }

    fn block_off(&self, b: usize) -> (usize, usize, usize, usize) {
        let w = self.spec.width;
        let base = self.off.blocks + b * self.off.block_stride;
        (base, base + w * w, base + w * w + w, base + 2 * w * w + w)
    }
}

/// Evaluation trace for the reverse pass.
#[derive(Clone, Debug)]
pub struct TextureTrace {
    u: Vec<f64>,
    a_in: Vec<f64>,
    feat: Vec<f64>,
    /// Per block: (z, a1, h1).
    blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    h_final: Vec<f64>,
    o: [f64; 3],
    pub rgb: [f64; 3],
}

impl TextureTrace {
    pub fn new(net: &TextureNet) -> TextureTrace {
        let w = net.spec.width;
        TextureTrace {
            u: vec![0.0; net.spec.coord_dim],
            a_in: vec![0.0; w],
            feat: vec![0.0; w],
            blocks: vec![(vec![0.0; w], vec![0.0; w], vec![0.0; w]); net.spec.blocks],
            h_final: vec![0.0; w],
            o: [0.0; 3],
            rgb: [0.0; 3],
        }
    }
}

fn matvec(out: &mut [f64], w: &[f64], x: &[f64], b: &[f64]) {
    let n_in = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for (k, &xv) in x.iter().enumerate() {
            acc += row[k] * xv;
        }
        *slot = acc;
    }
}

impl TextureNet {
    /// `coords` = [x_local (meters), t]; spatial part divided by coord_scale.
    pub fn forward(&self, params: &[f64], code: &[f64], coords: &[f64], trace: &mut TextureTrace) -> [f64; 3] {
        let w = self.spec.width;
        let s = self.spec.coord_scale;
        for (i, &c) in coords.iter().enumerate() {
            trace.u[i] = if i < 3 { c / s } else { c };
        }
        matvec(
            &mut trace.a_in,
            &params[self.off.w_in..self.off.w_in + w * self.spec.coord_dim],
            &trace.u,
            &params[self.off.b_in..self.off.b_in + w],
        );
        matvec(
            &mut trace.feat,
            &params[self.off.w_code..self.off.w_code + w * self.spec.code_dim],
            code,
            &params[self.off.b_code..self.off.b_code + w],
        );
        let mut h: Vec<f64> = trace.a_in.iter().map(|&a| self.spec.act.val(a)).collect();
        for b in 0..self.spec.blocks {
            let (w1, b1, w2, b2) = self.block_off(b);
            let (z, a1, h1) = &mut trace.blocks[b];
            for k in 0..w {
                z[k] = h[k] + trace.feat[k];
            }
            matvec(a1, &params[w1..w1 + w * w], z, &params[b1..b1 + w]);
            for k in 0..w {
                h1[k] = self.spec.act.val(a1[k]);
            }
            let mut a2 = vec![0.0; w];
            matvec(&mut a2, &params[w2..w2 + w * w], h1, &params[b2..b2 + w]);
            for k in 0..w {
                h[k] = z[k] + a2[k];
            }
        }
        trace.h_final.copy_from_slice(&h);
        let mut o = [0.0; 3];
        matvec(
            &mut o,
            &params[self.off.w_out..self.off.w_out + 3 * w],
            &h,
            &params[self.off.b_out..self.off.b_out + 3],
        );
        trace.o = o;
        for c in 0..3 {
            trace.rgb[c] = Act::Sigmoid.val(o[c]);
        }
        trace.rgb
    }

    /// Accumulates parameter and code gradients of `sum(rgb_bar . rgb)`.
    pub fn backward(
        &self,
        params: &[f64],
        code: &[f64],
        rgb_bar: [f64; 3],
        trace: &TextureTrace,
        mut w_grad: Option<&mut [f64]>,
        mut code_grad: Option<&mut [f64]>,
    ) {
        let w = self.spec.width;
        let mut o_bar = [0.0; 3];
        for c in 0..3 {
            o_bar[c] = rgb_bar[c] * Act::Sigmoid.d1(trace.o[c]);
        }
        let mut h_bar = vec![0.0; w];
        {
            let wout = &params[self.off.w_out..self.off.w_out + 3 * w];
            for c in 0..3 {
                for k in 0..w {
                    h_bar[k] += wout[c * w + k] * o_bar[c];
                }
            }
            if let Some(g) = w_grad.as_deref_mut() {
                for c in 0..3 {
                    for k in 0..w {
                        g[self.off.w_out + c * w + k] += o_bar[c] * trace.h_final[k];
                    }
                    g[self.off.b_out + c] += o_bar[c];
                }
            }
        }
        let mut feat_bar = vec![0.0; w];
        for b in (0..self.spec.blocks).rev() {
            let (w1o, b1o, w2o, b2o) = self.block_off(b);
            let (z, a1, h1) = &trace.blocks[b];
            // h_out = z + W2 h1 + b2
            let a2_bar = h_bar.clone();
            let mut h1_bar = vec![0.0; w];
            let w2 = &params[w2o..w2o + w * w];
            for o in 0..w {
                let ab = a2_bar[o];
                if ab == 0.0 {
                    continue;
                }
                for k in 0..w {
                    h1_bar[k] += w2[o * w + k] * ab;
                }
            }
            if let Some(g) = w_grad.as_deref_mut() {
                for o in 0..w {
                    let ab = a2_bar[o];
                    for k in 0..w {
                        g[w2o + o * w + k] += ab * h1[k];
                    }
                    g[b2o + o] += ab;
                }
            }
            let mut a1_bar = vec![0.0; w];
            for k in 0..w {
                a1_bar[k] = self.spec.act.d1(a1[k]) * h1_bar[k];
            }
            let mut z_bar = h_bar; // skip path
            let w1 = &params[w1o..w1o + w * w];
            for o in 0..w {
                let ab = a1_bar[o];
                if ab == 0.0 {
                    continue;
                }
                for k in 0..w {
                    z_bar[k] += w1[o * w + k] * ab;
                }
            }
            if let Some(g) = w_grad.as_deref_mut() {
                for o in 0..w {
                    let ab = a1_bar[o];
                    for k in 0..w {
                        g[w1o + o * w + k] += ab * z[k];
                    }
                    g[b1o + o] += ab;
                }
            }
            for k in 0..w {
                feat_bar[k] += z_bar[k];
            }
            h_bar = z_bar;
        }
        // h0 = act(a_in)
        let mut a_in_bar = vec![0.0; w];
        for k in 0..w {
            a_in_bar[k] = self.spec.act.d1(trace.a_in[k]) * h_bar[k];
        }
        if let Some(g) = w_grad.as_deref_mut() {
            for o in 0..w {
                let ab = a_in_bar[o];
                for (k, &u) in trace.u.iter().enumerate() {
                    g[self.off.w_in + o * self.spec.coord_dim + k] += ab * u;
                }
                g[self.off.b_in + o] += ab;
                let fb = feat_bar[o];
                for (k, &c) in code.iter().enumerate() {
                    g[self.off.w_code + o * self.spec.code_dim + k] += fb * c;
                }
                g[self.off.b_code + o] += fb;
            }
        }
        if let Some(cg) = code_grad.as_deref_mut() {
            let wc = &params[self.off.w_code..self.off.w_code + w * self.spec.code_dim];
            for o in 0..w {
                let fb = feat_bar[o];
                if fb == 0.0 {
                    continue;
                }
                for k in 0..self.spec.code_dim {
                    cg[k] += wc[o * self.spec.code_dim + k] * fb;
                }
            }
        }
    }
}
