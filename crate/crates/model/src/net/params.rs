use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::NetConfig;
use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Entry indices of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockIx {
    pub modulation_w: usize,
    pub modulation_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

/// Entry indices of every tensor, resolved once per layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamIx {
    pub input_w: usize,
    pub input_b: usize,
    pub t_embed_w: usize,
    pub t_embed_b: usize,
    pub d_embed_w: usize,
    pub blocks: Vec<BlockIx>,
    pub final_mod_w: usize,
    pub final_mod_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<TensorEntry>,
    pub ix: ParamIx,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &NetConfig) -> Layout {
        let mut entries: Vec<TensorEntry> = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let len = shape.iter().product();
            entries.push(TensorEntry { name, shape, offset: total, len });
            total += len;
            entries.len() - 1
        };
        let d = cfg.width;
        let input_w = push("input.w".into(), vec![cfg.token_dim(), d]);
        let input_b = push("input.b".into(), vec![d]);
        let t_embed_w = push("t_embed.w".into(), vec![d, d]);
        let t_embed_b = push("t_embed.b".into(), vec![d]);
        let d_embed_w = push("d_embed.w".into(), vec![2, d]);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockIx {
                modulation_w: push(p("modulation.w"), vec![d, 6 * d]),
                modulation_b: push(p("modulation.b"), vec![6 * d]),
                qkv_w: push(p("qkv.w"), vec![d, 3 * d]),
                qkv_b: push(p("qkv.b"), vec![3 * d]),
                proj_w: push(p("proj.w"), vec![d, d]),
                proj_b: push(p("proj.b"), vec![d]),
                fc1_w: push(p("fc1.w"), vec![d, cfg.hidden_dim()]),
                fc1_b: push(p("fc1.b"), vec![cfg.hidden_dim()]),
                fc2_w: push(p("fc2.w"), vec![cfg.hidden_dim(), d]),
                fc2_b: push(p("fc2.b"), vec![d]),
            });
        }
        let final_mod_w = push("final.modulation.w".into(), vec![d, 2 * d]);
        let final_mod_b = push("final.modulation.b".into(), vec![2 * d]);
        let out_w = push("out.w".into(), vec![d, cfg.target_dim()]);
        let out_b = push("out.b".into(), vec![cfg.target_dim()]);
        Layout {
            entries,
            ix: ParamIx {
                input_w,
                input_b,
                t_embed_w,
                t_embed_b,
                d_embed_w,
                blocks,
                final_mod_w,
                final_mod_b,
                out_w,
                out_b,
            },
            total,
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

/// All trainable tensors in one flat buffer. Gradients, optimizer moments and
/// EMA weights reuse the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layout: Arc<Layout>,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(layout: Arc<Layout>) -> Params {
        let data = vec![0.0; layout.total];
        Params { layout, data }
    }

    pub fn zeros_like(&self) -> Params {
        Params::zeros(self.layout.clone())
    }

    /// Truncated-normal weights with std `1/sqrt(fan_in)`, zero biases.
    /// Modulation layers and the output projection start at zero, so every
    /// block is the identity and the network output is 0.
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Params {
        let layout = Arc::new(Layout::new(cfg));
        let mut p = Params::zeros(layout.clone());
        let ix = &layout.ix;
        let mut dense = vec![ix.input_w, ix.t_embed_w, ix.d_embed_w];
        for b in &ix.blocks {
            dense.extend([b.qkv_w, b.proj_w, b.fc1_w, b.fc2_w]);
        }
        for e in dense {
            let fan_in = layout.entries[e].shape[0] as f64;
            let std = 1.0 / fan_in.sqrt();
            for v in p.slice_mut(e) {
                *v = std * truncated_normal(rng);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, e: usize) -> &[f64] {
        let t = &self.layout.entries[e];
        &self.data[t.offset..t.offset + t.len]
    }

    pub fn slice_mut(&mut self, e: usize) -> &mut [f64] {
        let t = &self.layout.entries[e];
        let (o, l) = (t.offset, t.len);
        &mut self.data[o..o + l]
    }

    pub fn mat(&self, e: usize) -> ArrayView2<'_, f64> {
        let s = &self.layout.entries[e].shape;
        ArrayView2::from_shape((s[0], s[1]), self.slice(e)).expect("layout shape")
    }

    pub fn mat_mut(&mut self, e: usize) -> ArrayViewMut2<'_, f64> {
        let s = self.layout.entries[e].shape.clone();
        ArrayViewMut2::from_shape((s[0], s[1]), self.slice_mut(e)).expect("layout shape")
    }

    pub fn vec(&self, e: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.slice(e))
    }

    pub fn vec_mut(&mut self, e: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(self.slice_mut(e))
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Params) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_same(&self, other: &Params) -> Result<()> {
        if self.layout.total != other.layout.total || self.layout.entries != other.layout.entries {
            return Err(ModelError::shape("parameter layouts differ"));
        }
        Ok(())
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
