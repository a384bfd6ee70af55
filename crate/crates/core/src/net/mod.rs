//! Graph-attention quality network operating on preprocessed splat regions.
//!
//! Pipeline per stimulus: a shared per-splat MLP with max aggregation turns
//! each region into a token, three dual-residual blocks
//! (`H ← M(LN(H)) + H`, `H ← F(LN(H)) + H`) refine the tokens over a k-NN
//! graph of region centers, attention pooling collapses them into one
//! feature vector and a linear head produces the score.
//!
//! Every forward pass returns a cache from which [`ModelParams::backward`]
//! computes exact gradients.

mod checkpoint;
pub mod ops;

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::distortion::rng;
use crate::error::{Error, Result};
use crate::regioning::{GroupingPoint, RegionBatch};
use crate::scalar::Scalar;
use crate::splat::ATTRIBUTES;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, load_tokens, save_checkpoint, save_tokens, CheckpointMeta};
use ops::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Token width.
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Neighbors per region in the attention graph, self included.
    pub k_graph: usize,
    pub blocks: usize,
    /// Initial head bias; the correlation losses are shift invariant, so this
    /// only fixes where predictions sit on the rating scale.
    pub head_bias_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            ffn_mult: 4,
            k_graph: 8,
            blocks: 3,
            head_bias_init: 3.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.k_graph == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("graph degree and FFN expansion must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct BlockIx {
    ln1_g: usize,
    ln1_b: usize,
    gat_w: usize,
    gat_src: usize,
    gat_dst: usize,
    gat_out_w: usize,
    gat_out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_w1: usize,
    enc_b1: usize,
    enc_w2: usize,
    enc_b2: usize,
    blocks: Vec<BlockIx>,
    pool_we: usize,
    pool_wq: usize,
    head_w: usize,
    head_b: usize,
}

enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`
    FanIn(usize),
    Const(f64),
}

fn specs(cfg: &NetConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let (d, h, dh, f) = (cfg.d, cfg.heads, cfg.head_dim(), cfg.d * cfg.ffn_mult);
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        v.push((name, shape, init));
        v.len() - 1
    };
    let enc_w1 = push("encoder.w1".into(), vec![d, ATTRIBUTES], Init::FanIn(ATTRIBUTES));
    let enc_b1 = push("encoder.b1".into(), vec![d], Init::FanIn(ATTRIBUTES));
    let enc_w2 = push("encoder.w2".into(), vec![d, d], Init::FanIn(d));
    let enc_b2 = push("encoder.b2".into(), vec![d], Init::FanIn(d));
    let blocks = (0..cfg.blocks)
        .map(|b| {
            let p = |s: &str| format!("block{b}.{s}");
            BlockIx {
                ln1_g: push(p("ln1.gain"), vec![d], Init::Const(1.0)),
                ln1_b: push(p("ln1.bias"), vec![d], Init::Const(0.0)),
                gat_w: push(p("gat.w"), vec![d, d], Init::FanIn(d)),
                gat_src: push(p("gat.att_src"), vec![h, dh], Init::FanIn(dh)),
                gat_dst: push(p("gat.att_dst"), vec![h, dh], Init::FanIn(dh)),
                gat_out_w: push(p("gat.out.w"), vec![d, d], Init::FanIn(d)),
                gat_out_b: push(p("gat.out.b"), vec![d], Init::FanIn(d)),
                ln2_g: push(p("ln2.gain"), vec![d], Init::Const(1.0)),
                ln2_b: push(p("ln2.bias"), vec![d], Init::Const(0.0)),
                ffn_w1: push(p("ffn.w1"), vec![f, d], Init::FanIn(d)),
                ffn_b1: push(p("ffn.b1"), vec![f], Init::FanIn(d)),
                ffn_w2: push(p("ffn.w2"), vec![d, f], Init::FanIn(f)),
                ffn_b2: push(p("ffn.b2"), vec![d], Init::FanIn(f)),
            }
        })
        .collect();
    let pool_we = push("pool.w_e".into(), vec![d, 2 * d], Init::FanIn(d));
    let pool_wq = push("pool.w_q".into(), vec![2 * d], Init::Const(0.0));
    let head_w = push("head.w".into(), vec![d], Init::FanIn(d));
    let head_b = push("head.b".into(), vec![1], Init::Const(cfg.head_bias_init));
    (
        v,
        Layout {
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            blocks,
            pool_we,
            pool_wq,
            head_w,
            head_b,
        },
    )
}

/// All trainable tensors plus their gradient buffers.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: NetConfig,
    pub tensors: Vec<Tensor<T>>,
    pub grads: Gradients<T>,
    layout: Layout,
    /// Bumped on every parameter update; caches from older versions are stale.
    version: u64,
}

/// Gradient buffers laid out like [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Gradients(params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect())
    }

    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().flatten().all(|&v| v == T::zero())
    }
}

/// Shape and size summary of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub config: NetConfig,
    pub tensors: Vec<(String, Vec<usize>)>,
    pub parameter_count: usize,
}

impl std::fmt::Display for Description {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, shape) in &self.tensors {
            writeln!(f, "{name:<24} {shape:?}")?;
        }
        write!(f, "total parameters: {}", self.parameter_count)
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = specs(&config);
        let mut rng = rng(seed);
        let tensors: Vec<Tensor<T>> = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let len = shape.iter().product();
                let data = match init {
                    Init::Const(c) => vec![T::lit(c); len],
                    Init::FanIn(fan) => {
                        let bound = 1.0 / (fan as f64).sqrt();
                        let dist = Uniform::new_inclusive(-bound, bound);
                        (0..len).map(|_| T::lit(rng.sample(dist))).collect()
                    }
                };
                Tensor { name, shape, data }
            })
            .collect();
        let grads = Gradients(tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect());
        Ok(Self {
            config,
            tensors,
            grads,
            layout,
            version: 0,
        })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                model.tensors.len(),
                tensors.len()
            )));
        }
        for (slot, t) in model.tensors.iter_mut().zip(tensors) {
            if slot.name != t.name || slot.shape != t.shape || t.data.len() != slot.data.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    t.name, t.shape, slot.name, slot.shape
                )));
            }
            slot.data = t.data;
        }
        Ok(model)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks the parameters as modified, invalidating outstanding caches.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn describe(&self) -> Description {
        Description {
            config: self.config,
            tensors: self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
            parameter_count: self.parameter_count(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.version += 1;
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    fn t(&self, ix: usize) -> &[T] {
        &self.tensors[ix].data
    }

    pub fn zero_grad(&mut self) {
        self.grads.zero();
    }

    /// Converts every tensor to another scalar width (e.g. for `f32` inference).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            })
            .collect();
        ModelParams::from_tensors(self.config, tensors).expect("same layout")
    }
}

/// Region tokens plus the attention graph over region centers.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    pub n: usize,
    pub d: usize,
    /// `n × d`, row-major.
    pub tokens: Vec<T>,
    /// Sorted neighbor lists, each containing the node itself.
    pub adjacency: Vec<Vec<usize>>,
}

/// `k_graph` nearest centers (self included, ties by index), symmetrized by union.
pub fn region_graph(centers: &[GroupingPoint], k_graph: usize) -> Vec<Vec<usize>> {
    let n = centers.len();
    let kg = k_graph.min(n);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (centers[i].dist2(&centers[j]), j)).collect();
        d.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        adj[i].push(i);
        for &(_, j) in d.iter().take(kg.saturating_sub(1)) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
    }
    adj
}

pub struct EncoderCache<T> {
    x: Vec<T>,
    pre1: Vec<T>,
    tanh1: Vec<T>,
    act1: Vec<T>,
    /// Winning member row for each (region, channel).
    argmax: Vec<usize>,
}

pub struct BlockCache<T> {
    h_in: Vec<T>,
    ln1: LayerNormCache<T>,
    x1: Vec<T>,
    z: Vec<T>,
    /// Per node, per head, per neighbor: pre-activation score and weight.
    pre: Vec<Vec<T>>,
    alpha: Vec<Vec<T>>,
    attn_out: Vec<T>,
    ln2: LayerNormCache<T>,
    x2: Vec<T>,
    ffn_pre: Vec<T>,
    ffn_tanh: Vec<T>,
    ffn_act: Vec<T>,
}

pub struct PoolCache<T> {
    h: Vec<T>,
    pre: Vec<T>,
    tanh: Vec<T>,
    act: Vec<T>,
    pub alphas: Vec<T>,
    pub feature: Vec<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T> {
    pub score: T,
    pub tokens0: TokenGrid<T>,
    version: u64,
    encoder: Option<EncoderCache<T>>,
    n_k: (usize, usize),
    pub blocks: Vec<BlockCache<T>>,
    pub pool: PoolCache<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Maps every region of `embeddings` (`n × k × 59`) to a token and builds
    /// the region graph from each region's anchor (member 0).
    pub fn encode_regions(&self, embeddings: &[T], n: usize, k: usize) -> Result<(TokenGrid<T>, EncoderCache<T>)> {
        if embeddings.len() != n * k * ATTRIBUTES || n == 0 || k == 0 {
            return Err(Error::Contract(format!(
                "embedding buffer of {} values does not match n={n}, k={k}",
                embeddings.len()
            )));
        }
        let d = self.config.d;
        let ly = &self.layout;
        let rows = n * k;
        let pre1 = linear(embeddings, rows, ATTRIBUTES, self.t(ly.enc_w1), Some(self.t(ly.enc_b1)), d);
        let (act1, tanh1) = gelu_forward(&pre1);
        let out = linear(&act1, rows, d, self.t(ly.enc_w2), Some(self.t(ly.enc_b2)), d);
        let mut tokens = vec![T::zero(); n * d];
        let mut argmax = vec![0; n * d];
        for r in 0..n {
            let (tok, arg) = (&mut tokens[r * d..(r + 1) * d], &mut argmax[r * d..(r + 1) * d]);
            tok.copy_from_slice(&out[r * k * d..(r * k + 1) * d]);
            arg.fill(r * k);
            // strict comparison keeps the lowest member index on ties
            for m in 1..k {
                let row = r * k + m;
                for (c, &v) in out[row * d..(row + 1) * d].iter().enumerate() {
                    if v > tok[c] {
                        tok[c] = v;
                        arg[c] = row;
                    }
                }
            }
        }
        let centers: Vec<GroupingPoint> = (0..n)
            .map(|r| {
                let row: Vec<f32> = embeddings[r * k * ATTRIBUTES..(r * k + 1) * ATTRIBUTES]
                    .iter()
                    .map(|v| v.to_f64_lossy() as f32)
                    .collect();
                GroupingPoint::from_attributes(&row)
            })
            .collect();
        let adjacency = region_graph(&centers, self.config.k_graph);
        Ok((
            TokenGrid { n, d, tokens, adjacency },
            EncoderCache {
                x: embeddings.to_vec(),
                pre1,
                tanh1,
                act1,
                argmax,
            },
        ))
    }

    fn encoder_backward(&self, cache: &EncoderCache<T>, n: usize, k: usize, dtokens: &[T], grads: &mut Gradients<T>) {
        let d = self.config.d;
        let ly = &self.layout;
        let rows = n * k;
        let mut dout = vec![T::zero(); rows * d];
        for (i, &row) in cache.argmax.iter().enumerate() {
            let c = i % d;
            dout[row * d + c] += dtokens[i];
        }
        let dact1 = {
            let (gw, gb) = two_mut(&mut grads.0, ly.enc_w2, ly.enc_b2);
            linear_backward(&dout, &cache.act1, rows, d, d, self.t(ly.enc_w2), gw, Some(gb), true).unwrap()
        };
        let dpre1 = gelu_backward(&dact1, &cache.pre1, &cache.tanh1);
        let (gw, gb) = two_mut(&mut grads.0, ly.enc_w1, ly.enc_b1);
        linear_backward(&dpre1, &cache.x, rows, ATTRIBUTES, d, self.t(ly.enc_w1), gw, Some(gb), false);
    }

    /// One dual-residual block: graph attention then feedforward, each behind
    /// a layer norm with a residual connection.
    pub fn gat_block(&self, h: &[T], adjacency: &[Vec<usize>], block: usize) -> Result<(Vec<T>, BlockCache<T>)> {
        let ix = *self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::Contract(format!("block index {block} out of range")))?;
        let (d, heads, dh) = (self.config.d, self.config.heads, self.config.head_dim());
        let n = adjacency.len();
        if h.len() != n * d {
            return Err(Error::Contract("token buffer does not match the graph size".into()));
        }
        let (x1, ln1) = layer_norm(h, n, d, self.t(ix.ln1_g), self.t(ix.ln1_b));
        let z = linear(&x1, n, d, self.t(ix.gat_w), None, d);
        let (a_src, a_dst) = (self.t(ix.gat_src), self.t(ix.gat_dst));
        let mut s_src = vec![T::zero(); n * heads];
        let mut s_dst = vec![T::zero(); n * heads];
        for i in 0..n {
            for hd in 0..heads {
                let zi = &z[i * d + hd * dh..i * d + (hd + 1) * dh];
                s_src[i * heads + hd] = dot(zi, &a_src[hd * dh..(hd + 1) * dh]);
                s_dst[i * heads + hd] = dot(zi, &a_dst[hd * dh..(hd + 1) * dh]);
            }
        }
        let mut pre = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let mut attn = vec![T::zero(); n * d];
        for (i, nbrs) in adjacency.iter().enumerate() {
            let deg = nbrs.len();
            let mut p = vec![T::zero(); heads * deg];
            let mut a = vec![T::zero(); heads * deg];
            for hd in 0..heads {
                for (e, &j) in nbrs.iter().enumerate() {
                    let v = s_src[i * heads + hd] + s_dst[j * heads + hd];
                    p[hd * deg + e] = v;
                    a[hd * deg + e] = leaky_relu(v);
                }
                softmax(&mut a[hd * deg..(hd + 1) * deg]);
                for (e, &j) in nbrs.iter().enumerate() {
                    let w = a[hd * deg + e];
                    for c in hd * dh..(hd + 1) * dh {
                        attn[i * d + c] += w * z[j * d + c];
                    }
                }
            }
            pre.push(p);
            alpha.push(a);
        }
        let m = linear(&attn, n, d, self.t(ix.gat_out_w), Some(self.t(ix.gat_out_b)), d);
        let h_mid: Vec<T> = m.iter().zip(h).map(|(&a, &b)| a + b).collect();

        let f = d * self.config.ffn_mult;
        let (x2, ln2) = layer_norm(&h_mid, n, d, self.t(ix.ln2_g), self.t(ix.ln2_b));
        let ffn_pre = linear(&x2, n, d, self.t(ix.ffn_w1), Some(self.t(ix.ffn_b1)), f);
        let (ffn_act, ffn_tanh) = gelu_forward(&ffn_pre);
        let ffn_out = linear(&ffn_act, n, f, self.t(ix.ffn_w2), Some(self.t(ix.ffn_b2)), d);
        let out = ffn_out.iter().zip(&h_mid).map(|(&a, &b)| a + b).collect();
        Ok((
            out,
            BlockCache {
                h_in: h.to_vec(),
                ln1,
                x1,
                z,
                pre,
                alpha,
                attn_out: attn,
                ln2,
                x2,
                ffn_pre,
                ffn_tanh,
                ffn_act,
            },
        ))
    }

    fn block_backward(
        &self,
        cache: &BlockCache<T>,
        adjacency: &[Vec<usize>],
        block: usize,
        dout: &[T],
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        let ix = self.layout.blocks[block];
        let (d, heads, dh) = (self.config.d, self.config.heads, self.config.head_dim());
        let f = d * self.config.ffn_mult;
        let n = adjacency.len();

        // FFN branch
        let dact = {
            let (gw, gb) = two_mut(&mut grads.0, ix.ffn_w2, ix.ffn_b2);
            linear_backward(dout, &cache.ffn_act, n, f, d, self.t(ix.ffn_w2), gw, Some(gb), true).unwrap()
        };
        let dpre = gelu_backward(&dact, &cache.ffn_pre, &cache.ffn_tanh);
        let dx2 = {
            let (gw, gb) = two_mut(&mut grads.0, ix.ffn_w1, ix.ffn_b1);
            linear_backward(&dpre, &cache.x2, n, d, f, self.t(ix.ffn_w1), gw, Some(gb), true).unwrap()
        };
        let dmid_ln = {
            let (gg, gb) = two_mut(&mut grads.0, ix.ln2_g, ix.ln2_b);
            layer_norm_backward(&dx2, &cache.ln2, n, d, self.t(ix.ln2_g), gg, gb)
        };
        let dmid: Vec<T> = dout.iter().zip(&dmid_ln).map(|(&a, &b)| a + b).collect();

        // attention branch
        let dattn = {
            let (gw, gb) = two_mut(&mut grads.0, ix.gat_out_w, ix.gat_out_b);
            linear_backward(&dmid, &cache.attn_out, n, d, d, self.t(ix.gat_out_w), gw, Some(gb), true).unwrap()
        };
        let z = &cache.z;
        let mut dz = vec![T::zero(); n * d];
        let mut ds_src = vec![T::zero(); n * heads];
        let mut ds_dst = vec![T::zero(); n * heads];
        for (i, nbrs) in adjacency.iter().enumerate() {
            let deg = nbrs.len();
            for hd in 0..heads {
                let a = &cache.alpha[i][hd * deg..(hd + 1) * deg];
                let go = &dattn[i * d + hd * dh..i * d + (hd + 1) * dh];
                let mut da = vec![T::zero(); deg];
                for (e, &j) in nbrs.iter().enumerate() {
                    let zj = &z[j * d + hd * dh..j * d + (hd + 1) * dh];
                    da[e] = dot(go, zj);
                    for c in 0..dh {
                        dz[j * d + hd * dh + c] += a[e] * go[c];
                    }
                }
                let de = softmax_backward(a, &da);
                for (e, &j) in nbrs.iter().enumerate() {
                    let g = de[e] * leaky_relu_grad(cache.pre[i][hd * deg + e]);
                    ds_src[i * heads + hd] += g;
                    ds_dst[j * heads + hd] += g;
                }
            }
        }
        let (a_src, a_dst) = (self.t(ix.gat_src), self.t(ix.gat_dst));
        {
            let (g_src, g_dst) = two_mut(&mut grads.0, ix.gat_src, ix.gat_dst);
            for i in 0..n {
                for hd in 0..heads {
                    let (gs, gd) = (ds_src[i * heads + hd], ds_dst[i * heads + hd]);
                    for c in 0..dh {
                        let zc = z[i * d + hd * dh + c];
                        g_src[hd * dh + c] += gs * zc;
                        g_dst[hd * dh + c] += gd * zc;
                        dz[i * d + hd * dh + c] += gs * a_src[hd * dh + c] + gd * a_dst[hd * dh + c];
                    }
                }
            }
        }
        let dx1 = linear_backward(&dz, &cache.x1, n, d, d, self.t(ix.gat_w), &mut grads.0[ix.gat_w], None, true).unwrap();
        let din_ln = {
            let (gg, gb) = two_mut(&mut grads.0, ix.ln1_g, ix.ln1_b);
            layer_norm_backward(&dx1, &cache.ln1, n, d, self.t(ix.ln1_g), gg, gb)
        };
        debug_assert_eq!(cache.h_in.len(), n * d);
        dmid.iter().zip(&din_ln).map(|(&a, &b)| a + b).collect()
    }

    /// Attention pooling `g = Σ α_i h_i` with `α = softmax(W_qᵀ GELU(W_eᵀ h_i))`.
    pub fn attention_pool(&self, h: &[T], n: usize) -> Result<PoolCache<T>> {
        let d = self.config.d;
        if n == 0 || h.len() != n * d {
            return Err(Error::Contract("pooling needs at least one token of width d".into()));
        }
        let ly = &self.layout;
        let mut pre = vec![T::zero(); n * 2 * d];
        T::gemm(n, d, 2 * d, h, false, self.t(ly.pool_we), false, &mut pre, false);
        let (act, tanh) = gelu_forward(&pre);
        let wq = self.t(ly.pool_wq);
        let mut alphas: Vec<T> = (0..n).map(|i| dot(&act[i * 2 * d..(i + 1) * 2 * d], wq)).collect();
        softmax(&mut alphas);
        let mut feature = vec![T::zero(); d];
        for i in 0..n {
            for c in 0..d {
                feature[c] += alphas[i] * h[i * d + c];
            }
        }
        Ok(PoolCache {
            h: h.to_vec(),
            pre,
            tanh,
            act,
            alphas,
            feature,
        })
    }

    fn pool_backward(&self, cache: &PoolCache<T>, n: usize, dfeat: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let d = self.config.d;
        let ly = &self.layout;
        let h = &cache.h;
        let mut dh = vec![T::zero(); n * d];
        let mut dalpha = vec![T::zero(); n];
        for i in 0..n {
            dalpha[i] = dot(dfeat, &h[i * d..(i + 1) * d]);
            for c in 0..d {
                dh[i * d + c] += cache.alphas[i] * dfeat[c];
            }
        }
        let ds = softmax_backward(&cache.alphas, &dalpha);
        let wq = self.t(ly.pool_wq);
        let mut dact = vec![T::zero(); n * 2 * d];
        {
            let gq = &mut grads.0[ly.pool_wq];
            for i in 0..n {
                for c in 0..2 * d {
                    gq[c] += ds[i] * cache.act[i * 2 * d + c];
                    dact[i * 2 * d + c] = ds[i] * wq[c];
                }
            }
        }
        let dpre = gelu_backward(&dact, &cache.pre, &cache.tanh);
        T::gemm(d, n, 2 * d, h, true, &dpre, false, &mut grads.0[ly.pool_we], true);
        T::gemm(n, 2 * d, d, &dpre, false, self.t(ly.pool_we), true, &mut dh, true);
        dh
    }

    fn head(&self, feature: &[T]) -> T {
        dot(feature, self.t(self.layout.head_w)) + self.t(self.layout.head_b)[0]
    }

    /// Full forward pass on one stimulus.
    pub fn forward(&self, batch: &RegionBatch) -> Result<ForwardCache<T>> {
        batch.validate()?;
        let emb: Vec<T> = batch.embeddings.iter().map(|&v| T::lit(f64::from(v))).collect();
        let (grid, enc) = self.encode_regions(&emb, batch.n, batch.k)?;
        let mut cache = self.forward_tokens(grid)?;
        cache.encoder = Some(enc);
        cache.n_k = (batch.n, batch.k);
        Ok(cache)
    }

    /// Forward pass from externally supplied region tokens, bypassing the encoder.
    pub fn forward_tokens(&self, grid: TokenGrid<T>) -> Result<ForwardCache<T>> {
        if grid.d != self.config.d || grid.tokens.len() != grid.n * grid.d || grid.adjacency.len() != grid.n {
            return Err(Error::Contract(format!(
                "token grid {}×{} does not match model width {}",
                grid.n, grid.d, self.config.d
            )));
        }
        let n = grid.n;
        let mut h = grid.tokens.clone();
        let mut blocks = Vec::with_capacity(self.config.blocks);
        for b in 0..self.config.blocks {
            let (out, c) = self.gat_block(&h, &grid.adjacency, b)?;
            blocks.push(c);
            h = out;
        }
        let pool = self.attention_pool(&h, n)?;
        let score = self.head(&pool.feature);
        Ok(ForwardCache {
            score,
            tokens0: grid,
            version: self.version,
            encoder: None,
            n_k: (n, 0),
            blocks,
            pool,
        })
    }

    pub fn predict(&self, batch: &RegionBatch) -> Result<T> {
        Ok(self.forward(batch)?.score)
    }

    /// Reverse pass for upstream gradient `dscore`, accumulating parameter
    /// gradients into `grads`. Returns the gradient w.r.t. the initial tokens.
    pub fn backward_into(&self, cache: &ForwardCache<T>, dscore: T, grads: &mut Gradients<T>) -> Result<Vec<T>> {
        if cache.version != self.version {
            return Err(Error::Contract(format!(
                "cache from parameter version {} used with version {}",
                cache.version, self.version
            )));
        }
        if grads.0.len() != self.tensors.len() {
            return Err(Error::Contract("gradient buffer layout mismatch".into()));
        }
        let d = self.config.d;
        let n = cache.tokens0.n;
        let ly = &self.layout;
        let feature = &cache.pool.feature;
        {
            let gw = &mut grads.0[ly.head_w];
            for c in 0..d {
                gw[c] += dscore * feature[c];
            }
        }
        grads.0[ly.head_b][0] += dscore;
        let dfeat: Vec<T> = self.t(ly.head_w).iter().map(|&w| w * dscore).collect();
        let mut dh = self.pool_backward(&cache.pool, n, &dfeat, grads);
        for b in (0..self.config.blocks).rev() {
            dh = self.block_backward(&cache.blocks[b], &cache.tokens0.adjacency, b, &dh, grads);
        }
        if let Some(enc) = &cache.encoder {
            let (n, k) = cache.n_k;
            self.encoder_backward(enc, n, k, &dh, grads);
        }
        Ok(dh)
    }

    /// [`backward_into`](Self::backward_into) accumulating into the model's own buffers.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dscore: T) -> Result<Vec<T>> {
        let mut grads = std::mem::replace(&mut self.grads, Gradients(Vec::new()));
        let out = self.backward_into(cache, dscore, &mut grads);
        self.grads = grads;
        out
    }
}

impl<T> BlockCache<T> {
    /// Attention weights of `node` for head `head`, aligned with its neighbor list.
    pub fn attention(&self, node: usize, head: usize, heads: usize) -> &[T] {
        let a = &self.alpha[node];
        let deg = a.len() / heads;
        &a[head * deg..(head + 1) * deg]
    }
}

impl<T: Scalar> ForwardCache<T> {
    /// Discrete state of the piecewise-linear parts: the winning member of
    /// every encoder max and the side of every LeakyReLU attention score.
    /// Within a region of parameter space where this is constant the score
    /// is smooth.
    pub fn branch_pattern(&self) -> (Vec<usize>, Vec<bool>) {
        let winners = self.encoder.as_ref().map(|e| e.argmax.clone()).unwrap_or_default();
        let signs = self
            .blocks
            .iter()
            .flat_map(|b| b.pre.iter().flatten().map(|&s| s > T::zero()))
            .collect();
        (winners, signs)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a != b);
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}
