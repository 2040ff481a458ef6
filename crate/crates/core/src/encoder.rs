//! Patch transformer producing a spatial feature grid at any supported resolution.
//!
//! The encoder has no class token: every output token is one cell of the
//! `h' x w' x D` feature grid. Positional embeddings are learned on a native
//! token grid and bilinearly resampled (as a constant linear operator inside
//! the graph) whenever the encoder runs on a different grid.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Bindings, Element, Graph, NodeId};
use crate::raster::{bilinear_matrix, Image};

pub const PATCH_EMBED_W: &str = "patch_embed.weight";
pub const PATCH_EMBED_B: &str = "patch_embed.bias";
pub const POS_EMBED: &str = "pos_embed";
pub const TOKENS: &str = "tokens";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the MLP relative to `embed_dim`; 0 disables the MLP.
    pub mlp_ratio: f64,
    pub resolutions: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            resolutions: vec![32, 48, 64],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::Config("patch_size, embed_dim and heads must be positive".into()));
        }
        if self.depth < 1 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio >= 0.0) {
            return Err(Error::Config("mlp_ratio must be non-negative".into()));
        }
        if self.resolutions.is_empty() {
            return Err(Error::Config("at least one resolution is required".into()));
        }
        for &r in &self.resolutions {
            self.check_resolution(r)?;
        }
        Ok(())
    }

    pub fn check_resolution(&self, resolution: usize) -> Result<()> {
        if resolution == 0 || resolution % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "resolution {resolution} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self, resolution: usize) -> (usize, usize) {
        (resolution / self.patch_size, resolution / self.patch_size)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Learnable positional table on a `grid_w x grid_h` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbedding {
    pub grid_w: usize,
    pub grid_h: usize,
    /// `[grid_w * grid_h, D]`, row-major over the grid.
    pub table: Array,
}

impl PositionalEmbedding {
    pub fn new(grid_w: usize, grid_h: usize, table: Array) -> Result<Self> {
        if table.ndim() != 2 || table.shape()[0] != grid_w * grid_h {
            return Err(Error::shape(format!(
                "positional table {:?} does not match a {grid_w}x{grid_h} grid",
                table.shape()
            )));
        }
        Ok(PositionalEmbedding {
            grid_w,
            grid_h,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

/// Resamples every channel of the table to `new_grid` (corner-aligned bilinear).
pub fn resize_positional_embeddings(
    pe: &PositionalEmbedding,
    new_grid: (usize, usize),
) -> Result<PositionalEmbedding> {
    let (w, h) = new_grid;
    if w == 0 || h == 0 {
        return Err(Error::Precondition("target grid must be positive".into()));
    }
    if (w, h) == (pe.grid_w, pe.grid_h) {
        return Ok(pe.clone());
    }
    let m = bilinear_matrix((pe.grid_w, pe.grid_h), (w, h));
    let d = pe.dim();
    let src = pe.grid_w * pe.grid_h;
    let mut out = vec![0.0f32; w * h * d];
    for row in 0..w * h {
        for c in 0..d {
            let mut acc = 0.0f64;
            for s in 0..src {
                let wgt = m[row * src + s];
                if wgt != 0.0 {
                    acc += wgt * pe.table.data()[s * d + c] as f64;
                }
            }
            out[row * d + c] = acc as f32;
        }
    }
    PositionalEmbedding::new(w, h, Array::new(vec![w * h, d], out)?)
}

/// Rearranges an image into row-major patch tokens of length `patch_size^2`.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Array> {
    let (w, h) = (image.width(), image.height());
    if patch_size == 0 || w % patch_size != 0 || h % patch_size != 0 {
        return Err(Error::shape(format!(
            "image {w}x{h} is not divisible by patch size {patch_size}"
        )));
    }
    let (gw, gh) = (w / patch_size, h / patch_size);
    let tok = patch_size * patch_size;
    let mut data = Vec::with_capacity(gw * gh * tok);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    data.push(image.get(gx * patch_size + px, gy * patch_size + py));
                }
            }
        }
    }
    Array::new(vec![gw * gh, tok], data)
}

/// Encoder outputs: `values` has shape `[h', w', D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Array,
}

impl FeatureGrid {
    pub fn from_tokens(tokens: Array, width: usize, height: usize) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.shape()[0] != width * height {
            return Err(Error::shape(format!(
                "token array {:?} does not fill a {width}x{height} grid",
                tokens.shape()
            )));
        }
        let channels = tokens.shape()[1];
        Ok(FeatureGrid {
            width,
            height,
            channels,
            values: tokens.reshape(vec![height, width, channels])?,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, d: usize) -> f32 {
        self.values.data()[(y * self.width + x) * self.channels + d]
    }
}

/// Encoder parameters plus the grid the positional table currently lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: BTreeMap<String, Array>,
    pub pos_grid: (usize, usize),
}

fn block_key(i: usize, name: &str) -> String {
    format!("blocks.{i}.{name}")
}

impl Encoder {
    /// Fresh weights with the positional table on the grid of `native_resolution`.
    pub fn init<R: Rng>(config: EncoderConfig, native_resolution: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        config.check_resolution(native_resolution)?;
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let grid = config.grid(native_resolution);
        let mut params = BTreeMap::new();
        let mut put = |name: String, shape: &[usize], init: Init, rng: &mut R| {
            params.insert(name, init.sample(shape, rng));
        };
        put(PATCH_EMBED_W.into(), &[config.token_dim(), d], Init::TruncNormal, rng);
        put(PATCH_EMBED_B.into(), &[d], Init::Zeros, rng);
        put(POS_EMBED.into(), &[grid.0 * grid.1, d], Init::Normal, rng);
        for i in 0..config.depth {
            put(block_key(i, "norm1.gamma"), &[d], Init::Ones, rng);
            put(block_key(i, "norm1.beta"), &[d], Init::Zeros, rng);
            for p in ["q", "k", "v", "proj"] {
                put(block_key(i, &format!("attn.{p}.weight")), &[d, d], Init::TruncNormal, rng);
                put(block_key(i, &format!("attn.{p}.bias")), &[d], Init::Zeros, rng);
            }
            if hidden > 0 {
                put(block_key(i, "norm2.gamma"), &[d], Init::Ones, rng);
                put(block_key(i, "norm2.beta"), &[d], Init::Zeros, rng);
                put(block_key(i, "mlp.fc1.weight"), &[d, hidden], Init::TruncNormal, rng);
                put(block_key(i, "mlp.fc1.bias"), &[hidden], Init::Zeros, rng);
                put(block_key(i, "mlp.fc2.weight"), &[hidden, d], Init::TruncNormal, rng);
                put(block_key(i, "mlp.fc2.bias"), &[d], Init::Zeros, rng);
            }
        }
        put("norm.gamma".into(), &[d], Init::Ones, rng);
        put("norm.beta".into(), &[d], Init::Zeros, rng);
        Ok(Encoder {
            config,
            params,
            pos_grid: grid,
        })
    }

    pub fn positional_embedding(&self) -> Result<PositionalEmbedding> {
        PositionalEmbedding::new(self.pos_grid.0, self.pos_grid.1, self.params[POS_EMBED].clone())
    }

    /// Moves the learnable positional table onto a new grid.
    pub fn set_positional_grid(&mut self, grid: (usize, usize)) -> Result<()> {
        let pe = resize_positional_embeddings(&self.positional_embedding()?, grid)?;
        self.params.insert(POS_EMBED.into(), pe.table);
        self.pos_grid = grid;
        Ok(())
    }

    pub fn bindings<'a>(&'a self, tokens: &'a Array) -> Bindings<'a, f32> {
        let mut b: Bindings<f32> = self.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
        b.insert(TOKENS, tokens);
        b
    }

    pub fn graph(&self, grid: (usize, usize)) -> EncoderGraph<f32> {
        EncoderGraph::build(&self.config, self.pos_grid, grid)
    }

    /// Runs the encoder on an image whose sides are multiples of the patch size.
    pub fn encode(&self, image: &Image) -> Result<FeatureGrid> {
        let p = self.config.patch_size;
        let tokens = patchify(image, p)?;
        let grid = (image.width() / p, image.height() / p);
        let eg = self.graph(grid);
        let values = eg.graph.forward(&self.bindings(&tokens))?.take(eg.output);
        FeatureGrid::from_tokens(values, grid.0, grid.1)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal,
    TruncNormal,
}

impl Init {
    fn sample<R: Rng>(self, shape: &[usize], rng: &mut R) -> Array {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0f64, 0.02).expect("valid sigma");
        let data: Vec<f32> = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => (0..n).map(|_| normal.sample(rng) as f32).collect(),
            Init::TruncNormal => (0..n)
                .map(|_| loop {
                    let v = normal.sample(rng);
                    if v.abs() <= 0.04 {
                        break v as f32;
                    }
                })
                .collect(),
        };
        Array::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// The encoder as a differentiable graph for one token grid.
#[derive(Debug, Clone)]
pub struct EncoderGraph<T> {
    pub graph: Graph<T>,
    pub tokens: NodeId,
    /// `[w'*h', D]` token features after the final norm.
    pub output: NodeId,
    pub grid: (usize, usize),
}

impl<T: Element> EncoderGraph<T> {
    pub fn build(config: &EncoderConfig, pos_grid: (usize, usize), grid: (usize, usize)) -> Self {
        let mut g = Graph::new();
        let tokens = g.input(TOKENS);
        let output = encoder_graph(&mut g, tokens, config, pos_grid, grid);
        EncoderGraph {
            graph: g,
            tokens,
            output,
            grid,
        }
    }
}

fn linear<T: Element>(g: &mut Graph<T>, x: NodeId, prefix: &str) -> NodeId {
    let w = g.input(&format!("{prefix}.weight"));
    let b = g.input(&format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add(y, b)
}

fn norm<T: Element>(g: &mut Graph<T>, x: NodeId, prefix: &str) -> NodeId {
    let gamma = g.input(&format!("{prefix}.gamma"));
    let beta = g.input(&format!("{prefix}.beta"));
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul(n, gamma);
    g.add(n, beta)
}

/// Appends the encoder to `g`, reading parameters from inputs named like
/// [`Encoder::params`] and patch tokens from `tokens`.
pub fn encoder_graph<T: Element>(
    g: &mut Graph<T>,
    tokens: NodeId,
    config: &EncoderConfig,
    pos_grid: (usize, usize),
    grid: (usize, usize),
) -> NodeId {
    let d = config.embed_dim;
    let heads = config.heads;
    let dh = d / heads;
    let t = grid.0 * grid.1;

    let mut x = linear(g, tokens, "patch_embed");
    g.label(x, "patch_embed");
    let pos = g.input(POS_EMBED);
    let pos = if pos_grid == grid {
        pos
    } else {
        let m = bilinear_matrix(pos_grid, grid);
        let m = Array::<T>::from_f64(vec![t, pos_grid.0 * pos_grid.1], &m).expect("matrix shape");
        let m = g.constant(m);
        g.matmul(m, pos)
    };
    x = g.add(x, pos);

    for i in 0..config.depth {
        let h = norm(g, x, &block_key(i, "norm1"));
        let split = |g: &mut Graph<T>, name: &str, perm: Vec<usize>| {
            let y = linear(g, h, &block_key(i, &format!("attn.{name}")));
            let y = g.reshape(y, vec![t, heads, dh]);
            g.transpose(y, perm)
        };
        let q = split(g, "q", vec![1, 0, 2]);
        let k = split(g, "k", vec![1, 2, 0]);
        let v = split(g, "v", vec![1, 0, 2]);
        let scores = g.matmul(q, k);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 2);
        g.label(attn, format!("blocks.{i}.attn.softmax"));
        let o = g.matmul(attn, v);
        let o = g.transpose(o, vec![1, 0, 2]);
        let o = g.reshape(o, vec![t, d]);
        let o = linear(g, o, &block_key(i, "attn.proj"));
        x = g.add(x, o);

        if config.mlp_hidden() > 0 {
            let h = norm(g, x, &block_key(i, "norm2"));
            let u = linear(g, h, &block_key(i, "mlp.fc1"));
            let u = g.gelu(u);
            let u = linear(g, u, &block_key(i, "mlp.fc2"));
            x = g.add(x, u);
        }
    }
    let out = norm(g, x, "norm");
    g.label(out, "encoder.out")
}

#[cfg(test)]
mod tests;
