//! Vision Transformer encoder with a class token and a prototype projection
//! head.
//!
//! Views of one size are processed together: linear layers run over the
//! row-stacked tokens of all views, attention runs per view. Positional
//! embeddings are learned for a reference grid and bilinearly resampled for
//! other grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::Case;
use crate::autodiff::{Bound, Graph, Resampler, Scalar, Tensor, TensorTable, Var};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::{mix, rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Input side the positional table is learned for.
    pub ref_side: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    /// Linear layers before the bottleneck normalisation (GELU between).
    pub head_layers: usize,
    pub n_prototypes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            n_heads: 4,
            mlp_ratio: 4,
            ref_side: 96,
            head_hidden_dim: 128,
            head_bottleneck_dim: 64,
            head_layers: 3,
            n_prototypes: 256,
        }
    }
}

impl ViTConfig {
    pub fn vit_large() -> Self {
        ViTConfig {
            patch_size: 16,
            embed_dim: 1024,
            depth: 24,
            n_heads: 16,
            mlp_ratio: 4,
            ref_side: 224,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            head_layers: 3,
            n_prototypes: 65536,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vit.patch_size", self.patch_size),
            ("vit.embed_dim", self.embed_dim),
            ("vit.n_heads", self.n_heads),
            ("vit.mlp_ratio", self.mlp_ratio),
            ("vit.head_hidden_dim", self.head_hidden_dim),
            ("vit.head_bottleneck_dim", self.head_bottleneck_dim),
            ("vit.head_layers", self.head_layers),
            ("vit.n_prototypes", self.n_prototypes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "vit.embed_dim {} is not divisible by vit.n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.ref_side % self.patch_size != 0 {
            return Err(Error::IndivisibleInput {
                side: self.ref_side,
                patch: self.patch_size,
            });
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn ref_grid(&self) -> usize {
        self.ref_side / self.patch_size
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        for side in [height, width] {
            if side == 0 || side % self.patch_size != 0 {
                return Err(Error::IndivisibleInput {
                    side,
                    patch: self.patch_size,
                });
            }
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }

    fn head_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.head_layers);
        let mut input = self.embed_dim;
        for i in 0..self.head_layers {
            let out = if i + 1 == self.head_layers {
                self.head_bottleneck_dim
            } else {
                self.head_hidden_dim
            };
            dims.push((input, out));
            input = out;
        }
        dims
    }

    /// Every parameter name with its shape, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let g = self.ref_grid();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![1 + g * g, d]),
        ];
        for i in 0..self.depth {
            let p = format!("blocks.{i}.");
            let h = d * self.mlp_ratio;
            for (n, s) in [
                ("norm1.weight", vec![d]),
                ("norm1.bias", vec![d]),
                ("attn.qkv.weight", vec![d, 3 * d]),
                ("attn.qkv.bias", vec![3 * d]),
                ("attn.proj.weight", vec![d, d]),
                ("attn.proj.bias", vec![d]),
                ("norm2.weight", vec![d]),
                ("norm2.bias", vec![d]),
                ("mlp.fc1.weight", vec![d, h]),
                ("mlp.fc1.bias", vec![h]),
                ("mlp.fc2.weight", vec![h, d]),
                ("mlp.fc2.bias", vec![d]),
            ] {
                out.push((format!("{p}{n}"), s));
            }
        }
        out.push(("norm.weight".into(), vec![d]));
        out.push(("norm.bias".into(), vec![d]));
        for (j, (i, o)) in self.head_dims().into_iter().enumerate() {
            out.push((format!("head.mlp.{j}.weight"), vec![i, o]));
            out.push((format!("head.mlp.{j}.bias"), vec![o]));
        }
        out.push((
            "head.last.weight".into(),
            vec![self.n_prototypes, self.head_bottleneck_dim],
        ));
        out
    }
}

/// Truncated normal at ±2σ by rejection.
pub fn trunc_normal(n: usize, std: f64, rng: &mut Rng) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect()
}

/// Rescales each row of a `[rows, cols]` tensor to unit Euclidean norm.
pub fn normalize_rows(t: &mut Tensor<f32>) {
    let cols = *t.shape.last().expect("rank >= 1");
    for row in t.values.chunks_exact_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-8);
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub tensors: TensorTable,
}

impl ViTParams {
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut tensors = TensorTable::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.contains("norm") {
                vec![1.0; n]
            } else {
                trunc_normal(n, 0.02, &mut rng)
            };
            let mut t = Tensor::new(shape, values);
            if name == "head.last.weight" {
                normalize_rows(&mut t);
            }
            tensors.insert(name, t);
        }
        Ok(ViTParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Checks that every tensor the config requires is present with the
    /// expected shape.
    pub fn from_table(config: ViTConfig, tensors: TensorTable) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        for (name, shape) in &shapes {
            let t = tensors.expect(name, shape)?;
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name:?} is not finite")));
            }
        }
        if tensors.len() != shapes.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        Ok(ViTParams { config, tensors })
    }

    pub fn renormalize_prototypes(&mut self) {
        if let Some(t) = self.tensors.get_mut("head.last.weight") {
            normalize_rows(t);
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.numel()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.tensors.save(path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ViTConfig = serde_json::from_str(&json)?;
        Self::from_table(config, TensorTable::load(path)?)
    }
}

/// The JSON config written next to a checkpoint: `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Splits an image into non-overlapping `p × p` patches in raster order,
/// each flattened as `(y, x, channel)`.
pub fn patchify(view: &Image, p: usize) -> Result<Vec<f32>> {
    for side in [view.height, view.width] {
        if side == 0 || side % p != 0 {
            return Err(Error::IndivisibleInput { side, patch: p });
        }
    }
    let (gh, gw) = (view.height / p, view.width / p);
    let mut out = Vec::with_capacity(view.data.len());
    for by in 0..gh {
        for bx in 0..gw {
            for y in by * p..(by + 1) * p {
                let start = (y * view.width + bx * p) * CHANNELS;
                out.extend_from_slice(&view.data[start..start + p * CHANNELS]);
            }
        }
    }
    Ok(out)
}

/// Encoder outputs for a group of `n_views` same-size views.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// `[n_views, embed_dim]`
    pub cls: Var,
    /// `[n_views * n_tokens, embed_dim]`, view-major.
    pub patches: Var,
    pub n_views: usize,
    pub grid: (usize, usize),
}

fn pos_resampler(cfg: &ViTConfig, grid: (usize, usize)) -> Option<Arc<Resampler>> {
    let g = cfg.ref_grid();
    (grid != (g, g)).then(|| Arc::new(Resampler::bilinear_grid(g, g, grid.0, grid.1)))
}

/// Patch projection + class token + positional embedding:
/// `[n_views * (1 + n_tokens), embed_dim]`.
pub fn embed<T: Scalar>(g: &mut Graph<T>, cfg: &ViTConfig, p: &Bound, views: &[Image]) -> Result<Var> {
    let first = views
        .first()
        .ok_or_else(|| Error::Shape("no views to embed".into()))?;
    let grid = cfg.grid(first.height, first.width)?;
    let n = grid.0 * grid.1;
    let mut flat = Vec::with_capacity(views.len() * n * cfg.patch_dim());
    for v in views {
        if (v.height, v.width) != (first.height, first.width) {
            return Err(Error::Shape(format!(
                "views of one group must share a size: {}x{} vs {}x{}",
                v.height, v.width, first.height, first.width
            )));
        }
        flat.extend(patchify(v, cfg.patch_size)?.into_iter().map(|x| T::from_f64_lossy(x as f64)));
    }
    let tokens = g.constant(&[views.len() * n, cfg.patch_dim()], flat);
    let x = g.matmul(tokens, p.get("patch_embed.weight")?)?;
    let x = g.add_bias(x, p.get("patch_embed.bias")?)?;

    let pos = p.get("pos_embed")?;
    let gref = cfg.ref_grid();
    let pos_cls = g.slice(pos, 0, 0, 1)?;
    let mut pos_patch = g.slice(pos, 0, 1, gref * gref)?;
    if let Some(map) = pos_resampler(cfg, grid) {
        pos_patch = g.resample(pos_patch, map)?;
    }
    let cls = g.add(p.get("cls_token")?, pos_cls)?;
    let mut rows = Vec::with_capacity(2 * views.len());
    for v in 0..views.len() {
        let patch = g.slice(x, 0, v * n, n)?;
        let patch = g.add(patch, pos_patch)?;
        rows.push(cls);
        rows.push(patch);
    }
    g.concat(&rows, 0)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{prefix}.weight"))?)?;
    g.add_bias(y, p.get(&format!("{prefix}.bias"))?)
}

fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    g.layer_norm(
        x,
        p.get(&format!("{prefix}.weight"))?,
        p.get(&format!("{prefix}.bias"))?,
    )
}

fn attention<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &Bound,
    x: Var,
    n_views: usize,
    prefix: &str,
) -> Result<Var> {
    let d = cfg.embed_dim;
    let dh = d / cfg.n_heads;
    let seq = g.shape(x)[0] / n_views;
    let qkv = linear(g, p, x, &format!("{prefix}.qkv"))?;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let rows = g.slice(qkv, 0, v * seq, seq)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q = g.slice(rows, 1, h * dh, dh)?;
            let k = g.slice(rows, 1, d + h * dh, dh)?;
            let val = g.slice(rows, 1, 2 * d + h * dh, dh)?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, val)?);
        }
        outs.push(g.concat(&heads, 1)?);
    }
    let merged = g.concat(&outs, 0)?;
    linear(g, p, merged, &format!("{prefix}.proj"))
}

/// Pre-norm transformer blocks and final norm over embedded tokens.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &Bound,
    x: Var,
    n_views: usize,
    grid: (usize, usize),
) -> Result<Features> {
    let seq = 1 + grid.0 * grid.1;
    if g.shape(x) != [n_views * seq, cfg.embed_dim] {
        return Err(Error::Shape(format!(
            "encode expects [{}, {}], got {:?}",
            n_views * seq,
            cfg.embed_dim,
            g.shape(x)
        )));
    }
    let mut x = x;
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        let h = norm(g, p, x, &format!("{pre}.norm1"))?;
        let h = attention(g, cfg, p, h, n_views, &format!("{pre}.attn"))?;
        x = g.add(x, h)?;
        let h = norm(g, p, x, &format!("{pre}.norm2"))?;
        let h = linear(g, p, h, &format!("{pre}.mlp.fc1"))?;
        let h = g.gelu(h);
        let h = linear(g, p, h, &format!("{pre}.mlp.fc2"))?;
        x = g.add(x, h)?;
    }
    let x = norm(g, p, x, "norm")?;
    let cls_idx: Vec<usize> = (0..n_views).map(|v| v * seq).collect();
    let patch_idx: Vec<usize> = (0..n_views)
        .flat_map(|v| (v * seq + 1)..((v + 1) * seq))
        .collect();
    Ok(Features {
        cls: g.gather_rows(x, &cls_idx)?,
        patches: g.gather_rows(x, &patch_idx)?,
        n_views,
        grid,
    })
}

pub fn forward_features<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ViTConfig,
    p: &Bound,
    views: &[Image],
) -> Result<Features> {
    let x = embed(g, cfg, p, views)?;
    let grid = cfg.grid(views[0].height, views[0].width)?;
    encode(g, cfg, p, x, views.len(), grid)
}

/// Head MLP up to the unit-norm bottleneck: `[rows, bottleneck]`.
pub fn head_bottleneck<T: Scalar>(g: &mut Graph<T>, cfg: &ViTConfig, p: &Bound, cls: Var) -> Result<Var> {
    let mut h = cls;
    for j in 0..cfg.head_layers {
        h = linear(g, p, h, &format!("head.mlp.{j}"))?;
        if j + 1 < cfg.head_layers {
            h = g.gelu(h);
        }
    }
    g.l2_normalize(h)
}

/// Prototype logits `[rows, n_prototypes]`; prototype rows are normalised in
/// the forward pass, so every logit is a cosine.
pub fn forward_head<T: Scalar>(g: &mut Graph<T>, cfg: &ViTConfig, p: &Bound, cls: Var) -> Result<Var> {
    let z = head_bottleneck(g, cfg, p, cls)?;
    let w = g.l2_normalize(p.get("head.last.weight")?)?;
    g.matmul_t(z, w)
}

/// Class embeddings `[n_views, embed_dim]` of same-size views, value only.
pub fn cls_embeddings(params: &ViTParams, views: &[Image]) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let p = Bound::bind(&mut g, &params.tensors, "", false);
    let f = forward_features(&mut g, &params.config, &p, views)?;
    Ok(g.value(f.cls).to_vec())
}

/// Prototype logits `[n_views, n_prototypes]` of same-size views, value only.
pub fn prototype_logits(params: &ViTParams, views: &[Image]) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let p = Bound::bind(&mut g, &params.tensors, "", false);
    let f = forward_features(&mut g, &params.config, &p, views)?;
    let logits = forward_head(&mut g, &params.config, &p, f.cls)?;
    Ok(g.value(logits).to_vec())
}

/// Gradient-check case for the composed forward pass of a tiny encoder:
/// cross-entropy of prototype logits for two views of different sizes.
pub fn gradcheck_case(seed: u64) -> Result<Case> {
    use rand::Rng as _;
    let cfg = ViTConfig {
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        n_heads: 2,
        mlp_ratio: 2,
        ref_side: 8,
        head_hidden_dim: 6,
        head_bottleneck_dim: 5,
        head_layers: 2,
        n_prototypes: 7,
    };
    let params = ViTParams::init(&cfg, mix(&[seed, 0x7E57]))?;
    let names: Vec<String> = params.tensors.names().iter().map(|s| s.to_string()).collect();
    let inputs: Vec<Tensor<f64>> = params
        .tensors
        .iter()
        .map(|(_, t)| {
            let mut t = t.cast::<f64>();
            t.values.iter_mut().for_each(|v| *v *= 10.0);
            t
        })
        .collect();
    let mut rng = rng_from(mix(&[seed, 0x1A6E]));
    let side = [8, 12][seed as usize % 2];
    let views = vec![Image {
        height: side,
        width: side,
        data: (0..side * side * CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }];
    let target = seed as usize % cfg.n_prototypes;
    Ok(Case {
        name: "vit_forward".into(),
        inputs,
        f: Box::new(move |g: &mut Graph<f64>, vars: &[Var]| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let feats = forward_features(g, &cfg, &bound, &views)?;
            let logits = forward_head(g, &cfg, &bound, feats.cls)?;
            g.cross_entropy_with_logits(logits, &[target])
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::jvp_check;
    use rand::Rng as _;

    fn tiny() -> ViTConfig {
        ViTConfig {
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            n_heads: 2,
            mlp_ratio: 2,
            ref_side: 8,
            head_hidden_dim: 6,
            head_bottleneck_dim: 5,
            head_layers: 2,
            n_prototypes: 7,
        }
    }

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = rng_from(seed);
        Image {
            height: side,
            width: side,
            data: (0..side * side * CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn patch_counts() {
        let p16 = |side| patchify(&Image::zeros(side, side), 16).unwrap().len() / (16 * 16 * 3);
        assert_eq!(p16(96), 36);
        assert_eq!(p16(64), 16);
        let img = random_image(16, 1);
        assert_eq!(patchify(&img, 16).unwrap(), img.data);
        assert!(matches!(
            patchify(&Image::zeros(20, 16), 16),
            Err(Error::IndivisibleInput { side: 20, patch: 16 })
        ));
    }

    #[test]
    fn patch_raster_order() {
        let mut img = Image::zeros(4, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i / CHANNELS) as f32;
        }
        let t = patchify(&img, 2).unwrap();
        let first: Vec<f32> = t[..12].iter().step_by(3).copied().collect();
        assert_eq!(first, vec![0.0, 1.0, 4.0, 5.0]);
        let second: Vec<f32> = t[12..24].iter().step_by(3).copied().collect();
        assert_eq!(second, vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn vit_large_is_expressible() {
        let cfg = ViTConfig::vit_large();
        cfg.validate().unwrap();
        let per_block: usize = cfg
            .param_shapes()
            .iter()
            .filter(|(n, _)| n.starts_with("blocks.0."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(per_block, 12_596_224);
        assert_eq!(cfg.grid(224, 224).unwrap(), (14, 14));
    }

    #[test]
    fn output_shapes_and_multi_size() {
        let cfg = ViTConfig::default();
        let params = ViTParams::init(&cfg, 3).unwrap();
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &params.tensors, "", false);
        for side in [96, 64] {
            let views = vec![random_image(side, 1), random_image(side, 2)];
            let f = forward_features(&mut g, &cfg, &p, &views).unwrap();
            let n = (side / 8) * (side / 8);
            assert_eq!(g.shape(f.cls), &[2, 64]);
            assert_eq!(g.shape(f.patches), &[2 * n, 64]);
            let logits = forward_head(&mut g, &cfg, &p, f.cls).unwrap();
            assert_eq!(g.shape(logits), &[2, 256]);
            assert!(g.value(logits).iter().all(|l| l.abs() <= 1.0 + 1e-6));
        }
        assert!(matches!(
            forward_features(&mut g, &cfg, &p, &[random_image(20, 1)]),
            Err(Error::IndivisibleInput { .. })
        ));
    }

    #[test]
    fn views_are_independent() {
        let cfg = tiny();
        let params = ViTParams::init(&cfg, 4).unwrap();
        let a = random_image(8, 10);
        let b = random_image(8, 11);
        let both = cls_embeddings(&params, &[a.clone(), b]).unwrap();
        let alone = cls_embeddings(&params, &[a]).unwrap();
        for (x, y) in both[..8].iter().zip(&alone) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn cls_is_permutation_invariant() {
        let cfg = ViTConfig::default();
        let params = ViTParams::init(&cfg, 5).unwrap();
        let view = random_image(64, 12);
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &params.tensors, "", false);
        let x = embed(&mut g, &cfg, &p, &[view]).unwrap();
        let f = encode(&mut g, &cfg, &p, x, 1, (8, 8)).unwrap();
        let reference = g.value(f.cls).to_vec();

        let mut order: Vec<usize> = (1..65).collect();
        let mut rng = rng_from(7);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut idx = vec![0];
        idx.extend(order);
        let shuffled = g.gather_rows(x, &idx).unwrap();
        let f2 = encode(&mut g, &cfg, &p, shuffled, 1, (8, 8)).unwrap();
        for (a, b) in reference.iter().zip(g.value(f2.cls)) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_input_zero_pos_gives_identical_tokens() {
        let cfg = tiny();
        let mut params = ViTParams::init(&cfg, 6).unwrap();
        params.tensors.get_mut("pos_embed").unwrap().values.fill(0.0);
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &params.tensors, "", false);
        let f = forward_features(&mut g, &cfg, &p, &[Image::zeros(16, 16)]).unwrap();
        let v = g.value(f.patches);
        for row in v.chunks_exact(8) {
            assert_eq!(row, &v[..8]);
        }
    }

    #[test]
    fn bottleneck_is_scale_invariant() {
        let mut cfg = tiny();
        cfg.head_layers = 1;
        cfg.head_bottleneck_dim = cfg.embed_dim;
        let mut params = ViTParams::init(&cfg, 8).unwrap();
        let eye: Vec<f32> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        params.tensors.get_mut("head.mlp.0.weight").unwrap().values = eye;
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &params.tensors, "", false);
        let cls: Vec<f32> = (0..8).map(|i| i as f32 * 0.3 - 1.0).collect();
        let a = g.constant(&[1, 8], cls.clone());
        let b = g.constant(&[1, 8], cls.iter().map(|v| v * 10.0).collect());
        let la = forward_head(&mut g, &cfg, &p, a).unwrap();
        let lb = forward_head(&mut g, &cfg, &p, b).unwrap();
        for (x, y) in g.value(la).iter().zip(g.value(lb)) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny();
        let params = ViTParams::init(&cfg, 9).unwrap();
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &params.tensors, "", true);
        let f = forward_features(&mut g, &cfg, &p, &[random_image(12, 1), random_image(12, 2)]).unwrap();
        let logits = forward_head(&mut g, &cfg, &p, f.cls).unwrap();
        let pm = g.mean_rows(f.patches).unwrap();
        let pm = g.sum(pm);
        let loss = g.cross_entropy_with_logits(logits, &[1, 3]).unwrap();
        let loss = g.add(loss, pm).unwrap();
        g.backward(loss).unwrap();
        for (name, grad) in params.tensors.names().iter().zip(p.grads(&g, "")) {
            assert!(grad.iter().any(|&v| v != 0.0), "{name} got no gradient");
        }
    }

    #[test]
    fn composed_forward_matches_finite_differences() {
        let cfg = tiny();
        let params = ViTParams::init(&cfg, 10).unwrap();
        let names: Vec<String> = params.tensors.names().iter().map(|s| s.to_string()).collect();
        let inputs: Vec<Tensor<f64>> = params
            .tensors
            .iter()
            .map(|(_, t)| {
                let mut t = t.cast::<f64>();
                // lift small inits so finite differences are well conditioned
                t.values.iter_mut().for_each(|v| *v *= 10.0);
                t
            })
            .collect();
        let views = vec![random_image(12, 3)];
        let f = |g: &mut Graph<f64>, vars: &[Var]| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let feats = forward_features(g, &cfg, &bound, &views)?;
            let logits = forward_head(g, &cfg, &bound, feats.cls)?;
            g.cross_entropy_with_logits(logits, &[2])
        };
        for seed in 0..3 {
            let err = jvp_check(f, &inputs, 1e-6, seed).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gradcheck_case_is_tight() {
        for seed in 0..2 {
            let c = gradcheck_case(seed).unwrap();
            let err = jvp_check(&c.f, &c.inputs, 1e-6, seed).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.vdck");
        let params = ViTParams::init(&tiny(), 11).unwrap();
        params.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = ViTParams::load(&path).unwrap();
        assert_eq!(back, params);
        let view = [random_image(8, 5)];
        let a = prototype_logits(&params, &view).unwrap();
        let b = prototype_logits(&back, &view).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let mut params = ViTParams::init(&tiny(), 12).unwrap();
        params
            .tensors
            .insert("cls_token", Tensor::new(vec![1, 3], vec![0.0; 3]));
        assert!(matches!(
            ViTParams::from_table(tiny(), params.tensors),
            Err(Error::Checkpoint(_))
        ));
    }
}
