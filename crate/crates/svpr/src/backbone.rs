//! A tiny frozen ViT-style backbone: patch embedding with class token and
//! positional embeddings, then `L` transformer blocks (`x' = MHA(LN(x)) + x`,
//! `x_l = MLP(LN(x')) + x'`). Weights are drawn from a seeded Gaussian and
//! never trained; the backbone exists to produce the intermediate features
//! `x_0..x_L` that side networks refine.
//!
//! Also provides the comparison baseline with bottleneck adapters inserted
//! inside the block (a serial adapter after MHA, a scaled parallel adapter
//! beside the MLP), which degenerates to the plain block when both adapters
//! output zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, Graph, NodeId, ParamSet, Parameter, Tensor};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Backbone geometry. `N = grid_w * grid_h` patch tokens plus one class token.
#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    /// Transformer block count L.
    pub blocks: usize,
    /// Token dimension D.
    pub dim: usize,
    /// Attention heads; must divide `dim`.
    pub heads: usize,
    /// Patch grid (width, height).
    pub grid: (usize, usize),
    /// Patch side length in pixels.
    pub patch: usize,
    /// Image channels.
    pub channels: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Weight init seed.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            dim: 64,
            heads: 4,
            grid: (8, 8),
            patch: 4,
            channels: 1,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    /// Expected image shape `[height, width, channels]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.grid.1 * self.patch,
            self.grid.0 * self.patch,
            self.channels,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patches() == 0 || self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig(
                "grid, patch, channels, mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The per-block token sequences `x_0..x_L`, each `(N+1) x D`.
#[derive(Debug, Clone)]
pub struct IntermediateFeatures {
    features: Vec<Tensor>,
}

impl IntermediateFeatures {
    pub fn new(features: Vec<Tensor>) -> Self {
        Self { features }
    }

    /// `x_l` for `l` in `0..=L`.
    pub fn feature(&self, l: usize) -> &Tensor {
        &self.features[l]
    }

    /// L + 1.
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.features.iter()
    }
}

/// Node bindings for one transformer block.
pub struct BlockNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Node bindings for one bottleneck adapter (down-project, ReLU, up-project).
pub struct AdapterNodes {
    pub down_w: NodeId,
    pub down_b: NodeId,
    pub up_w: NodeId,
    pub up_b: NodeId,
}

/// Bottleneck adapter body: `up(relu(down(z)))`, optionally plus `z`.
pub fn bottleneck_adapter(
    g: &mut Graph,
    z: NodeId,
    a: &AdapterNodes,
    internal_skip: bool,
) -> Result<NodeId> {
    let down = g.linear(z, a.down_w, a.down_b)?;
    let act = g.relu(down);
    let up = g.linear(act, a.up_w, a.up_b)?;
    if internal_skip {
        g.add(up, z)
    } else {
        Ok(up)
    }
}

/// Multi-head attention over a `(N+1) x D` token matrix.
///
/// Returns the projected output and the per-head attention matrices for
/// inspection.
pub fn mha_forward(
    g: &mut Graph,
    x: NodeId,
    blk: &BlockNodes,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let dim = g.shape(x)[1];
    let dh = dim / heads;
    let q = g.linear(x, blk.wq, blk.bq)?;
    let k = g.linear(x, blk.wk, blk.bk)?;
    let v = g.linear(x, blk.wv, blk.bv)?;
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attentions = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scaled)?;
        attentions.push(attn);
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(1, &head_outputs)?;
    let out = g.linear(merged, blk.wo, blk.bo)?;
    Ok((out, attentions))
}

/// Plain transformer block: `x' = MHA(LN(x)) + x; x_l = MLP(LN(x')) + x'`.
pub fn block_forward(
    g: &mut Graph,
    x: NodeId,
    blk: &BlockNodes,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let ln1 = g.layer_norm(x, blk.ln1_gamma, blk.ln1_beta, LN_EPS)?;
    let (mha_out, attentions) = mha_forward(g, ln1, blk, heads)?;
    let x_prime = g.add(mha_out, x)?;
    let ln2 = g.layer_norm(x_prime, blk.ln2_gamma, blk.ln2_beta, LN_EPS)?;
    let hidden = g.linear(ln2, blk.w1, blk.b1)?;
    let act = g.relu(hidden);
    let mlp_out = g.linear(act, blk.w2, blk.b2)?;
    let out = g.add(mlp_out, x_prime)?;
    Ok((out, attentions))
}

/// Block with adapters inserted in-line, the backpropagate-through-backbone
/// baseline: `x' = SerialAdapter(MHA(LN(x))) + x;
/// x_l = MLP(LN(x')) + s * ParallelAdapter(LN(x')) + x'`.
///
/// The serial adapter carries an internal skip connection, the parallel one
/// does not, so zero up-projections reduce this to [`block_forward`].
pub fn adapted_block_forward(
    g: &mut Graph,
    x: NodeId,
    blk: &BlockNodes,
    heads: usize,
    serial: &AdapterNodes,
    parallel: &AdapterNodes,
    s: f64,
) -> Result<NodeId> {
    let ln1 = g.layer_norm(x, blk.ln1_gamma, blk.ln1_beta, LN_EPS)?;
    let (mha_out, _) = mha_forward(g, ln1, blk, heads)?;
    let adapted = bottleneck_adapter(g, mha_out, serial, true)?;
    let x_prime = g.add(adapted, x)?;
    let ln2 = g.layer_norm(x_prime, blk.ln2_gamma, blk.ln2_beta, LN_EPS)?;
    let hidden = g.linear(ln2, blk.w1, blk.b1)?;
    let act = g.relu(hidden);
    let mlp_out = g.linear(act, blk.w2, blk.b2)?;
    let parallel_out = bottleneck_adapter(g, ln2, parallel, false)?;
    let scaled = g.scale(parallel_out, s);
    let with_parallel = g.add(mlp_out, scaled)?;
    g.add(with_parallel, x_prime)
}

/// Frozen random-weight backbone.
pub struct Backbone {
    cfg: BackboneConfig,
    params: ParamSet,
}

fn insert_frozen(params: &mut ParamSet, name: String, t: Tensor) {
    params.insert(name, Parameter::frozen(t));
}

impl Backbone {
    /// Seeded Gaussian weights (std 0.02), unit LayerNorm gains, zero biases.
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let d = cfg.dim;
        let patch_in = cfg.patch * cfg.patch * cfg.channels;

        insert_frozen(
            &mut params,
            "backbone.embed.w".into(),
            Tensor::randn(&[patch_in, d], INIT_STD, &mut rng),
        );
        insert_frozen(&mut params, "backbone.embed.b".into(), Tensor::zeros(&[d]));
        insert_frozen(
            &mut params,
            "backbone.embed.class".into(),
            Tensor::randn(&[1, d], INIT_STD, &mut rng),
        );
        insert_frozen(
            &mut params,
            "backbone.embed.pos".into(),
            Tensor::randn(&[cfg.tokens(), d], INIT_STD, &mut rng),
        );

        let hidden = d * cfg.mlp_ratio;
        for i in 0..cfg.blocks {
            let p = |suffix: &str| format!("backbone.block{i}.{suffix}");
            insert_frozen(&mut params, p("ln1.gamma"), ones(d));
            insert_frozen(&mut params, p("ln1.beta"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                insert_frozen(&mut params, p(w), Tensor::randn(&[d, d], INIT_STD, &mut rng));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                insert_frozen(&mut params, p(b), Tensor::zeros(&[d]));
            }
            insert_frozen(&mut params, p("ln2.gamma"), ones(d));
            insert_frozen(&mut params, p("ln2.beta"), Tensor::zeros(&[d]));
            insert_frozen(
                &mut params,
                p("w1"),
                Tensor::randn(&[d, hidden], INIT_STD, &mut rng),
            );
            insert_frozen(&mut params, p("b1"), Tensor::zeros(&[hidden]));
            insert_frozen(
                &mut params,
                p("w2"),
                Tensor::randn(&[hidden, d], INIT_STD, &mut rng),
            );
            insert_frozen(&mut params, p("b2"), Tensor::zeros(&[d]));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Test hook: overwrite one parameter's values.
    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter {name}")))?;
        if p.tensor.data.len() != data.len() {
            return Err(Error::shape("set_param", format!("{name}: length mismatch")));
        }
        p.tensor.data = data;
        Ok(())
    }

    /// Zeroes every linear weight and bias (LayerNorm gains stay 1), making
    /// each block an exact identity.
    pub fn zero_block_weights(&mut self) {
        for (name, p) in self.params.iter_mut() {
            let is_block = name.contains(".block");
            let is_ln = name.contains(".ln");
            if is_block && !is_ln {
                p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Rearranges an image into the `[N, patch*patch*channels]` matrix whose
    /// rows are flattened patches in row-major grid order.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let want = self.cfg.image_shape();
        if image.shape != want {
            return Err(Error::shape(
                "patchify",
                format!("image {:?}, expected {:?}", image.shape, want),
            ));
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "image" });
        }
        let (gw, gh) = self.cfg.grid;
        let p = self.cfg.patch;
        let c = self.cfg.channels;
        let img_w = gw * p;
        let mut out = Vec::with_capacity(self.cfg.patches() * p * p * c);
        for pr in 0..gh {
            for pc in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((pr * p + dy) * img_w + (pc * p + dx)) * c;
                        out.extend_from_slice(&image.data[base..base + c]);
                    }
                }
            }
        }
        Tensor::new(vec![self.cfg.patches(), p * p * c], out)
    }

    /// Builds `x_0` in `g`: linear patch embedding, class token prepended,
    /// positional embeddings added.
    pub fn patch_embed(&self, g: &mut Graph, bound: &BoundParams, image: &Tensor) -> Result<NodeId> {
        let patches = self.patchify(image)?;
        let patches_node = g.constant(patches);
        let embedded = g.linear(patches_node, bound.id("backbone.embed.w"), bound.id("backbone.embed.b"))?;
        let with_class = g.concat(0, &[bound.id("backbone.embed.class"), embedded])?;
        g.add(with_class, bound.id("backbone.embed.pos"))
    }

    /// Node bindings for block `i`.
    pub fn block_nodes(&self, bound: &BoundParams, i: usize) -> BlockNodes {
        let p = |suffix: &str| bound.id(&format!("backbone.block{i}.{suffix}"));
        BlockNodes {
            ln1_gamma: p("ln1.gamma"),
            ln1_beta: p("ln1.beta"),
            wq: p("wq"),
            bq: p("bq"),
            wk: p("wk"),
            bk: p("bk"),
            wv: p("wv"),
            bv: p("bv"),
            wo: p("wo"),
            bo: p("bo"),
            ln2_gamma: p("ln2.gamma"),
            ln2_beta: p("ln2.beta"),
            w1: p("w1"),
            b1: p("b1"),
            w2: p("w2"),
            b2: p("b2"),
        }
    }

    /// Forward-only pass collecting `x_0..x_L`. All weights stay frozen; the
    /// features come back as plain tensors ready to enter a training graph as
    /// constants.
    pub fn run(&self, image: &Tensor) -> Result<IntermediateFeatures> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let mut x = self.patch_embed(&mut g, &bound, image)?;
        let mut features = Vec::with_capacity(self.cfg.blocks + 1);
        features.push(tensor_of(&g, x));
        for i in 0..self.cfg.blocks {
            let blk = self.block_nodes(&bound, i);
            let (next, _) = block_forward(&mut g, x, &blk, self.cfg.heads)?;
            x = next;
            features.push(tensor_of(&g, x));
        }
        Ok(IntermediateFeatures::new(features))
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape matches data")
}

pub(crate) fn tensor_of(g: &Graph, id: NodeId) -> Tensor {
    Tensor::new(g.shape(id).to_vec(), g.value(id).to_vec()).expect("node is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            blocks: 2,
            dim: 16,
            heads: 2,
            grid: (4, 4),
            patch: 2,
            channels: 1,
            mlp_ratio: 2,
            seed: 7,
        }
    }

    fn random_image(cfg: &BackboneConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = cfg.image_shape();
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn zero_image_zero_embed_gives_pos_plus_class() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::new(cfg).unwrap();
        let d = cfg.dim;
        bb.set_param("backbone.embed.w", vec![0.0; cfg.patch * cfg.patch * d])
            .unwrap();
        let image = Tensor::zeros(&cfg.image_shape());
        let feats = bb.run(&image).unwrap();
        let x0 = feats.feature(0);

        let pos = &bb.params().get("backbone.embed.pos").unwrap().tensor;
        let class = &bb.params().get("backbone.embed.class").unwrap().tensor;
        for j in 0..d {
            assert_eq!(x0.data[j], class.data[j] + pos.data[j]);
        }
        for t in 1..cfg.tokens() {
            for j in 0..d {
                assert_eq!(x0.data[t * d + j], pos.data[t * d + j]);
            }
        }
    }

    #[test]
    fn token_count_is_n_plus_one() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg).unwrap();
        let feats = bb.run(&random_image(&cfg, 1)).unwrap();
        assert_eq!(feats.feature(0).shape, vec![cfg.patches() + 1, cfg.dim]);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let cfg = tiny_cfg();
        let image = random_image(&cfg, 2);
        let a = Backbone::new(cfg).unwrap().run(&image).unwrap();
        let b = Backbone::new(cfg).unwrap().run(&image).unwrap();
        for (fa, fb) in a.iter().zip(b.iter()) {
            assert!(fa
                .data
                .iter()
                .zip(&fb.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn zero_weight_blocks_are_identity() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::new(cfg).unwrap();
        bb.zero_block_weights();
        let feats = bb.run(&random_image(&cfg, 3)).unwrap();
        let x0 = feats.feature(0);
        let xl = feats.feature(feats.len() - 1);
        assert_eq!(x0.data, xl.data);
    }

    #[test]
    fn shape_preserved_through_blocks() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg).unwrap();
        let feats = bb.run(&random_image(&cfg, 4)).unwrap();
        for f in feats.iter() {
            assert_eq!(f.shape, vec![cfg.tokens(), cfg.dim]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg).unwrap();
        let image = random_image(&cfg, 5);
        let mut g = Graph::new();
        let bound = bb.params().bind(&mut g);
        let x0 = bb.patch_embed(&mut g, &bound, &image).unwrap();
        let blk = bb.block_nodes(&bound, 0);
        let (_, attentions) = block_forward(&mut g, x0, &blk, cfg.heads).unwrap();
        assert_eq!(attentions.len(), cfg.heads);
        let t = cfg.tokens();
        for &attn in &attentions {
            let v = g.value(attn);
            for row in 0..t {
                let sum: f64 = v[row * t..(row + 1) * t].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn run_backbone_depth_zero_yields_only_x0() {
        let cfg = BackboneConfig {
            blocks: 0,
            ..tiny_cfg()
        };
        let bb = Backbone::new(cfg).unwrap();
        let feats = bb.run(&random_image(&cfg, 6)).unwrap();
        assert_eq!(feats.len(), 1);
    }

    #[test]
    fn run_backbone_shapes_l4_d32_n16() {
        let cfg = BackboneConfig {
            blocks: 4,
            dim: 32,
            heads: 4,
            grid: (4, 4),
            patch: 2,
            channels: 1,
            mlp_ratio: 2,
            seed: 9,
        };
        let bb = Backbone::new(cfg).unwrap();
        let feats = bb.run(&random_image(&cfg, 7)).unwrap();
        assert_eq!(feats.len(), 5);
        for f in feats.iter() {
            assert_eq!(f.shape, vec![17, 32]);
        }
    }

    fn adapter_params(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        bottleneck: usize,
        rng: &mut ChaCha8Rng,
        zero_up: bool,
    ) {
        params.insert(
            format!("{prefix}.down_w"),
            Parameter::trainable(Tensor::randn(&[dim, bottleneck], 0.1, rng)),
        );
        params.insert(
            format!("{prefix}.down_b"),
            Parameter::trainable(Tensor::zeros(&[bottleneck])),
        );
        let up = if zero_up {
            Tensor::zeros(&[bottleneck, dim])
        } else {
            Tensor::randn(&[bottleneck, dim], 0.1, rng)
        };
        params.insert(format!("{prefix}.up_w"), Parameter::trainable(up));
        params.insert(
            format!("{prefix}.up_b"),
            Parameter::trainable(Tensor::zeros(&[dim])),
        );
    }

    fn adapter_nodes(bound: &BoundParams, prefix: &str) -> AdapterNodes {
        AdapterNodes {
            down_w: bound.id(&format!("{prefix}.down_w")),
            down_b: bound.id(&format!("{prefix}.down_b")),
            up_w: bound.id(&format!("{prefix}.up_w")),
            up_b: bound.id(&format!("{prefix}.up_b")),
        }
    }

    /// Runs the adapted block over x0 and returns the output values.
    fn adapted_output(bb: &Backbone, image: &Tensor, adapters: &ParamSet, s: f64) -> Vec<f64> {
        let cfg = bb.config();
        let mut g = Graph::new();
        let bound = bb.params().bind(&mut g);
        let abound = adapters.bind(&mut g);
        let x0 = bb.patch_embed(&mut g, &bound, image).unwrap();
        let blk = bb.block_nodes(&bound, 0);
        let serial = adapter_nodes(&abound, "serial");
        let parallel = adapter_nodes(&abound, "parallel");
        let out =
            adapted_block_forward(&mut g, x0, &blk, cfg.heads, &serial, &parallel, s).unwrap();
        g.value(out).to_vec()
    }

    #[test]
    fn zero_up_projections_reduce_to_plain_block() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg).unwrap();
        let image = random_image(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut adapters = ParamSet::new();
        adapter_params(&mut adapters, "serial", cfg.dim, 8, &mut rng, true);
        adapter_params(&mut adapters, "parallel", cfg.dim, 8, &mut rng, true);
        let adapted = adapted_output(&bb, &image, &adapters, 1.0);

        let mut g = Graph::new();
        let bound = bb.params().bind(&mut g);
        let x0 = bb.patch_embed(&mut g, &bound, &image).unwrap();
        let blk = bb.block_nodes(&bound, 0);
        let (plain, _) = block_forward(&mut g, x0, &blk, cfg.heads).unwrap();
        assert_eq!(adapted, g.value(plain));
    }

    #[test]
    fn scale_zero_removes_parallel_term_exactly() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg).unwrap();
        let image = random_image(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut adapters = ParamSet::new();
        adapter_params(&mut adapters, "serial", cfg.dim, 8, &mut rng, false);
        adapter_params(&mut adapters, "parallel", cfg.dim, 8, &mut rng, false);

        let mut rng2 = ChaCha8Rng::seed_from_u64(21);
        let mut adapters_zero_parallel = ParamSet::new();
        adapter_params(&mut adapters_zero_parallel, "serial", cfg.dim, 8, &mut rng2, false);
        adapter_params(&mut adapters_zero_parallel, "parallel", cfg.dim, 8, &mut rng2, true);

        let with_s0 = adapted_output(&bb, &image, &adapters, 0.0);
        let with_zero_up = adapted_output(&bb, &image, &adapters_zero_parallel, 1.0);
        assert_eq!(with_s0, with_zero_up);

        let with_s1 = adapted_output(&bb, &image, &adapters, 1.0);
        assert_ne!(with_s0, with_s1);
    }

    #[test]
    fn adapted_block_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg).unwrap();
        let image = random_image(&cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut adapters = ParamSet::new();
        adapter_params(&mut adapters, "serial", cfg.dim, 4, &mut rng, false);
        adapter_params(&mut adapters, "parallel", cfg.dim, 4, &mut rng, false);

        let eval = |adapters: &ParamSet| -> (f64, Option<crate::autodiff::Gradients>, Vec<NodeId>) {
            let mut g = Graph::new();
            let bound = bb.params().bind(&mut g);
            let abound = adapters.bind(&mut g);
            let x0 = bb.patch_embed(&mut g, &bound, &image).unwrap();
            let blk = bb.block_nodes(&bound, 0);
            let serial = adapter_nodes(&abound, "serial");
            let parallel = adapter_nodes(&abound, "parallel");
            let out =
                adapted_block_forward(&mut g, x0, &blk, cfg.heads, &serial, &parallel, 0.7)
                    .unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.mean_all(sq);
            let value = g.value(loss)[0];
            let ids: Vec<NodeId> = [
                "serial.down_w",
                "serial.up_w",
                "parallel.down_w",
                "parallel.up_w",
            ]
            .iter()
            .map(|n| abound.id(n))
            .collect();
            let grads = g.backward(loss).unwrap();
            (value, Some(grads), ids)
        };

        let (_, grads, ids) = eval(&adapters);
        let grads = grads.unwrap();
        let names = ["serial.down_w", "serial.up_w", "parallel.down_w", "parallel.up_w"];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for (name, id) in names.iter().zip(ids) {
            let analytic = grads.get(id).unwrap().to_vec();
            let base = adapters.get(name).unwrap().tensor.data.clone();
            // Spot-check a few coordinates per tensor.
            for _ in 0..4 {
                let coord = rng.gen_range(0..base.len());
                let mut probe = adapters.clone();
                let mut f = |vals: &[f64]| {
                    probe.get_mut(name).unwrap().tensor.data = vals.to_vec();
                    eval(&probe).0
                };
                let fd = finite_diff_gradient_at(&mut f, &base, coord, 1e-4);
                let err = relative_error(analytic[coord], fd, 1e-7);
                assert!(
                    err < 1e-3,
                    "{name}[{coord}]: analytic {} vs fd {fd} (err {err})",
                    analytic[coord]
                );
            }
        }
    }

    /// Central difference for a single coordinate.
    fn finite_diff_gradient_at(
        f: &mut dyn FnMut(&[f64]) -> f64,
        base: &[f64],
        coord: usize,
        step: f64,
    ) -> f64 {
        let mut point = base.to_vec();
        point[coord] = base[coord] + step;
        let up = f(&point);
        point[coord] = base[coord] - step;
        let down = f(&point);
        (up - down) / (2.0 * step)
    }

    #[test]
    fn frozen_contract_no_backbone_gradients() {
        let cfg = tiny_cfg();
        let bb = Backbone::new(cfg).unwrap();
        let image = random_image(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut adapters = ParamSet::new();
        adapter_params(&mut adapters, "serial", cfg.dim, 4, &mut rng, false);
        adapter_params(&mut adapters, "parallel", cfg.dim, 4, &mut rng, false);

        let mut g = Graph::new();
        let bound = bb.params().bind(&mut g);
        let abound = adapters.bind(&mut g);
        let x0 = bb.patch_embed(&mut g, &bound, &image).unwrap();
        let blk = bb.block_nodes(&bound, 0);
        let serial = adapter_nodes(&abound, "serial");
        let parallel = adapter_nodes(&abound, "parallel");
        let out = adapted_block_forward(&mut g, x0, &blk, cfg.heads, &serial, &parallel, 1.0)
            .unwrap();
        let loss = g.mean_all(out);
        let grads = g.backward(loss).unwrap();
        for (name, _) in bb.params().iter() {
            assert!(
                grads.get(bound.id(name)).is_none(),
                "frozen backbone parameter {name} received a gradient"
            );
        }
        assert!(grads.get(abound.id("serial.down_w")).is_some());
    }

}
