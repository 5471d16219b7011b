//! The trainable side network that refines frozen-backbone features: cascaded
//! multi-scale convolution (MultiConv) adapters applied outside the backbone,
//! followed by a linear projection, GeM pooling over patch tokens, an FC head,
//! and L2 normalization.
//!
//! An adapter is a bottleneck: down-project D -> D/2, ReLU, a MultiConv module
//! over the patch-token feature map (three parallel conv paths 1x1 / 1x1+3x3 /
//! 1x1+5x5 whose output channels concatenate back to exactly D/2, plus an
//! internal skip), then up-project D/2 -> D. The class token bypasses the
//! convolutions and only passes through the projections.
//!
//! The side pass telescopes over the intermediate features:
//! `y_1 = A_1(x_base + x_c1) + x_base`, `y_l = A_l(y_{l-1} + x_cl) + y_{l-1}`,
//! where the consumed indices `c_l` depend on the placement (every block,
//! every m-th block, or the last p blocks). With all adapter up-projections
//! zero the output is exactly `x_base`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, Graph, NodeId, ParamSet, Parameter, Tensor};
use crate::backbone::{tensor_of, IntermediateFeatures};
use crate::descriptor::{BinaryCode, FloatDescriptor};
use crate::error::{Error, Result};

/// Floor for GeM inputs before the power is applied.
pub const GEM_EPS: f64 = 1e-6;

/// Channel plan for one MultiConv adapter at token dimension `dim`.
///
/// The reference plan at D=768 is bottleneck 384, paths 192/96/96, and a 24
/// channel 1x1 reduction before the 3x3 and 5x5 convolutions; other dims
/// scale proportionally (minimum 1 channel) with the 1x1 path absorbing
/// rounding so the concatenation width always equals the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiConvWidths {
    pub bottleneck: usize,
    pub path1: usize,
    pub path2: usize,
    pub path3: usize,
    pub reduce: usize,
}

impl MultiConvWidths {
    pub fn for_dim(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "adapter dim {dim} must be positive and even"
            )));
        }
        let bottleneck = dim / 2;
        let scale = |base: usize| (((base * dim) as f64 / 768.0).round() as usize).max(1);
        let path2 = scale(96);
        let path3 = scale(96);
        if path2 + path3 >= bottleneck {
            return Err(Error::InvalidConfig(format!(
                "adapter dim {dim} too small for three conv paths"
            )));
        }
        let path1 = bottleneck - path2 - path3;
        let reduce = scale(24);
        Ok(Self {
            bottleneck,
            path1,
            path2,
            path3,
            reduce,
        })
    }
}

/// Node bindings for one MultiConv adapter.
pub struct MultiConvAdapterNodes {
    pub down_w: NodeId,
    pub down_b: NodeId,
    pub k1: NodeId,
    pub b1: NodeId,
    pub reduce2_k: NodeId,
    pub reduce2_b: NodeId,
    pub k2: NodeId,
    pub b2: NodeId,
    pub reduce3_k: NodeId,
    pub reduce3_b: NodeId,
    pub k3: NodeId,
    pub b3: NodeId,
    pub up_w: NodeId,
    pub up_b: NodeId,
}

/// Inserts freshly initialized adapter parameters under `prefix`.
pub fn init_multiconv_params(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let w = MultiConvWidths::for_dim(dim)?;
    let b = w.bottleneck;
    let mut add = |name: &str, t: Tensor| params.insert(format!("{prefix}.{name}"), Parameter::trainable(t));
    add("down_w", Tensor::randn(&[dim, b], std, rng));
    add("down_b", Tensor::zeros(&[b]));
    add("k1", Tensor::randn(&[1, 1, b, w.path1], std, rng));
    add("b1", Tensor::zeros(&[w.path1]));
    add("reduce2_k", Tensor::randn(&[1, 1, b, w.reduce], std, rng));
    add("reduce2_b", Tensor::zeros(&[w.reduce]));
    add("k2", Tensor::randn(&[3, 3, w.reduce, w.path2], std, rng));
    add("b2", Tensor::zeros(&[w.path2]));
    add("reduce3_k", Tensor::randn(&[1, 1, b, w.reduce], std, rng));
    add("reduce3_b", Tensor::zeros(&[w.reduce]));
    add("k3", Tensor::randn(&[5, 5, w.reduce, w.path3], std, rng));
    add("b3", Tensor::zeros(&[w.path3]));
    add("up_w", Tensor::randn(&[b, dim], std, rng));
    add("up_b", Tensor::zeros(&[dim]));
    Ok(())
}

pub fn multiconv_nodes(bound: &BoundParams, prefix: &str) -> MultiConvAdapterNodes {
    let id = |name: &str| bound.id(&format!("{prefix}.{name}"));
    MultiConvAdapterNodes {
        down_w: id("down_w"),
        down_b: id("down_b"),
        k1: id("k1"),
        b1: id("b1"),
        reduce2_k: id("reduce2_k"),
        reduce2_b: id("reduce2_b"),
        k2: id("k2"),
        b2: id("b2"),
        reduce3_k: id("reduce3_k"),
        reduce3_b: id("reduce3_b"),
        k3: id("k3"),
        b3: id("b3"),
        up_w: id("up_w"),
        up_b: id("up_b"),
    }
}

/// One MultiConv adapter over a `(N+1) x D` token matrix. The caller owns the
/// residual connection; with a zero up-projection the output is exactly zero.
pub fn adapter_forward(
    g: &mut Graph,
    a: &MultiConvAdapterNodes,
    tokens: NodeId,
    grid: (usize, usize),
) -> Result<NodeId> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("adapter", format!("tokens {shape:?}")));
    }
    let (gw, gh) = grid;
    let n = gw * gh;
    if shape[0] != n + 1 {
        return Err(Error::shape(
            "adapter",
            format!("{} tokens do not form a {gw}x{gh} grid plus class token", shape[0]),
        ));
    }
    let bottleneck = g.shape(a.down_w)[1];

    let down = g.linear(tokens, a.down_w, a.down_b)?;
    let act = g.relu(down);

    // The class token skips the convolutions entirely.
    let class_row = g.slice(act, 0, 0, 1)?;
    let patch_rows = g.slice(act, 0, 1, n)?;
    let fmap = g.reshape(patch_rows, &[gh, gw, bottleneck])?;

    let p1 = g.conv2d(fmap, a.k1, a.b1)?;
    let r2 = g.conv2d(fmap, a.reduce2_k, a.reduce2_b)?;
    let p2 = g.conv2d(r2, a.k2, a.b2)?;
    let r3 = g.conv2d(fmap, a.reduce3_k, a.reduce3_b)?;
    let p3 = g.conv2d(r3, a.k3, a.b3)?;
    let merged = g.concat(2, &[p1, p2, p3])?;
    if g.shape(merged)[2] != bottleneck {
        return Err(Error::shape(
            "adapter",
            format!(
                "conv paths concatenate to {} channels, expected {bottleneck}",
                g.shape(merged)[2]
            ),
        ));
    }
    let skipped = g.add(merged, fmap)?;

    let patches_back = g.reshape(skipped, &[n, bottleneck])?;
    let all = g.concat(0, &[class_row, patches_back])?;
    g.linear(all, a.up_w, a.up_b)
}

/// Where adapters sit relative to the backbone blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// One adapter per block.
    Dense,
    /// One adapter every m-th block (m must divide L).
    Every(usize),
    /// Adapters on the last p blocks only.
    Last(usize),
}

impl Placement {
    /// Index of the feature used as the residual base (`x_0` except for
    /// `Last`, which starts at `x_{L-p}`).
    pub fn base_index(&self, blocks: usize) -> Result<usize> {
        match *self {
            Placement::Dense | Placement::Every(_) => Ok(0),
            Placement::Last(p) => {
                self.consumed_indices(blocks)?;
                Ok(blocks - p)
            }
        }
    }

    /// The feature indices each adapter consumes, in order.
    pub fn consumed_indices(&self, blocks: usize) -> Result<Vec<usize>> {
        match *self {
            Placement::Dense => Ok((1..=blocks).collect()),
            Placement::Every(m) => {
                if m == 0 || blocks % m != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "every-{m} placement does not divide {blocks} blocks"
                    )));
                }
                Ok((1..=blocks / m).map(|l| l * m).collect())
            }
            Placement::Last(p) => {
                if p == 0 || p > blocks {
                    return Err(Error::InvalidConfig(format!(
                        "last-{p} placement invalid for {blocks} blocks"
                    )));
                }
                Ok((blocks - p + 1..=blocks).collect())
            }
        }
    }

    pub fn adapter_count(&self, blocks: usize) -> Result<usize> {
        Ok(self.consumed_indices(blocks)?.len())
    }
}

/// Result of a side-network pass.
pub struct SideForward {
    /// Final refined tokens `(N+1) x D`.
    pub output: NodeId,
    /// Which intermediate features were consumed, one per adapter.
    pub consumed: Vec<usize>,
}

/// Runs the cascaded adapters over intermediate features inserted as
/// constants: the backbone is upstream of this graph and never sees backprop.
pub fn side_forward(
    g: &mut Graph,
    adapters: &[MultiConvAdapterNodes],
    feats: &IntermediateFeatures,
    placement: Placement,
    grid: (usize, usize),
) -> Result<SideForward> {
    let blocks = feats.len().saturating_sub(1);
    let consumed = placement.consumed_indices(blocks)?;
    if consumed.len() != adapters.len() {
        return Err(Error::InvalidConfig(format!(
            "placement wants {} adapters, got {}",
            consumed.len(),
            adapters.len()
        )));
    }
    let base = placement.base_index(blocks)?;
    let mut y = g.constant(feats.feature(base).clone());
    for (a, &ci) in adapters.iter().zip(&consumed) {
        let x_l = g.constant(feats.feature(ci).clone());
        let input = g.add(y, x_l)?;
        let refined = adapter_forward(g, a, input, grid)?;
        y = g.add(refined, y)?;
    }
    Ok(SideForward {
        output: y,
        consumed,
    })
}

/// Generalized-mean pooling over spatial positions: per channel,
/// `((1/N) sum v^p)^(1/p)` with inputs clamped to [`GEM_EPS`].
pub fn gem_pool(g: &mut Graph, x: NodeId, p: NodeId) -> Result<NodeId> {
    let clamped = g.clamp_min(x, GEM_EPS);
    let powed = g.pow_broadcast(clamped, p)?;
    let mean = g.mean_axis(powed, 0)?;
    let mean_row = {
        let c = g.shape(mean)[0];
        g.reshape(mean, &[1, c])?
    };
    let inv_p = g.pow_const(p, -1.0)?;
    let pooled = g.pow_broadcast(mean_row, inv_p)?;
    let c = g.shape(pooled)[1];
    g.reshape(pooled, &[c])
}

/// Node bindings for an aggregation head.
pub struct HeadNodes {
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub gem_p: NodeId,
    pub fc_w: NodeId,
    pub fc_b: NodeId,
}

pub fn init_head_params(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    proj_dim: usize,
    out_dim: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) {
    let mut add = |name: &str, t: Tensor| params.insert(format!("{prefix}.{name}"), Parameter::trainable(t));
    add("proj_w", Tensor::randn(&[dim, proj_dim], std, rng));
    add("proj_b", Tensor::zeros(&[proj_dim]));
    // Standard GeM exponent init.
    add("gem_p", Tensor::new(vec![1], vec![3.0]).expect("scalar"));
    add("fc_w", Tensor::randn(&[proj_dim, out_dim], std, rng));
    add("fc_b", Tensor::zeros(&[out_dim]));
}

pub fn head_nodes(bound: &BoundParams, prefix: &str) -> HeadNodes {
    let id = |name: &str| bound.id(&format!("{prefix}.{name}"));
    HeadNodes {
        proj_w: id("proj_w"),
        proj_b: id("proj_b"),
        gem_p: id("gem_p"),
        fc_w: id("fc_w"),
        fc_b: id("fc_b"),
    }
}

/// Aggregates refined tokens into a unit-norm descriptor row `[1, out_dim]`:
/// drop the class token, linear projection, GeM pooling over the N patch
/// positions, FC to the target dimension, L2 normalization.
pub fn aggregate(g: &mut Graph, head: &HeadNodes, tokens: NodeId) -> Result<NodeId> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::shape("aggregate", format!("tokens {shape:?}")));
    }
    if g.value(tokens).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "aggregate" });
    }
    let n = shape[0] - 1;
    let patches = g.slice(tokens, 0, 1, n)?;
    let projected = g.linear(patches, head.proj_w, head.proj_b)?;
    let pooled = gem_pool(g, projected, head.gem_p)?;
    let row = {
        let c = g.shape(pooled)[0];
        g.reshape(pooled, &[1, c])?
    };
    let fc = g.linear(row, head.fc_w, head.fc_b)?;
    g.l2_normalize_rows(fc)
}

/// Configuration of one side-network branch (adapters + aggregation head).
#[derive(Debug, Clone, Copy)]
pub struct BranchConfig {
    /// Token dimension D of the backbone this branch refines.
    pub dim: usize,
    /// Backbone block count L.
    pub blocks: usize,
    /// Patch grid (width, height).
    pub grid: (usize, usize),
    pub placement: Placement,
    /// Pre-GeM projection width; defaults to `dim`.
    pub proj_dim: usize,
    /// Head output dimension.
    pub out_dim: usize,
    /// Weight init std.
    pub init_std: f64,
    pub seed: u64,
}

impl BranchConfig {
    /// Compact binary branch: 512-bit codes by default.
    pub fn binary_default(dim: usize, blocks: usize, grid: (usize, usize)) -> Self {
        Self {
            dim,
            blocks,
            grid,
            placement: Placement::Dense,
            proj_dim: dim,
            out_dim: 512,
            init_std: 0.05,
            seed: 1,
        }
    }

    /// High-dimensional float branch: 2048-dim descriptors by default.
    pub fn float_default(dim: usize, blocks: usize, grid: (usize, usize)) -> Self {
        Self {
            dim,
            blocks,
            grid,
            placement: Placement::Dense,
            proj_dim: dim,
            out_dim: 2048,
            init_std: 0.05,
            seed: 2,
        }
    }
}

/// One independent trainable branch: its adapters, head, and config.
pub struct Branch {
    cfg: BranchConfig,
    params: ParamSet,
}

impl Branch {
    pub fn init(cfg: BranchConfig) -> Result<Self> {
        let count = cfg.placement.adapter_count(cfg.blocks)?;
        if cfg.grid.0 * cfg.grid.1 == 0 || cfg.out_dim == 0 || cfg.proj_dim == 0 {
            return Err(Error::InvalidConfig("branch dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        for i in 0..count {
            init_multiconv_params(&mut params, &format!("adapter{i}"), cfg.dim, cfg.init_std, &mut rng)?;
        }
        init_head_params(
            &mut params,
            "head",
            cfg.dim,
            cfg.proj_dim,
            cfg.out_dim,
            cfg.init_std,
            &mut rng,
        );
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn adapter_count(&self) -> usize {
        self.cfg
            .placement
            .adapter_count(self.cfg.blocks)
            .expect("validated at init")
    }

    pub fn adapter_nodes(&self, bound: &BoundParams) -> Vec<MultiConvAdapterNodes> {
        (0..self.adapter_count())
            .map(|i| multiconv_nodes(bound, &format!("adapter{i}")))
            .collect()
    }

    /// Builds the full branch forward (side network + head) in `g`, returning
    /// the `[1, out_dim]` unit-norm descriptor node.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        feats: &IntermediateFeatures,
    ) -> Result<NodeId> {
        let adapters = self.adapter_nodes(bound);
        let side = side_forward(g, &adapters, feats, self.cfg.placement, self.cfg.grid)?;
        let head = head_nodes(bound, "head");
        aggregate(g, &head, side.output)
    }

    /// Forward pass to a concrete descriptor (f32 storage).
    pub fn descriptor(&self, feats: &IntermediateFeatures) -> Result<FloatDescriptor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let node = self.forward(&mut g, &bound, feats)?;
        descriptor_from_node(&g, node)
    }
}

/// Converts a unit-norm `[1, d]` (or `[d]`) node value into a descriptor.
pub fn descriptor_from_node(g: &Graph, node: NodeId) -> Result<FloatDescriptor> {
    let vals: Vec<f32> = g.value(node).iter().map(|&v| v as f32).collect();
    // Renormalize: the f64 -> f32 cast can nudge the norm slightly.
    crate::descriptor::l2_normalize(&vals)
}

/// Runs both independent branches over the same features: the binary branch's
/// output is sign-quantized, the float branch's is returned as-is.
pub fn dual_heads(
    binary: &Branch,
    float: &Branch,
    feats: &IntermediateFeatures,
) -> Result<(BinaryCode, FloatDescriptor)> {
    let code = binary.descriptor(feats)?.sign_hash();
    let float_desc = float.descriptor(feats)?;
    Ok((code, float_desc))
}

/// Extracts concrete feature tensors produced by a side pass, for tests and
/// diagnostics.
pub fn side_output_tensor(g: &Graph, side: &SideForward) -> Tensor {
    tensor_of(g, side.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;
    use crate::backbone::{Backbone, BackboneConfig};
    use rand::{Rng, SeedableRng};

    fn tiny_backbone() -> (Backbone, Tensor) {
        let cfg = BackboneConfig {
            blocks: 3,
            dim: 16,
            heads: 2,
            grid: (4, 4),
            patch: 2,
            channels: 1,
            mlp_ratio: 2,
            seed: 3,
        };
        let bb = Backbone::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = cfg.image_shape();
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let image = Tensor::new(shape.to_vec(), data).unwrap();
        (bb, image)
    }

    fn tiny_branch(out_dim: usize, seed: u64) -> Branch {
        Branch::init(BranchConfig {
            dim: 16,
            blocks: 3,
            grid: (4, 4),
            placement: Placement::Dense,
            proj_dim: 16,
            out_dim,
            init_std: 0.05,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn reference_widths_at_768() {
        let w = MultiConvWidths::for_dim(768).unwrap();
        assert_eq!(
            w,
            MultiConvWidths {
                bottleneck: 384,
                path1: 192,
                path2: 96,
                path3: 96,
                reduce: 24
            }
        );
        // 192 + 96 + 96 concatenates back to 384.
        assert_eq!(w.path1 + w.path2 + w.path3, w.bottleneck);
    }

    #[test]
    fn channel_conservation_across_dims() {
        for dim in [16usize, 24, 32, 64, 128, 256, 768, 1024] {
            let w = MultiConvWidths::for_dim(dim).unwrap();
            assert_eq!(w.path1 + w.path2 + w.path3, w.bottleneck, "dim {dim}");
            assert!(w.path1 >= 1 && w.path2 >= 1 && w.path3 >= 1 && w.reduce >= 1);
        }
    }

    #[test]
    fn zero_up_projection_gives_zero_output() {
        let mut branch = tiny_branch(32, 11);
        for name in ["adapter0.up_w", "adapter0.up_b"] {
            let p = branch.params_mut().get_mut(name).unwrap();
            p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let nodes = multiconv_nodes(&bound, "adapter0");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = g.constant(Tensor::randn(&[17, 16], 1.0, &mut rng));
        let out = adapter_forward(&mut g, &nodes, tokens, (4, 4)).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_grid_token_count_errors() {
        let branch = tiny_branch(32, 12);
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let nodes = multiconv_nodes(&bound, "adapter0");
        let tokens = g.constant(Tensor::zeros(&[10, 16]));
        assert!(adapter_forward(&mut g, &nodes, tokens, (4, 4)).is_err());
    }

    #[test]
    fn adapter_conv_gradients_match_finite_differences() {
        let (bb, image) = tiny_backbone();
        let feats = bb.run(&image).unwrap();
        let branch = tiny_branch(8, 13);

        let eval = |params: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let adapters: Vec<MultiConvAdapterNodes> = (0..3)
                .map(|i| multiconv_nodes(&bound, &format!("adapter{i}")))
                .collect();
            let side = side_forward(&mut g, &adapters, &feats, Placement::Dense, (4, 4)).unwrap();
            let sq = g.mul(side.output, side.output).unwrap();
            let m = g.mean_all(sq);
            g.value(m)[0]
        };

        // Analytic gradients.
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let adapters = branch.adapter_nodes(&bound);
        let side = side_forward(&mut g, &adapters, &feats, Placement::Dense, (4, 4)).unwrap();
        let sq = g.mul(side.output, side.output).unwrap();
        let loss = g.mean_all(sq);
        let grads = g.backward(loss).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for kernel in ["adapter0.k1", "adapter1.k2", "adapter2.k3", "adapter0.reduce2_k"] {
            let analytic = grads.get(bound.id(kernel)).unwrap().to_vec();
            let base = branch.params().get(kernel).unwrap().tensor.data.clone();
            for _ in 0..3 {
                let coord = rng.gen_range(0..base.len());
                let mut probe = branch.params().clone();
                let step = 1e-4;
                let mut up = base.clone();
                up[coord] += step;
                probe.get_mut(kernel).unwrap().tensor.data = up;
                let f_up = eval(&probe);
                let mut down = base.clone();
                down[coord] -= step;
                probe.get_mut(kernel).unwrap().tensor.data = down;
                let f_down = eval(&probe);
                let fd = (f_up - f_down) / (2.0 * step);
                let err = relative_error(analytic[coord], fd, 1e-8);
                assert!(
                    err < 1e-3,
                    "{kernel}[{coord}]: analytic {} vs fd {fd}",
                    analytic[coord]
                );
            }
        }
    }

    #[test]
    fn zero_adapters_telescope_to_x0() {
        let (bb, image) = tiny_backbone();
        let feats = bb.run(&image).unwrap();
        let mut branch = tiny_branch(32, 15);
        for i in 0..branch.adapter_count() {
            for suffix in ["up_w", "up_b"] {
                let p = branch
                    .params_mut()
                    .get_mut(&format!("adapter{i}.{suffix}"))
                    .unwrap();
                p.tensor.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let adapters = branch.adapter_nodes(&bound);
        let side = side_forward(&mut g, &adapters, &feats, Placement::Dense, (4, 4)).unwrap();
        assert_eq!(g.value(side.output), feats.feature(0).data.as_slice());
    }

    #[test]
    fn dense_placement_consumes_each_feature_once() {
        let cfg = BackboneConfig {
            blocks: 6,
            dim: 16,
            heads: 2,
            grid: (4, 4),
            patch: 2,
            channels: 1,
            mlp_ratio: 2,
            seed: 16,
        };
        let bb = Backbone::new(cfg).unwrap();
        let image = Tensor::zeros(&cfg.image_shape());
        let feats = bb.run(&image).unwrap();
        let branch = Branch::init(BranchConfig {
            dim: 16,
            blocks: 6,
            grid: (4, 4),
            placement: Placement::Dense,
            proj_dim: 16,
            out_dim: 8,
            init_std: 0.05,
            seed: 17,
        })
        .unwrap();
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let adapters = branch.adapter_nodes(&bound);
        let side = side_forward(&mut g, &adapters, &feats, Placement::Dense, (4, 4)).unwrap();
        assert_eq!(side.consumed, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn every_three_placement_over_24_blocks() {
        let placement = Placement::Every(3);
        assert_eq!(placement.adapter_count(24).unwrap(), 8);
        assert_eq!(
            placement.consumed_indices(24).unwrap(),
            vec![3, 6, 9, 12, 15, 18, 21, 24]
        );
        // Pattern check without running a 24-block forward: base is x_0.
        assert_eq!(placement.base_index(24).unwrap(), 0);
    }

    #[test]
    fn last_p_placement() {
        let placement = Placement::Last(2);
        assert_eq!(placement.consumed_indices(6).unwrap(), vec![5, 6]);
        assert_eq!(placement.base_index(6).unwrap(), 4);
        assert!(Placement::Last(7).consumed_indices(6).is_err());
        assert!(Placement::Every(4).consumed_indices(6).is_err());
    }

    #[test]
    fn placement_mismatch_errors() {
        let (bb, image) = tiny_backbone();
        let feats = bb.run(&image).unwrap();
        let branch = tiny_branch(8, 18);
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let adapters = branch.adapter_nodes(&bound);
        // 3 adapters vs last-1 placement.
        assert!(side_forward(&mut g, &adapters, &feats, Placement::Last(1), (4, 4)).is_err());
    }

    #[test]
    fn gem_p1_equals_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap());
        let p = g.constant(Tensor::scalar(1.0));
        let pooled = gem_pool(&mut g, x, p).unwrap();
        let v = g.value(pooled);
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert!((v[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gem_constant_input_is_identity_for_any_p() {
        for p_val in [0.5, 1.0, 3.0, 7.5] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![4, 1], vec![2.5; 4]).unwrap());
            let p = g.constant(Tensor::scalar(p_val));
            let pooled = gem_pool(&mut g, x, p).unwrap();
            assert!((g.value(pooled)[0] - 2.5).abs() < 1e-12, "p={p_val}");
        }
    }

    #[test]
    fn gem_p3_on_1_2_3() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let p = g.constant(Tensor::scalar(3.0));
        let pooled = gem_pool(&mut g, x, p).unwrap();
        // ((1 + 8 + 27)/3)^(1/3) = 12^(1/3) = 2.2894...
        let expected = 12f64.powf(1.0 / 3.0);
        assert!((g.value(pooled)[0] - expected).abs() < 1e-12);
        assert!((expected - 2.2894).abs() < 1e-4);
    }

    #[test]
    fn aggregate_output_is_unit_norm() {
        let (bb, image) = tiny_backbone();
        let feats = bb.run(&image).unwrap();
        let branch = tiny_branch(24, 19);
        let d = branch.descriptor(&feats).unwrap();
        assert_eq!(d.dim(), 24);
        let norm: f64 = d.values().iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((norm.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn default_head_dims() {
        let b = BranchConfig::binary_default(64, 6, (8, 8));
        let f = BranchConfig::float_default(64, 6, (8, 8));
        assert_eq!(b.out_dim, 512);
        assert_eq!(f.out_dim, 2048);
    }

    #[test]
    fn float_branch_unaffected_by_binary_branch_presence() {
        let (bb, image) = tiny_backbone();
        let feats = bb.run(&image).unwrap();
        let binary = tiny_branch(16, 21);
        let float = tiny_branch(24, 22);
        let alone = float.descriptor(&feats).unwrap();
        let (_, with_dual) = dual_heads(&binary, &float, &feats).unwrap();
        assert_eq!(alone.values(), with_dual.values());
    }

    #[test]
    fn class_token_isolated_from_conv_kernels() {
        let (bb, image) = tiny_backbone();
        let feats = bb.run(&image).unwrap();
        let branch = tiny_branch(8, 23);
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let adapters = branch.adapter_nodes(&bound);
        let side = side_forward(&mut g, &adapters, &feats, Placement::Dense, (4, 4)).unwrap();
        // Loss reads only the class token of the final output.
        let class_row = g.slice(side.output, 0, 0, 1).unwrap();
        let loss = g.mean_all(class_row);
        let grads = g.backward(loss).unwrap();
        for i in 0..branch.adapter_count() {
            for kernel in ["k1", "k2", "k3", "reduce2_k", "reduce3_k", "b1", "b2", "b3"] {
                let id = bound.id(&format!("adapter{i}.{kernel}"));
                if let Some(grad) = grads.get(id) {
                    assert!(
                        grad.iter().all(|&v| v == 0.0),
                        "adapter{i}.{kernel} leaks into the class token"
                    );
                }
            }
            // The projections do touch the class token.
            assert!(grads.get(bound.id(&format!("adapter{i}.down_w"))).is_some());
        }
    }

    #[test]
    fn trainability_boundary_every_branch_param_reachable() {
        let (bb, image) = tiny_backbone();
        let feats = bb.run(&image).unwrap();
        let branch = tiny_branch(8, 24);
        let mut g = Graph::new();
        let bound = branch.params().bind(&mut g);
        let node = branch.forward(&mut g, &bound, &feats).unwrap();
        // A generic loss over the descriptor.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let w = g.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let weighted = g.mul(node, w).unwrap();
        let loss = g.sum_all(weighted);
        let grads = g.backward(loss).unwrap();
        for (name, _) in branch.params().iter() {
            assert!(
                grads.get(bound.id(name)).is_some(),
                "parameter {name} receives no gradient"
            );
        }
    }
}
