//! Toy training loop: Adam over side-network and head parameters only, with
//! cached frozen-backbone features entering every step as constants. Includes
//! the synthetic clustered dataset and the four-way hashing-mode ablation
//! (direct / sc / ste / sc+ste).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::Branch;
use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::backbone::{Backbone, BackboneConfig, IntermediateFeatures};
use crate::descriptor::{BinaryCode, FloatDescriptor};
use crate::error::{Error, Result};
use crate::index::{BinaryIndex, FloatStore};
use crate::loss::{total_loss_node, HashMode, LossConfig};

/// Adam hyperparameters. The base learning rate follows the training recipe
/// (4e-4, halved every 3 epochs by the loop).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment state.
#[derive(Debug, Default)]
pub struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update over every trainable parameter in `params`.
    /// `grads` maps parameter names to gradients; missing entries are zero.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &HashMap<String, Vec<f64>>,
        cfg: &AdamConfig,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, param) in params.iter_mut() {
            if param.frozen {
                continue;
            }
            let len = param.tensor.data.len();
            let zero = vec![0.0; len];
            let grad = grads.get(name).unwrap_or(&zero);
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; len]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; len]);
            for i in 0..len {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// One line of training telemetry, emitted per step.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub metric: f64,
    pub quantization: f64,
    pub lr: f64,
}

/// Outcome of a single optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub metric: f64,
    pub quantization: f64,
}

/// One gradient step on the branch parameters over a batch of cached
/// backbone features. The backbone is not an input: its features arrive as
/// plain tensors and enter the graph as constants.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    branch: &mut Branch,
    batch_feats: &[&IntermediateFeatures],
    labels: &[u64],
    mode: HashMode,
    loss_cfg: &LossConfig,
    adam_cfg: &AdamConfig,
    adam: &mut AdamState,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if batch_feats.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature sets vs {} labels",
            batch_feats.len(),
            labels.len()
        )));
    }
    if batch_feats.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }

    let mut g = Graph::new();
    let bound = branch.params().bind(&mut g);
    let mut rows = Vec::with_capacity(batch_feats.len());
    for feats in batch_feats {
        rows.push(branch.forward(&mut g, &bound, feats)?);
    }
    let f = g.concat(0, &rows)?;
    let total = total_loss_node(&mut g, f, labels, mode, loss_cfg, rng)?;
    let loss = g.value(total.total)[0];
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: adam.t,
            loss,
        });
    }

    let grads = g.backward(total.total)?;
    let mut by_name: HashMap<String, Vec<f64>> = HashMap::new();
    for (name, id) in bound.iter() {
        if let Some(grad) = grads.get(id) {
            by_name.insert(name.to_string(), grad.to_vec());
        }
    }
    adam.apply(branch.params_mut(), &by_name, adam_cfg, lr);

    Ok(StepStats {
        loss,
        metric: total.metric,
        quantization: total.quantization,
    })
}

/// Synthetic clustered dataset: each place is a prototype image, each image
/// a noisy copy, features cached through a frozen backbone once.
#[derive(Debug, Clone)]
pub struct ToyDataConfig {
    pub places: usize,
    pub images_per_place: usize,
    /// Held-out query images per place (taken from `images_per_place`).
    pub queries_per_place: usize,
    /// Image-space noise std relative to the unit-std prototypes.
    pub noise: f64,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            places: 20,
            images_per_place: 50,
            queries_per_place: 10,
            noise: 0.8,
            backbone: BackboneConfig {
                blocks: 2,
                dim: 16,
                heads: 2,
                grid: (4, 4),
                patch: 2,
                channels: 1,
                mlp_ratio: 2,
                seed: 99,
            },
            seed: 0,
        }
    }
}

pub struct ToyDataset {
    pub backbone: Backbone,
    pub train_feats: Vec<IntermediateFeatures>,
    pub train_labels: Vec<u64>,
    pub query_feats: Vec<IntermediateFeatures>,
    pub query_labels: Vec<u64>,
}

impl ToyDataset {
    pub fn generate(cfg: &ToyDataConfig) -> Result<Self> {
        if cfg.queries_per_place >= cfg.images_per_place {
            return Err(Error::InvalidConfig(
                "queries_per_place must be < images_per_place".into(),
            ));
        }
        let backbone = Backbone::new(cfg.backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = cfg.backbone.image_shape();
        let pixels: usize = shape.iter().product();

        let mut train_feats = Vec::new();
        let mut train_labels = Vec::new();
        let mut query_feats = Vec::new();
        let mut query_labels = Vec::new();
        for place in 0..cfg.places {
            let prototype: Vec<f64> = (0..pixels)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            for i in 0..cfg.images_per_place {
                let data: Vec<f64> = prototype
                    .iter()
                    .map(|&p| p + cfg.noise * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let image = Tensor::new(shape.to_vec(), data)?;
                let feats = backbone.run(&image)?;
                if i < cfg.images_per_place - cfg.queries_per_place {
                    train_feats.push(feats);
                    train_labels.push(place as u64);
                } else {
                    query_feats.push(feats);
                    query_labels.push(place as u64);
                }
            }
        }
        Ok(Self {
            backbone,
            train_feats,
            train_labels,
            query_feats,
            query_labels,
        })
    }

    fn indices_by_place(&self) -> HashMap<u64, Vec<usize>> {
        let mut by_place: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, &label) in self.train_labels.iter().enumerate() {
            by_place.entry(label).or_default().push(i);
        }
        by_place
    }
}

/// Toy loop configuration.
#[derive(Debug, Clone)]
pub struct ToyTrainConfig {
    pub mode: HashMode,
    pub steps: usize,
    pub places_per_batch: usize,
    pub images_per_place: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Halve the learning rate every this many epochs (an epoch is one pass
    /// over all places).
    pub halve_every_epochs: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            mode: HashMode::ScSte,
            steps: 240,
            places_per_batch: 10,
            images_per_place: 4,
            loss: LossConfig::default(),
            adam: AdamConfig {
                lr: 4e-3,
                ..Default::default()
            },
            halve_every_epochs: 3,
            seed: 0,
        }
    }
}

/// Trains one branch on the toy dataset, invoking `on_metrics` once per step.
pub fn train_toy(
    data: &ToyDataset,
    branch: &mut Branch,
    cfg: &ToyTrainConfig,
    mut on_metrics: impl FnMut(&MetricsRecord),
) -> Result<()> {
    let by_place = data.indices_by_place();
    let mut eligible: Vec<u64> = by_place
        .iter()
        .filter(|(_, v)| v.len() >= cfg.images_per_place)
        .map(|(&p, _)| p)
        .collect();
    eligible.sort_unstable();
    if eligible.len() < cfg.places_per_batch {
        return Err(Error::InvalidConfig(format!(
            "only {} places with >= {} images, need {}",
            eligible.len(),
            cfg.images_per_place,
            cfg.places_per_batch
        )));
    }
    let steps_per_epoch = (eligible.len() + cfg.places_per_batch - 1) / cfg.places_per_batch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();

    for step in 0..cfg.steps {
        let epoch = step / steps_per_epoch;
        let halvings = (epoch / cfg.halve_every_epochs.max(1)) as i32;
        let lr = cfg.adam.lr * 0.5f64.powi(halvings);

        let mut places = eligible.clone();
        places.shuffle(&mut rng);
        places.truncate(cfg.places_per_batch);
        let mut batch_idx = Vec::with_capacity(cfg.places_per_batch * cfg.images_per_place);
        for &p in &places {
            let mut imgs = by_place[&p].clone();
            imgs.shuffle(&mut rng);
            imgs.truncate(cfg.images_per_place);
            batch_idx.extend(imgs);
        }
        let batch_feats: Vec<&IntermediateFeatures> =
            batch_idx.iter().map(|&i| &data.train_feats[i]).collect();
        let labels: Vec<u64> = batch_idx.iter().map(|&i| data.train_labels[i]).collect();

        let stats = train_step(
            branch,
            &batch_feats,
            &labels,
            cfg.mode,
            &cfg.loss,
            &cfg.adam,
            &mut adam,
            lr,
            &mut rng,
        )?;
        on_metrics(&MetricsRecord {
            step: step as u64,
            loss: stats.loss,
            metric: stats.metric,
            quantization: stats.quantization,
            lr,
        });
    }
    Ok(())
}

/// Runs the branch over every feature set and sign-hashes the outputs.
pub fn extract_codes(branch: &Branch, feats: &[IntermediateFeatures]) -> Result<Vec<BinaryCode>> {
    feats
        .iter()
        .map(|f| Ok(branch.descriptor(f)?.sign_hash()))
        .collect()
}

pub fn extract_descriptors(
    branch: &Branch,
    feats: &[IntermediateFeatures],
) -> Result<Vec<FloatDescriptor>> {
    feats.iter().map(|f| branch.descriptor(f)).collect()
}

/// Fraction of queries whose Hamming-nearest database code shares the label.
pub fn binary_recall_at_1(
    db_codes: &[BinaryCode],
    db_labels: &[u64],
    query_codes: &[BinaryCode],
    query_labels: &[u64],
) -> Result<f64> {
    let ids: Vec<u64> = (0..db_codes.len() as u64).collect();
    let index = BinaryIndex::build(db_codes, &ids)?;
    let mut hits = 0usize;
    for (code, &label) in query_codes.iter().zip(query_labels) {
        let top = index.hamming_topk(code, 1)?;
        if let Some(n) = top.entries().first() {
            if db_labels[n.id as usize] == label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / query_codes.len() as f64)
}

/// Fraction of queries whose L2-nearest database descriptor shares the label.
pub fn float_recall_at_1(
    db: &[FloatDescriptor],
    db_labels: &[u64],
    queries: &[FloatDescriptor],
    query_labels: &[u64],
) -> Result<f64> {
    let ids: Vec<u64> = (0..db.len() as u64).collect();
    let store = FloatStore::build(db, &ids)?;
    let mut hits = 0usize;
    for (q, &label) in queries.iter().zip(query_labels) {
        let top = store.l2_topk(q, 1)?;
        if let Some(n) = top.entries().first() {
            if db_labels[n.id as usize] == label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Binary R@1 of one mode, averaged over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct AblationOutcome {
    pub mode: String,
    pub per_seed_r1: Vec<f64>,
    pub mean_r1: f64,
}

/// Trains all four hashing modes with identical per-round seeds and reports
/// held-out binary R@1 per mode.
pub fn run_hashing_ablation(
    data_cfg: &ToyDataConfig,
    train_cfg: &ToyTrainConfig,
    branch_template: &crate::adapter::BranchConfig,
    seeds: &[u64],
) -> Result<Vec<AblationOutcome>> {
    let modes = [HashMode::Direct, HashMode::Sc, HashMode::Ste, HashMode::ScSte];
    let mut per_mode: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
    for &seed in seeds {
        let mut dcfg = data_cfg.clone();
        dcfg.seed = seed;
        let data = ToyDataset::generate(&dcfg)?;
        for (mi, &mode) in modes.iter().enumerate() {
            let mut bcfg = *branch_template;
            bcfg.seed = seed;
            let mut branch = Branch::init(bcfg)?;
            let mut tcfg = train_cfg.clone();
            tcfg.mode = mode;
            tcfg.seed = seed;
            train_toy(&data, &mut branch, &tcfg, |_| {})?;
            let db_codes = extract_codes(&branch, &data.train_feats)?;
            let query_codes = extract_codes(&branch, &data.query_feats)?;
            let r1 = binary_recall_at_1(
                &db_codes,
                &data.train_labels,
                &query_codes,
                &data.query_labels,
            )?;
            per_mode[mi].push(r1);
        }
    }
    Ok(modes
        .iter()
        .zip(per_mode)
        .map(|(mode, per_seed_r1)| {
            let mean_r1 = per_seed_r1.iter().sum::<f64>() / per_seed_r1.len() as f64;
            AblationOutcome {
                mode: mode.label().to_string(),
                per_seed_r1,
                mean_r1,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{dual_heads, BranchConfig, Placement};

    fn tiny_data() -> ToyDataset {
        let cfg = ToyDataConfig {
            places: 6,
            images_per_place: 6,
            queries_per_place: 2,
            noise: 0.5,
            ..Default::default()
        };
        ToyDataset::generate(&cfg).unwrap()
    }

    fn tiny_branch_cfg(out_dim: usize, seed: u64) -> BranchConfig {
        BranchConfig {
            dim: 16,
            blocks: 2,
            grid: (4, 4),
            placement: Placement::Dense,
            proj_dim: 16,
            out_dim,
            init_std: 0.05,
            seed,
        }
    }

    fn params_fingerprint(params: &ParamSet) -> Vec<u64> {
        params
            .iter()
            .flat_map(|(_, p)| p.tensor.data.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = tiny_data();
        let mut branch = Branch::init(tiny_branch_cfg(16, 41)).unwrap();
        let before = params_fingerprint(branch.params());
        let mut adam = AdamState::new();
        let feats: Vec<&IntermediateFeatures> = data.train_feats[..8].iter().collect();
        let labels = data.train_labels[..8].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_step(
            &mut branch,
            &feats,
            &labels,
            HashMode::ScSte,
            &LossConfig::default(),
            &AdamConfig::default(),
            &mut adam,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(before, params_fingerprint(branch.params()));
    }

    #[test]
    fn loss_decreases_on_separable_batch() {
        let data = tiny_data();
        let mut branch = Branch::init(tiny_branch_cfg(16, 42)).unwrap();
        let cfg = ToyTrainConfig {
            mode: HashMode::ScSte,
            steps: 50,
            places_per_batch: 4,
            images_per_place: 3,
            adam: AdamConfig {
                lr: 4e-3,
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        };
        let mut losses = Vec::new();
        train_toy(&data, &mut branch, &cfg, |m| losses.push(m.loss)).unwrap();
        assert_eq!(losses.len(), 50);
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "smoothed loss did not decrease: first10 {head}, last10 {tail}"
        );
    }

    #[test]
    fn backbone_parameters_bit_identical_after_training() {
        let data = tiny_data();
        let before = params_fingerprint(data.backbone.params());
        let mut branch = Branch::init(tiny_branch_cfg(8, 43)).unwrap();
        let cfg = ToyTrainConfig {
            steps: 5,
            places_per_batch: 3,
            images_per_place: 2,
            ..Default::default()
        };
        train_toy(&data, &mut branch, &cfg, |_| {}).unwrap();
        assert_eq!(before, params_fingerprint(data.backbone.params()));
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = tiny_data();
        let run = || {
            let mut branch = Branch::init(tiny_branch_cfg(8, 44)).unwrap();
            let cfg = ToyTrainConfig {
                steps: 8,
                places_per_batch: 3,
                images_per_place: 2,
                seed: 11,
                ..Default::default()
            };
            train_toy(&data, &mut branch, &cfg, |_| {}).unwrap();
            params_fingerprint(branch.params())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_parameters_surface_as_error() {
        let data = tiny_data();
        let mut branch = Branch::init(tiny_branch_cfg(8, 45)).unwrap();
        branch
            .params_mut()
            .get_mut("head.fc_w")
            .unwrap()
            .tensor
            .data[0] = f64::NAN;
        let feats: Vec<&IntermediateFeatures> = data.train_feats[..4].iter().collect();
        let labels = data.train_labels[..4].to_vec();
        let mut adam = AdamState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = train_step(
            &mut branch,
            &feats,
            &labels,
            HashMode::Direct,
            &LossConfig::default(),
            &AdamConfig::default(),
            &mut adam,
            1e-3,
            &mut rng,
        );
        assert!(out.is_err());
    }

    #[test]
    fn training_one_branch_leaves_the_other_untouched() {
        let data = tiny_data();
        // Same seed: identical initial parameters, independent sets.
        let mut binary = Branch::init(tiny_branch_cfg(16, 46)).unwrap();
        let float = Branch::init(tiny_branch_cfg(16, 46)).unwrap();
        let feats0 = &data.train_feats[0];
        let (_, float_before) = dual_heads(&binary, &float, feats0).unwrap();

        let cfg = ToyTrainConfig {
            steps: 3,
            places_per_batch: 3,
            images_per_place: 2,
            ..Default::default()
        };
        train_toy(&data, &mut binary, &cfg, |_| {}).unwrap();

        let (_, float_after) = dual_heads(&binary, &float, feats0).unwrap();
        assert_eq!(float_before.values(), float_after.values());
        // And the trained branch now disagrees with its former twin.
        let b_desc = binary.descriptor(feats0).unwrap();
        let f_desc = float.descriptor(feats0).unwrap();
        assert_ne!(b_desc.values(), f_desc.values());
    }
}
