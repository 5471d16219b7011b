//! Training losses: the multi-similarity metric loss over place-labeled
//! batches, the similarity-constrained quantization loss that matches float
//! cosine similarity against the scaled binary inner product, and the
//! combined objective with straight-through sign estimation.
//!
//! All losses are built as graph nodes so gradients come from the same
//! reverse-mode sweep as the rest of the model; thin wrappers evaluate them
//! on concrete descriptors.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::descriptor::{binary_cosine, BinaryCode, FloatDescriptor};
use crate::error::{Error, Result};

/// Loss hyperparameters.
///
/// `ms_alpha`/`ms_beta`/`ms_gamma` default to the GSV-Cities-style values
/// (1.0 / 50.0 / 0.5); `lambda` weights the quantization loss and
/// `pair_fraction` is the fraction of positive and negative pairs sampled
/// for it each batch.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda: f64,
    pub ms_alpha: f64,
    pub ms_beta: f64,
    pub ms_gamma: f64,
    pub pair_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            ms_alpha: 1.0,
            ms_beta: 50.0,
            ms_gamma: 0.5,
            pair_fraction: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(self.pair_fraction > 0.0 && self.pair_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "pair_fraction must be in (0, 1]".into(),
            ));
        }
        if self.ms_alpha <= 0.0 || self.ms_beta <= 0.0 {
            return Err(Error::InvalidConfig("ms_alpha/ms_beta must be > 0".into()));
        }
        Ok(())
    }
}

/// How the binary branch is trained (the four ablation modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashMode {
    /// Metric loss on float features; quantize only at inference.
    Direct,
    /// Metric loss on float features plus the similarity-constrained
    /// quantization loss with codes treated as constants.
    Sc,
    /// Metric loss on codes via straight-through estimation.
    Ste,
    /// Metric loss on codes via STE plus the quantization loss.
    ScSte,
}

impl HashMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "sc" => Ok(Self::Sc),
            "ste" => Ok(Self::Ste),
            "sc+ste" | "sc-ste" | "scste" => Ok(Self::ScSte),
            other => Err(Error::InvalidArgument(format!(
                "unknown hashing mode {other:?} (expected direct|sc|ste|sc+ste)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Sc => "sc",
            Self::Ste => "ste",
            Self::ScSte => "sc+ste",
        }
    }
}

/// Multi-similarity loss over a batch of unit-norm descriptor rows.
///
/// Every row is a query; its positives share the label, its negatives do
/// not. Per query:
/// `(1/a) log(1 + sum_p e^{-a (S_qp - g)}) + (1/b) log(1 + sum_n e^{b (S_qn - g)})`,
/// averaged over queries. Empty positive or negative sets contribute zero.
pub fn ms_loss_node(
    g: &mut Graph,
    f: NodeId,
    labels: &[u64],
    cfg: &LossConfig,
) -> Result<NodeId> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    let shape = g.shape(f).to_vec();
    if shape.len() != 2 || shape[0] != b {
        return Err(Error::shape(
            "ms_loss",
            format!("descriptors {shape:?} vs {b} labels"),
        ));
    }
    let ft = g.transpose(f)?;
    let sims = g.matmul(f, ft)?;

    let mut pos = vec![0.0; b * b];
    let mut neg = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                pos[i * b + j] = 1.0;
            } else {
                neg[i * b + j] = 1.0;
            }
        }
    }
    let pos_mask = g.constant_from(&[b, b], &pos)?;
    let neg_mask = g.constant_from(&[b, b], &neg)?;

    // Positive term: (1/alpha) log(1 + sum_p e^{-alpha (S - gamma)})
    let pos_exp_arg = g.affine(sims, -cfg.ms_alpha, cfg.ms_alpha * cfg.ms_gamma);
    let pos_exp = g.exp(pos_exp_arg);
    let pos_masked = g.mul(pos_exp, pos_mask)?;
    let pos_sum = g.sum_axis(pos_masked, 1)?;
    let pos_log_arg = g.affine(pos_sum, 1.0, 1.0);
    let pos_log = g.ln(pos_log_arg)?;
    let pos_term = g.scale(pos_log, 1.0 / cfg.ms_alpha);

    // Negative term: (1/beta) log(1 + sum_n e^{beta (S - gamma)})
    let neg_exp_arg = g.affine(sims, cfg.ms_beta, -cfg.ms_beta * cfg.ms_gamma);
    let neg_exp = g.exp(neg_exp_arg);
    let neg_masked = g.mul(neg_exp, neg_mask)?;
    let neg_sum = g.sum_axis(neg_masked, 1)?;
    let neg_log_arg = g.affine(neg_sum, 1.0, 1.0);
    let neg_log = g.ln(neg_log_arg)?;
    let neg_term = g.scale(neg_log, 1.0 / cfg.ms_beta);

    let per_query = g.add(pos_term, neg_term)?;
    Ok(g.mean_all(per_query))
}

/// Evaluates the MS loss on concrete descriptors.
pub fn ms_loss(descriptors: &[FloatDescriptor], labels: &[u64], cfg: &LossConfig) -> Result<f64> {
    if descriptors.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} descriptors vs {} labels",
            descriptors.len(),
            labels.len()
        )));
    }
    if descriptors.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let dim = descriptors[0].dim();
    let mut data = Vec::with_capacity(descriptors.len() * dim);
    for d in descriptors {
        if d.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: d.dim(),
            });
        }
        data.extend(d.values().iter().map(|&v| v as f64));
    }
    let mut g = Graph::new();
    let f = g.constant_from(&[descriptors.len(), dim], &data)?;
    let loss = ms_loss_node(&mut g, f, labels, cfg)?;
    Ok(g.value(loss)[0])
}

/// Index pairs sampled for the quantization loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairSample {
    pub fn all(&self) -> Vec<(usize, usize)> {
        let mut v = self.positives.clone();
        v.extend_from_slice(&self.negatives);
        v
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniformly samples `ceil(fraction * count)` positive and negative pairs,
/// each type independently, deterministic under the rng seed.
pub fn sample_pairs(labels: &[u64], fraction: f64, rng: &mut ChaCha8Rng) -> Result<PairSample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig("pair fraction must be in (0, 1]".into()));
    }
    let n = labels.len();
    let mut all_pos = Vec::new();
    let mut all_neg = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                all_pos.push((i, j));
            } else {
                all_neg.push((i, j));
            }
        }
    }
    let take = |pairs: &[(usize, usize)], rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let want = ((fraction * pairs.len() as f64).ceil() as usize).min(pairs.len());
        rand::seq::index::sample(rng, pairs.len(), want)
            .into_iter()
            .map(|k| pairs[k])
            .collect()
    };
    Ok(PairSample {
        positives: take(&all_pos, rng),
        negatives: take(&all_neg, rng),
    })
}

/// Similarity-constrained quantization loss over sampled index pairs:
/// `(1/K) sum_k (<f_i, f_j> - <b_i, b_j>/d)^2` where `f` rows are unit-norm
/// and `b` rows are +-1 codes of dimension d.
pub fn sc_quantization_loss_node(
    g: &mut Graph,
    f: NodeId,
    b: NodeId,
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("quantization pairs"));
    }
    let (sf, sb) = (g.shape(f).to_vec(), g.shape(b).to_vec());
    if sf.len() != 2 || sf != sb {
        return Err(Error::shape(
            "sc_quantization_loss",
            format!("f {sf:?} vs b {sb:?}"),
        ));
    }
    let (n, d) = (sf[0], sf[1]);
    let k = pairs.len();
    let mut sel_i = vec![0.0; k * n];
    let mut sel_j = vec![0.0; k * n];
    for (row, &(i, j)) in pairs.iter().enumerate() {
        if i >= n || j >= n {
            return Err(Error::InvalidArgument(format!(
                "pair ({i}, {j}) out of range for batch {n}"
            )));
        }
        sel_i[row * n + i] = 1.0;
        sel_j[row * n + j] = 1.0;
    }
    let sel_i = g.constant_from(&[k, n], &sel_i)?;
    let sel_j = g.constant_from(&[k, n], &sel_j)?;

    let fi = g.matmul(sel_i, f)?;
    let fj = g.matmul(sel_j, f)?;
    let f_prod = g.mul(fi, fj)?;
    let f_dots = g.sum_axis(f_prod, 1)?;

    let bi = g.matmul(sel_i, b)?;
    let bj = g.matmul(sel_j, b)?;
    let b_prod = g.mul(bi, bj)?;
    let b_dots = g.sum_axis(b_prod, 1)?;
    let b_cos = g.scale(b_dots, 1.0 / d as f64);

    let neg_b = g.scale(b_cos, -1.0);
    let diff = g.add(f_dots, neg_b)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// Evaluates the quantization loss on concrete descriptor/code pairs.
pub fn sc_quantization_loss(
    pairs: &[(&FloatDescriptor, &FloatDescriptor, &BinaryCode, &BinaryCode)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("quantization pairs"));
    }
    let mut acc = 0.0;
    for (fi, fj, bi, bj) in pairs {
        if fi.dim() != fj.dim() || bi.dim() != bj.dim() || fi.dim() != bi.dim() {
            return Err(Error::DimMismatch {
                expected: fi.dim(),
                got: bi.dim(),
            });
        }
        let f_dot: f64 = fi
            .values()
            .iter()
            .zip(fj.values())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let b_cos = binary_cosine(bi, bj)?;
        let diff = f_dot - b_cos;
        acc += diff * diff;
    }
    Ok(acc / pairs.len() as f64)
}

/// The assembled training objective for one batch.
pub struct TotalLoss {
    /// Node to backpropagate.
    pub total: NodeId,
    /// Metric-loss component value.
    pub metric: f64,
    /// Quantization-loss component value (0 when unused).
    pub quantization: f64,
}

/// Builds the mode-dependent objective over normalized descriptor rows `f`.
///
/// - `Direct`: `L_M(f)`
/// - `Sc`: `L_M(f) + lambda L_Q(f, b)` with `b` held constant
/// - `Ste`: `L_M(b)` with `b = ste_sign(f)`
/// - `ScSte`: `L_M(b) + lambda L_Q(f, b)` with `b = ste_sign(f)`
///
/// Codes are rescaled by `1/sqrt(d)` when fed to the metric loss so rows are
/// unit-norm there; the quantization loss sees raw +-1 codes.
pub fn total_loss_node(
    g: &mut Graph,
    f: NodeId,
    labels: &[u64],
    mode: HashMode,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let d = g.shape(f)[1];
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let quant_pairs = match mode {
        HashMode::Sc | HashMode::ScSte => {
            let sample = sample_pairs(labels, cfg.pair_fraction, rng)?;
            if sample.is_empty() {
                return Err(Error::EmptyInput("quantization pairs"));
            }
            Some(sample.all())
        }
        _ => None,
    };

    let (metric_node, quant_node) = match mode {
        HashMode::Direct => (ms_loss_node(g, f, labels, cfg)?, None),
        HashMode::Sc => {
            let metric = ms_loss_node(g, f, labels, cfg)?;
            // Codes as constants: no straight-through path in SC-only mode.
            let sign_values: Vec<f64> = g
                .value(f)
                .iter()
                .map(|&v| if v < 0.0 { -1.0 } else { 1.0 })
                .collect();
            let b = g.constant_from(&[labels.len(), d], &sign_values)?;
            let q = sc_quantization_loss_node(g, f, b, quant_pairs.as_ref().unwrap())?;
            (metric, Some(q))
        }
        HashMode::Ste => {
            let b = g.ste_sign(f)?;
            let b_unit = g.scale(b, inv_sqrt_d);
            (ms_loss_node(g, b_unit, labels, cfg)?, None)
        }
        HashMode::ScSte => {
            let b = g.ste_sign(f)?;
            let b_unit = g.scale(b, inv_sqrt_d);
            let metric = ms_loss_node(g, b_unit, labels, cfg)?;
            let q = sc_quantization_loss_node(g, f, b, quant_pairs.as_ref().unwrap())?;
            (metric, Some(q))
        }
    };

    let metric = g.value(metric_node)[0];
    match quant_node {
        Some(q) => {
            let quantization = g.value(q)[0];
            let weighted = g.scale(q, cfg.lambda);
            let total = g.add(metric_node, weighted)?;
            Ok(TotalLoss {
                total,
                metric,
                quantization,
            })
        }
        None => Ok(TotalLoss {
            total: metric_node,
            metric,
            quantization: 0.0,
        }),
    }
}
