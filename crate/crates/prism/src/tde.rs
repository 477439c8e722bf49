//! Task-aware domain estimation: an EM loop over learned embeddings.
//!
//! Training starts from one shared model, then alternates:
//!
//! * E-step: k-means over the current encoder embeddings assigns every
//!   training sample to an estimated domain.
//! * M-step: a few full-batch descent passes on the joint objective
//!   `alpha * L_contrastive + L_task`, where the contrastive term pulls
//!   same-domain embeddings together and pushes different-domain
//!   embeddings past a margin, and the task term is cross-entropy with
//!   each sample routed through its domain's head. Contrastive gradients
//!   flow only into the encoder; task gradients reach the encoder and the
//!   routed heads. Every step is line-searched and accepted only if the
//!   objective, on the epoch's fixed pair sample and assignment, does not
//!   increase.
//!
//! After each epoch the pack is scored on the validation split; the best
//! snapshot (parameters plus that epoch's centroids) is what comes out.

use serde::{Deserialize, Serialize};

use crate::clustering::{self, assign_nearest};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{
    contrastive_pair_loss, softmax_cross_entropy, FeedforwardNet, GradientSet, Matrix,
};
use crate::oup;
use crate::rng;

/// What counts as "the same group" when sampling contrastive pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Pairs are positive when the E-step put both samples in the same
    /// estimated domain.
    Domain,
    /// Pairs are positive when both samples share a class label.
    Class,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TdeConfig {
    /// Number of estimated domains.
    pub n_domains: usize,
    /// Weight of the contrastive term in the joint objective.
    pub alpha: f64,
    /// Margin for negative pairs.
    pub margin: f64,
    /// EM epochs, and also the number of initial-training passes.
    pub epochs: usize,
    /// Descent passes per M-step.
    pub m_step_passes: usize,
    /// Starting learning rate for every line search.
    pub lr: f64,
    /// Line-search shrink factor.
    pub backtrack_shrink: f64,
    /// Halvings before a step is skipped.
    pub max_halvings: usize,
    /// Contrastive pairs drawn per epoch; `None` means four per training
    /// sample.
    pub pairs_per_epoch: Option<usize>,
    pub pair_mode: PairMode,
    /// Encoder widths after the input layer; the last entry is the
    /// embedding dimension.
    pub encoder_hidden: Vec<usize>,
    /// Head widths between the embedding and the class logits.
    pub head_hidden: Vec<usize>,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl Default for TdeConfig {
    fn default() -> Self {
        TdeConfig {
            n_domains: 4,
            alpha: 0.1,
            margin: 1.0,
            epochs: 200,
            m_step_passes: 5,
            lr: 0.05,
            backtrack_shrink: 0.5,
            max_halvings: 20,
            pairs_per_epoch: None,
            pair_mode: PairMode::Domain,
            encoder_hidden: vec![32],
            head_hidden: vec![],
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            seed: 0,
        }
    }
}

impl TdeConfig {
    fn validate(&self) -> Result<()> {
        if self.n_domains == 0 {
            return Err(Error::input("n_domains must be >= 1".to_string()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::input(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::input(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.epochs == 0 || self.m_step_passes == 0 {
            return Err(Error::input("epochs and m_step_passes must be >= 1".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::input(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0) {
            return Err(Error::input(format!(
                "backtrack_shrink must sit in (0, 1), got {}",
                self.backtrack_shrink
            )));
        }
        if self.encoder_hidden.is_empty() {
            return Err(Error::input("encoder needs at least one layer".to_string()));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::input("kmeans_max_iter must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_hidden.last().unwrap()
    }

    fn encoder_dims(&self, input: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend_from_slice(&self.encoder_hidden);
        dims
    }

    fn head_dims(&self, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![self.feature_dim()];
        dims.extend_from_slice(&self.head_hidden);
        dims.push(num_classes);
        dims
    }
}

/// The shared model every domain head is forked from.
#[derive(Debug, Clone)]
pub struct InitialModel {
    pub encoder: FeedforwardNet,
    pub head: FeedforwardNet,
    pub best_val_f1: f64,
    /// Accepted task loss after each training pass.
    pub loss_trace: Vec<f64>,
}

/// Where a pack came from; rides along in the serialized form.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub dataset: String,
    pub seed: u64,
    /// Joint objective at the end of each mining epoch.
    pub ltde_history: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// A deployable bundle: encoder, one head per domain, and the frozen
/// training-time centroids that route samples to heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPack {
    pub encoder: FeedforwardNet,
    pub heads: Vec<FeedforwardNet>,
    pub centroids: Vec<Vec<f64>>,
    pub num_classes: usize,
    pub config: TdeConfig,
    pub provenance: Provenance,
}

impl ModelPack {
    pub fn n_domains(&self) -> usize {
        self.heads.len()
    }
}

/// One E-step outcome over the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionResult {
    /// Sample ids in training order.
    pub ids: Vec<String>,
    /// Estimated domain per sample, aligned with `ids`.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub domain_sizes: Vec<usize>,
    /// Agreement with `meta["domain"]` when every sample carries it.
    pub ari_vs_meta: Option<f64>,
}

/// The three parts of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub contrastive: f64,
    pub task: f64,
    pub total: f64,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Joint objective right after the E-step, before any descent pass,
    /// on the epoch's pair sample.
    pub post_e_ltde: f64,
    /// Accepted joint objective after each M-step pass.
    pub m_step_losses: Vec<f64>,
    /// Passes whose line search exhausted its halvings.
    pub skipped_passes: Vec<usize>,
    pub l_contrastive: f64,
    pub l_task: f64,
    pub l_tde: f64,
    pub val_macro_f1: f64,
    pub ari_vs_meta: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochTrace>,
}

/// A sampled contrastive pair: two sample indices and whether they belong
/// to the same group.
pub type Pair = (usize, usize, bool);

fn embed_for(encoder: &FeedforwardNet, ds: &Dataset) -> Result<Matrix> {
    let flat = ds.flattened();
    if flat.cols != encoder.input_dim() {
        return Err(Error::shape(format!(
            "encoder expects {} inputs, windows flatten to {}",
            encoder.input_dim(),
            flat.cols
        )));
    }
    encoder.forward(&flat)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Draws `count` index pairs, aiming for half same-group and half
/// different-group under `groups`. When one side cannot be filled (a lone
/// group, or all singleton groups) the remainder comes from the other.
fn sample_pairs(
    groups: &[usize],
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Pair> {
    use rand::Rng;
    let n = groups.len();
    if n < 2 || count == 0 {
        return Vec::new();
    }
    let mut by_group: Vec<Vec<usize>> = Vec::new();
    for (i, &g) in groups.iter().enumerate() {
        if g >= by_group.len() {
            by_group.resize(g + 1, Vec::new());
        }
        by_group[g].push(i);
    }
    let can_same = by_group.iter().any(|g| g.len() >= 2);
    let can_diff = by_group.iter().filter(|g| !g.is_empty()).count() >= 2;
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        let want_same = match (can_same, can_diff) {
            (true, true) => k % 2 == 0,
            (true, false) => true,
            (false, true) => false,
            (false, false) => return pairs,
        };
        // Rejection sampling; group structure guarantees a match exists.
        loop {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i == j {
                continue;
            }
            if (groups[i] == groups[j]) == want_same {
                pairs.push((i, j, want_same));
                break;
            }
        }
    }
    pairs
}

/// Evaluates the joint objective at fixed parameters.
pub fn eval_losses(
    encoder: &FeedforwardNet,
    heads: &[FeedforwardNet],
    flat: &Matrix,
    labels: &[usize],
    assignment: &[usize],
    pairs: &[Pair],
    alpha: f64,
    margin: f64,
) -> Result<LossParts> {
    let emb = encoder.forward(flat)?;
    let contrastive = if pairs.is_empty() {
        0.0
    } else {
        let mut sum = 0.0;
        for &(i, j, same) in pairs {
            let d = euclid(emb.row(i), emb.row(j));
            sum += contrastive_pair_loss(d, same, margin)?.0;
        }
        sum / (2.0 * pairs.len() as f64)
    };
    let task = task_loss_only(heads, &emb, labels, assignment)?;
    Ok(LossParts { contrastive, task, total: alpha * contrastive + task })
}

fn domain_members(assignment: &[usize], n_heads: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); n_heads];
    for (i, &m) in assignment.iter().enumerate() {
        if m >= n_heads {
            return Err(Error::input(format!(
                "assignment routes sample {} to domain {}, pack has {}",
                i, m, n_heads
            )));
        }
        members[m].push(i);
    }
    Ok(members)
}

fn gather_rows(src: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), src.cols);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(src.row(i));
    }
    out
}

fn task_loss_only(
    heads: &[FeedforwardNet],
    emb: &Matrix,
    labels: &[usize],
    assignment: &[usize],
) -> Result<f64> {
    let members = domain_members(assignment, heads.len())?;
    let n = emb.rows as f64;
    let mut total = 0.0;
    for (m, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let sub = gather_rows(emb, idx);
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let logits = heads[m].forward(&sub)?;
        let (mean_loss, _) = softmax_cross_entropy(&logits, &sub_labels)?;
        total += mean_loss * idx.len() as f64 / n;
    }
    Ok(total)
}

/// Full gradient of the joint objective. Contrastive gradients stop at
/// the encoder; task gradients flow through the routed head into the
/// encoder as well. Heads without members get no gradient block.
pub fn tde_gradients(
    encoder: &FeedforwardNet,
    heads: &[FeedforwardNet],
    flat: &Matrix,
    labels: &[usize],
    assignment: &[usize],
    pairs: &[Pair],
    alpha: f64,
    margin: f64,
) -> Result<(LossParts, GradientSet, Vec<Option<GradientSet>>)> {
    let emb = encoder.forward(flat)?;
    let n = emb.rows as f64;
    let mut upstream = Matrix::zeros(emb.rows, emb.cols);

    let mut contrastive = 0.0;
    if !pairs.is_empty() {
        let norm = 1.0 / (2.0 * pairs.len() as f64);
        for &(i, j, same) in pairs {
            let d = euclid(emb.row(i), emb.row(j));
            let (term, dterm) = contrastive_pair_loss(d, same, margin)?;
            contrastive += term * norm;
            if d > 0.0 && dterm != 0.0 {
                let coeff = alpha * norm * dterm / d;
                for k in 0..emb.cols {
                    let diff = emb.get(i, k) - emb.get(j, k);
                    upstream.data[i * emb.cols + k] += coeff * diff;
                    upstream.data[j * emb.cols + k] -= coeff * diff;
                }
            }
        }
    }

    let members = domain_members(assignment, heads.len())?;
    let mut task = 0.0;
    let mut head_grads: Vec<Option<GradientSet>> = Vec::with_capacity(heads.len());
    for (m, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            head_grads.push(None);
            continue;
        }
        let sub = gather_rows(&emb, idx);
        let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let logits = heads[m].forward(&sub)?;
        let (mean_loss, mut dlogits) = softmax_cross_entropy(&logits, &sub_labels)?;
        let weight = idx.len() as f64 / n;
        task += mean_loss * weight;
        for v in dlogits.data.iter_mut() {
            *v *= weight;
        }
        let (hg, demb) = heads[m].gradients(&sub, &dlogits)?;
        head_grads.push(Some(hg));
        for (r, &i) in idx.iter().enumerate() {
            let src = demb.row(r);
            let dst = upstream.row_mut(i);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    let (enc_grads, _) = encoder.gradients(flat, &upstream)?;
    let parts = LossParts { contrastive, task, total: alpha * contrastive + task };
    Ok((parts, enc_grads, head_grads))
}

struct PassOutcome {
    loss: LossParts,
    accepted: bool,
    lr_used: f64,
}

/// One line-searched descent pass on the joint objective. Mutates the
/// model only when a non-increasing step is found; otherwise reports the
/// pass as skipped.
#[allow(clippy::too_many_arguments)]
fn descent_pass(
    encoder: &mut FeedforwardNet,
    heads: &mut [FeedforwardNet],
    flat: &Matrix,
    labels: &[usize],
    assignment: &[usize],
    pairs: &[Pair],
    alpha: f64,
    margin: f64,
    start: LossParts,
    lr_start: f64,
    shrink: f64,
    max_halvings: usize,
) -> Result<PassOutcome> {
    let (_, enc_grads, head_grads) =
        tde_gradients(encoder, heads, flat, labels, assignment, pairs, alpha, margin)?;
    let mut lr = lr_start;
    for _ in 0..=max_halvings {
        let mut cand_enc = encoder.clone();
        cand_enc.sgd_step(&enc_grads, lr)?;
        let mut cand_heads = heads.to_vec();
        for (h, g) in cand_heads.iter_mut().zip(&head_grads) {
            if let Some(g) = g {
                h.sgd_step(g, lr)?;
            }
        }
        let cand_loss = eval_losses(
            &cand_enc, &cand_heads, flat, labels, assignment, pairs, alpha, margin,
        )?;
        if cand_loss.total <= start.total {
            *encoder = cand_enc;
            for (h, c) in heads.iter_mut().zip(cand_heads) {
                *h = c;
            }
            return Ok(PassOutcome { loss: cand_loss, accepted: true, lr_used: lr });
        }
        lr *= shrink;
    }
    Ok(PassOutcome { loss: start, accepted: false, lr_used: lr })
}

/// Continued cross-entropy training of a single-head model with the same
/// line search the M-step uses. Mutates the model in place and returns
/// the accepted loss after each pass.
pub(crate) fn fine_tune_passes(
    encoder: &mut FeedforwardNet,
    head: &mut FeedforwardNet,
    flat: &Matrix,
    labels: &[usize],
    passes: usize,
    config: &TdeConfig,
) -> Result<Vec<f64>> {
    let assignment = vec![0usize; labels.len()];
    let mut heads = vec![head.clone()];
    let mut current =
        eval_losses(encoder, &heads, flat, labels, &assignment, &[], 0.0, config.margin)?;
    let mut lr_start = config.lr;
    let mut trace = Vec::with_capacity(passes);
    for _ in 0..passes {
        let outcome = descent_pass(
            encoder,
            &mut heads,
            flat,
            labels,
            &assignment,
            &[],
            0.0,
            config.margin,
            current,
            lr_start,
            config.backtrack_shrink,
            config.max_halvings,
        )?;
        current = outcome.loss;
        trace.push(current.total);
        if outcome.accepted {
            lr_start = outcome.lr_used * 2.0;
        }
    }
    *head = heads.pop().unwrap();
    Ok(trace)
}

fn macro_f1_on(
    pack_encoder: &FeedforwardNet,
    heads: &[FeedforwardNet],
    centroids: &[Vec<f64>],
    ds: &Dataset,
) -> Result<f64> {
    let emb = embed_for(pack_encoder, ds)?;
    let mut predicted = Vec::with_capacity(ds.len());
    for i in 0..emb.rows {
        let m = assign_nearest(centroids, emb.row(i));
        let logits = heads[m].forward_one(emb.row(i))?;
        predicted.push(oup::argmax(&logits));
    }
    Ok(oup::macro_f1_of(&predicted, &ds.labels(), ds.num_classes).1)
}

/// Trains the shared starting model: full-batch cross-entropy descent
/// with the same line search the M-step uses, keeping the snapshot with
/// the best validation macro-F1.
pub fn train_initial(train: &Dataset, val: &Dataset, config: &TdeConfig) -> Result<InitialModel> {
    config.validate()?;
    check_compatible(train, val)?;
    let flat = train.flattened();
    let labels = train.labels();
    let mut encoder = FeedforwardNet::new(
        &config.encoder_dims(flat.cols),
        rng::derive(config.seed, "encoder-init", 0),
    )?;
    let head = FeedforwardNet::new(
        &config.head_dims(train.num_classes),
        rng::derive(config.seed, "head-init", 0),
    )?;
    let assignment = vec![0usize; train.len()];
    let mut heads = vec![head];

    let mut trace = Vec::with_capacity(config.epochs);
    let mut current = eval_losses(&encoder, &heads, &flat, &labels, &assignment, &[], 0.0, config.margin)?;
    let mut lr_start = config.lr;
    let mut best: Option<(FeedforwardNet, FeedforwardNet, f64)> = None;
    let val_labels = val.labels();
    for _pass in 0..config.epochs {
        let outcome = descent_pass(
            &mut encoder,
            &mut heads,
            &flat,
            &labels,
            &assignment,
            &[],
            0.0,
            config.margin,
            current,
            lr_start,
            config.backtrack_shrink,
            config.max_halvings,
        )?;
        current = outcome.loss;
        trace.push(current.total);
        if outcome.accepted {
            lr_start = outcome.lr_used * 2.0;
        }
        // Validation score of the single-head model.
        let val_emb = embed_for(&encoder, val)?;
        let logits = heads[0].forward(&val_emb)?;
        let predicted: Vec<usize> = (0..logits.rows).map(|i| oup::argmax(logits.row(i))).collect();
        let f1 = oup::macro_f1_of(&predicted, &val_labels, val.num_classes).1;
        if best.as_ref().map_or(true, |(_, _, b)| f1 > *b) {
            best = Some((encoder.clone(), heads[0].clone(), f1));
        }
    }
    let (encoder, head, best_val_f1) = best.unwrap();
    Ok(InitialModel { encoder, head, best_val_f1, loss_trace: trace })
}

fn check_compatible(a: &Dataset, b: &Dataset) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("empty split".to_string()));
    }
    if a.num_classes != b.num_classes || a.window_len != b.window_len || a.channels != b.channels {
        return Err(Error::shape("splits disagree on the dataset header".to_string()));
    }
    Ok(())
}

/// Forks the initial model into an `n`-domain pack with every head a copy
/// of the initial task head. Centroids stay empty until an E-step runs.
pub fn init_pack(initial: &InitialModel, n: usize, num_classes: usize, config: &TdeConfig, dataset: &str) -> Result<ModelPack> {
    if n < 2 {
        return Err(Error::input(
            "a pack needs at least 2 domains; single-model runs use the one-domain constructor"
                .to_string(),
        ));
    }
    Ok(ModelPack {
        encoder: initial.encoder.clone(),
        heads: vec![initial.head.clone(); n],
        centroids: Vec::new(),
        num_classes,
        config: config.clone(),
        provenance: Provenance {
            dataset: dataset.to_string(),
            seed: config.seed,
            ltde_history: Vec::new(),
            best_epoch: None,
        },
    })
}

/// Wraps the initial model as a deployable one-domain pack whose single
/// centroid is the mean training embedding.
pub fn single_pack(
    initial: &InitialModel,
    train: &Dataset,
    config: &TdeConfig,
) -> Result<ModelPack> {
    let emb = embed_for(&initial.encoder, train)?;
    let mut centroid = vec![0.0; emb.cols];
    for i in 0..emb.rows {
        for (c, v) in centroid.iter_mut().zip(emb.row(i)) {
            *c += v;
        }
    }
    for c in centroid.iter_mut() {
        *c /= emb.rows as f64;
    }
    Ok(ModelPack {
        encoder: initial.encoder.clone(),
        heads: vec![initial.head.clone()],
        centroids: vec![centroid],
        num_classes: train.num_classes,
        config: config.clone(),
        provenance: Provenance {
            dataset: train.name.clone(),
            seed: config.seed,
            ltde_history: Vec::new(),
            best_epoch: None,
        },
    })
}

/// Clusters current train embeddings into the pack's domains. Repeated
/// calls at unchanged parameters return identical partitions.
pub fn e_step(pack: &ModelPack, train: &Dataset) -> Result<PartitionResult> {
    let emb = embed_for(&pack.encoder, train)?;
    let points: Vec<Vec<f64>> = (0..emb.rows).map(|i| emb.row(i).to_vec()).collect();
    let model = clustering::kmeans(
        &points,
        pack.heads.len(),
        rng::derive(pack.config.seed, "e-step", 0),
        pack.config.kmeans_max_iter,
        pack.config.kmeans_tol,
    )?;
    let mut domain_sizes = vec![0usize; pack.heads.len()];
    for &a in &model.assignment {
        domain_sizes[a] += 1;
    }
    let ari_vs_meta = match train.meta_partition("domain") {
        Some(truth) => Some(clustering::adjusted_rand_index(&model.assignment, &truth)?),
        None => None,
    };
    Ok(PartitionResult {
        ids: train.samples.iter().map(|s| s.id.clone()).collect(),
        assignment: model.assignment,
        centroids: model.centroids,
        domain_sizes,
        ari_vs_meta,
    })
}

/// Joint objective of a pack on a dataset under a given assignment and
/// pair sample.
pub fn total_loss(
    pack: &ModelPack,
    ds: &Dataset,
    assignment: &[usize],
    pairs: &[Pair],
) -> Result<LossParts> {
    if assignment.len() != ds.len() {
        return Err(Error::shape(format!(
            "assignment covers {} samples, dataset has {}",
            assignment.len(),
            ds.len()
        )));
    }
    for &(i, j, _) in pairs {
        if i >= ds.len() || j >= ds.len() {
            return Err(Error::input(format!("pair ({}, {}) out of range", i, j)));
        }
    }
    let flat = ds.flattened();
    eval_losses(
        &pack.encoder,
        &pack.heads,
        &flat,
        &ds.labels(),
        assignment,
        pairs,
        pack.config.alpha,
        pack.config.margin,
    )
}

struct MStepOutcome {
    post_e_ltde: f64,
    losses: Vec<f64>,
    skipped: Vec<usize>,
    final_parts: LossParts,
}

fn m_step(
    pack: &mut ModelPack,
    flat: &Matrix,
    labels: &[usize],
    assignment: &[usize],
    epoch: usize,
) -> Result<MStepOutcome> {
    let config = pack.config.clone();
    let groups: Vec<usize> = match config.pair_mode {
        PairMode::Domain => assignment.to_vec(),
        PairMode::Class => labels.to_vec(),
    };
    let count = config.pairs_per_epoch.unwrap_or(4 * labels.len());
    let mut pair_rng = rng::stream_rng(config.seed, "pairs", epoch as u64);
    let pairs = sample_pairs(&groups, count, &mut pair_rng);

    let mut current = eval_losses(
        &pack.encoder,
        &pack.heads,
        flat,
        labels,
        assignment,
        &pairs,
        config.alpha,
        config.margin,
    )?;
    let post_e_ltde = current.total;
    let mut losses = Vec::with_capacity(config.m_step_passes);
    let mut skipped = Vec::new();
    let mut lr_start = config.lr;
    for pass in 0..config.m_step_passes {
        let outcome = descent_pass(
            &mut pack.encoder,
            &mut pack.heads,
            flat,
            labels,
            assignment,
            &pairs,
            config.alpha,
            config.margin,
            current,
            lr_start,
            config.backtrack_shrink,
            config.max_halvings,
        )?;
        current = outcome.loss;
        losses.push(current.total);
        if outcome.accepted {
            lr_start = outcome.lr_used * 2.0;
        } else {
            skipped.push(pass);
        }
    }
    Ok(MStepOutcome { post_e_ltde, losses, skipped, final_parts: current })
}

/// Runs the full mining loop and returns the best-validation snapshot:
/// the pack (with its centroids), the partition that produced it, and the
/// loss trace of every epoch.
pub fn mine(
    train: &Dataset,
    val: &Dataset,
    config: &TdeConfig,
) -> Result<(ModelPack, PartitionResult, LossTrace)> {
    config.validate()?;
    check_compatible(train, val)?;
    if config.n_domains > train.len() {
        return Err(Error::input(format!(
            "{} domains requested for {} training samples",
            config.n_domains,
            train.len()
        )));
    }
    let initial = train_initial(train, val, config)?;
    let mut pack = if config.n_domains == 1 {
        single_pack(&initial, train, config)?
    } else {
        init_pack(&initial, config.n_domains, train.num_classes, config, &train.name)?
    };

    let flat = train.flattened();
    let labels = train.labels();
    let mut trace = LossTrace::default();
    // The unspecialized pack enters the snapshot race first, so a mining
    // run that never improves validation F1 falls back to it instead of
    // shipping a degraded specialization.
    let initial_partition = e_step(&pack, train)?;
    pack.centroids = initial_partition.centroids.clone();
    let initial_f1 = macro_f1_on(&pack.encoder, &pack.heads, &pack.centroids, val)?;
    let mut best: (ModelPack, PartitionResult, f64, Option<usize>) =
        (pack.clone(), initial_partition, initial_f1, None);
    for epoch in 0..config.epochs {
        let partition = e_step(&pack, train)?;
        pack.centroids = partition.centroids.clone();
        let outcome = m_step(&mut pack, &flat, &labels, &partition.assignment, epoch)?;
        let val_f1 = macro_f1_on(&pack.encoder, &pack.heads, &pack.centroids, val)?;
        trace.epochs.push(EpochTrace {
            epoch,
            post_e_ltde: outcome.post_e_ltde,
            m_step_losses: outcome.losses,
            skipped_passes: outcome.skipped,
            l_contrastive: outcome.final_parts.contrastive,
            l_task: outcome.final_parts.task,
            l_tde: outcome.final_parts.total,
            val_macro_f1: val_f1,
            ari_vs_meta: partition.ari_vs_meta,
        });
        // Ties go to the later epoch: once validation saturates, extra
        // passes keep widening the heads' margins.
        if val_f1 >= best.2 {
            best = (pack.clone(), partition, val_f1, Some(epoch));
        }
    }
    let (mut best_pack, best_partition, _, best_epoch) = best;
    best_pack.provenance.ltde_history = trace.epochs.iter().map(|e| e.l_tde).collect();
    best_pack.provenance.best_epoch = best_epoch;
    Ok((best_pack, best_partition, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, shifted_family, split, SplitSpec};
    use approx::assert_relative_eq;

    fn small_config(n: usize, alpha: f64, epochs: usize) -> TdeConfig {
        TdeConfig {
            n_domains: n,
            alpha,
            epochs,
            m_step_passes: 3,
            encoder_hidden: vec![12, 6],
            head_hidden: vec![],
            seed: 5,
            ..TdeConfig::default()
        }
    }

    fn toy_splits() -> (Dataset, Dataset, Dataset) {
        let ds =
            generate_synthetic("toy", &shifted_family(2, 3, 4, 1.0, 0.15), 8, 10, 21).unwrap();
        split(&ds, &SplitSpec { seed: 2, ..SplitSpec::default() }).unwrap()
    }

    #[test]
    fn hand_built_two_sample_objective() {
        // Identity encoder on scalar windows 1.0 and 2.0; two domains with
        // hand-set linear heads; one negative pair at distance 1 under
        // margin 2; alpha = 0.7.
        use crate::dataset::Sample;
        use std::collections::BTreeMap;
        let mk = |id: &str, v: f64, label: usize| Sample {
            id: id.to_string(),
            label,
            meta: BTreeMap::new(),
            window: Matrix { rows: 1, cols: 1, data: vec![v] },
        };
        let ds = Dataset {
            name: "hand".into(),
            num_classes: 2,
            window_len: 1,
            channels: 1,
            samples: vec![mk("a", 1.0, 0), mk("b", 2.0, 1)],
        };
        let encoder = FeedforwardNet::from_parameters(
            vec![1, 1],
            vec![Matrix { rows: 1, cols: 1, data: vec![1.0] }],
            vec![vec![0.0]],
        )
        .unwrap();
        let head0 = FeedforwardNet::from_parameters(
            vec![1, 2],
            vec![Matrix { rows: 2, cols: 1, data: vec![2.0, 0.0] }],
            vec![vec![0.0, 0.0]],
        )
        .unwrap();
        let head1 = FeedforwardNet::from_parameters(
            vec![1, 2],
            vec![Matrix { rows: 2, cols: 1, data: vec![-1.0, 1.0] }],
            vec![vec![0.0, 0.0]],
        )
        .unwrap();
        let config = TdeConfig {
            n_domains: 2,
            alpha: 0.7,
            margin: 2.0,
            encoder_hidden: vec![1],
            head_hidden: vec![],
            ..TdeConfig::default()
        };
        let pack = ModelPack {
            encoder,
            heads: vec![head0, head1],
            centroids: vec![vec![1.0], vec![2.0]],
            num_classes: 2,
            config,
            provenance: Provenance {
                dataset: "hand".into(),
                seed: 0,
                ltde_history: vec![],
                best_epoch: None,
            },
        };
        let parts = total_loss(&pack, &ds, &[0, 1], &[(0, 1, false)]).unwrap();
        // Sample a through head 0: logits [2, 0], label 0.
        // Sample b through head 1: logits [-2, 2], label 1.
        let expect_task = 0.5 * ((1.0 + (-2.0f64).exp()).ln() + (1.0 + (-4.0f64).exp()).ln());
        // One negative pair: d = 1, margin 2 -> (2-1)^2 = 1, halved once.
        let expect_contrastive = 0.5;
        assert_relative_eq!(parts.task, expect_task, max_relative = 1e-12);
        assert_relative_eq!(parts.contrastive, expect_contrastive, max_relative = 1e-12);
        assert_relative_eq!(
            parts.total,
            0.7 * expect_contrastive + expect_task,
            max_relative = 1e-12
        );
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        use crate::numerics::finite_difference_check;
        let (train, _, _) = toy_splits();
        let small = train.subset(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let flat = small.flattened();
        let labels = small.labels();
        let assignment = vec![0, 1, 0, 1, 1, 0, 1, 0];
        let pairs = vec![(0, 1, false), (0, 2, true), (3, 4, true), (5, 7, true)];
        let config = small_config(2, 0.9, 1);
        let mut encoder =
            FeedforwardNet::new(&config.encoder_dims(flat.cols), 17).unwrap();
        let heads = vec![
            FeedforwardNet::new(&config.head_dims(small.num_classes), 18).unwrap(),
            FeedforwardNet::new(&config.head_dims(small.num_classes), 19).unwrap(),
        ];
        // Check the encoder parameters; head gradients flow through the
        // same upstream assembly.
        let report = finite_difference_check(
            &mut encoder,
            |enc| {
                let (parts, enc_grads, _) = tde_gradients(
                    enc, &heads, &flat, &labels, &assignment, &pairs, 0.9, 1.0,
                )?;
                Ok((parts.total, enc_grads))
            },
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn pair_sampling_balances_and_degenerates_gracefully() {
        let groups = vec![0, 0, 0, 1, 1, 1, 2, 2];
        let mut r = rng::stream_rng(3, "t", 0);
        let pairs = sample_pairs(&groups, 40, &mut r);
        assert_eq!(pairs.len(), 40);
        let same = pairs.iter().filter(|p| p.2).count();
        assert_eq!(same, 20);
        for &(i, j, same) in &pairs {
            assert_ne!(i, j);
            assert_eq!(groups[i] == groups[j], same);
        }
        // One group only: no negatives exist.
        let lone = vec![0, 0, 0, 0];
        let pairs = sample_pairs(&lone, 10, &mut r);
        assert!(pairs.iter().all(|p| p.2));
        // All singleton groups: no positives exist.
        let singles = vec![0, 1, 2, 3];
        let pairs = sample_pairs(&singles, 10, &mut r);
        assert!(pairs.iter().all(|p| !p.2));
    }

    #[test]
    fn init_pack_needs_two_domains_and_copies_heads_bitwise() {
        let (train, val, _) = toy_splits();
        let config = small_config(3, 1.0, 2);
        let initial = train_initial(&train, &val, &config).unwrap();
        assert!(init_pack(&initial, 1, 3, &config, "toy").is_err());
        let pack = init_pack(&initial, 3, 3, &config, "toy").unwrap();
        assert_eq!(pack.heads.len(), 3);
        for head in &pack.heads {
            assert_eq!(head, &initial.head);
        }
        assert!(pack.centroids.is_empty());
    }

    #[test]
    fn e_step_is_deterministic_at_fixed_parameters() {
        let (train, val, _) = toy_splits();
        let config = small_config(2, 1.0, 2);
        let initial = train_initial(&train, &val, &config).unwrap();
        let pack = init_pack(&initial, 2, 3, &config, "toy").unwrap();
        let a = e_step(&pack, &train).unwrap();
        let b = e_step(&pack, &train).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.centroids, b.centroids);
        assert!(a.ari_vs_meta.is_some());
    }

    #[test]
    fn initial_training_loss_never_increases() {
        let (train, val, _) = toy_splits();
        let config = small_config(1, 0.0, 12);
        let initial = train_initial(&train, &val, &config).unwrap();
        for w in initial.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss rose: {:?}", w);
        }
    }

    #[test]
    fn descent_pass_with_one_domain_is_a_cross_entropy_step() {
        // With alpha 0, no pairs, and a single head, the pass must equal a
        // plain line-searched step on mean cross-entropy.
        let (train, _, _) = toy_splits();
        let small = train.subset(&[0, 1, 2, 3, 4, 5]);
        let flat = small.flattened();
        let labels = small.labels();
        let assignment = vec![0usize; 6];
        let config = small_config(1, 0.0, 1);
        let mut encoder = FeedforwardNet::new(&config.encoder_dims(flat.cols), 31).unwrap();
        let mut heads = vec![FeedforwardNet::new(&config.head_dims(3), 32).unwrap()];
        let before =
            eval_losses(&encoder, &heads, &flat, &labels, &assignment, &[], 0.0, 1.0).unwrap();

        // Expected update, assembled by hand.
        let emb = encoder.forward(&flat).unwrap();
        let logits = heads[0].forward(&emb).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (hg, demb) = heads[0].gradients(&emb, &dlogits).unwrap();
        let (eg, _) = encoder.gradients(&flat, &demb).unwrap();
        let mut expect_enc = encoder.clone();
        expect_enc.sgd_step(&eg, config.lr).unwrap();
        let mut expect_head = heads[0].clone();
        expect_head.sgd_step(&hg, config.lr).unwrap();

        let outcome = descent_pass(
            &mut encoder,
            &mut heads,
            &flat,
            &labels,
            &assignment,
            &[],
            0.0,
            1.0,
            before,
            config.lr,
            0.5,
            20,
        )
        .unwrap();
        assert!(outcome.accepted);
        assert_eq!(outcome.lr_used, config.lr, "first trial should accept here");
        assert_eq!(encoder, expect_enc);
        assert_eq!(heads[0], expect_head);
    }

    #[test]
    fn mining_traces_are_monotone_within_each_m_step() {
        let (train, val, _) = toy_splits();
        let config = small_config(2, 1.0, 8);
        let (pack, partition, trace) = mine(&train, &val, &config).unwrap();
        assert_eq!(pack.heads.len(), 2);
        assert_eq!(pack.centroids.len(), 2);
        assert_eq!(partition.assignment.len(), train.len());
        assert_eq!(trace.epochs.len(), 8);
        for e in &trace.epochs {
            let mut prev = e.post_e_ltde;
            for (&l, _) in e.m_step_losses.iter().zip(0..) {
                assert!(l <= prev + 1e-9, "epoch {} rose {} -> {}", e.epoch, prev, l);
                prev = l;
            }
            assert_relative_eq!(e.l_tde, *e.m_step_losses.last().unwrap());
        }
    }

    #[test]
    fn mine_accepts_one_domain_and_rejects_zero() {
        let (train, val, _) = toy_splits();
        assert!(mine(&train, &val, &small_config(0, 1.0, 2)).is_err());
        let (pack, _, _) = mine(&train, &val, &small_config(1, 0.0, 2)).unwrap();
        assert_eq!(pack.heads.len(), 1);
        assert_eq!(pack.centroids.len(), 1);
    }

    #[test]
    fn mine_is_seed_deterministic() {
        let (train, val, _) = toy_splits();
        let config = small_config(2, 1.0, 3);
        let (pa, ra, _) = mine(&train, &val, &config).unwrap();
        let (pb, rb, _) = mine(&train, &val, &config).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ra.assignment, rb.assignment);
    }
}
