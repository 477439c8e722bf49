//! Comparison partitioning strategies, the partition-cost objective, and
//! a brute-force optimal-partition search for tiny instances.
//!
//! Every strategy here follows the same recipe: train one shared model,
//! split the training data into subsets somehow, specialize a copy of the
//! shared model on each subset, and route test samples to one specialist.
//! They differ only in where the split comes from: nowhere (single
//! model), a metadata attribute, clustering raw windows, or clustering
//! embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{self, assign_nearest};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::FeedforwardNet;
use crate::oup::{self, EvalReport, PredictionRecord};
use crate::rng;
use crate::tde::{self, InitialModel, ModelPack, TdeConfig};

/// Specialization budget: full-batch passes each subset model gets on top
/// of the shared starting point.
pub const DA_PASSES: usize = 20;

/// Upper bound on candidate assignments the exhaustive search will scan.
pub const ORACLE_CAP: u128 = 4096;

/// An explicit split of a dataset's samples into indexed subsets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PartitionScheme {
    /// One of `p0`, `sem`, `cd`, `cf`, `prism`, `oracle`.
    pub name: String,
    /// Sample id to subset index.
    pub assignment: BTreeMap<String, usize>,
    pub n_subsets: usize,
}

impl PartitionScheme {
    pub fn validate(&self) -> Result<()> {
        if self.n_subsets == 0 {
            return Err(Error::input("a partition needs at least one subset".to_string()));
        }
        for (id, &s) in &self.assignment {
            if s >= self.n_subsets {
                return Err(Error::input(format!(
                    "sample {} assigned to subset {} of {}",
                    id, s, self.n_subsets
                )));
            }
        }
        Ok(())
    }

    /// Everything in one subset.
    pub fn single(datasets: &[&Dataset]) -> PartitionScheme {
        let mut assignment = BTreeMap::new();
        for ds in datasets {
            for sample in &ds.samples {
                assignment.insert(sample.id.clone(), 0);
            }
        }
        PartitionScheme { name: "p0".to_string(), assignment, n_subsets: 1 }
    }
}

/// Reads a mined pack's routing as a partition of the given datasets.
pub fn scheme_from_pack(pack: &ModelPack, datasets: &[&Dataset]) -> Result<PartitionScheme> {
    if pack.centroids.len() != pack.heads.len() {
        return Err(Error::shape(format!(
            "{} centroids for {} heads",
            pack.centroids.len(),
            pack.heads.len()
        )));
    }
    let mut assignment = BTreeMap::new();
    for ds in datasets {
        let emb = pack.encoder.forward(&ds.flattened())?;
        for (i, sample) in ds.samples.iter().enumerate() {
            assignment.insert(sample.id.clone(), assign_nearest(&pack.centroids, emb.row(i)));
        }
    }
    Ok(PartitionScheme {
        name: "prism".to_string(),
        assignment,
        n_subsets: pack.heads.len(),
    })
}

/// Cost of one subset under a partition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SubsetCost {
    pub subset: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// 1 - accuracy of the specialized model on this subset's test
    /// samples; 1.0 for untrainable subsets, 0.0 for untestable ones.
    pub error: f64,
}

/// Partition cost: the plain sum of per-subset errors, plus a
/// test-size-weighted mean for comparing partitions with different
/// subset counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PartitionCost {
    pub scheme: String,
    pub total_error: f64,
    pub weighted_mean_error: f64,
    pub per_subset: Vec<SubsetCost>,
    pub flags: Vec<String>,
}

/// A shared model specialized on one subset.
struct TunedModel {
    encoder: FeedforwardNet,
    head: FeedforwardNet,
}

impl TunedModel {
    fn predict_one(&self, flat_window: &[f64]) -> Result<usize> {
        let features = self.encoder.forward_one(flat_window)?;
        Ok(oup::argmax(&self.head.forward_one(&features)?))
    }

    fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let emb = self.encoder.forward(&ds.flattened())?;
        let logits = self.head.forward(&emb)?;
        let correct = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(i, s)| oup::argmax(logits.row(*i)) == s.label)
            .count();
        Ok(correct as f64 / ds.len() as f64)
    }
}

fn specialize(initial: &InitialModel, subset: &Dataset, config: &TdeConfig) -> Result<TunedModel> {
    let mut encoder = initial.encoder.clone();
    let mut head = initial.head.clone();
    let flat = subset.flattened();
    tde::fine_tune_passes(&mut encoder, &mut head, &flat, &subset.labels(), DA_PASSES, config)?;
    Ok(TunedModel { encoder, head })
}

/// Single shared model for everything. Identical to mining with one
/// domain and no contrastive term.
pub fn baseline_p0(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    config: &TdeConfig,
) -> Result<EvalReport> {
    let mut cfg = config.clone();
    cfg.n_domains = 1;
    cfg.alpha = 0.0;
    let (pack, _, _) = tde::mine(train, val, &cfg)?;
    oup::evaluate(&pack, test)
}

/// One specialist per value of a metadata attribute, routed by reading
/// the same attribute off the test sample. Test values never seen in
/// training fall back to the unspecialized shared model; the report
/// grows one extra domain slot for them and a flag with the count.
pub fn baseline_semantic(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    meta_key: &str,
    config: &TdeConfig,
) -> Result<EvalReport> {
    let mut subset_of = BTreeMap::new();
    for sample in &train.samples {
        let value = sample.meta.get(meta_key).ok_or_else(|| {
            Error::input(format!("sample {} lacks meta key {:?}", sample.id, meta_key))
        })?;
        let next = subset_of.len();
        subset_of.entry(value.clone()).or_insert(next);
    }
    let n_values = subset_of.len();
    let initial = tde::train_initial(train, val, config)?;
    let mut models = Vec::with_capacity(n_values);
    for (_, &s) in &subset_of {
        let indices: Vec<usize> = train
            .samples
            .iter()
            .enumerate()
            .filter(|(_, smp)| subset_of[&smp.meta[meta_key]] == s)
            .map(|(i, _)| i)
            .collect();
        models.push((s, specialize(&initial, &train.subset(&indices), config)?));
    }
    models.sort_by_key(|(s, _)| *s);
    let shared = TunedModel { encoder: initial.encoder.clone(), head: initial.head.clone() };

    let flat = test.flattened();
    let mut records = Vec::with_capacity(test.len());
    let mut fallbacks = 0usize;
    for (i, sample) in test.samples.iter().enumerate() {
        let value = sample.meta.get(meta_key).ok_or_else(|| {
            Error::input(format!("test sample {} lacks meta key {:?}", sample.id, meta_key))
        })?;
        let (domain, model) = match subset_of.get(value) {
            Some(&s) => (s, &models[s].1),
            None => {
                fallbacks += 1;
                (n_values, &shared)
            }
        };
        let predicted = model.predict_one(flat.row(i))?;
        records.push(PredictionRecord {
            id: sample.id.clone(),
            true_label: sample.label,
            predicted_label: predicted,
            domain,
            correct: predicted == sample.label,
        });
    }
    let n_domains = if fallbacks > 0 { n_values + 1 } else { n_values };
    let mut report = oup::report_from_records(&records, test, n_domains);
    if fallbacks > 0 {
        report.flags.push(format!(
            "{} test samples carried unseen {:?} values and fell back to the shared model",
            fallbacks, meta_key
        ));
    }
    Ok(report)
}

fn check_cluster_count(n: usize, train: &Dataset) -> Result<()> {
    if n == 0 || n > train.len() {
        return Err(Error::input(format!(
            "{} clusters requested for {} training samples",
            n,
            train.len()
        )));
    }
    Ok(())
}

fn cluster_baseline(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    n: usize,
    config: &TdeConfig,
    train_points: impl Fn(&InitialModel) -> Result<Vec<Vec<f64>>>,
    test_points: impl Fn(&InitialModel) -> Result<Vec<Vec<f64>>>,
    seed_stream: &str,
) -> Result<EvalReport> {
    check_cluster_count(n, train)?;
    let initial = tde::train_initial(train, val, config)?;
    let points = train_points(&initial)?;
    let clusters = clustering::kmeans(
        &points,
        n,
        rng::derive(config.seed, seed_stream, 0),
        config.kmeans_max_iter,
        config.kmeans_tol,
    )?;
    let mut models = Vec::with_capacity(n);
    for s in 0..n {
        let indices: Vec<usize> = clusters
            .assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == s)
            .map(|(i, _)| i)
            .collect();
        models.push(specialize(&initial, &train.subset(&indices), config)?);
    }
    let routing = test_points(&initial)?;
    let flat = test.flattened();
    let mut records = Vec::with_capacity(test.len());
    for (i, sample) in test.samples.iter().enumerate() {
        let domain = assign_nearest(&clusters.centroids, &routing[i]);
        let predicted = models[domain].predict_one(flat.row(i))?;
        records.push(PredictionRecord {
            id: sample.id.clone(),
            true_label: sample.label,
            predicted_label: predicted,
            domain,
            correct: predicted == sample.label,
        });
    }
    Ok(oup::report_from_records(&records, test, n))
}

/// Subsets from k-means over raw flattened windows; test routing by
/// nearest raw-space centroid.
pub fn baseline_cluster_data(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    n: usize,
    config: &TdeConfig,
) -> Result<EvalReport> {
    let rows = |ds: &Dataset| {
        let flat = ds.flattened();
        (0..flat.rows).map(|i| flat.row(i).to_vec()).collect::<Vec<_>>()
    };
    let train_rows = rows(train);
    let test_rows = rows(test);
    cluster_baseline(
        train,
        val,
        test,
        n,
        config,
        |_| Ok(train_rows.clone()),
        |_| Ok(test_rows.clone()),
        "cd-clusters",
    )
}

/// Subsets from k-means over the shared encoder's embeddings, taken once
/// with no further refinement; test routing by nearest feature centroid
/// in that same frozen space.
pub fn baseline_cluster_feature(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    n: usize,
    config: &TdeConfig,
) -> Result<EvalReport> {
    let embed = |initial: &InitialModel, ds: &Dataset| -> Result<Vec<Vec<f64>>> {
        let emb = initial.encoder.forward(&ds.flattened())?;
        Ok((0..emb.rows).map(|i| emb.row(i).to_vec()).collect())
    };
    cluster_baseline(
        train,
        val,
        test,
        n,
        config,
        |initial| embed(initial, train),
        |initial| embed(initial, test),
        "cf-clusters",
    )
}

/// Scores a partition: specialize the shared model on every subset's
/// train samples, measure 1 - accuracy on the subset's test samples, and
/// sum. Subsets whose train split is empty or misses a class score 1.0;
/// subsets with no test samples contribute 0. Both cases are flagged.
pub fn eval_partition(
    scheme: &PartitionScheme,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    config: &TdeConfig,
) -> Result<PartitionCost> {
    let initial = tde::train_initial(train, val, config)?;
    eval_partition_with(scheme, &initial, train, test, config)
}

fn subset_indices(scheme: &PartitionScheme, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    let mut buckets = vec![Vec::new(); scheme.n_subsets];
    for (i, sample) in ds.samples.iter().enumerate() {
        let &s = scheme
            .assignment
            .get(&sample.id)
            .ok_or_else(|| Error::input(format!("sample {} is not in the partition", sample.id)))?;
        buckets[s].push(i);
    }
    Ok(buckets)
}

pub(crate) fn eval_partition_with(
    scheme: &PartitionScheme,
    initial: &InitialModel,
    train: &Dataset,
    test: &Dataset,
    config: &TdeConfig,
) -> Result<PartitionCost> {
    scheme.validate()?;
    let train_buckets = subset_indices(scheme, train)?;
    let test_buckets = subset_indices(scheme, test)?;
    let mut per_subset = Vec::with_capacity(scheme.n_subsets);
    let mut flags = Vec::new();
    for s in 0..scheme.n_subsets {
        let tr = &train_buckets[s];
        let te = &test_buckets[s];
        let mut class_seen = vec![false; train.num_classes];
        for &i in tr {
            class_seen[train.samples[i].label] = true;
        }
        let error = if tr.is_empty() || class_seen.iter().any(|seen| !seen) {
            flags.push(format!(
                "subset {} train split is empty or misses a class; scored 1.0",
                s
            ));
            1.0
        } else if te.is_empty() {
            flags.push(format!("subset {} has no test samples; contributes 0", s));
            0.0
        } else {
            let tuned = specialize(initial, &train.subset(tr), config)?;
            1.0 - tuned.accuracy(&test.subset(te))?
        };
        per_subset.push(SubsetCost { subset: s, n_train: tr.len(), n_test: te.len(), error });
    }
    let total_error: f64 = per_subset.iter().map(|c| c.error).sum();
    let tested: usize = per_subset.iter().map(|c| c.n_test).sum();
    let weighted_mean_error = if tested > 0 {
        per_subset.iter().map(|c| c.error * c.n_test as f64).sum::<f64>() / tested as f64
    } else {
        0.0
    };
    Ok(PartitionCost {
        scheme: scheme.name.clone(),
        total_error,
        weighted_mean_error,
        per_subset,
        flags,
    })
}

/// Enumerates every assignment of sample groups (buckets of equal
/// `group_key` metadata) to `n` subsets, scores each with the partition
/// cost, and returns the cheapest. Ties go to the assignment that
/// enumerates first, which is the lexicographically lowest one.
pub fn exhaustive_partition_oracle(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    n: usize,
    group_key: &str,
    config: &TdeConfig,
) -> Result<(PartitionScheme, PartitionCost)> {
    if n == 0 {
        return Err(Error::input("need at least one subset".to_string()));
    }
    let mut group_of_value: BTreeMap<String, usize> = BTreeMap::new();
    let mut group_of_sample: BTreeMap<String, usize> = BTreeMap::new();
    for ds in [train, test] {
        for sample in &ds.samples {
            let value = sample.meta.get(group_key).ok_or_else(|| {
                Error::input(format!("sample {} lacks meta key {:?}", sample.id, group_key))
            })?;
            let next = group_of_value.len();
            let g = *group_of_value.entry(value.clone()).or_insert(next);
            group_of_sample.insert(sample.id.clone(), g);
        }
    }
    let g_count = group_of_value.len();
    let in_bounds =
        (n as u128).checked_pow(g_count as u32).map_or(false, |c| c <= ORACLE_CAP);
    if !in_bounds {
        return Err(Error::Capacity(format!(
            "{}^{} candidate assignments exceed the exhaustive bound of {}",
            n, g_count, ORACLE_CAP
        )));
    }

    let initial = tde::train_initial(train, val, config)?;
    let mut group_subset = vec![0usize; g_count];
    let mut best: Option<(PartitionScheme, PartitionCost)> = None;
    loop {
        let assignment: BTreeMap<String, usize> = group_of_sample
            .iter()
            .map(|(id, &g)| (id.clone(), group_subset[g]))
            .collect();
        let scheme =
            PartitionScheme { name: "oracle".to_string(), assignment, n_subsets: n };
        let cost = eval_partition_with(&scheme, &initial, train, test, config)?;
        if best.as_ref().map_or(true, |(_, b)| cost.total_error < b.total_error) {
            best = Some((scheme, cost));
        }
        // Advance the odometer; rightmost digit fastest keeps the scan in
        // ascending lexicographic order.
        let mut digit = g_count;
        loop {
            if digit == 0 {
                return Ok(best.unwrap());
            }
            digit -= 1;
            group_subset[digit] += 1;
            if group_subset[digit] < n {
                break;
            }
            group_subset[digit] = 0;
        }
    }
}
