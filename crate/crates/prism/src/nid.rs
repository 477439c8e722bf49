//! Non-i.i.d. degree: how strongly encoder feature statistics drift
//! between halves of a dataset under a schedule of clip exchanges.
//!
//! The dataset is cut in file order into `2k` near-equal clips, so windows
//! recorded together stay together; collection order is what carries
//! domain structure in sensor dumps. The seed shuffles which block lands
//! in which clip slot. Round 1 puts clips `1..=k` against `k+1..=2k`;
//! round `i` then exchanges clip `i-1` with clip `k+i-1`, giving `k`
//! half/half comparisons that each move one clip across. Clips `k` and
//! `2k` keep their side through every round.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{FeedforwardNet, Matrix};
use crate::rng;

/// Per-dimension standard deviations below this are clamped before they
/// divide anything.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NidConfig {
    /// Number of rounds; the dataset splits into `2k` clips.
    pub k: usize,
    /// Verdict boundary: non-i.i.d. iff the degree strictly exceeds this.
    pub threshold: f64,
    /// A class participates in a round only when both sides hold at least
    /// this many of its samples.
    pub min_class_count: usize,
    pub seed: u64,
}

impl Default for NidConfig {
    fn default() -> Self {
        NidConfig { k: 10, threshold: 1.0, min_class_count: 2, seed: 0 }
    }
}

/// The clip partition and the side arrangement of every round. Rounds
/// store clip indices; ids live in `clips`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipSchedule {
    pub clips: Vec<Vec<String>>,
    pub rounds: Vec<(Vec<usize>, Vec<usize>)>,
}

/// One feature-drift measurement between two halves.
#[derive(Debug, Clone)]
pub struct NiOutcome {
    pub value: f64,
    /// Classes with too few samples on one side to say anything.
    pub skipped_classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NidReport {
    pub dataset: String,
    pub k: usize,
    pub threshold: f64,
    pub min_class_count: usize,
    pub ni_values: Vec<f64>,
    pub nid: f64,
    pub is_non_iid: bool,
    pub skipped_classes: Vec<Vec<usize>>,
}

/// Cuts `ds` into `2k` clips in file order and lays out the `k` exchange
/// rounds. Requires at least one sample per clip.
pub fn build_schedule(ds: &Dataset, k: usize, seed: u64) -> Result<ClipSchedule> {
    if k == 0 {
        return Err(Error::input("k must be >= 1".to_string()));
    }
    let n = ds.len();
    let parts = 2 * k;
    if n < parts {
        return Err(Error::input(format!(
            "{} samples cannot fill {} clips",
            n, parts
        )));
    }
    // Contiguous blocks of near-equal size; the first n mod 2k blocks take
    // one extra sample. The seed then shuffles block order into clip slots.
    let base = n / parts;
    let extra = n % parts;
    let mut clips = Vec::with_capacity(parts);
    let mut at = 0;
    for b in 0..parts {
        let len = base + usize::from(b < extra);
        clips.push(
            ds.samples[at..at + len]
                .iter()
                .map(|s| s.id.clone())
                .collect::<Vec<String>>(),
        );
        at += len;
    }
    clips.shuffle(&mut rng::stream_rng(seed, "clips", 0));

    let mut side_a: Vec<usize> = (0..k).collect();
    let mut side_b: Vec<usize> = (k..parts).collect();
    let mut rounds = vec![(side_a.clone(), side_b.clone())];
    for i in 2..=k {
        let give = i - 2;
        let take = k + i - 2;
        let pa = side_a.iter().position(|&c| c == give).expect("clip left side a");
        let pb = side_b.iter().position(|&c| c == take).expect("clip left side b");
        std::mem::swap(&mut side_a[pa], &mut side_b[pb]);
        rounds.push((side_a.clone(), side_b.clone()));
    }
    Ok(ClipSchedule { clips, rounds })
}

fn embed(encoder: &FeedforwardNet, ds: &Dataset) -> Result<Matrix> {
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

fn mean_rows(features: &Matrix, idx: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; features.cols];
    for &i in idx {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= idx.len() as f64;
    }
    mean
}

fn floored_std_rows(features: &Matrix, idx: &[usize]) -> Vec<f64> {
    let mean = mean_rows(features, idx);
    let mut var = vec![0.0; features.cols];
    for &i in idx {
        for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter()
        .map(|s| (s / idx.len() as f64).sqrt().max(STD_FLOOR))
        .collect()
}

fn ni_from_parts(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    a_idx: &[usize],
    b_idx: &[usize],
    class_stds: &[Vec<f64>],
    min_class_count: usize,
) -> Result<NiOutcome> {
    let mut by_class_a = vec![Vec::new(); num_classes];
    let mut by_class_b = vec![Vec::new(); num_classes];
    for &i in a_idx {
        by_class_a[labels[i]].push(i);
    }
    for &i in b_idx {
        by_class_b[labels[i]].push(i);
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for y in 0..num_classes {
        if by_class_a[y].len() < min_class_count || by_class_b[y].len() < min_class_count {
            skipped.push(y);
            continue;
        }
        let ma = mean_rows(features, &by_class_a[y]);
        let mb = mean_rows(features, &by_class_b[y]);
        let mut sq = 0.0;
        for ((a, b), s) in ma.iter().zip(&mb).zip(&class_stds[y]) {
            let z = (a - b) / s;
            sq += z * z;
        }
        total += sq.sqrt();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Eval(
            "no class has enough samples on both sides".to_string(),
        ));
    }
    Ok(NiOutcome { value: total / used as f64, skipped_classes: skipped })
}

fn whole_class_stds(features: &Matrix, labels: &[usize], num_classes: usize) -> Vec<Vec<f64>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                vec![STD_FLOOR; features.cols]
            } else {
                floored_std_rows(features, idx)
            }
        })
        .collect()
}

/// Distribution inconsistence between two halves: for each class with
/// enough support on both sides, the L2 norm of the gap between side
/// means, measured in units of that class's per-dimension deviation over
/// `whole`; averaged over the classes that qualify.
pub fn ni(
    encoder: &FeedforwardNet,
    side_a: &Dataset,
    side_b: &Dataset,
    whole: &Dataset,
    min_class_count: usize,
) -> Result<NiOutcome> {
    for side in [side_a, side_b] {
        if side.num_classes != whole.num_classes
            || side.window_len != whole.window_len
            || side.channels != whole.channels
        {
            return Err(Error::shape("sides and whole disagree on the header".to_string()));
        }
    }
    let whole_features = embed(encoder, whole)?;
    let stds = whole_class_stds(&whole_features, &whole.labels(), whole.num_classes);

    let fa = embed(encoder, side_a)?;
    let fb = embed(encoder, side_b)?;
    let mut features = Matrix::zeros(fa.rows + fb.rows, fa.cols);
    features.data[..fa.data.len()].copy_from_slice(&fa.data);
    features.data[fa.data.len()..].copy_from_slice(&fb.data);
    let mut labels = side_a.labels();
    labels.extend(side_b.labels());
    let a_idx: Vec<usize> = (0..fa.rows).collect();
    let b_idx: Vec<usize> = (fa.rows..fa.rows + fb.rows).collect();
    ni_from_parts(
        &features,
        &labels,
        whole.num_classes,
        &a_idx,
        &b_idx,
        &stds,
        min_class_count,
    )
}

/// Mean inconsistence over every round of the schedule, with the verdict
/// against `config.threshold`.
pub fn nid(
    encoder: &FeedforwardNet,
    ds: &Dataset,
    schedule: &ClipSchedule,
    config: &NidConfig,
) -> Result<NidReport> {
    let index: HashMap<&str, usize> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut clip_indices = Vec::with_capacity(schedule.clips.len());
    let mut seen = 0;
    for clip in &schedule.clips {
        let mut ids = Vec::with_capacity(clip.len());
        for id in clip {
            match index.get(id.as_str()) {
                Some(&i) => ids.push(i),
                None => {
                    return Err(Error::input(format!(
                        "schedule references unknown sample id {:?}",
                        id
                    )))
                }
            }
        }
        seen += ids.len();
        clip_indices.push(ids);
    }
    if seen != ds.len() {
        return Err(Error::input(format!(
            "schedule covers {} of {} samples",
            seen,
            ds.len()
        )));
    }

    let features = embed(encoder, ds)?;
    let labels = ds.labels();
    let stds = whole_class_stds(&features, &labels, ds.num_classes);

    let mut ni_values = Vec::with_capacity(schedule.rounds.len());
    let mut skipped = Vec::with_capacity(schedule.rounds.len());
    for (side_a, side_b) in &schedule.rounds {
        let a_idx: Vec<usize> = side_a.iter().flat_map(|&c| clip_indices[c].iter().copied()).collect();
        let b_idx: Vec<usize> = side_b.iter().flat_map(|&c| clip_indices[c].iter().copied()).collect();
        let outcome = ni_from_parts(
            &features,
            &labels,
            ds.num_classes,
            &a_idx,
            &b_idx,
            &stds,
            config.min_class_count,
        )?;
        ni_values.push(outcome.value);
        skipped.push(outcome.skipped_classes);
    }
    let nid = ni_values.iter().sum::<f64>() / ni_values.len() as f64;
    Ok(NidReport {
        dataset: ds.name.clone(),
        k: config.k,
        threshold: config.threshold,
        min_class_count: config.min_class_count,
        ni_values,
        nid,
        is_non_iid: nid > config.threshold,
        skipped_classes: skipped,
    })
}
