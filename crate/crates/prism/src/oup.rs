//! Online use of a mined pack: route a window to its nearest-centroid
//! domain, run that single head, and score the result. Also owns the
//! on-disk pack format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::assign_nearest;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{FeedforwardNet, Matrix};
use crate::tde::{ModelPack, Provenance, TdeConfig};

/// Version of the serialized pack layout this build reads and writes.
pub const PACK_SCHEMA_VERSION: u32 = 1;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One routed prediction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    /// Estimated domain whose head produced the prediction.
    pub domain: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Scores of a pack on one labeled dataset. Macro-F1 averages over every
/// class the header declares, counting absent ones as zero; those cases
/// are listed in `flags`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// How many samples each head served.
    pub per_domain_counts: Vec<usize>,
    /// Rows are true labels, columns predicted.
    pub confusion: Vec<Vec<usize>>,
    pub flags: Vec<String>,
}

fn check_deployable(pack: &ModelPack, ds: &Dataset) -> Result<()> {
    if pack.centroids.is_empty() {
        return Err(Error::input(
            "pack has no centroids; it never went through a partition step".to_string(),
        ));
    }
    if pack.centroids.len() != pack.heads.len() {
        return Err(Error::shape(format!(
            "{} centroids for {} heads",
            pack.centroids.len(),
            pack.heads.len()
        )));
    }
    if ds.num_classes != pack.num_classes {
        return Err(Error::shape(format!(
            "dataset declares {} classes, pack was trained for {}",
            ds.num_classes, pack.num_classes
        )));
    }
    let flat_dim = ds.window_len * ds.channels;
    if flat_dim != pack.encoder.input_dim() {
        return Err(Error::shape(format!(
            "windows flatten to {} values, encoder expects {}",
            flat_dim,
            pack.encoder.input_dim()
        )));
    }
    Ok(())
}

/// Routes every sample to its nearest centroid and runs only that head.
pub fn predict(pack: &ModelPack, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    check_deployable(pack, ds)?;
    let emb = pack.encoder.forward(&ds.flattened())?;
    let mut records = Vec::with_capacity(ds.len());
    for (i, sample) in ds.samples.iter().enumerate() {
        let domain = assign_nearest(&pack.centroids, emb.row(i));
        let logits = pack.heads[domain].forward_one(emb.row(i))?;
        let predicted = argmax(&logits);
        records.push(PredictionRecord {
            id: sample.id.clone(),
            true_label: sample.label,
            predicted_label: predicted,
            domain,
            correct: predicted == sample.label,
        });
    }
    Ok(records)
}

/// Per-class precision/recall/F1 plus the macro average over all
/// `num_classes` classes. Classes with an empty precision or recall
/// denominator score zero there, and zero F1 when both are zero.
pub fn macro_f1_of(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> (Vec<ClassMetrics>, f64) {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut sum = 0.0;
    for c in 0..num_classes {
        let precision = if tp[c] + fp[c] > 0 { tp[c] as f64 / (tp[c] + fp[c]) as f64 } else { 0.0 };
        let recall = if tp[c] + fn_[c] > 0 { tp[c] as f64 / (tp[c] + fn_[c]) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        sum += f1;
        per_class.push(ClassMetrics { precision, recall, f1, support: tp[c] + fn_[c] });
    }
    (per_class, sum / num_classes as f64)
}

/// Runs the pack on a labeled dataset and assembles the full report.
pub fn evaluate(pack: &ModelPack, ds: &Dataset) -> Result<EvalReport> {
    let records = predict(pack, ds)?;
    Ok(report_from_records(&records, ds, pack.heads.len()))
}

pub(crate) fn report_from_records(
    records: &[PredictionRecord],
    ds: &Dataset,
    n_domains: usize,
) -> EvalReport {
    let predicted: Vec<usize> = records.iter().map(|r| r.predicted_label).collect();
    let truth: Vec<usize> = records.iter().map(|r| r.true_label).collect();
    let correct = records.iter().filter(|r| r.correct).count();
    let (per_class, macro_f1) = macro_f1_of(&predicted, &truth, ds.num_classes);
    let mut confusion = vec![vec![0usize; ds.num_classes]; ds.num_classes];
    for (&p, &t) in predicted.iter().zip(&truth) {
        confusion[t][p] += 1;
    }
    let mut per_domain_counts = vec![0usize; n_domains];
    for r in records {
        per_domain_counts[r.domain] += 1;
    }
    let mut flags = Vec::new();
    for (c, m) in per_class.iter().enumerate() {
        if m.support == 0 {
            flags.push(format!("class {} has no true samples; its F1 counts as 0", c));
        } else if m.f1 == 0.0 {
            flags.push(format!("class {} was never predicted correctly", c));
        }
    }
    EvalReport {
        dataset: ds.name.clone(),
        n_samples: records.len(),
        accuracy: correct as f64 / records.len().max(1) as f64,
        macro_f1,
        per_class,
        per_domain_counts,
        confusion,
        flags,
    }
}

#[derive(Serialize, Deserialize)]
struct RawNet {
    dims: Vec<usize>,
    /// One flat row-major block per layer, shaped dims[l+1] x dims[l].
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawPack {
    schema_version: u32,
    num_classes: usize,
    config: TdeConfig,
    encoder: RawNet,
    heads: Vec<RawNet>,
    centroids: Vec<Vec<f64>>,
    provenance: Provenance,
}

fn net_to_raw(net: &FeedforwardNet) -> RawNet {
    RawNet {
        dims: net.dims().to_vec(),
        weights: (0..net.layer_count()).map(|l| net.layer_weights(l).data.clone()).collect(),
        biases: (0..net.layer_count()).map(|l| net.layer_biases(l).to_vec()).collect(),
    }
}

fn net_from_raw(raw: RawNet) -> Result<FeedforwardNet> {
    if raw.dims.len() < 2 {
        return Err(Error::schema("net needs at least one layer".to_string()));
    }
    if raw.weights.len() + 1 != raw.dims.len() || raw.biases.len() != raw.weights.len() {
        return Err(Error::schema(format!(
            "net with {} dims carries {} weight and {} bias blocks",
            raw.dims.len(),
            raw.weights.len(),
            raw.biases.len()
        )));
    }
    let mut weights = Vec::with_capacity(raw.weights.len());
    for (l, block) in raw.weights.into_iter().enumerate() {
        let rows = raw.dims[l + 1];
        let cols = raw.dims[l];
        if block.len() != rows * cols {
            return Err(Error::schema(format!(
                "layer {} weight block holds {} values, wants {}x{}",
                l,
                block.len(),
                rows,
                cols
            )));
        }
        weights.push(Matrix { rows, cols, data: block });
    }
    FeedforwardNet::from_parameters(raw.dims, weights, raw.biases)
}

fn check_finite(pack: &ModelPack) -> Result<()> {
    let nets = std::iter::once(&pack.encoder).chain(pack.heads.iter());
    for net in nets {
        for l in 0..net.layer_count() {
            if net.layer_weights(l).data.iter().any(|v| !v.is_finite())
                || net.layer_biases(l).iter().any(|v| !v.is_finite())
            {
                return Err(Error::schema("non-finite network parameter".to_string()));
            }
        }
    }
    for c in &pack.centroids {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema("non-finite centroid".to_string()));
        }
    }
    Ok(())
}

/// Serializes a pack to JSON. Numbers round-trip bit-exactly through
/// `load_pack`.
pub fn pack_to_json(pack: &ModelPack) -> Result<String> {
    let raw = RawPack {
        schema_version: PACK_SCHEMA_VERSION,
        num_classes: pack.num_classes,
        config: pack.config.clone(),
        encoder: net_to_raw(&pack.encoder),
        heads: pack.heads.iter().map(net_to_raw).collect(),
        centroids: pack.centroids.clone(),
        provenance: pack.provenance.clone(),
    };
    serde_json::to_string(&raw).map_err(|e| Error::schema(format!("pack serialization: {}", e)))
}

pub fn pack_from_json(text: &str) -> Result<ModelPack> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::schema("pack is missing schema_version".to_string()))?;
    if version != u64::from(PACK_SCHEMA_VERSION) {
        return Err(Error::Compat { found: version as u32, supported: PACK_SCHEMA_VERSION });
    }
    let raw: RawPack = serde_json::from_value(value)
        .map_err(|e| Error::schema(format!("pack layout: {}", e)))?;
    let encoder = net_from_raw(raw.encoder)?;
    let heads: Vec<FeedforwardNet> =
        raw.heads.into_iter().map(net_from_raw).collect::<Result<_>>()?;
    if heads.is_empty() {
        return Err(Error::schema("pack carries no heads".to_string()));
    }
    if raw.centroids.len() != heads.len() {
        return Err(Error::schema(format!(
            "{} centroids for {} heads",
            raw.centroids.len(),
            heads.len()
        )));
    }
    let feat = encoder.output_dim();
    for (i, c) in raw.centroids.iter().enumerate() {
        if c.len() != feat {
            return Err(Error::schema(format!(
                "centroid {} has {} dims, embeddings have {}",
                i,
                c.len(),
                feat
            )));
        }
    }
    for head in &heads {
        if head.input_dim() != feat {
            return Err(Error::schema(format!(
                "head expects {} inputs, embeddings have {}",
                head.input_dim(),
                feat
            )));
        }
        if head.output_dim() != raw.num_classes {
            return Err(Error::schema(format!(
                "head emits {} logits for {} classes",
                head.output_dim(),
                raw.num_classes
            )));
        }
    }
    let pack = ModelPack {
        encoder,
        heads,
        centroids: raw.centroids,
        num_classes: raw.num_classes,
        config: raw.config,
        provenance: raw.provenance,
    };
    check_finite(&pack)?;
    Ok(pack)
}

/// Writes the pack next to a temporary sibling first, then renames it
/// into place.
pub fn save_pack(path: &Path, pack: &ModelPack) -> Result<()> {
    let json = pack_to_json(pack)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json.as_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_pack(path: &Path) -> Result<ModelPack> {
    let text = fs::read_to_string(path)?;
    pack_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, shifted_family, split, SplitSpec};
    use crate::tde::{mine, TdeConfig};
    use approx::assert_relative_eq;

    fn tiny_pack() -> (ModelPack, Dataset) {
        let ds = generate_synthetic("tiny", &shifted_family(2, 3, 4, 1.0, 0.15), 8, 8, 77)
            .unwrap();
        let (train, val, test) = split(&ds, &SplitSpec::default()).unwrap();
        let config = TdeConfig {
            n_domains: 2,
            epochs: 3,
            m_step_passes: 2,
            encoder_hidden: vec![10, 5],
            head_hidden: vec![],
            seed: 9,
            ..TdeConfig::default()
        };
        let (pack, _, _) = mine(&train, &val, &config).unwrap();
        (pack, test)
    }

    #[test]
    fn argmax_tie_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[3.0]), 0);
    }

    #[test]
    fn hand_checked_confusion_accuracy_and_macro_f1() {
        let truth = [0, 0, 1, 1];
        let predicted = [0, 1, 1, 1];
        let (per_class, macro_f1) = macro_f1_of(&predicted, &truth, 2);
        assert_relative_eq!(per_class[0].precision, 1.0);
        assert_relative_eq!(per_class[0].recall, 0.5);
        assert_relative_eq!(per_class[0].f1, 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(per_class[1].precision, 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(per_class[1].recall, 1.0);
        assert_relative_eq!(per_class[1].f1, 0.8, max_relative = 1e-12);
        assert_relative_eq!(macro_f1, 11.0 / 15.0, max_relative = 1e-12);
    }

    #[test]
    fn macro_f1_averages_over_declared_classes_and_flags_absent_ones() {
        let truth = [0, 0, 1, 1];
        let predicted = [0, 0, 1, 1];
        let (per_class, macro_f1) = macro_f1_of(&predicted, &truth, 3);
        assert_eq!(per_class[2].support, 0);
        assert_relative_eq!(per_class[2].f1, 0.0);
        assert_relative_eq!(macro_f1, 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn evaluation_report_is_consistent_with_its_records() {
        let (pack, test) = tiny_pack();
        let records = predict(&pack, &test).unwrap();
        let report = evaluate(&pack, &test).unwrap();
        assert_eq!(report.n_samples, test.len());
        assert_eq!(report.per_domain_counts.iter().sum::<usize>(), test.len());
        let correct = records.iter().filter(|r| r.correct).count();
        assert_relative_eq!(report.accuracy, correct as f64 / test.len() as f64);
        let diag: usize = (0..test.num_classes).map(|c| report.confusion[c][c]).sum();
        assert_eq!(diag, correct);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, test.len());
    }

    #[test]
    fn only_the_routed_head_runs() {
        // Poison one head with NaN weights; samples routed to the other
        // must still come back clean.
        let (mut pack, test) = tiny_pack();
        let records = predict(&pack, &test).unwrap();
        let poisoned: usize =
            if records.iter().filter(|r| r.domain == 0).count() > 0 { 1 } else { 0 };
        let dims = pack.heads[poisoned].dims().to_vec();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..pack.heads[poisoned].layer_count() {
            let w = pack.heads[poisoned].layer_weights(l);
            weights.push(Matrix {
                rows: w.rows,
                cols: w.cols,
                data: vec![f64::NAN; w.data.len()],
            });
            biases.push(vec![f64::NAN; pack.heads[poisoned].layer_biases(l).len()]);
        }
        pack.heads[poisoned] = FeedforwardNet::from_parameters(dims, weights, biases).unwrap();
        let after = predict(&pack, &test).unwrap();
        for (a, b) in records.iter().zip(&after) {
            if a.domain != poisoned {
                assert_eq!(a, b);
            }
        }
        assert!(after.iter().any(|r| r.domain != poisoned));
    }

    #[test]
    fn pack_round_trips_bit_exactly() {
        let (pack, _) = tiny_pack();
        let json = pack_to_json(&pack).unwrap();
        let loaded = pack_from_json(&json).unwrap();
        assert_eq!(pack, loaded);
        assert_eq!(json, pack_to_json(&loaded).unwrap());
    }

    #[test]
    fn pack_files_survive_a_disk_round_trip() {
        let (pack, test) = tiny_pack();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pack.json");
        save_pack(&path, &pack).unwrap();
        let loaded = load_pack(&path).unwrap();
        assert_eq!(pack, loaded);
        assert_eq!(
            evaluate(&pack, &test).unwrap(),
            evaluate(&loaded, &test).unwrap()
        );
    }

    #[test]
    fn future_schema_versions_are_refused_by_version() {
        let (pack, _) = tiny_pack();
        let json = pack_to_json(&pack).unwrap();
        let bumped = json.replacen(
            &format!("\"schema_version\":{}", PACK_SCHEMA_VERSION),
            "\"schema_version\":99",
            1,
        );
        match pack_from_json(&bumped) {
            Err(Error::Compat { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, PACK_SCHEMA_VERSION);
            }
            other => panic!("expected a version error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncated_pack_is_a_parse_error() {
        let (pack, _) = tiny_pack();
        let json = pack_to_json(&pack).unwrap();
        let cut = &json[..json.len() / 2];
        match pack_from_json(cut) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected a parse error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn mismatched_centroid_count_is_rejected() {
        let (pack, _) = tiny_pack();
        let mut crippled = pack.clone();
        crippled.centroids.pop();
        let json = pack_to_json(&crippled).unwrap();
        assert!(matches!(pack_from_json(&json), Err(Error::Schema(_))));
    }

    #[test]
    fn undeployable_or_mismatched_inputs_are_rejected() {
        let (pack, test) = tiny_pack();
        let mut bare = pack.clone();
        bare.centroids.clear();
        assert!(predict(&bare, &test).is_err());
        let mut wrong = test.clone();
        wrong.num_classes = 7;
        assert!(predict(&pack, &wrong).is_err());
    }
}
