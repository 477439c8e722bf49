//! Labeled window datasets: JSON-lines storage, splitting, gravity
//! normalization, and a synthetic generator with controllable domain
//! shift.
//!
//! On disk a dataset is one header line followed by one record per line:
//!
//! ```text
//! {"name":"walk","num_classes":2,"window_len":3,"channels":2}
//! {"id":"a","label":0,"meta":{"domain":"0"},"window":[[0.1,0.2],[0.3,0.4],[0.5,0.6]]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;

/// Standard gravity in m/s^2, the divisor for accelerometer channels.
pub const STANDARD_GRAVITY: f64 = 9.80665;

/// One labeled window of multichannel readings, `window_len x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub meta: BTreeMap<String, String>,
    pub window: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub window_len: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

/// Ratios for a seeded train/validation/test split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed: 0 }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderDoc {
    name: String,
    num_classes: usize,
    window_len: usize,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordDoc {
    id: String,
    label: usize,
    meta: BTreeMap<String, String>,
    window: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flattens every window into a row, time-major: feature `t*C + c`.
    pub fn flattened(&self) -> Matrix {
        let cols = self.window_len * self.channels;
        let mut m = Matrix::zeros(self.samples.len(), cols);
        for (i, s) in self.samples.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&s.window.data);
        }
        m
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Dense indices for a meta attribute, numbering distinct values by
    /// first appearance. `None` when any sample lacks the key.
    pub fn meta_partition(&self, key: &str) -> Option<Vec<usize>> {
        let mut order: Vec<&str> = Vec::new();
        let mut out = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let v = s.meta.get(key)?;
            let idx = match order.iter().position(|&o| o == v) {
                Some(i) => i,
                None => {
                    order.push(v);
                    order.len() - 1
                }
            };
            out.push(idx);
        }
        Some(out)
    }

    /// New dataset holding clones of the selected samples.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            window_len: self.window_len,
            channels: self.channels,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.window_len == 0 || self.channels == 0 {
            return Err(Error::schema(format!(
                "header must be positive: num_classes={} window_len={} channels={}",
                self.num_classes, self.window_len, self.channels
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::schema("dataset has no records".to_string()));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::schema(format!("duplicate sample id {:?}", s.id)));
            }
            if s.label >= self.num_classes {
                return Err(Error::schema(format!(
                    "sample {:?} has label {} but the header declares {} classes",
                    s.id, s.label, self.num_classes
                )));
            }
            if s.window.rows != self.window_len || s.window.cols != self.channels {
                return Err(Error::schema(format!(
                    "sample {:?} window is {}x{}, header says {}x{}",
                    s.id, s.window.rows, s.window.cols, self.window_len, self.channels
                )));
            }
            if s.window.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(format!(
                    "sample {:?} contains a non-finite reading",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// Parses the JSON-lines dataset format from text. Empty lines are
/// skipped; any other malformed line reports its 1-based number.
pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (header_line, header_text) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "missing header line".to_string()))?;
    let header: HeaderDoc = serde_json::from_str(header_text)
        .map_err(|e| Error::parse(header_line + 1, e.to_string()))?;
    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let rec: RecordDoc = serde_json::from_str(line)
            .map_err(|e| Error::parse(lineno + 1, e.to_string()))?;
        let window = Matrix::from_rows(rec.window)
            .map_err(|e| Error::parse(lineno + 1, e.to_string()))?;
        samples.push(Sample { id: rec.id, label: rec.label, meta: rec.meta, window });
    }
    let ds = Dataset {
        name: header.name,
        num_classes: header.num_classes,
        window_len: header.window_len,
        channels: header.channels,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Serializes a dataset to the JSON-lines format. Float values use the
/// shortest decimal text that parses back to the identical bits, so
/// save/load round-trips are exact.
pub fn to_jsonl(ds: &Dataset) -> Result<String> {
    ds.validate()?;
    let header = HeaderDoc {
        name: ds.name.clone(),
        num_classes: ds.num_classes,
        window_len: ds.window_len,
        channels: ds.channels,
    };
    let mut out = serde_json::to_string(&header)
        .map_err(|e| Error::schema(e.to_string()))?;
    out.push('\n');
    for s in &ds.samples {
        let rec = RecordDoc {
            id: s.id.clone(),
            label: s.label,
            meta: s.meta.clone(),
            window: (0..s.window.rows).map(|t| s.window.row(t).to_vec()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::schema(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_jsonl(ds)?)?;
    Ok(())
}

/// Divides the masked channels by `g` so accelerometer axes read in units
/// of standard gravity. Channels outside the mask pass through.
pub fn normalize_gravity(ds: &Dataset, g: f64, accel_mask: &[bool]) -> Result<Dataset> {
    if !(g > 0.0) {
        return Err(Error::input(format!("gravity divisor must be > 0, got {}", g)));
    }
    if accel_mask.len() != ds.channels {
        return Err(Error::shape(format!(
            "mask covers {} channels, dataset has {}",
            accel_mask.len(),
            ds.channels
        )));
    }
    let mut out = ds.clone();
    for s in out.samples.iter_mut() {
        for t in 0..s.window.rows {
            let row = s.window.row_mut(t);
            for (c, v) in row.iter_mut().enumerate() {
                if accel_mask[c] {
                    *v /= g;
                }
            }
        }
    }
    Ok(out)
}

/// Seeded shuffle followed by a ratio cut into train/val/test.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    for (label, r) in [("train", spec.train), ("val", spec.val), ("test", spec.test)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::input(format!("{} ratio {} outside [0, 1]", label, r)));
        }
    }
    let sum = spec.train + spec.val + spec.test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("split ratios sum to {}, expected 1", sum)));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream_rng(spec.seed, "split", 0));
    let cut1 = (n as f64 * spec.train).round() as usize;
    let cut2 = (n as f64 * (spec.train + spec.val)).round() as usize;
    if cut1 == 0 || cut2 == cut1 || cut2 == n {
        return Err(Error::input(format!(
            "split {}/{}/{} of {} samples leaves an empty part",
            spec.train, spec.val, spec.test, n
        )));
    }
    Ok((
        ds.subset(&order[..cut1]),
        ds.subset(&order[cut1..cut2]),
        ds.subset(&order[cut2..]),
    ))
}

/// One sinusoid of a class motif.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Motif {
    /// Cycles per window.
    pub freq: f64,
    pub phase: f64,
    pub amplitude: f64,
}

/// Generative description of one synthetic domain.
///
/// A sample of class `y` is built channel-wise from the motif stack
/// `raw[c](t) = amp * sin(2*pi*freq*t/T + phase + 2*pi*c/C)`, then mixed
/// across channels, scaled, offset, and perturbed:
/// `window = channel_mix * raw * amplitude_scale + channel_bias + drift + noise`.
/// `drift` is a per-sample channel offset, constant across the window,
/// drawn with standard deviation `drift_sigma`. It models the DC wander
/// a sensor picks up between recordings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthDomainSpec {
    pub channel_mix: Vec<Vec<f64>>,
    pub channel_bias: Vec<f64>,
    pub amplitude_scale: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub drift_sigma: f64,
    pub class_motifs: Vec<Motif>,
}

fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
        }
    }
    det
}

fn standard_normal(r: &mut impl Rng) -> f64 {
    // Box-Muller from two uniforms; u1 shifted into (0, 1].
    let u1 = 1.0 - r.gen::<f64>();
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn validate_specs(specs: &[SynthDomainSpec]) -> Result<(usize, usize)> {
    if specs.is_empty() {
        return Err(Error::input("no domain specs".to_string()));
    }
    let channels = specs[0].channel_bias.len();
    let classes = specs[0].class_motifs.len();
    if channels == 0 || classes == 0 {
        return Err(Error::input("domain spec with zero channels or classes".to_string()));
    }
    for (d, spec) in specs.iter().enumerate() {
        if spec.channel_bias.len() != channels || spec.class_motifs.len() != classes {
            return Err(Error::shape(format!("domain {} disagrees on channels or classes", d)));
        }
        if spec.channel_mix.len() != channels
            || spec.channel_mix.iter().any(|r| r.len() != channels)
        {
            return Err(Error::shape(format!(
                "domain {} channel_mix is not {}x{}",
                d, channels, channels
            )));
        }
        if determinant(&spec.channel_mix).abs() < 1e-9 {
            return Err(Error::input(format!("domain {} channel_mix is singular", d)));
        }
        if !(spec.amplitude_scale > 0.0) {
            return Err(Error::input(format!("domain {} amplitude_scale must be > 0", d)));
        }
        if !(spec.noise_sigma >= 0.0) {
            return Err(Error::input(format!("domain {} noise_sigma must be >= 0", d)));
        }
        if !(spec.drift_sigma >= 0.0) {
            return Err(Error::input(format!("domain {} drift_sigma must be >= 0", d)));
        }
    }
    Ok((channels, classes))
}

/// Draws `samples_per_class` windows per class per domain. Ground truth
/// lands in `meta["domain"]`. Each sample draws noise from its own RNG
/// stream keyed by `(seed, running index)`, so output depends only on the
/// seed and the specs.
pub fn generate_synthetic(
    name: &str,
    specs: &[SynthDomainSpec],
    window_len: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    let (channels, classes) = validate_specs(specs)?;
    if window_len == 0 || samples_per_class == 0 {
        return Err(Error::input("window_len and samples_per_class must be >= 1".to_string()));
    }
    let mut samples = Vec::with_capacity(specs.len() * classes * samples_per_class);
    let mut counter: u64 = 0;
    let t_div = window_len as f64;
    // Samples interleave classes within each domain, the way a recording
    // session cycles through activities, so any contiguous stretch of the
    // file mixes classes while staying domain-pure.
    for (d, spec) in specs.iter().enumerate() {
        for i in 0..samples_per_class {
            for y in 0..classes {
                let motif = spec.class_motifs[y];
                let mut r = rng::stream_rng(seed, "synth", counter);
                counter += 1;
                let mut window = Matrix::zeros(window_len, channels);
                let mut raw = vec![0.0; channels];
                for t in 0..window_len {
                    let base = std::f64::consts::TAU * motif.freq * t as f64 / t_div + motif.phase;
                    for (c, rv) in raw.iter_mut().enumerate() {
                        *rv = motif.amplitude
                            * (base + std::f64::consts::TAU * c as f64 / channels as f64).sin();
                    }
                    let row = window.row_mut(t);
                    for (c, out) in row.iter_mut().enumerate() {
                        let mixed: f64 = spec.channel_mix[c]
                            .iter()
                            .zip(&raw)
                            .map(|(m, v)| m * v)
                            .sum();
                        *out = mixed * spec.amplitude_scale
                            + spec.channel_bias[c]
                            + spec.noise_sigma * standard_normal(&mut r);
                    }
                }
                if spec.drift_sigma > 0.0 {
                    let drift: Vec<f64> = (0..channels)
                        .map(|_| spec.drift_sigma * standard_normal(&mut r))
                        .collect();
                    for t in 0..window_len {
                        for (out, dv) in window.row_mut(t).iter_mut().zip(&drift) {
                            *out += dv;
                        }
                    }
                }
                let mut meta = BTreeMap::new();
                meta.insert("domain".to_string(), d.to_string());
                samples.push(Sample {
                    id: format!("d{}-c{}-{}", d, y, i),
                    label: y,
                    meta,
                    window,
                });
            }
        }
    }
    let ds = Dataset {
        name: name.to_string(),
        num_classes: classes,
        window_len,
        channels,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Walsh-style sign, +1 or -1, used to hand each domain a distinct bias
/// direction.
fn sign_pattern(k: usize, c: usize) -> f64 {
    if ((k & c).count_ones() & 1) == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A family of `domains` shifted copies of one labeled problem.
///
/// Domain `d` rotates adjacent channel pairs by `shift * d / (domains-1)`
/// quarter turns, offsets channels along a distinct sign pattern, rescales
/// amplitude slightly, and relabels motifs by the cyclic shift `y -> y+d`.
/// At `shift = 0` every domain collapses to the same distribution (the
/// label rotation stays). `shift` grows the covariate gap continuously.
pub fn shifted_family(
    domains: usize,
    classes: usize,
    channels: usize,
    shift: f64,
    noise: f64,
) -> Vec<SynthDomainSpec> {
    let base_motifs: Vec<Motif> = (0..classes)
        .map(|y| Motif {
            freq: 1.0 + y as f64,
            phase: 0.37 * y as f64,
            amplitude: 1.0,
        })
        .collect();
    (0..domains)
        .map(|d| {
            let frac = if domains > 1 { d as f64 / (domains - 1) as f64 } else { 0.0 };
            let angle = shift * frac * std::f64::consts::FRAC_PI_2;
            let mut mix = vec![vec![0.0; channels]; channels];
            let (sin, cos) = angle.sin_cos();
            let mut c = 0;
            while c + 1 < channels {
                mix[c][c] = cos;
                mix[c][c + 1] = -sin;
                mix[c + 1][c] = sin;
                mix[c + 1][c + 1] = cos;
                c += 2;
            }
            if c < channels {
                mix[c][c] = 1.0;
            }
            let bias: Vec<f64> = (0..channels)
                .map(|ch| 1.2 * shift * sign_pattern(d, ch))
                .collect();
            SynthDomainSpec {
                channel_mix: mix,
                channel_bias: bias,
                amplitude_scale: 1.0 + 0.25 * shift * (frac - 0.5),
                noise_sigma: noise,
                drift_sigma: 0.0,
                class_motifs: (0..classes)
                    .map(|y| base_motifs[(y + d) % classes])
                    .collect(),
            }
        })
        .collect()
}

/// One domain, no shift: the i.i.d. control for the shifted family.
pub fn single_domain_family(classes: usize, channels: usize, noise: f64) -> Vec<SynthDomainSpec> {
    shifted_family(1, classes, channels, 0.0, noise)
}

/// A family where the domains disagree about what the labels mean.
///
/// Every domain emits the same motif stack through an identity mix, but
/// domain `d` reads motif `m` as class `(m - d) mod classes`, so no single
/// predictor can satisfy all domains at once. Domains differ only by a
/// channel offset of `1.2 * separation` along distinct sign patterns plus
/// per-sample sensor drift of width `drift`. The offset and the drift are
/// constant across each window, which keeps them out of the subspace the
/// motifs occupy.
pub fn conflicting_family(
    domains: usize,
    classes: usize,
    channels: usize,
    separation: f64,
    noise: f64,
    drift: f64,
) -> Vec<SynthDomainSpec> {
    let base_motifs: Vec<Motif> = (0..classes)
        .map(|y| Motif {
            freq: 1.0 + y as f64,
            phase: 0.37 * y as f64,
            amplitude: 1.0,
        })
        .collect();
    (0..domains)
        .map(|d| {
            let mut mix = vec![vec![0.0; channels]; channels];
            for (c, row) in mix.iter_mut().enumerate() {
                row[c] = 1.0;
            }
            SynthDomainSpec {
                channel_mix: mix,
                channel_bias: (0..channels)
                    .map(|ch| 1.2 * separation * sign_pattern(d, ch))
                    .collect(),
                amplitude_scale: 1.0,
                noise_sigma: noise,
                drift_sigma: drift,
                class_motifs: (0..classes)
                    .map(|y| base_motifs[(y + d) % classes])
                    .collect(),
            }
        })
        .collect()
}
