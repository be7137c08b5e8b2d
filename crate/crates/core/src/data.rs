//! Synthetic identity/attribute data with a controllable attribute–identity
//! correlation.
//!
//! Each identity owns a latent vector and a set of base attribute bits. Per
//! image, attribute `j` inherits its identity's base bit with probability
//! `ρ_j` (identity stability) and is resampled from the base rate otherwise,
//! so `ρ = 1` makes an attribute a fixed identity code and `ρ = 0` makes it
//! pure per-image noise. Features mix the identity latent, the ±1-centered
//! attribute bits, and Gaussian noise through fixed random matrices.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::VerificationPair;
use crate::rng;

/// The five region groups and their mode-notation letters.
pub const GROUP_LETTERS: [(&str, char); 5] = [
    ("Periocular", 'P'),
    ("Mouth", 'M'),
    ("Nose", 'N'),
    ("Hair", 'H'),
    ("Accessories", 'A'),
];

pub fn group_letter(group: &str) -> Option<char> {
    GROUP_LETTERS
        .iter()
        .find(|(g, _)| *g == group)
        .map(|(_, c)| *c)
}

pub fn group_for_letter(letter: char) -> Option<&'static str> {
    GROUP_LETTERS
        .iter()
        .find(|(_, c)| *c == letter)
        .map(|(g, _)| *g)
}

/// One binary attribute: its group, marginal rate, and identity stability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub group: String,
    /// Marginal probability of the bit being set, in (0, 1).
    pub base_rate: f64,
    /// Probability an image inherits the identity's base bit, in [0, 1].
    pub identity_stability: f64,
}

fn default_eval_identity_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub attribute_specs: Vec<AttributeSpec>,
    pub noise_sigma: f64,
    pub attribute_signal_beta: f64,
    /// Fraction of identities held out for evaluation; identity-disjoint
    /// from the training split.
    #[serde(default = "default_eval_identity_fraction")]
    pub eval_identity_fraction: f64,
    pub seed: u64,
}

/// Group profile with sizes 5/2/2/8/2 and stabilities tuned so Hair is a
/// strong identity code and Accessories nearly pure noise.
pub fn default_attribute_specs() -> Vec<AttributeSpec> {
    let mut specs = Vec::new();
    let profile: [(&str, usize, f64); 5] = [
        ("Periocular", 5, 0.85),
        ("Mouth", 2, 0.70),
        ("Nose", 2, 0.85),
        ("Hair", 8, 0.95),
        ("Accessories", 2, std::env::var("ATF_RHO_A").ok().and_then(|v| v.parse().ok()).unwrap_or(0.20)),
    ];
    for (group, count, stability) in profile {
        for i in 0..count {
            specs.push(AttributeSpec {
                name: format!("{}_{i}", group.to_lowercase()),
                group: group.to_string(),
                base_rate: 0.5,
                identity_stability: stability,
            });
        }
    }
    specs
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_identities: 200,
            images_per_identity: 30,
            latent_dim: 32,
            input_dim: 128,
            attribute_specs: default_attribute_specs(),
            noise_sigma: 0.5,
            attribute_signal_beta: 0.5,
            eval_identity_fraction: 0.25,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("num_identities", "need at least 2"));
        }
        if self.images_per_identity == 0 {
            return Err(Error::config("images_per_identity", "must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        if self.input_dim < self.latent_dim {
            return Err(Error::config("input_dim", "must be at least latent_dim"));
        }
        if self.attribute_specs.is_empty() {
            return Err(Error::config("attribute_specs", "must not be empty"));
        }
        let mut names = HashSet::new();
        for spec in &self.attribute_specs {
            if !names.insert(spec.name.as_str()) {
                return Err(Error::config(
                    "attribute_specs",
                    format!("duplicate attribute name `{}`", spec.name),
                ));
            }
            if group_letter(&spec.group).is_none() {
                return Err(Error::config(
                    "attribute_specs",
                    format!(
                        "attribute `{}` has unknown group `{}`",
                        spec.name, spec.group
                    ),
                ));
            }
            if !(spec.base_rate > 0.0 && spec.base_rate < 1.0) {
                return Err(Error::config(
                    "base_rate",
                    format!("attribute `{}`: must lie in (0, 1)", spec.name),
                ));
            }
            if !(0.0..=1.0).contains(&spec.identity_stability) {
                return Err(Error::config(
                    "identity_stability",
                    format!("attribute `{}`: must lie in [0, 1]", spec.name),
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be nonnegative"));
        }
        if !(self.attribute_signal_beta >= 0.0 && self.attribute_signal_beta.is_finite()) {
            return Err(Error::config("attribute_signal_beta", "must be nonnegative"));
        }
        if !(self.eval_identity_fraction > 0.0 && self.eval_identity_fraction < 1.0) {
            return Err(Error::config(
                "eval_identity_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        Ok(())
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_specs.len()
    }

    /// Identities `[0, n_train)` are the training split.
    pub fn num_train_identities(&self) -> usize {
        let n_eval = ((self.num_identities as f64) * self.eval_identity_fraction).round() as usize;
        self.num_identities - n_eval.clamp(1, self.num_identities - 1)
    }

    /// Group names in first-appearance order with their attribute indices.
    pub fn group_slices(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (idx, spec) in self.attribute_specs.iter().enumerate() {
            match out.iter_mut().find(|(g, _)| *g == spec.group) {
                Some((_, v)) => v.push(idx),
                None => out.push((spec.group.clone(), vec![idx])),
            }
        }
        out
    }

    pub fn group_sizes(&self) -> Vec<(String, usize)> {
        self.group_slices()
            .into_iter()
            .map(|(g, v)| (g, v.len()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub identity: usize,
    pub attributes: Vec<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        self.indices(Split::Eval)
    }
}

/// Draw the dataset described by `config`. Deterministic given the seed:
/// per-identity latents and base bits, per-image bit inheritance, fixed
/// mixing matrices, and Gaussian pixel noise each use a named stream.
pub fn generate(config: &DatasetConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let seed = config.seed;
    let d = config.input_dim;
    let l = config.latent_dim;
    let k = config.num_attributes();

    // Fixed mixing matrices, normalized so the identity latent contributes
    // noise-comparable per-dimension variance and one attribute bit O(1/k).
    // The 0.25 identity gain leaves verification unsaturated at desk scale,
    // which is where supervision effects are measurable.
    let mut rng_a = rng::stream(seed, "data:matrix-a");
    let a_scale = 0.25 / (l as f64).sqrt();
    let mat_a: Vec<f64> = (0..d * l).map(|_| a_scale * normal(&mut rng_a)).collect();
    // Per-attribute mixing scale: every region group contributes the same
    // total feature energy, split evenly among its attributes.
    let mut rng_b = rng::stream(seed, "data:matrix-b");
    let b_env: f64 = std::env::var("ATF_B").ok().and_then(|v| v.parse().ok()).unwrap_or(1.5);
    let group_sizes = config.group_sizes();
    let num_groups = group_sizes.len() as f64;
    let attr_scale: Vec<f64> = config
        .attribute_specs
        .iter()
        .map(|s| {
            let size = group_sizes
                .iter()
                .find(|(g, _)| *g == s.group)
                .map(|(_, n)| *n)
                .unwrap_or(1) as f64;
            b_env / (num_groups * size).sqrt()
        })
        .collect();
    let mat_b: Vec<f64> = (0..d * k)
        .map(|i| attr_scale[i % k] * normal(&mut rng_b))
        .collect();

    let mut rng_latent = rng::stream(seed, "data:latents");
    let mut rng_base = rng::stream(seed, "data:base-bits");
    let mut rng_bits = rng::stream(seed, "data:image-bits");
    let mut rng_noise = rng::stream(seed, "data:noise");

    let n_train = config.num_train_identities();
    let mut samples = Vec::with_capacity(config.num_identities * config.images_per_identity);

    for identity in 0..config.num_identities {
        let latent: Vec<f64> = (0..l).map(|_| normal(&mut rng_latent)).collect();
        let base_bits: Vec<u8> = config
            .attribute_specs
            .iter()
            .map(|s| u8::from(rng_base.random_bool(s.base_rate)))
            .collect();
        let split = if identity < n_train {
            Split::Train
        } else {
            Split::Eval
        };

        for _ in 0..config.images_per_identity {
            let attributes: Vec<u8> = config
                .attribute_specs
                .iter()
                .zip(&base_bits)
                .map(|(s, &b)| {
                    if rng_bits.random_bool(s.identity_stability) {
                        b
                    } else {
                        u8::from(rng_bits.random_bool(s.base_rate))
                    }
                })
                .collect();

            let mut features = vec![0.0; d];
            for (i, f) in features.iter_mut().enumerate() {
                let mut v = 0.0;
                for (j, &u) in latent.iter().enumerate() {
                    v += mat_a[i * l + j] * u;
                }
                for (j, &a) in attributes.iter().enumerate() {
                    v += config.attribute_signal_beta
                        * mat_b[i * k + j]
                        * (2.0 * f64::from(a) - 1.0);
                }
                v += config.noise_sigma * normal(&mut rng_noise);
                *f = v;
            }

            samples.push(Sample {
                features,
                identity,
                attributes,
                split,
            });
        }
    }

    Ok(SyntheticDataset {
        config: config.clone(),
        samples,
    })
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Balanced genuine/impostor pairs over the eval split, partitioned into 10
/// identity-disjoint folds. Exactly `num_pairs/2` of each kind; sampling is
/// without replacement wherever the fold population allows.
pub fn make_verification_pairs(
    dataset: &SyntheticDataset,
    num_pairs: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    make_pairs_impl(dataset, Split::Eval, num_pairs, seed, 10)
}

/// Balanced pairs from one split without fold structure (`fold = 0`),
/// for attribute-only protocols. Genuine and impostor pairs are interleaved
/// and drawn without replacement in one pass, so any even-length slice is
/// balanced and any two disjoint slices are disjoint pair sets.
pub fn make_flat_pairs(
    dataset: &SyntheticDataset,
    split: Split,
    num_pairs: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    let pairs = make_pairs_impl(dataset, split, num_pairs, seed, 1)?;
    let half = pairs.len() / 2;
    let mut interleaved = Vec::with_capacity(pairs.len());
    for i in 0..half {
        interleaved.push(pairs[i]);
        interleaved.push(pairs[half + i]);
    }
    Ok(interleaved)
}

/// Largest even pair count (≤ `requested`) the split can support with
/// without-replacement genuine sampling, with headroom for the per-fold
/// rejection sampler.
pub fn supported_pair_count(dataset: &SyntheticDataset, split: Split, requested: usize) -> usize {
    let mut per_identity: std::collections::HashMap<usize, usize> = Default::default();
    for s in dataset.samples.iter().filter(|s| s.split == split) {
        *per_identity.entry(s.identity).or_insert(0) += 1;
    }
    let genuine_population: usize = per_identity.values().map(|&n| n * (n - 1) / 2).sum();
    let cap = genuine_population * 8 / 10;
    requested.min(cap) & !1
}

fn make_pairs_impl(
    dataset: &SyntheticDataset,
    split: Split,
    num_pairs: usize,
    seed: u64,
    num_folds: usize,
) -> Result<Vec<VerificationPair>> {
    if num_pairs == 0 || !num_pairs.is_multiple_of(2) {
        return Err(Error::data(format!(
            "num_pairs must be even and positive, got {num_pairs}"
        )));
    }
    // Identities present in the split, with their sample indices.
    let mut by_identity: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.split != split {
            continue;
        }
        match by_identity.iter_mut().find(|(id, _)| *id == s.identity) {
            Some((_, v)) => v.push(i),
            None => by_identity.push((s.identity, vec![i])),
        }
    }
    let multi_image = by_identity.iter().filter(|(_, v)| v.len() >= 2).count();
    if by_identity.len() < 2 || multi_image < 2 {
        return Err(Error::data(format!(
            "split has {} identities ({} with ≥2 images); need at least 2 of each",
            by_identity.len(),
            multi_image
        )));
    }

    // Assign identities to folds: shuffled, then round-robin, so no identity
    // spans folds. Small populations use fewer folds so each still holds the
    // two identities impostor pairs need.
    let folds_used = num_folds.min(by_identity.len() / 2).max(1);
    let mut rng = rng::stream(seed, "pairs");
    let mut order: Vec<usize> = (0..by_identity.len()).collect();
    shuffle(&mut order, &mut rng);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); folds_used];
    for (pos, &idx) in order.iter().enumerate() {
        folds[pos % folds_used].push(idx);
    }

    let genuine_total = num_pairs / 2;
    let impostor_total = num_pairs / 2;
    let quota = |total: usize, f: usize| total / folds_used + usize::from(f < total % folds_used);

    let mut pairs = Vec::with_capacity(num_pairs);
    for (f, fold_ids) in folds.iter().enumerate() {
        let g_quota = quota(genuine_total, f);
        let i_quota = quota(impostor_total, f);

        let genuine_candidates: Vec<usize> = fold_ids
            .iter()
            .cloned()
            .filter(|&i| by_identity[i].1.len() >= 2)
            .collect();
        let genuine_population: usize = genuine_candidates
            .iter()
            .map(|&i| {
                let n = by_identity[i].1.len();
                n * (n - 1) / 2
            })
            .sum();
        if genuine_population < g_quota {
            return Err(Error::data(format!(
                "fold {f}: need {g_quota} genuine pairs but population is {genuine_population}"
            )));
        }
        if fold_ids.len() < 2 && i_quota > 0 {
            return Err(Error::data(format!(
                "fold {f}: need {i_quota} impostor pairs but fold has {} identity",
                fold_ids.len()
            )));
        }

        let mut used: HashSet<(usize, usize)> = HashSet::new();
        let mut drawn = 0;
        let mut attempts = 0usize;
        while drawn < g_quota {
            attempts += 1;
            if attempts > g_quota.max(1) * 10_000 {
                return Err(Error::data(format!(
                    "fold {f}: exhausted genuine pair sampling after {attempts} attempts"
                )));
            }
            let id = genuine_candidates[rng.random_range(0..genuine_candidates.len())];
            let imgs = &by_identity[id].1;
            let x = imgs[rng.random_range(0..imgs.len())];
            let y = imgs[rng.random_range(0..imgs.len())];
            if x == y {
                continue;
            }
            let key = (x.min(y), x.max(y));
            if !used.insert(key) {
                continue;
            }
            pairs.push(VerificationPair {
                left: key.0,
                right: key.1,
                genuine: true,
                fold: f,
            });
            drawn += 1;
        }

        let mut drawn = 0;
        let mut attempts = 0usize;
        while drawn < i_quota {
            attempts += 1;
            if attempts > i_quota.max(1) * 10_000 {
                return Err(Error::data(format!(
                    "fold {f}: exhausted impostor pair sampling after {attempts} attempts"
                )));
            }
            let ia = fold_ids[rng.random_range(0..fold_ids.len())];
            let ib = fold_ids[rng.random_range(0..fold_ids.len())];
            if ia == ib {
                continue;
            }
            let x = by_identity[ia].1[rng.random_range(0..by_identity[ia].1.len())];
            let y = by_identity[ib].1[rng.random_range(0..by_identity[ib].1.len())];
            let key = (x.min(y), x.max(y));
            if !used.insert(key) {
                continue;
            }
            pairs.push(VerificationPair {
                left: key.0,
                right: key.1,
                genuine: false,
                fold: f,
            });
            drawn += 1;
        }
    }
    Ok(pairs)
}

fn shuffle(slice: &mut [usize], rng: &mut impl Rng) {
    for i in (1..slice.len()).rev() {
        let j = rng.random_range(0..=i);
        slice.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Dataset file format: versioned binary, little-endian. Layout: magic,
// version u32, config JSON (u64 length + bytes), run tag (u64 length +
// bytes, may be empty), num_samples u64, input_dim u64, num_attributes u64,
// then columnar arrays: identities u64, splits u8, attribute bits u8,
// features f64.
// ---------------------------------------------------------------------------

const DATA_MAGIC: &[u8; 8] = b"ATFDATA\0";
const DATA_VERSION: u32 = 1;

pub fn save(dataset: &SyntheticDataset, path: &Path) -> Result<()> {
    save_tagged(dataset, path, None)
}

/// Save with a run identifier embedded in the header.
pub fn save_tagged(dataset: &SyntheticDataset, path: &Path, run_id: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&dataset.config)?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let tag = run_id.unwrap_or("").as_bytes();
    w.write_all(&(tag.len() as u64).to_le_bytes())?;
    w.write_all(tag)?;
    let n = dataset.samples.len();
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(dataset.config.input_dim as u64).to_le_bytes())?;
    w.write_all(&(dataset.config.num_attributes() as u64).to_le_bytes())?;
    for s in &dataset.samples {
        w.write_all(&(s.identity as u64).to_le_bytes())?;
    }
    for s in &dataset.samples {
        w.write_all(&[match s.split {
            Split::Train => 0u8,
            Split::Eval => 1u8,
        }])?;
    }
    for s in &dataset.samples {
        w.write_all(&s.attributes)?;
    }
    for s in &dataset.samples {
        for &v in &s.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SyntheticDataset> {
    load_tagged(path).map(|(dataset, _)| dataset)
}

/// Load a dataset and the run identifier it was saved with, if any.
pub fn load_tagged(path: &Path) -> Result<(SyntheticDataset, Option<String>)> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, &pstr, "magic")?;
    if &magic != DATA_MAGIC {
        return Err(Error::format(&pstr, "bad magic bytes (not a dataset)"));
    }
    let version = read_u32(&mut r, &pstr)?;
    if version != DATA_VERSION {
        return Err(Error::format(
            &pstr,
            format!("unsupported dataset version {version}"),
        ));
    }
    let config_len = read_u64(&mut r, &pstr)? as usize;
    let mut config_buf = vec![0u8; config_len];
    read_exact(&mut r, &mut config_buf, &pstr, "config")?;
    let config: DatasetConfig = serde_json::from_slice(&config_buf)?;
    config.validate()?;
    let tag_len = read_u64(&mut r, &pstr)? as usize;
    let mut tag_buf = vec![0u8; tag_len];
    read_exact(&mut r, &mut tag_buf, &pstr, "run tag")?;
    let run_id = if tag_buf.is_empty() {
        None
    } else {
        Some(String::from_utf8(tag_buf).map_err(|_| Error::format(&pstr, "run tag is not UTF-8"))?)
    };

    let n = read_u64(&mut r, &pstr)? as usize;
    let d = read_u64(&mut r, &pstr)? as usize;
    let k = read_u64(&mut r, &pstr)? as usize;
    if n != config.num_identities * config.images_per_identity {
        return Err(Error::format(
            &pstr,
            format!(
                "header claims {n} samples, config implies {}",
                config.num_identities * config.images_per_identity
            ),
        ));
    }
    if d != config.input_dim {
        return Err(Error::format(
            &pstr,
            format!("header input_dim {d} does not match config {}", config.input_dim),
        ));
    }
    if k != config.num_attributes() {
        return Err(Error::format(
            &pstr,
            format!(
                "header claims {k} attributes, config defines {}",
                config.num_attributes()
            ),
        ));
    }

    let mut identities = Vec::with_capacity(n);
    for _ in 0..n {
        identities.push(read_u64(&mut r, &pstr)? as usize);
    }
    let mut splits = vec![0u8; n];
    read_exact(&mut r, &mut splits, &pstr, "splits")?;
    let mut bits = vec![0u8; n * k];
    read_exact(&mut r, &mut bits, &pstr, "attributes")?;

    let mut samples = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for i in 0..n {
        let mut features = Vec::with_capacity(d);
        for _ in 0..d {
            read_exact(&mut r, &mut buf, &pstr, "features")?;
            features.push(f64::from_le_bytes(buf));
        }
        let identity = identities[i];
        if identity >= config.num_identities {
            return Err(Error::format(
                &pstr,
                format!("identity {identity} out of range at sample {i}"),
            ));
        }
        let attributes = bits[i * k..(i + 1) * k].to_vec();
        if attributes.iter().any(|&b| b > 1) {
            return Err(Error::format(&pstr, format!("non-binary attribute at sample {i}")));
        }
        let split = match splits[i] {
            0 => Split::Train,
            1 => Split::Eval,
            other => {
                return Err(Error::format(
                    &pstr,
                    format!("unknown split tag {other} at sample {i}"),
                ))
            }
        };
        samples.push(Sample {
            features,
            identity,
            attributes,
            split,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format(&pstr, "trailing bytes after feature block"));
    }
    Ok((SyntheticDataset { config, samples }, run_id))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, "u32")?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, "u64")?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> DatasetConfig {
        DatasetConfig {
            num_identities: 40,
            images_per_identity: 6,
            latent_dim: 4,
            input_dim: 8,
            attribute_specs: vec![
                AttributeSpec {
                    name: "hair_0".into(),
                    group: "Hair".into(),
                    base_rate: 0.5,
                    identity_stability: 1.0,
                },
                AttributeSpec {
                    name: "accessories_0".into(),
                    group: "Accessories".into(),
                    base_rate: 0.3,
                    identity_stability: 0.0,
                },
            ],
            noise_sigma: 0.5,
            attribute_signal_beta: 0.5,
            eval_identity_fraction: 0.25,
            seed,
        }
    }

    /// Fraction of within-identity image pairs agreeing on attribute `j`.
    fn within_identity_agreement(ds: &SyntheticDataset, j: usize) -> (f64, usize) {
        let mut agree = 0usize;
        let mut total = 0usize;
        let per = ds.config.images_per_identity;
        for chunk in ds.samples.chunks(per) {
            for w in chunk.windows(2) {
                total += 1;
                agree += usize::from(w[0].attributes[j] == w[1].attributes[j]);
            }
        }
        (agree as f64 / total as f64, total)
    }

    #[test]
    fn stability_one_fixes_bits_per_identity() {
        let ds = generate(&small_config(1)).unwrap();
        let per = ds.config.images_per_identity;
        for chunk in ds.samples.chunks(per) {
            let first = chunk[0].attributes[0];
            assert!(chunk.iter().all(|s| s.attributes[0] == first));
        }
    }

    #[test]
    fn stability_zero_agreement_matches_collision_rate() {
        // ~10k within-identity adjacent pairs; agreement must approach
        // p² + (1−p)² within 3 standard errors.
        let mut cfg = small_config(2);
        cfg.num_identities = 500;
        cfg.images_per_identity = 21;
        let ds = generate(&cfg).unwrap();
        let (rate, n) = within_identity_agreement(&ds, 1);
        let p = 0.3;
        let expect = p * p + (1.0 - p) * (1.0 - p);
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!(
            (rate - expect).abs() < 3.0 * se,
            "rate {rate}, expect {expect}, se {se}"
        );
    }

    #[test]
    fn no_noise_no_signal_collapses_identity_features() {
        let mut cfg = small_config(3);
        cfg.noise_sigma = 0.0;
        cfg.attribute_signal_beta = 0.0;
        let ds = generate(&cfg).unwrap();
        let per = cfg.images_per_identity;
        for chunk in ds.samples.chunks(per) {
            for s in chunk {
                assert_eq!(s.features, chunk[0].features);
            }
        }
    }

    #[test]
    fn marginal_rate_within_three_standard_errors() {
        let mut cfg = small_config(4);
        cfg.num_identities = 300;
        cfg.images_per_identity = 20;
        cfg.attribute_specs[1].identity_stability = 0.5;
        let ds = generate(&cfg).unwrap();
        let n = ds.samples.len();
        let rate = ds.samples.iter().map(|s| s.attributes[1] as usize).sum::<usize>() as f64
            / n as f64;
        let p = 0.3;
        // Bits within an identity are correlated, so the 3·SE bound uses an
        // effective sample size of one draw per identity.
        let se = (p * (1.0 - p) / cfg.num_identities as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * se, "rate {rate}, se {se}");
    }

    #[test]
    fn agreement_monotone_in_stability() {
        let mut last = 0.0;
        for (i, rho) in [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().enumerate() {
            let mut cfg = small_config(7);
            cfg.num_identities = 400;
            cfg.images_per_identity = 10;
            cfg.attribute_specs[0].identity_stability = rho;
            let ds = generate(&cfg).unwrap();
            let (rate, _) = within_identity_agreement(&ds, 0);
            if i > 0 {
                assert!(
                    rate >= last,
                    "agreement decreased from {last} to {rate} at ρ={rho}"
                );
            }
            last = rate;
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small_config(9);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn split_is_identity_disjoint() {
        let ds = generate(&small_config(5)).unwrap();
        let train: HashSet<usize> = ds.train_indices().iter().map(|&i| ds.samples[i].identity).collect();
        let eval: HashSet<usize> = ds.eval_indices().iter().map(|&i| ds.samples[i].identity).collect();
        assert!(train.is_disjoint(&eval));
        assert!(!train.is_empty() && !eval.is_empty());
    }

    #[test]
    fn pairs_balanced_and_fold_disjoint() {
        let ds = generate(&small_config(6)).unwrap();
        let pairs = make_verification_pairs(&ds, 20, 0).unwrap();
        assert_eq!(pairs.len(), 20);
        assert_eq!(pairs.iter().filter(|p| p.genuine).count(), 10);
        // Identity-disjoint folds: an identity appears in exactly one fold.
        let mut fold_of: std::collections::HashMap<usize, usize> = Default::default();
        for p in &pairs {
            for idx in [p.left, p.right] {
                let id = ds.samples[idx].identity;
                if let Some(&f) = fold_of.get(&id) {
                    assert_eq!(f, p.fold, "identity {id} spans folds");
                } else {
                    fold_of.insert(id, p.fold);
                }
            }
        }
        // Impostor pairs: identities always differ.
        for p in pairs.iter().filter(|p| !p.genuine) {
            assert_ne!(ds.samples[p.left].identity, ds.samples[p.right].identity);
        }
    }

    #[test]
    fn pairs_deterministic_under_seed() {
        let ds = generate(&small_config(6)).unwrap();
        let a = make_verification_pairs(&ds, 40, 3).unwrap();
        let b = make_verification_pairs(&ds, 40, 3).unwrap();
        assert_eq!(a, b);
        let c = make_verification_pairs(&ds, 40, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pairs_insufficient_population_names_shortfall() {
        let mut cfg = small_config(6);
        cfg.num_identities = 12; // 3 eval identities: 45 genuine pairs exist
        let ds = generate(&cfg).unwrap();
        let err = make_verification_pairs(&ds, 200, 0).unwrap_err().to_string();
        assert!(err.contains("genuine") && err.contains("population"), "{err}");
    }

    #[test]
    fn odd_pair_count_rejected() {
        let ds = generate(&small_config(6)).unwrap();
        assert!(make_verification_pairs(&ds, 21, 0).is_err());
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let ds = generate(&small_config(8)).unwrap();
        save(&ds, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(ds, loaded);

        let path2 = dir.path().join("data2.bin");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let ds = generate(&small_config(8)).unwrap();
        save(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version field follows the 8-byte magic
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn load_rejects_corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let ds = generate(&small_config(8)).unwrap();
        save(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn load_rejects_attribute_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let ds = generate(&small_config(8)).unwrap();
        save(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // The attribute-count field sits after magic(8) + version(4) +
        // config length(8) + config + tag length(8) + tag(0) + samples(8)
        // + input_dim(8).
        let config_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let attr_off = 20 + config_len + 8 + 16;
        bytes[attr_off] = bytes[attr_off].wrapping_add(1);
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("attributes"), "{err}");
    }

    #[test]
    fn config_validation_names_bad_field() {
        let mut cfg = small_config(0);
        cfg.attribute_specs[0].identity_stability = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("identity_stability"), "{err}");
    }
}
