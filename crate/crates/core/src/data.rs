//! Dataset ingestion, long-tail subsampling, uniform label-noise
//! injection, and the clean-meta split, all with provenance tracking so
//! experiments are replayable.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApamError, Result};
use crate::textmodel::mix_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub text: String,
    pub label: usize,
    pub original_label: usize,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Class id → original label string, in first-seen order.
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Per-class example counts by current (possibly corrupted) label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    pub fn ids(&self) -> HashSet<usize> {
        self.examples.iter().map(|e| e.id).collect()
    }

    /// Re-key class ids against a canonical label order. First-seen
    /// mapping depends on file order, so datasets read separately must be
    /// aligned through this before they can be compared.
    pub fn remap_labels(&mut self, canonical: &[String]) -> Result<()> {
        let index: BTreeMap<&str, usize> = canonical
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let lookup = |old: usize| -> Result<usize> {
            let name = self.labels.get(old).ok_or_else(|| {
                ApamError::Ingest(format!("class id {old} out of range"))
            })?;
            index.get(name.as_str()).copied().ok_or_else(|| {
                ApamError::Ingest(format!("label {name:?} missing from label map"))
            })
        };
        let mapped: Vec<(usize, usize)> = self
            .examples
            .iter()
            .map(|ex| Ok((lookup(ex.label)?, lookup(ex.original_label)?)))
            .collect::<Result<_>>()?;
        for (ex, (label, original)) in self.examples.iter_mut().zip(mapped) {
            ex.label = label;
            ex.original_label = original;
        }
        self.labels = canonical.to_vec();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rho: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(ApamError::Config(format!(
                "noise ratio must be in [0,1], got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Train/meta/test partition with pairwise-disjoint ids.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub meta: Dataset,
    pub test: Dataset,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let (t, m, s) = (self.train.ids(), self.meta.ids(), self.test.ids());
        if !t.is_disjoint(&m) || !t.is_disjoint(&s) || !m.is_disjoint(&s) {
            return Err(ApamError::Config(
                "train/meta/test splits share example ids".into(),
            ));
        }
        if self.meta.examples.iter().any(|e| e.corrupted)
            || self.test.examples.iter().any(|e| e.corrupted)
        {
            return Err(ApamError::Config(
                "meta and test splits must be clean".into(),
            ));
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&self.train, &dir.join("train.jsonl"))?;
        write_jsonl(&self.meta, &dir.join("meta.jsonl"))?;
        write_jsonl(&self.test, &dir.join("test.jsonl"))?;
        write_label_map(&self.train.labels, &dir.join("label_map.json"))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<DatasetSplit> {
        let labels = read_label_map(&dir.join("label_map.json"))?;
        let load = |name: &str| -> Result<Dataset> {
            let mut d = ingest(&dir.join(name))?;
            d.remap_labels(&labels)?;
            Ok(d)
        };
        let split = DatasetSplit {
            train: load("train.jsonl")?,
            meta: load("meta.jsonl")?,
            test: load("test.jsonl")?,
        };
        split.validate()?;
        Ok(split)
    }
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: serde_json::Value,
    #[serde(default)]
    id: Option<usize>,
    #[serde(default)]
    original_label: Option<serde_json::Value>,
    #[serde(default)]
    corrupted: Option<bool>,
}

/// Read a JSONL dataset. Labels (string or integer) are mapped to
/// contiguous ids in first-seen order. Provenance fields are honored when
/// present so corrupted datasets replay exactly.
pub fn ingest(path: &Path) -> Result<Dataset> {
    let file = File::open(path)
        .map_err(|e| ApamError::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut label_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels: Vec<String> = Vec::new();
    let mut examples = Vec::new();

    let mut intern = |value: &serde_json::Value, line_no: usize| -> Result<usize> {
        let key = match value {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) if n.is_u64() || n.is_i64() => n.to_string(),
            other => {
                return Err(ApamError::Ingest(format!(
                    "line {line_no}: label must be a string or integer, got {other}"
                )))
            }
        };
        Ok(*label_ids.entry(key.clone()).or_insert_with(|| {
            labels.push(key);
            labels.len() - 1
        }))
    };

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| ApamError::Ingest(format!("line {line_no}: {e}")))?;
        let label = intern(&raw.label, line_no)?;
        let original_label = match &raw.original_label {
            Some(v) => intern(v, line_no)?,
            None => label,
        };
        examples.push(Example {
            id: raw.id.unwrap_or(i),
            text: raw.text,
            label,
            original_label,
            corrupted: raw.corrupted.unwrap_or(false),
        });
    }
    if examples.is_empty() {
        return Err(ApamError::Ingest(format!(
            "no examples in {}",
            path.display()
        )));
    }
    Ok(Dataset { examples, labels })
}

/// Write a dataset with all provenance fields.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in &dataset.examples {
        let rec = serde_json::json!({
            "id": ex.id,
            "text": ex.text,
            "label": dataset.labels.get(ex.label).cloned().unwrap_or_else(|| ex.label.to_string()),
            "original_label": dataset.labels.get(ex.original_label).cloned().unwrap_or_else(|| ex.original_label.to_string()),
            "corrupted": ex.corrupted,
        });
        writeln!(w, "{rec}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_label_map(labels: &[String], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_label_map(path: &Path) -> Result<Vec<String>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Largest class count divided by smallest class count.
pub fn imbalance_factor(dataset: &Dataset) -> Result<f64> {
    let counts = dataset.class_counts();
    let max = counts.iter().max().copied().unwrap_or(0);
    let min = counts.iter().min().copied().unwrap_or(0);
    if min == 0 {
        return Err(ApamError::contract(
            "imbalance_factor",
            "every class must have at least one example",
        ));
    }
    Ok(max as f64 / min as f64)
}

/// Subsample to an exponential long-tail profile: class k (ordered by
/// descending original size) keeps `round(n_0 · μ^{k/(C−1)})` examples
/// with `μ = 1/target_if`. Sampling is uniform without replacement.
pub fn make_longtail(
    dataset: &Dataset,
    target_if: f64,
    seed: u64,
    head_cap: Option<usize>,
) -> Result<Dataset> {
    if target_if < 1.0 {
        return Err(ApamError::Config(format!(
            "imbalance factor must be >= 1, got {target_if}"
        )));
    }
    let c = dataset.num_classes();
    let counts = dataset.class_counts();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let n0 = head_cap
        .map(|cap| cap.min(counts[order[0]]))
        .unwrap_or(counts[order[0]]);
    let mu = 1.0 / target_if;

    let mut keep: Vec<usize> = vec![0; c];
    for (k, &class) in order.iter().enumerate() {
        let frac = if c == 1 { 0.0 } else { k as f64 / (c - 1) as f64 };
        let want = (n0 as f64 * mu.powf(frac)).round() as usize;
        if want == 0 {
            return Err(ApamError::Config(format!(
                "target imbalance {target_if} drives class {class} to zero examples"
            )));
        }
        if want > counts[class] {
            return Err(ApamError::Config(format!(
                "class {class} has only {} examples but the profile requires {want}",
                counts[class]
            )));
        }
        keep[class] = want;
    }

    let mut examples = Vec::new();
    for class in 0..c {
        let mut members: Vec<&Example> = dataset
            .examples
            .iter()
            .filter(|e| e.label == class)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class as u64));
        members.shuffle(&mut rng);
        examples.extend(members.into_iter().take(keep[class]).cloned());
    }
    examples.sort_by_key(|e| e.id);
    Ok(Dataset {
        examples,
        labels: dataset.labels.clone(),
    })
}

/// Uniform label noise: each included example is, with probability ρ,
/// redrawn uniformly over all C classes (the draw may land on the original
/// label). Randomness is derived per example id so thread count and
/// iteration order cannot change the outcome.
pub fn inject_uniform_noise(
    dataset: &Dataset,
    spec: NoiseSpec,
    exclude: &HashSet<usize>,
) -> Result<Dataset> {
    spec.validate()?;
    let c = dataset.num_classes();
    let mut out = dataset.clone();
    if c <= 1 {
        return Ok(out);
    }
    for ex in &mut out.examples {
        if exclude.contains(&ex.id) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, ex.id as u64));
        if rng.gen::<f64>() < spec.rho {
            let new_label = rng.gen_range(0..c);
            ex.label = new_label;
            ex.corrupted = new_label != ex.original_label;
        }
    }
    Ok(out)
}

/// Carve out the clean meta set. Balanced mode draws
/// `⌈fraction·|dataset|/C⌉` per class (capped at class size); unbalanced
/// mode draws class-proportionally, totalling `round(fraction·|dataset|)`.
pub fn split_meta(
    dataset: &Dataset,
    fraction: f64,
    balanced: bool,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(ApamError::Config(format!(
            "meta fraction must be in (0,1), got {fraction}"
        )));
    }
    let c = dataset.num_classes();
    let n = dataset.len();
    let counts = dataset.class_counts();

    let take_per_class: Vec<usize> = if balanced {
        let per = (fraction * n as f64 / c as f64).ceil() as usize;
        for (class, &cnt) in counts.iter().enumerate() {
            if cnt == 0 {
                return Err(ApamError::Config(format!(
                    "balanced meta split impossible: class {class} is empty"
                )));
            }
        }
        counts.iter().map(|&cnt| per.min(cnt)).collect()
    } else {
        // floor allocation plus largest-remainder so the total is exact
        let total = (fraction * n as f64).round() as usize;
        let mut take: Vec<usize> = counts
            .iter()
            .map(|&cnt| (fraction * cnt as f64).floor() as usize)
            .collect();
        let mut rem: Vec<(usize, f64)> = counts
            .iter()
            .enumerate()
            .map(|(k, &cnt)| (k, fraction * cnt as f64 - take[k] as f64))
            .collect();
        rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let assigned: usize = take.iter().sum();
        for (k, _) in rem.iter().cycle().take(total.saturating_sub(assigned)) {
            if take[*k] < counts[*k] {
                take[*k] += 1;
            }
        }
        take
    };

    let mut meta_ids: HashSet<usize> = HashSet::new();
    for class in 0..c {
        let mut members: Vec<usize> = dataset
            .examples
            .iter()
            .filter(|e| e.label == class)
            .map(|e| e.id)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6d657461 ^ class as u64));
        members.shuffle(&mut rng);
        meta_ids.extend(members.into_iter().take(take_per_class[class]));
    }

    let mut train = Dataset {
        examples: Vec::new(),
        labels: dataset.labels.clone(),
    };
    let mut meta = Dataset {
        examples: Vec::new(),
        labels: dataset.labels.clone(),
    };
    for ex in &dataset.examples {
        if meta_ids.contains(&ex.id) {
            meta.examples.push(ex.clone());
        } else {
            train.examples.push(ex.clone());
        }
    }
    Ok((train, meta))
}

pub mod synth {
    //! Cluster-vocabulary synthetic text task used by the experiment
    //! harness and regression tests. Each class owns a word cluster;
    //! documents mix class words with a shared common vocabulary.

    use super::*;

    #[derive(Debug, Clone, Copy, Serialize, Deserialize)]
    pub struct SynthConfig {
        pub num_classes: usize,
        pub examples_per_class: usize,
        pub words_per_class: usize,
        pub common_words: usize,
        /// Probability that a token comes from the class cluster.
        pub class_word_prob: f64,
        pub min_len: usize,
        pub max_len: usize,
        pub seed: u64,
    }

    impl Default for SynthConfig {
        fn default() -> Self {
            SynthConfig {
                num_classes: 10,
                examples_per_class: 1000,
                words_per_class: 40,
                common_words: 120,
                class_word_prob: 0.7,
                min_len: 6,
                max_len: 16,
                seed: 0,
            }
        }
    }

    pub fn generate(cfg: &SynthConfig) -> Dataset {
        let mut examples = Vec::new();
        let mut id = 0;
        for class in 0..cfg.num_classes {
            for i in 0..cfg.examples_per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    cfg.seed,
                    (class * cfg.examples_per_class + i) as u64,
                ));
                let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                let mut tokens = Vec::with_capacity(len);
                for _ in 0..len {
                    if rng.gen::<f64>() < cfg.class_word_prob {
                        let w = rng.gen_range(0..cfg.words_per_class);
                        tokens.push(format!("c{class}w{w}"));
                    } else {
                        let w = rng.gen_range(0..cfg.common_words);
                        tokens.push(format!("shared{w}"));
                    }
                }
                examples.push(Example {
                    id,
                    text: tokens.join(" "),
                    label: class,
                    original_label: class,
                    corrupted: false,
                });
                id += 1;
            }
        }
        let labels = (0..cfg.num_classes).map(|c| format!("class_{c}")).collect();
        Dataset { examples, labels }
    }
}
