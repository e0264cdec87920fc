//! Prompt grid × seed sweep with captures, automatic presence labels and
//! the on-disk store (`manifest.jsonl` plus binary tensors).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, sample_with_capture, CapturedStep, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{derive_seed, run_seed, SplitMix64};
use crate::scene::{build_conditional_mixture, Catalog, MixtureSpec, Prompt};
use crate::tensor_io::{read_grid, write_grid};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CRITICAL_STEPS: [usize; 18] =
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20, 25, 40];

/// Faithfulness that puts two-object completeness at 0.59.
pub const DEFAULT_FAITHFULNESS: f64 = 0.768115;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub subjects: Vec<String>,
    pub objects: Vec<String>,
    pub seeds_per_prompt: usize,
    pub steps: usize,
    pub critical_steps: Vec<usize>,
    pub faithfulness: f64,
    pub label_threshold: f64,
    pub global_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            subjects: Catalog::default_subjects(),
            objects: Catalog::default_items(),
            seeds_per_prompt: 12,
            steps: 50,
            critical_steps: DEFAULT_CRITICAL_STEPS.to_vec(),
            faithfulness: DEFAULT_FAITHFULNESS,
            label_threshold: DEFAULT_LABEL_THRESHOLD,
            global_seed: 2024,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.objects.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        if self.seeds_per_prompt == 0 {
            return Err(Error::InvalidConfig("seeds_per_prompt must be at least 1".into()));
        }
        if self.steps < 2 {
            return Err(Error::InvalidT(self.steps));
        }
        if let Some(&s) = self.critical_steps.iter().find(|&&s| s >= self.steps) {
            return Err(Error::InvalidConfig(format!(
                "critical step {s} outside [0, {})",
                self.steps
            )));
        }
        let mut sorted = self.critical_steps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.critical_steps.len() {
            return Err(Error::InvalidConfig("critical steps contain duplicates".into()));
        }
        if !(self.faithfulness > 0.0 && self.faithfulness <= 1.0) {
            return Err(Error::InvalidFaithfulness(self.faithfulness));
        }
        if !(self.label_threshold > 0.0 && self.label_threshold < 1.0) {
            return Err(Error::InvalidConfig("label threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Critical steps in ascending (generation) order.
    pub fn sorted_steps(&self) -> Vec<usize> {
        let mut s = self.critical_steps.clone();
        s.sort_unstable();
        s
    }
}

/// `|A|·|B|` prompts `a {subject} and a {object}`, subject-major.
pub fn build_prompt_grid(config: &DatasetConfig, catalog: &Catalog) -> Result<Vec<Prompt>> {
    if config.subjects.is_empty() || config.objects.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut prompts = Vec::with_capacity(config.subjects.len() * config.objects.len());
    for a in &config.subjects {
        for b in &config.objects {
            let text = Prompt::render(&[a.clone(), b.clone()]);
            prompts.push(Prompt::parse(&text, catalog)?);
        }
    }
    Ok(prompts)
}

/// Normalized matched-filter response `⟨image, g⟩ / ‖g‖²`.
pub fn matched_response(image: &Grid, template: &Grid) -> f64 {
    let norm = template.norm_sq();
    if norm == 0.0 {
        0.0
    } else {
        image.dot(template) / norm
    }
}

/// Best matched-filter response of each object over its candidate positions.
pub fn best_responses(image: &Grid, mixture: &MixtureSpec) -> Vec<f64> {
    (0..mixture.objects().len())
        .map(|o| {
            mixture
                .templates(o)
                .iter()
                .map(|g| matched_response(image, g))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Presence labels from a matched filter: object `o` is present iff its best
/// response over candidate positions reaches `threshold`.
pub fn label_image(image: &Grid, targets: &[String], catalog: &Catalog, threshold: f64) -> Result<Vec<u8>> {
    let mut labels = Vec::with_capacity(targets.len());
    for id in targets {
        let spec = catalog.require(id)?;
        let best = spec
            .positions
            .iter()
            .map(|&p| matched_response(image, &spec.placed_template(p, image.height())))
            .fold(f64::NEG_INFINITY, f64::max);
        labels.push(u8::from(best >= threshold));
    }
    Ok(labels)
}

/// [`label_image`] reusing the templates already placed in `mixture`.
pub fn label_with_mixture(image: &Grid, mixture: &MixtureSpec, threshold: f64) -> Vec<u8> {
    best_responses(image, mixture)
        .into_iter()
        .map(|r| u8::from(r >= threshold))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: String,
    pub prompt_id: usize,
    pub seed_index: usize,
    pub seed: u64,
    /// One label per target, prompt order.
    pub labels: Vec<u8>,
    pub nearest_component: usize,
    /// Ordered by generation step; values carry `f32` precision.
    pub captures: Vec<CapturedStep>,
    pub final_image: Grid,
}

impl LabeledSample {
    pub fn is_complete(&self) -> bool {
        self.labels.iter().all(|&l| l == 1)
    }

    pub fn capture_at(&self, step: usize) -> Result<&CapturedStep> {
        self.captures
            .iter()
            .find(|c| c.step == step)
            .ok_or(Error::MissingCapture(step))
    }
}

pub fn sample_id(prompt_id: usize, seed_index: usize) -> String {
    format!("p{prompt_id:04}_s{seed_index:03}")
}

/// A generated dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub catalog: Catalog,
    pub prompts: Vec<Prompt>,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn mixture(&self, prompt_id: usize) -> Result<MixtureSpec> {
        let prompt = &self.prompts[prompt_id];
        let q = vec![self.config.faithfulness; prompt.targets.len()];
        build_conditional_mixture(&prompt.targets, &q, &self.catalog)
    }

    pub fn samples_for<'a>(&'a self, prompt_ids: &'a [usize]) -> impl Iterator<Item = &'a LabeledSample> + 'a {
        self.samples
            .iter()
            .filter(move |s| prompt_ids.contains(&s.prompt_id))
    }

    pub fn stats(&self) -> DatasetStats {
        dataset_stats(&self.prompts, &self.samples)
    }
}

/// Runs every `(prompt, seed)` generation, labels the final image, and keeps
/// the captures. Output order and content depend only on the config.
pub fn generate_dataset(config: &DatasetConfig, catalog: &Catalog) -> Result<Dataset> {
    config.validate()?;
    let prompts = build_prompt_grid(config, catalog)?;
    let schedule = make_schedule(config.steps)?;
    let mixtures: Vec<MixtureSpec> = prompts
        .iter()
        .map(|p| build_conditional_mixture(&p.targets, &vec![config.faithfulness; p.targets.len()], catalog))
        .collect::<Result<_>>()?;
    let tasks: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..config.seeds_per_prompt).map(move |s| (p, s)))
        .collect();
    let samples = tasks
        .par_iter()
        .map(|&(p, s)| generate_sample(config, &schedule, &mixtures[p], p, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        catalog: catalog.clone(),
        prompts,
        samples,
    })
}

fn generate_sample(
    config: &DatasetConfig,
    schedule: &NoiseSchedule,
    mixture: &MixtureSpec,
    prompt_id: usize,
    seed_index: usize,
) -> Result<LabeledSample> {
    let seed = run_seed(config.global_seed, prompt_id as u64, seed_index as u64);
    let record = sample_with_capture(mixture, schedule, prompt_id, seed, &config.critical_steps)?;
    let final_image = record.final_image.quantized();
    let labels = label_with_mixture(&final_image, mixture, config.label_threshold);
    Ok(LabeledSample {
        sample_id: sample_id(prompt_id, seed_index),
        prompt_id,
        seed_index,
        seed,
        labels,
        nearest_component: record.nearest_component,
        captures: record.captures.iter().map(CapturedStep::quantized).collect(),
        final_image,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub prompt_id: usize,
    pub samples: usize,
    pub complete: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub complete_fraction: f64,
    /// Fraction of prompts with at least one complete sample.
    pub at_least_1: f64,
    /// Fraction of prompts with at least three complete samples.
    pub at_least_3: f64,
    /// Marginal presence rate per object id.
    pub object_presence: BTreeMap<String, f64>,
    /// Marginal presence rate per target slot (prompt position).
    pub slot_presence: Vec<f64>,
    pub per_prompt: Vec<PromptStats>,
}

pub fn dataset_stats(prompts: &[Prompt], samples: &[LabeledSample]) -> DatasetStats {
    let mut per_prompt: Vec<PromptStats> = (0..prompts.len())
        .map(|prompt_id| PromptStats {
            prompt_id,
            samples: 0,
            complete: 0,
        })
        .collect();
    let mut object_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut slot_counts: Vec<(usize, usize)> = Vec::new();
    for s in samples {
        let ps = &mut per_prompt[s.prompt_id];
        ps.samples += 1;
        ps.complete += usize::from(s.is_complete());
        for (slot, (id, &label)) in prompts[s.prompt_id].targets.iter().zip(&s.labels).enumerate() {
            let e = object_counts.entry(id.clone()).or_default();
            e.0 += usize::from(label);
            e.1 += 1;
            if slot_counts.len() <= slot {
                slot_counts.resize(slot + 1, (0, 0));
            }
            slot_counts[slot].0 += usize::from(label);
            slot_counts[slot].1 += 1;
        }
    }
    let complete: usize = per_prompt.iter().map(|p| p.complete).sum();
    let active: Vec<&PromptStats> = per_prompt.iter().filter(|p| p.samples > 0).collect();
    let rate = |k: usize| {
        if active.is_empty() {
            0.0
        } else {
            active.iter().filter(|p| p.complete >= k).count() as f64 / active.len() as f64
        }
    };
    DatasetStats {
        samples: samples.len(),
        complete_fraction: if samples.is_empty() {
            0.0
        } else {
            complete as f64 / samples.len() as f64
        },
        at_least_1: rate(1),
        at_least_3: rate(3),
        object_presence: object_counts
            .into_iter()
            .map(|(k, (p, n))| (k, p as f64 / n as f64))
            .collect(),
        slot_presence: slot_counts.iter().map(|&(p, n)| p as f64 / n as f64).collect(),
        per_prompt,
    }
}

/// Prompt-disjoint train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Splits {
    /// Seeded 70/15/15 shuffle of prompt ids. Each id list is sorted.
    pub fn by_prompt(n_prompts: usize, seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..n_prompts).collect();
        SplitMix64::new(derive_seed(&[seed, 0x5711])).shuffle(&mut ids);
        let n_train = (n_prompts as f64 * 0.70).round() as usize;
        let n_val = (n_prompts as f64 * 0.15).round() as usize;
        let n_val = n_val.min(n_prompts - n_train);
        let mut train = ids[..n_train].to_vec();
        let mut validation = ids[n_train..n_train + n_val].to_vec();
        let mut test = ids[n_train + n_val..].to_vec();
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        Self {
            train,
            validation,
            test,
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        format_version: u32,
        config: DatasetConfig,
        catalog: String,
    },
    Prompt {
        prompt_id: usize,
        text: String,
        targets: Vec<String>,
        samples: usize,
        complete: usize,
        at_least_1: bool,
        at_least_3: bool,
    },
    Sample {
        sample_id: String,
        prompt_id: usize,
        seed_index: usize,
        seed: u64,
        labels: Vec<u8>,
        nearest_component: usize,
        captures: Vec<CaptureRecord>,
        final_image: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptureRecord {
    step: usize,
    t: usize,
    epsilon_norm: f64,
    pfi: String,
    attention: Vec<(String, String)>,
}

fn tensor_rel(sample_id: &str, name: &str) -> String {
    format!("tensors/{sample_id}/{name}.bin")
}

impl Dataset {
    /// Writes `manifest.jsonl` and every tensor under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stats = self.stats();
        let mut records = Vec::with_capacity(1 + self.prompts.len() + self.samples.len());
        records.push(Record::Header {
            format_version: MANIFEST_VERSION,
            config: self.config.clone(),
            catalog: self.catalog.to_table(),
        });
        for (p, ps) in self.prompts.iter().zip(&stats.per_prompt) {
            records.push(Record::Prompt {
                prompt_id: ps.prompt_id,
                text: p.text.clone(),
                targets: p.targets.clone(),
                samples: ps.samples,
                complete: ps.complete,
                at_least_1: ps.complete >= 1,
                at_least_3: ps.complete >= 3,
            });
        }
        let written: Vec<Record> = self
            .samples
            .par_iter()
            .map(|s| save_sample(dir, s))
            .collect::<Result<_>>()?;
        records.extend(written);

        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for r in &records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut header = None;
        let mut prompts = Vec::new();
        let mut pending = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line)? {
                Record::Header {
                    format_version,
                    config,
                    catalog,
                } => {
                    if format_version != MANIFEST_VERSION {
                        return Err(Error::Manifest(format!(
                            "unsupported format version {format_version}"
                        )));
                    }
                    header = Some((config, Catalog::parse(&catalog)?));
                }
                Record::Prompt { text, targets, .. } => prompts.push(Prompt { text, targets }),
                sample @ Record::Sample { .. } => pending.push(sample),
            }
        }
        let (config, catalog) = header.ok_or_else(|| Error::Manifest("missing header".into()))?;
        let samples: Vec<LabeledSample> = pending
            .into_par_iter()
            .map(|r| load_sample(dir, r))
            .collect::<Result<_>>()?;
        if samples.len() != prompts.len() * config.seeds_per_prompt {
            return Err(Error::Manifest(format!(
                "{} samples for {} prompts x {} seeds",
                samples.len(),
                prompts.len(),
                config.seeds_per_prompt
            )));
        }
        Ok(Self {
            config,
            catalog,
            prompts,
            samples,
        })
    }
}

fn save_sample(dir: &Path, s: &LabeledSample) -> Result<Record> {
    let mut captures = Vec::with_capacity(s.captures.len());
    for c in &s.captures {
        let pfi = tensor_rel(&s.sample_id, &format!("{}_pfi", c.step));
        write_grid(&dir.join(&pfi), &c.pfi)?;
        let mut attention = Vec::with_capacity(c.attention.len());
        for (id, g) in &c.attention {
            let rel = tensor_rel(&s.sample_id, &format!("{}_attn_{id}", c.step));
            write_grid(&dir.join(&rel), g)?;
            attention.push((id.clone(), rel));
        }
        captures.push(CaptureRecord {
            step: c.step,
            t: c.t,
            epsilon_norm: c.epsilon_norm,
            pfi,
            attention,
        });
    }
    let final_image = tensor_rel(&s.sample_id, "final");
    write_grid(&dir.join(&final_image), &s.final_image)?;
    Ok(Record::Sample {
        sample_id: s.sample_id.clone(),
        prompt_id: s.prompt_id,
        seed_index: s.seed_index,
        seed: s.seed,
        labels: s.labels.clone(),
        nearest_component: s.nearest_component,
        captures,
        final_image,
    })
}

fn load_sample(dir: &Path, record: Record) -> Result<LabeledSample> {
    let Record::Sample {
        sample_id,
        prompt_id,
        seed_index,
        seed,
        labels,
        nearest_component,
        captures,
        final_image,
    } = record
    else {
        unreachable!("only sample records are loaded here");
    };
    let resolve = |rel: &str| -> PathBuf { dir.join(rel) };
    let mut loaded = Vec::with_capacity(captures.len());
    for c in captures {
        let attention = c
            .attention
            .iter()
            .map(|(id, rel)| Ok((id.clone(), read_grid(&resolve(rel))?)))
            .collect::<Result<Vec<_>>>()?;
        loaded.push(CapturedStep {
            step: c.step,
            t: c.t,
            pfi: read_grid(&resolve(&c.pfi))?,
            attention,
            epsilon_norm: c.epsilon_norm,
        });
    }
    Ok(LabeledSample {
        sample_id,
        prompt_id,
        seed_index,
        seed,
        labels,
        nearest_component,
        captures: loaded,
        final_image: read_grid(&resolve(&final_image))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::render_mean_image;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            subjects: vec!["cat".into(), "dog".into()],
            objects: vec!["bench".into()],
            seeds_per_prompt: 3,
            critical_steps: vec![8, 16],
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn prompt_grid_shape_and_order() {
        let cat = Catalog::builtin();
        let cfg = DatasetConfig::default();
        let grid = build_prompt_grid(&cfg, &cat).unwrap();
        assert_eq!(grid.len(), 60);
        assert_eq!(grid[0].text, "a cat and a bench");
        assert_eq!(grid[1].text, "a cat and a umbrella");
        assert_eq!(grid[6].text, "a dog and a bench");

        let empty = DatasetConfig {
            objects: vec![],
            ..DatasetConfig::default()
        };
        assert!(matches!(build_prompt_grid(&empty, &cat), Err(Error::EmptyCatalog)));
    }

    #[test]
    fn paper_scale_grid_count() {
        // 75 subjects x 12 objects on a synthetic catalog.
        let mut table = String::new();
        for i in 0..75 {
            table.push_str(&format!("s{i} 1.0 4:4\n"));
        }
        for j in 0..12 {
            table.push_str(&format!("o{j} 1.5 4:11\n"));
        }
        let cat = Catalog::parse(&table).unwrap();
        let cfg = DatasetConfig {
            subjects: (0..75).map(|i| format!("s{i}")).collect(),
            objects: (0..12).map(|j| format!("o{j}")).collect(),
            ..DatasetConfig::default()
        };
        assert_eq!(build_prompt_grid(&cfg, &cat).unwrap().len(), 900);
    }

    #[test]
    fn labels_on_clean_renders() {
        let cat = Catalog::builtin();
        let targets = vec!["cat".to_string(), "bench".to_string()];
        let m = build_conditional_mixture(&targets, &[0.8, 0.8], &cat).unwrap();
        for c in m.components() {
            let img = render_mean_image(&m, c);
            let expected: Vec<u8> = c.presence_pattern().iter().map(|&b| u8::from(b)).collect();
            assert_eq!(label_image(&img, &targets, &cat, 0.5).unwrap(), expected);
            assert_eq!(label_with_mixture(&img, &m, 0.5), expected);
        }
        assert_eq!(label_image(&Grid::zeros(16, 16), &targets, &cat, 0.5).unwrap(), vec![0, 0]);
    }

    #[test]
    fn labels_survive_pixel_noise() {
        let cat = Catalog::builtin();
        let targets = vec!["cat".to_string(), "bench".to_string()];
        let m = build_conditional_mixture(&targets, &[0.8, 0.8], &cat).unwrap();
        let comp = m
            .components()
            .iter()
            .find(|c| c.is_present(0) && !c.is_present(1))
            .unwrap();
        let clean = render_mean_image(&m, comp);
        let mut rng = SplitMix64::new(99);
        let mut agree = 0;
        for _ in 0..100 {
            let noisy = clean.map(|v| v + 0.05 * rng.next_gaussian());
            if label_image(&noisy, &targets, &cat, 0.5).unwrap() == vec![1, 0] {
                agree += 1;
            }
        }
        assert!(agree >= 99, "{agree}/100");
    }

    #[test]
    fn stats_on_hand_built_labels() {
        let cat = Catalog::builtin();
        let prompts = vec![Prompt::parse("a cat and a bench", &cat).unwrap()];
        let mk = |i: usize, labels: Vec<u8>| LabeledSample {
            sample_id: sample_id(0, i),
            prompt_id: 0,
            seed_index: i,
            seed: i as u64,
            labels,
            nearest_component: 0,
            captures: vec![],
            final_image: Grid::zeros(1, 1),
        };
        let samples = vec![
            mk(0, vec![1, 1]),
            mk(1, vec![1, 0]),
            mk(2, vec![0, 1]),
            mk(3, vec![1, 1]),
        ];
        let st = dataset_stats(&prompts, &samples);
        assert_eq!(st.complete_fraction, 0.5);
        assert_eq!(st.at_least_1, 1.0);
        assert_eq!(st.at_least_3, 0.0);
        assert_eq!(st.object_presence["cat"], 0.75);
        assert_eq!(st.slot_presence, vec![0.75, 0.75]);

        let all = vec![mk(0, vec![1, 1]), mk(1, vec![1, 1]), mk(2, vec![1, 1])];
        let st = dataset_stats(&prompts, &all);
        assert_eq!(
            (st.complete_fraction, st.at_least_1, st.at_least_3),
            (1.0, 1.0, 1.0)
        );
        assert!(st.object_presence.values().all(|&v| v == 1.0));
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let s = Splits::by_prompt(60, 7);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (42, 9, 9));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(s, Splits::by_prompt(60, 7));
        assert_ne!(s, Splits::by_prompt(60, 8));
    }

    #[test]
    fn generation_counts_and_save_load_round_trip() {
        let cat = Catalog::builtin();
        let cfg = small_config();
        let ds = generate_dataset(&cfg, &cat).unwrap();
        assert_eq!(ds.samples.len(), 6);
        assert!(ds.samples.iter().all(|s| s.labels.len() == 2 && s.captures.len() == 2));
        assert_eq!(ds.samples[0].captures[0].step, 8);

        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(dir.path().join("tensors/p0000_s000/8_attn_cat.bin").exists());
        assert!(dir.path().join("tensors/p0001_s002/final.bin").exists());

        let again = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, &cat).unwrap().save(again.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(again.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        let mut c = DatasetConfig::default();
        c.critical_steps.push(50);
        assert!(c.validate().is_err());
        let c = DatasetConfig {
            seeds_per_prompt: 0,
            ..DatasetConfig::default()
        };
        assert!(c.validate().is_err());
        DatasetConfig::default().validate().unwrap();
    }
}
