use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::numerics::{sample_indices, Digest, Hasher, StreamKey, StreamRole};

/// One scoring example: a prompt and its candidate continuations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub gold: usize,
}

impl Example {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let oob = |t: &u32| *t as usize >= vocab;
        if self.prompt.iter().any(oob) || self.options.iter().flatten().any(oob) {
            return Err(ZoError::input(format!(
                "token id out of range for vocab {vocab}"
            )));
        }
        if self.gold >= self.options.len() {
            return Err(ZoError::input(format!(
                "gold index {} out of {} options",
                self.gold,
                self.options.len()
            )));
        }
        if self.options.iter().any(|o| o.is_empty()) {
            return Err(ZoError::input("options must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minibatch {
    pub id: Digest,
    pub examples: Vec<Example>,
}

impl Minibatch {
    pub fn new(examples: Vec<Example>) -> Self {
        let mut h = Hasher::new();
        for ex in &examples {
            hash_example(&mut h, ex);
        }
        Self {
            id: h.finish(),
            examples,
        }
    }

    /// Placeholder batch for objectives that ignore data.
    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn hash_example(h: &mut Hasher, ex: &Example) {
    h.write_u64(ex.prompt.len() as u64);
    for &t in &ex.prompt {
        h.write_u64(t as u64);
    }
    h.write_u64(ex.options.len() as u64);
    for o in &ex.options {
        h.write_u64(o.len() as u64);
        for &t in o {
            h.write_u64(t as u64);
        }
    }
    h.write_u64(ex.gold as u64);
}

/// How labels are assigned to generated prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PlantedRule {
    /// Label 1 iff the marker token occurs in the prompt.
    MarkerPresence { marker: u32 },
}

impl PlantedRule {
    pub fn label(&self, prompt: &[u32]) -> usize {
        match self {
            PlantedRule::MarkerPresence { marker } => prompt.contains(marker) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub validation: usize,
    pub min_prompt_len: usize,
    pub max_prompt_len: usize,
    pub rule: PlantedRule,
    /// Option tokens for labels 0 and 1.
    pub option_tokens: [u32; 2],
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            train: 256,
            dev: 64,
            validation: 128,
            min_prompt_len: 4,
            max_prompt_len: 16,
            rule: PlantedRule::MarkerPresence { marker: 3 },
            option_tokens: [1, 2],
        }
    }
}

impl TaskConfig {
    fn reserved(&self) -> Vec<u32> {
        let PlantedRule::MarkerPresence { marker } = self.rule;
        vec![self.option_tokens[0], self.option_tokens[1], marker]
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.train == 0 || self.dev == 0 || self.validation == 0 {
            return Err(ZoError::config("task split sizes must be at least 1"));
        }
        if self.min_prompt_len == 0 || self.min_prompt_len > self.max_prompt_len {
            return Err(ZoError::config(
                "task prompt lengths must satisfy 1 <= min <= max",
            ));
        }
        let reserved = self.reserved();
        if reserved.iter().any(|&t| t as usize >= vocab) {
            return Err(ZoError::config(
                "reserved task tokens must be inside the vocabulary",
            ));
        }
        let mut uniq = reserved.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != 3 {
            return Err(ZoError::config("marker and option tokens must be distinct"));
        }
        if vocab <= reserved.len() {
            return Err(ZoError::config("vocabulary leaves no filler tokens"));
        }
        Ok(())
    }
}

/// Disjoint train/dev/validation pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplits {
    pub seed: u64,
    pub vocab: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub validation: Vec<Example>,
}

/// Generates a balanced synthetic classification task. Each split carries
/// exactly `⌊n/2⌋` or `⌈n/2⌉` positives, shuffled; prompts are unique across
/// all splits.
pub fn generate_task(config: &TaskConfig, vocab: usize) -> Result<TaskSplits> {
    config.validate(vocab)?;
    let PlantedRule::MarkerPresence { marker } = config.rule;
    let reserved = config.reserved();
    let fillers: Vec<u32> = (0..vocab as u32)
        .filter(|t| !reserved.contains(t))
        .collect();
    let mut rng = StreamKey::new(config.seed, 0, 0, StreamRole::Task).rng();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let options = vec![vec![config.option_tokens[0]], vec![config.option_tokens[1]]];

    let mut split = |n: usize| -> Result<Vec<Example>> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        let mut out = Vec::with_capacity(n);
        for label in labels {
            let mut attempts = 0;
            let prompt = loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(ZoError::config(
                        "task space too small for requested split sizes",
                    ));
                }
                let len = rng.random_range(config.min_prompt_len..=config.max_prompt_len);
                let mut p: Vec<u32> = (0..len)
                    .map(|_| fillers[rng.random_range(0..fillers.len())])
                    .collect();
                if label == 1 {
                    let pos = rng.random_range(0..len);
                    p[pos] = marker;
                }
                if seen.insert(p.clone()) {
                    break p;
                }
            };
            debug_assert_eq!(config.rule.label(&prompt), label);
            out.push(Example {
                prompt,
                options: options.clone(),
                gold: label,
            });
        }
        Ok(out)
    };
    let train = split(config.train)?;
    let dev = split(config.dev)?;
    let validation = split(config.validation)?;
    Ok(TaskSplits {
        seed: config.seed,
        vocab,
        train,
        dev,
        validation,
    })
}

impl TaskSplits {
    /// `batch_size` distinct training examples for `step`, drawn from the
    /// minibatch stream of `seed`.
    pub fn minibatch(&self, seed: u64, step: u64, batch_size: usize) -> Result<Minibatch> {
        let key = StreamKey::new(seed, step, 0, StreamRole::Minibatch);
        let idx = sample_indices(key, self.train.len(), batch_size)?;
        Ok(Minibatch::new(
            idx.into_iter().map(|i| self.train[i].clone()).collect(),
        ))
    }

    pub fn dev_pool(&self) -> Minibatch {
        Minibatch::new(self.dev.clone())
    }

    pub fn validation_pool(&self) -> Minibatch {
        Minibatch::new(self.validation.clone())
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        h.write_u64(self.seed);
        h.write_u64(self.vocab as u64);
        for split in [&self.train, &self.dev, &self.validation] {
            h.write_u64(split.len() as u64);
            for ex in split {
                hash_example(&mut h, ex);
            }
        }
        h.finish()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let t: Self = serde_json::from_reader(f)?;
        for ex in t.train.iter().chain(&t.dev).chain(&t.validation) {
            ex.validate(t.vocab)?;
        }
        Ok(t)
    }
}
