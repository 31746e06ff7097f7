use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, TokenizedExample, CLS_ID, DEFAULT_VOCAB_SIZE, FIRST_CONTENT_ID, SEP_ID};
use crate::error::{Error, Result};

/// Built-in synthetic tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    /// Classification by presence and order of two planted motif tokens.
    #[serde(rename = "patterns")]
    Patterns,
    /// Regression on a smooth function of motif token counts.
    #[serde(rename = "score")]
    Score,
    /// Unlabeled text from a seeded bigram grammar, for masked-LM training.
    #[serde(rename = "lm-stream")]
    LmStream,
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskName::Patterns => "patterns",
            TaskName::Score => "score",
            TaskName::LmStream => "lm-stream",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub name: TaskName,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    /// Tokens per example including `[CLS]` and `[SEP]`.
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Class count for `patterns` (2 or 4).
    pub num_labels: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            name: TaskName::Patterns,
            seed: 0,
            train_size: 2000,
            dev_size: 500,
            seq_len: 16,
            vocab_size: DEFAULT_VOCAB_SIZE,
            num_labels: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification(usize),
    Regression,
    LanguageModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub kind: TaskKind,
    pub train: Vec<TokenizedExample>,
    pub dev: Vec<TokenizedExample>,
}

/// The two motif tokens; filler tokens are drawn from the rest.
const MOTIF_A: u32 = FIRST_CONTENT_ID;
const MOTIF_B: u32 = FIRST_CONTENT_ID + 1;
const FIRST_FILLER: u32 = FIRST_CONTENT_ID + 2;

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.seq_len < 4 {
            problems.push(format!("seq_len must be at least 4, got {}", self.seq_len));
        }
        if self.vocab_size < FIRST_FILLER as usize + 4 {
            problems.push(format!("vocab_size {} too small for synthetic tasks", self.vocab_size));
        }
        if self.train_size == 0 || self.dev_size == 0 {
            problems.push("train_size and dev_size must be positive".into());
        }
        if self.name == TaskName::Patterns && !matches!(self.num_labels, 2 | 4) {
            problems.push(format!("patterns supports 2 or 4 labels, got {}", self.num_labels));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self.name {
            TaskName::Patterns => TaskKind::Classification(self.num_labels),
            TaskName::Score => TaskKind::Regression,
            TaskName::LmStream => TaskKind::LanguageModel,
        }
    }
}

/// Generates train and dev splits as a pure function of `spec`. Dev examples
/// never repeat a train sequence.
pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grammar = Grammar::new(spec.vocab_size, &mut rng);
    let gen = |rng: &mut ChaCha8Rng| -> TokenizedExample {
        match spec.name {
            TaskName::Patterns => patterns_example(spec, rng),
            TaskName::Score => score_example(spec, rng),
            TaskName::LmStream => grammar.example(spec.seq_len, rng),
        }
    };
    let train: Vec<_> = (0..spec.train_size).map(|_| gen(&mut rng)).collect();
    let seen: HashSet<&[u32]> = train.iter().map(|e| e.ids.as_slice()).collect();
    let mut dev = Vec::with_capacity(spec.dev_size);
    let mut attempts = 0usize;
    while dev.len() < spec.dev_size {
        attempts += 1;
        if attempts > 100 * spec.dev_size + 1000 {
            return Err(Error::Config(
                "cannot draw enough dev examples distinct from train".into(),
            ));
        }
        let e = gen(&mut rng);
        if !seen.contains(e.ids.as_slice()) {
            dev.push(e);
        }
    }
    Ok(Task {
        spec: spec.clone(),
        kind: spec.kind(),
        train,
        dev,
    })
}

fn wrap(content: Vec<u32>) -> Vec<u32> {
    let mut ids = Vec::with_capacity(content.len() + 2);
    ids.push(CLS_ID);
    ids.extend(content);
    ids.push(SEP_ID);
    ids
}

fn filler(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..spec.seq_len - 2)
        .map(|_| rng.gen_range(FIRST_FILLER..spec.vocab_size as u32))
        .collect()
}

/// Labels with four classes: 0 = only A, 1 = only B, 2 = A before B,
/// 3 = B before A. With two classes only the ordered cases occur.
fn patterns_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> TokenizedExample {
    let label = rng.gen_range(0..spec.num_labels);
    let class = if spec.num_labels == 2 { label + 2 } else { label };
    let mut content = filler(spec, rng);
    let len = content.len();
    match class {
        0 => content[rng.gen_range(0..len)] = MOTIF_A,
        1 => content[rng.gen_range(0..len)] = MOTIF_B,
        _ => {
            let mut picks: Vec<usize> = (0..len).collect();
            picks.shuffle(rng);
            let (first, second) = (picks[0].min(picks[1]), picks[0].max(picks[1]));
            let (early, late) = if class == 2 {
                (MOTIF_A, MOTIF_B)
            } else {
                (MOTIF_B, MOTIF_A)
            };
            content[first] = early;
            content[second] = late;
        }
    }
    TokenizedExample {
        ids: wrap(content),
        label: Label::Class(label),
    }
}

/// Label `tanh((count(A) - count(B)) / 2)`.
fn score_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> TokenizedExample {
    let mut content = filler(spec, rng);
    let len = content.len();
    let max_each = (len / 2).min(4);
    let a = rng.gen_range(0..=max_each);
    let b = rng.gen_range(0..=max_each);
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    for (i, &slot) in slots.iter().take(a + b).enumerate() {
        content[slot] = if i < a { MOTIF_A } else { MOTIF_B };
    }
    let label = ((a as f64 - b as f64) / 2.0).tanh();
    TokenizedExample {
        ids: wrap(content),
        label: Label::Value(label),
    }
}

/// Sparse bigram grammar: each token has three preferred successors.
struct Grammar {
    successors: Vec<[u32; 3]>,
    vocab_size: u32,
}

impl Grammar {
    const FOLLOW_PROBABILITY: f64 = 0.9;

    fn new(vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let v = vocab_size as u32;
        let successors = (0..vocab_size)
            .map(|_| {
                [
                    rng.gen_range(FIRST_CONTENT_ID..v),
                    rng.gen_range(FIRST_CONTENT_ID..v),
                    rng.gen_range(FIRST_CONTENT_ID..v),
                ]
            })
            .collect();
        Grammar {
            successors,
            vocab_size: v,
        }
    }

    fn example(&self, seq_len: usize, rng: &mut ChaCha8Rng) -> TokenizedExample {
        let mut content = Vec::with_capacity(seq_len - 2);
        let mut current = rng.gen_range(FIRST_CONTENT_ID..self.vocab_size);
        content.push(current);
        while content.len() < seq_len - 2 {
            current = if rng.gen_bool(Self::FOLLOW_PROBABILITY) {
                self.successors[current as usize][rng.gen_range(0..3)]
            } else {
                rng.gen_range(FIRST_CONTENT_ID..self.vocab_size)
            };
            content.push(current);
        }
        TokenizedExample {
            ids: wrap(content),
            label: Label::None,
        }
    }
}

/// One record per line: space-separated ids, a tab, then the label (empty
/// for unlabeled text).
pub fn write_records(examples: &[TokenizedExample], mut out: impl Write) -> Result<()> {
    for e in examples {
        let ids: Vec<String> = e.ids.iter().map(u32::to_string).collect();
        let label = match &e.label {
            Label::Class(c) => c.to_string(),
            Label::Value(v) => v.to_string(),
            Label::None => String::new(),
        };
        writeln!(out, "{}\t{}", ids.join(" "), label)?;
    }
    Ok(())
}

/// Parses [`write_records`] output; `regression` selects how labels parse.
pub fn read_records(input: impl BufRead, regression: bool) -> Result<Vec<TokenizedExample>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let (ids, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("line {}: missing tab", n + 1)))?;
        let ids = ids
            .split_whitespace()
            .map(|s| s.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?;
        let label = if label.is_empty() {
            Label::None
        } else if regression {
            Label::Value(
                label
                    .parse()
                    .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?,
            )
        } else {
            Label::Class(
                label
                    .parse()
                    .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?,
            )
        };
        out.push(TokenizedExample { ids, label });
    }
    Ok(out)
}
