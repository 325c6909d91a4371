//! Synthetic verifiable tasks: modular arithmetic over a ten-symbol answer
//! space with three hint classes.
//!
//! Each problem encodes `a op b` with digits `a, b` and `op ∈ {⊕, ⊗}`; the
//! answer is `(a+b) mod 10` or `(a·b) mod 10`. The hint function reveals the
//! answer's residue class mod 3 — narrowing the candidate set from ten to at
//! most four without ever revealing the answer itself. Generation stratifies
//! over (op, class, value within class), so class frequencies are exactly
//! balanced and every within-class value is equally common.

use crate::vocab::{TokenId, Vocab};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("dataset requires n >= 3, got {0}")]
    TooSmall(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset record at line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Mul,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "⊕",
            Op::Mul => "⊗",
        }
    }

    pub fn apply(self, a: u8, b: u8) -> u8 {
        match self {
            Op::Add => (a + b) % 10,
            Op::Mul => (a * b) % 10,
        }
    }
}

/// One verifiable prompt with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub answer_token: TokenId,
    /// Residue class of the answer mod 3.
    pub answer_class: u8,
}

impl ProblemInstance {
    pub fn new(id: u64, a: u8, op: Op, b: u8, vocab: &Vocab) -> Self {
        let answer = op.apply(a, b);
        Self {
            id,
            prompt_tokens: vec![
                vocab.digit(a).unwrap(),
                vocab.id(op.symbol()).unwrap(),
                vocab.digit(b).unwrap(),
            ],
            answer_token: vocab.digit(answer).unwrap(),
            answer_class: answer % 3,
        }
    }
}

/// Exact single-token equality with the ground-truth answer. Multi-token
/// answers are always wrong.
pub fn check_answer(problem: &ProblemInstance, answer: &[TokenId]) -> bool {
    answer.len() == 1 && answer[0] == problem.answer_token
}

/// The hint token identifying the answer's residue class. Never the answer
/// token itself.
pub fn hint(problem: &ProblemInstance, vocab: &Vocab) -> TokenId {
    vocab.hint(problem.answer_class).unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<ProblemInstance>,
    pub validation: Vec<ProblemInstance>,
    pub test: Vec<ProblemInstance>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn split(&self, name: &str) -> Option<&[ProblemInstance]> {
        match name {
            "train" => Some(&self.train),
            "validation" | "val" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

const CLASS_VALUES: [&[u8]; 3] = [&[0, 3, 6, 9], &[1, 4, 7], &[2, 5, 8]];

fn combos_for(op: Op, value: u8) -> Vec<(u8, u8)> {
    let mut out = Vec::new();
    for a in 0..10u8 {
        for b in 0..10u8 {
            if op.apply(a, b) == value {
                out.push((a, b));
            }
        }
    }
    out
}

/// Deterministic, stratified dataset generation with an 80/10/10 split.
pub fn generate_dataset(n: usize, seed: u64, vocab: &Vocab) -> Result<DatasetSplit, EnvError> {
    if n < 3 {
        return Err(EnvError::TooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Precompute combo pools per (op, value).
    let ops = [Op::Add, Op::Mul];
    let pools: Vec<Vec<Vec<(u8, u8)>>> = ops
        .iter()
        .map(|&op| (0..10).map(|v| combos_for(op, v)).collect())
        .collect();

    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let op_idx = i % 2;
        let class = (i / 2) % 3;
        let values = CLASS_VALUES[class];
        let value = values[(i / 6) % values.len()];
        let pool = &pools[op_idx][value as usize];
        let (a, b) = pool[rng.random_range(0..pool.len())];
        instances.push(ProblemInstance::new(i as u64, a, ops[op_idx], b, vocab));
    }

    instances.shuffle(&mut rng);
    let n_val = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    let n_train = n - n_val - n_test;
    let test = instances.split_off(n_train + n_val);
    let validation = instances.split_off(n_train);
    Ok(DatasetSplit {
        train: instances,
        validation,
        test,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    id: u64,
    prompt: String,
    answer: String,
    class: u8,
}

/// Line-delimited JSON export, one `{id, prompt, answer, class}` record per
/// problem, for reproducibility audits.
pub fn export_jsonl<W: Write>(
    w: &mut W,
    problems: &[ProblemInstance],
    vocab: &Vocab,
) -> Result<(), EnvError> {
    for p in problems {
        let rec = DatasetRecord {
            id: p.id,
            prompt: vocab.render(&p.prompt_tokens),
            answer: vocab.token(p.answer_token).unwrap().to_string(),
            class: p.answer_class,
        };
        serde_json::to_writer(&mut *w, &rec).map_err(|e| EnvError::BadRecord {
            line: 0,
            reason: e.to_string(),
        })?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn import_jsonl<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<ProblemInstance>, EnvError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| EnvError::BadRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let prompt_tokens = rec
            .prompt
            .split_whitespace()
            .map(|t| {
                vocab.id(t).ok_or_else(|| EnvError::BadRecord {
                    line: i + 1,
                    reason: format!("unknown prompt token {t:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let answer_token = vocab.id(&rec.answer).ok_or_else(|| EnvError::BadRecord {
            line: i + 1,
            reason: format!("unknown answer token {:?}", rec.answer),
        })?;
        out.push(ProblemInstance {
            id: rec.id,
            prompt_tokens,
            answer_token,
            answer_class: rec.class,
        });
    }
    Ok(out)
}
