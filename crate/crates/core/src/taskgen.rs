//! Synthetic key-pair recall tasks.
//!
//! Vocabulary layout: keys `0..K`, answers `K..K+A`, then `SEP`, then `UNK`
//! (the abstention answer used in pretraining), then two framing-prefix
//! tokens per node. Everything above that is unused.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CHOICES: usize = 4;
pub const PREFIX_LEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTable {
    pub n_keys: usize,
    pub n_answers: usize,
    pub seed: u64,
    /// Answer index for `(k1, k2)` at `k1 * n_keys + k2`.
    answers: Vec<usize>,
}

pub type Fact = (usize, usize);

impl FactTable {
    pub fn answer(&self, f: Fact) -> usize {
        self.answers[f.0 * self.n_keys + f.1]
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn facts(&self) -> impl Iterator<Item = Fact> + '_ {
        let k = self.n_keys;
        (0..k).flat_map(move |a| (0..k).map(move |b| (a, b)))
    }

    pub fn key_token(&self, k: usize) -> usize {
        k
    }

    pub fn answer_token(&self, a: usize) -> usize {
        self.n_keys + a
    }

    pub fn sep(&self) -> usize {
        self.n_keys + self.n_answers
    }

    pub fn unk(&self) -> usize {
        self.sep() + 1
    }

    /// First token of the reserved framing band.
    pub fn prefix_base(&self) -> usize {
        self.sep() + 2
    }

    /// Framing prefix for node `i`.
    pub fn framing_prefix(&self, i: usize) -> Vec<usize> {
        (0..PREFIX_LEN).map(|j| self.prefix_base() + PREFIX_LEN * i + j).collect()
    }

    /// Smallest vocabulary holding the task tokens and `n_nodes` prefixes.
    pub fn min_vocab(&self, n_nodes: usize) -> usize {
        self.prefix_base() + PREFIX_LEN * n_nodes
    }

    pub fn question(&self, f: Fact) -> Vec<usize> {
        vec![self.key_token(f.0), self.key_token(f.1), self.sep()]
    }

    pub fn answer_of_token(&self, tok: usize) -> Option<usize> {
        (self.n_keys..self.n_keys + self.n_answers).contains(&tok).then(|| tok - self.n_keys)
    }
}

/// Uniformly random answers for every key pair.
pub fn gen_fact_table(n_keys: usize, n_answers: usize, seed: u64) -> Result<FactTable> {
    if n_answers < N_CHOICES {
        return Err(Error::Config(format!(
            "need at least {N_CHOICES} answers for distinct choices, got {n_answers}"
        )));
    }
    if n_keys == 0 {
        return Err(Error::Config("need at least one key".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let answers = (0..n_keys * n_keys).map(|_| rng.random_range(0..n_answers)).collect();
    Ok(FactTable {
        n_keys,
        n_answers,
        seed,
        answers,
    })
}

/// Topic segment of a first key: `k1 · segments / K`.
pub fn segment(table: &FactTable, k1: usize, segments: usize) -> usize {
    k1 * segments / table.n_keys
}

/// Overlapping topic-region shards. Node `i` covers `width` consecutive
/// segments starting at `i · stride` (cyclically), and owns every fact whose
/// first key falls in one of them.
pub fn topic_shards(table: &FactTable, n_nodes: usize, segments: usize, width: usize, stride: usize) -> Vec<Vec<Fact>> {
    (0..n_nodes)
        .map(|i| {
            let cover: BTreeSet<usize> = (0..width).map(|j| (i * stride + j) % segments).collect();
            table.facts().filter(|f| cover.contains(&segment(table, f.0, segments))).collect()
        })
        .collect()
}

/// `[k1, k2, SEP, a]` for every fact in `shard`, each repeated `copies`
/// times, shuffled.
pub fn gen_pretrain_corpus(table: &FactTable, shard: &[Fact], copies: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if shard.is_empty() {
        return Err(Error::InvalidInput("empty shard".into()));
    }
    let mut out = Vec::with_capacity(shard.len() * copies);
    for &f in shard {
        let mut s = table.question(f);
        s.push(table.answer_token(table.answer(f)));
        for _ in 0..copies {
            out.push(s.clone());
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// In-shard facts with their answers plus `[k1, k2, SEP, UNK]` for every
/// fact outside the shard, shuffled. A node trained on this learns to
/// abstain where it has no knowledge instead of guessing confidently.
pub fn gen_abstaining_corpus(table: &FactTable, shard: &[Fact], copies: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if shard.is_empty() {
        return Err(Error::InvalidInput("empty shard".into()));
    }
    let inside: BTreeSet<Fact> = shard.iter().copied().collect();
    let mut out = Vec::with_capacity(table.len() * copies);
    for f in table.facts() {
        let mut s = table.question(f);
        s.push(if inside.contains(&f) {
            table.answer_token(table.answer(f))
        } else {
            table.unk()
        });
        for _ in 0..copies {
            out.push(s.clone());
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// How the four choices are ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChoiceLayout {
    /// Slot `p` always holds an answer with `a mod 4 == p`, so the correct
    /// slot is a function of the question alone.
    SlotOrdered,
    /// Correct answer at a uniformly random slot among random distractors.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqExample {
    pub fact: Fact,
    pub question: Vec<usize>,
    /// Answer tokens.
    pub choices: [usize; N_CHOICES],
    pub answer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<McqExample>,
    pub val: Vec<McqExample>,
    pub test: Vec<McqExample>,
    /// Pretraining shard of each layer-1 node; empty outside skill-split mode.
    pub shards: Vec<Vec<Fact>>,
}

fn make_example(table: &FactTable, f: Fact, layout: ChoiceLayout, rng: &mut ChaCha8Rng) -> McqExample {
    let a = table.answer(f);
    let (answers, c) = match layout {
        ChoiceLayout::SlotOrdered => {
            let mut ch = [0; N_CHOICES];
            for (p, slot) in ch.iter_mut().enumerate() {
                *slot = if p == a % N_CHOICES {
                    a
                } else {
                    let pool: Vec<usize> = (0..table.n_answers).filter(|x| x % N_CHOICES == p).collect();
                    pool[rng.random_range(0..pool.len())]
                };
            }
            (ch, a % N_CHOICES)
        }
        ChoiceLayout::Shuffled => {
            let mut others: Vec<usize> = (0..table.n_answers).filter(|&x| x != a).collect();
            others.shuffle(rng);
            let c = rng.random_range(0..N_CHOICES);
            let mut ch = [0; N_CHOICES];
            let mut it = others.into_iter();
            for (p, slot) in ch.iter_mut().enumerate() {
                *slot = if p == c { a } else { it.next().expect("at least 3 distractors") };
            }
            (ch, c)
        }
    };
    McqExample {
        fact: f,
        question: table.question(f),
        choices: answers.map(|x| table.answer_token(x)),
        answer: c,
    }
}

/// Four-choice questions split 80/10/10 by fact, so no fact seen in
/// training is asked at validation or test time. With `n` at most the number
/// of facts, each chosen fact appears once; larger `n` cycles through the
/// facts of each split.
pub fn gen_mcq_dataset(table: &FactTable, n: usize, layout: ChoiceLayout, seed: u64) -> Result<DatasetSplit> {
    if n < 20 {
        return Err(Error::Config(format!("need at least 20 examples for an 80/10/10 split, got {n}")));
    }
    if n > table.len() && table.len() < 20 {
        return Err(Error::Config(format!("table of {} facts is too small to split", table.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut facts: Vec<Fact> = table.facts().collect();
    facts.shuffle(&mut rng);
    let pool = n.min(facts.len());
    facts.truncate(pool);
    let (ntr, nva) = (pool * 8 / 10, pool / 10);
    let groups = [&facts[..ntr], &facts[ntr..ntr + nva], &facts[ntr + nva..]];
    let (etr, eva) = (n * 8 / 10, n / 10);
    let counts = [etr, eva, n - etr - eva];
    let mut splits: Vec<Vec<McqExample>> = groups
        .iter()
        .zip(counts)
        .map(|(g, c)| (0..c).map(|i| make_example(table, g[i % g.len()], layout, &mut rng)).collect())
        .collect();
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(DatasetSplit {
        seed,
        train,
        val,
        test,
        shards: Vec::new(),
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    question: Vec<usize>,
    choices: [usize; N_CHOICES],
    answer: usize,
    split: SplitTag,
    fact: Fact,
}

impl DatasetSplit {
    pub fn examples(&self, tag: SplitTag) -> &[McqExample] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    /// One JSON record per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
            for e in self.examples(tag) {
                let r = Record {
                    question: e.question.clone(),
                    choices: e.choices,
                    answer: e.answer,
                    split: tag,
                    fact: e.fact,
                };
                serde_json::to_writer(&mut w, &r)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead, seed: u64) -> Result<Self> {
        let mut out = DatasetSplit {
            seed,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            shards: Vec::new(),
        };
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            if rec.answer >= N_CHOICES {
                return Err(Error::Format(format!("answer index {} out of range", rec.answer)));
            }
            let e = McqExample {
                fact: rec.fact,
                question: rec.question,
                choices: rec.choices,
                answer: rec.answer,
            };
            match rec.split {
                SplitTag::Train => out.train.push(e),
                SplitTag::Val => out.val.push(e),
                SplitTag::Test => out.test.push(e),
            }
        }
        Ok(out)
    }
}

/// Greedy choice from next-token logits: the choice whose answer token
/// scores highest.
pub fn pick_choice(logits: &[f64], choices: &[usize; N_CHOICES]) -> usize {
    let mut best = 0;
    for p in 1..N_CHOICES {
        if logits[choices[p]] > logits[choices[best]] {
            best = p;
        }
    }
    best
}
