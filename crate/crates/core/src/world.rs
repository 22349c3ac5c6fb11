//! Synthetic one-to-many knowledge: subjects, relations, object sets, the
//! word-level tokenizer, document rendering and greedy-decoding evaluation.
//!
//! Documents look like `<bos> Kavo -ria cities : 1. Melu 2. Tadi -son 3. Buro <eos>`.
//! Entities are one or two tokens; the first token of every object is unique
//! within its relation's pool, so it identifies the object inside any fact.
//!
//! # Files
//!
//! `world.jsonl` holds one JSON record per line, tagged by `record`:
//!
//! 1. `{"record":"header","seed","n_answers","objects_per_fact"}`
//! 2. `{"record":"relation","id","token"}` per relation
//! 3. `{"record":"subject","id","tokens"}` per subject
//! 4. `{"record":"object","relation","id","tokens"}` per pool object
//! 5. `{"record":"fact","id","subject","relation","objects"}` per fact
//!
//! `vocab.txt` lists one word per line; the line number is the token id.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const COLON: &str = ":";
/// Step markers `1.` through `MAX_ANSWERS.` are always in the vocabulary.
pub const MAX_ANSWERS: usize = 10;

const RELATION_WORDS: [&str; 8] = ["cities", "songs", "films", "rivers", "books", "dishes", "games", "ports"];
const CONSONANTS: [char; 14] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Bijective word-level tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Format(format!("unknown word {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let words = fs::read_to_string(path)?.lines().map(str::to_string).collect();
        Self::new(words)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: usize,
    pub relation: usize,
    /// Indices into the relation's object pool.
    pub objects: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub objects_per_fact: usize,
    pub objects_per_relation: usize,
    pub n_answers: usize,
    pub two_token_fraction: f64,
    pub max_vocab: usize,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_subjects: 64,
            n_relations: 2,
            objects_per_fact: 3,
            objects_per_relation: 96,
            n_answers: 3,
            two_token_fraction: 0.5,
            max_vocab: 512,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub colon: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub seed: u64,
    pub n_answers: usize,
    pub objects_per_fact: usize,
    pub vocab: Vocabulary,
    pub specials: Specials,
    /// Token of the marker `i.` at index `i - 1`.
    pub markers: Vec<u32>,
    pub relations: Vec<u32>,
    pub subjects: Vec<Vec<u32>>,
    /// Object pool per relation.
    pub objects: Vec<Vec<Vec<u32>>>,
    pub facts: Vec<Fact>,
}

fn syllable(rng: &mut RngState) -> String {
    let c = CONSONANTS[rng.below(CONSONANTS.len())];
    let v = VOWELS[rng.below(VOWELS.len())];
    format!("{c}{v}")
}

/// Draws `count` distinct capitalized two-syllable words not already in `taken`.
fn fresh_words(rng: &mut RngState, count: usize, taken: &mut BTreeSet<String>, prefix: &str) -> Result<Vec<String>> {
    let capacity = (CONSONANTS.len() * VOWELS.len()).pow(2);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 50 * capacity {
            return Err(Error::VocabularyTooSmall(format!("cannot draw {count} distinct words")));
        }
        let raw = format!("{}{}", syllable(rng), syllable(rng));
        let word = if prefix.is_empty() {
            let mut cs = raw.chars();
            let first = cs.next().expect("non-empty").to_ascii_uppercase();
            format!("{first}{}", cs.as_str())
        } else {
            format!("{prefix}{raw}")
        };
        if taken.insert(word.clone()) {
            out.push(word);
        }
    }
    Ok(out)
}

/// Builds a deterministic world from `params`.
pub fn build_world(params: &WorldParams) -> Result<SynthWorld> {
    let p = params;
    if p.n_answers == 0 || p.n_answers > MAX_ANSWERS {
        return Err(Error::Config(format!("n_answers must be in 1..={MAX_ANSWERS}")));
    }
    if p.objects_per_fact < p.n_answers {
        return Err(Error::Config("objects_per_fact must be at least n_answers".into()));
    }
    if p.objects_per_relation < p.objects_per_fact {
        return Err(Error::Config("object pool smaller than objects_per_fact".into()));
    }
    if p.n_subjects == 0 || p.n_relations == 0 {
        return Err(Error::Config("need at least one subject and one relation".into()));
    }
    if p.n_relations > RELATION_WORDS.len() {
        return Err(Error::VocabularyTooSmall(format!(
            "only {} relation words available",
            RELATION_WORDS.len()
        )));
    }
    let n_subject_suffixes = 8;
    let n_object_suffixes = 12;
    let needed = 3
        + MAX_ANSWERS
        + p.n_relations
        + p.n_subjects
        + n_subject_suffixes
        + n_object_suffixes
        + p.n_relations * p.objects_per_relation;
    if needed > p.max_vocab {
        return Err(Error::VocabularyTooSmall(format!("{needed} words needed, limit {}", p.max_vocab)));
    }

    let mut rng = RngState::new(p.seed);
    let mut words: Vec<String> = vec![BOS.into(), EOS.into(), COLON.into()];
    words.extend((1..=MAX_ANSWERS).map(|i| format!("{i}.")));
    let relation_base = words.len();
    words.extend(RELATION_WORDS[..p.n_relations].iter().map(|s| s.to_string()));

    let mut taken: BTreeSet<String> = words.iter().cloned().collect();
    let subject_heads = fresh_words(&mut rng, p.n_subjects, &mut taken, "")?;
    let subject_suffixes = fresh_words(&mut rng, n_subject_suffixes, &mut taken, "-")?;
    let object_suffixes = fresh_words(&mut rng, n_object_suffixes, &mut taken, "-")?;
    let object_heads = fresh_words(&mut rng, p.n_relations * p.objects_per_relation, &mut taken, "")?;

    let id_of = |words: &Vec<String>, w: &str| words.iter().position(|x| x == w).expect("word present") as u32;
    let subj_base = words.len();
    words.extend(subject_heads.iter().cloned());
    let subj_suffix_base = words.len();
    words.extend(subject_suffixes.iter().cloned());
    let obj_suffix_base = words.len();
    words.extend(object_suffixes.iter().cloned());
    let obj_base = words.len();
    words.extend(object_heads.iter().cloned());

    let subjects: Vec<Vec<u32>> = (0..p.n_subjects)
        .map(|i| {
            let head = (subj_base + i) as u32;
            if rng.uniform() < p.two_token_fraction {
                vec![head, (subj_suffix_base + rng.below(n_subject_suffixes)) as u32]
            } else {
                vec![head]
            }
        })
        .collect();
    let objects: Vec<Vec<Vec<u32>>> = (0..p.n_relations)
        .map(|r| {
            (0..p.objects_per_relation)
                .map(|i| {
                    let head = (obj_base + r * p.objects_per_relation + i) as u32;
                    if rng.uniform() < p.two_token_fraction {
                        vec![head, (obj_suffix_base + rng.below(n_object_suffixes)) as u32]
                    } else {
                        vec![head]
                    }
                })
                .collect()
        })
        .collect();

    let mut facts = Vec::with_capacity(p.n_subjects * p.n_relations);
    for s in 0..p.n_subjects {
        for r in 0..p.n_relations {
            let chosen = sample_without_replacement(&mut rng, p.objects_per_relation, p.objects_per_fact);
            facts.push(Fact { id: facts.len(), subject: s, relation: r, objects: chosen });
        }
    }

    let vocab = Vocabulary::new(words)?;
    let specials = Specials {
        bos: id_of(&vocab.words, BOS),
        eos: id_of(&vocab.words, EOS),
        colon: id_of(&vocab.words, COLON),
    };
    let markers = (1..=MAX_ANSWERS).map(|i| vocab.id(&format!("{i}.")).expect("marker")).collect();
    let relations = (0..p.n_relations).map(|r| (relation_base + r) as u32).collect();
    Ok(SynthWorld {
        seed: p.seed,
        n_answers: p.n_answers,
        objects_per_fact: p.objects_per_fact,
        vocab,
        specials,
        markers,
        relations,
        subjects,
        objects,
        facts,
    })
}

/// Uniformly random ordered `k`-subset of `0..n` (partial Fisher-Yates).
fn sample_without_replacement(rng: &mut RngState, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

impl SynthWorld {
    pub fn object_tokens(&self, relation: usize, object: usize) -> &[u32] {
        &self.objects[relation][object]
    }

    pub fn gold(&self, fact: &Fact) -> Vec<Vec<u32>> {
        fact.objects.iter().map(|&o| self.objects[fact.relation][o].clone()).collect()
    }

    /// `<bos> subject relation :`
    pub fn prompt(&self, fact: &Fact) -> Vec<u32> {
        let mut out = vec![self.specials.bos];
        out.extend_from_slice(&self.subjects[fact.subject]);
        out.push(self.relations[fact.relation]);
        out.push(self.specials.colon);
        out
    }

    /// Positions of the subject tokens inside [`SynthWorld::prompt`].
    pub fn subject_positions(&self, fact: &Fact) -> Vec<usize> {
        (1..1 + self.subjects[fact.subject].len()).collect()
    }

    /// Full training document listing `objects` (pool indices) in order.
    pub fn render(&self, fact: &Fact, objects: &[usize]) -> Vec<u32> {
        let mut doc = self.prompt(fact);
        for (i, &o) in objects.iter().enumerate() {
            doc.push(self.markers[i]);
            doc.extend_from_slice(&self.objects[fact.relation][o]);
        }
        doc.push(self.specials.eos);
        doc
    }

    pub fn max_doc_len(&self) -> usize {
        let subj = self.subjects.iter().map(Vec::len).max().unwrap_or(1);
        let obj = self.objects.iter().flatten().map(Vec::len).max().unwrap_or(1);
        4 + subj + self.n_answers * (1 + obj)
    }

    /// Largest continuation greedy decoding needs: markers, answers and the stop token.
    pub fn max_new_tokens(&self) -> usize {
        let obj = self.objects.iter().flatten().map(Vec::len).max().unwrap_or(1);
        self.n_answers * (1 + obj) + 1
    }

    pub fn is_marker(&self, token: u32) -> bool {
        self.markers.contains(&token)
    }
}

/// `docs_per_fact` documents per fact, each listing a uniformly random ordered
/// `n_answers`-subset of the fact's objects.
pub fn render_corpus(world: &SynthWorld, docs_per_fact: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = RngState::new(seed);
    let mut docs = Vec::with_capacity(world.facts.len() * docs_per_fact);
    for fact in &world.facts {
        for _ in 0..docs_per_fact {
            let order = sample_without_replacement(&mut rng, fact.objects.len(), world.n_answers);
            let chosen: Vec<usize> = order.iter().map(|&i| fact.objects[i]).collect();
            docs.push(world.render(fact, &chosen));
        }
    }
    docs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepVerdict {
    Correct,
    /// Not one of the gold objects.
    Wrong,
    /// A gold object already produced at an earlier step.
    Repeated,
    /// The step could not be parsed out of the generation.
    Format,
}

/// Position range `[start, end)` of one answer in prompt + generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerExtent {
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<u32>,
}

impl AnswerExtent {
    pub fn positions(&self) -> Vec<usize> {
        (self.start..self.end).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub answers: Vec<AnswerExtent>,
    pub verdicts: Vec<StepVerdict>,
    pub correct: bool,
}

/// Splits a generation into answers by step marker and grades each one.
///
/// Answer `i` is correct iff it exactly matches a gold object and differs from
/// every earlier answer; the instance is correct iff all steps are.
pub fn evaluate_generation(world: &SynthWorld, fact: &Fact, prompt_len: usize, generated: &[u32]) -> Evaluation {
    let gold = world.gold(fact);
    let mut answers = Vec::new();
    let mut verdicts = Vec::with_capacity(world.n_answers);
    let mut at = 0;
    let stop = world.specials.eos;
    for step in 0..world.n_answers {
        if generated.get(at) != Some(&world.markers[step]) {
            break;
        }
        let start = at + 1;
        let mut end = start;
        while end < generated.len() && !world.is_marker(generated[end]) && generated[end] != stop {
            end += 1;
        }
        if end == start {
            break;
        }
        let tokens = generated[start..end].to_vec();
        let verdict = if !gold.contains(&tokens) {
            StepVerdict::Wrong
        } else if answers.iter().any(|a: &AnswerExtent| a.tokens == tokens) {
            StepVerdict::Repeated
        } else {
            StepVerdict::Correct
        };
        answers.push(AnswerExtent { start: prompt_len + start, end: prompt_len + end, tokens });
        verdicts.push(verdict);
        at = end;
    }
    verdicts.resize(world.n_answers, StepVerdict::Format);
    let correct = verdicts.iter().all(|v| *v == StepVerdict::Correct);
    Evaluation { answers, verdicts, correct }
}

/// One evaluated query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub id: usize,
    pub fact: usize,
    pub relation: usize,
    pub subject_positions: Vec<usize>,
    pub prompt: Vec<u32>,
    pub gold: Vec<Vec<u32>>,
    pub generated: Vec<u32>,
    pub answers: Vec<AnswerExtent>,
    pub verdicts: Vec<StepVerdict>,
    pub correct: bool,
}

impl QueryInstance {
    pub fn new(world: &SynthWorld, fact: &Fact, generated: Vec<u32>) -> Self {
        let prompt = world.prompt(fact);
        let eval = evaluate_generation(world, fact, prompt.len(), &generated);
        Self {
            id: fact.id,
            fact: fact.id,
            relation: fact.relation,
            subject_positions: world.subject_positions(fact),
            gold: world.gold(fact),
            prompt,
            generated,
            answers: eval.answers,
            verdicts: eval.verdicts,
            correct: eval.correct,
        }
    }

    pub fn n_answers(&self) -> usize {
        self.verdicts.len()
    }

    /// Prompt plus every generated token before the first token of answer `step` (1-based).
    pub fn step_input(&self, step: usize) -> Result<Vec<u32>> {
        if step == 0 || step > self.n_answers() {
            return Err(Error::StepOutOfRange { step, n_answers: self.n_answers() });
        }
        let answer = self
            .answers
            .get(step - 1)
            .ok_or_else(|| Error::Format(format!("instance {} has no answer {step}", self.id)))?;
        let mut out = self.prompt.clone();
        out.extend_from_slice(&self.generated[..answer.start - self.prompt.len()]);
        Ok(out)
    }

    pub fn subject_first_token(&self) -> u32 {
        self.prompt[self.subject_positions[0]]
    }

    pub fn answer_first_token(&self, i: usize) -> Option<u32> {
        self.answers.get(i).map(|a| a.tokens[0])
    }
}

pub fn build_step_input(instance: &QueryInstance, step: usize) -> Result<Vec<u32>> {
    instance.step_input(step)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum WorldRecord {
    Header { seed: u64, n_answers: usize, objects_per_fact: usize },
    Relation { id: usize, token: u32 },
    Subject { id: usize, tokens: Vec<u32> },
    Object { relation: usize, id: usize, tokens: Vec<u32> },
    Fact { id: usize, subject: usize, relation: usize, objects: Vec<usize> },
}

impl SynthWorld {
    /// Writes `world.jsonl` and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let mut out = fs::File::create(dir.join("world.jsonl"))?;
        let mut line = |r: WorldRecord| -> Result<()> {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        line(WorldRecord::Header {
            seed: self.seed,
            n_answers: self.n_answers,
            objects_per_fact: self.objects_per_fact,
        })?;
        for (id, &token) in self.relations.iter().enumerate() {
            line(WorldRecord::Relation { id, token })?;
        }
        for (id, tokens) in self.subjects.iter().enumerate() {
            line(WorldRecord::Subject { id, tokens: tokens.clone() })?;
        }
        for (relation, pool) in self.objects.iter().enumerate() {
            for (id, tokens) in pool.iter().enumerate() {
                line(WorldRecord::Object { relation, id, tokens: tokens.clone() })?;
            }
        }
        for f in &self.facts {
            line(WorldRecord::Fact { id: f.id, subject: f.subject, relation: f.relation, objects: f.objects.clone() })?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let file = fs::File::open(dir.join("world.jsonl"))?;
        let mut header = None;
        let mut relations = Vec::new();
        let mut subjects = Vec::new();
        let mut objects: Vec<Vec<Vec<u32>>> = Vec::new();
        let mut facts = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<WorldRecord>(&line)? {
                WorldRecord::Header { seed, n_answers, objects_per_fact } => {
                    header = Some((seed, n_answers, objects_per_fact))
                }
                WorldRecord::Relation { token, .. } => relations.push(token),
                WorldRecord::Subject { tokens, .. } => subjects.push(tokens),
                WorldRecord::Object { relation, tokens, .. } => {
                    if objects.len() <= relation {
                        objects.resize(relation + 1, Vec::new());
                    }
                    objects[relation].push(tokens);
                }
                WorldRecord::Fact { id, subject, relation, objects } => {
                    facts.push(Fact { id, subject, relation, objects })
                }
            }
        }
        let (seed, n_answers, objects_per_fact) =
            header.ok_or_else(|| Error::Format("world file has no header record".into()))?;
        let need = |w: &str| vocab.id(w).ok_or_else(|| Error::Format(format!("vocabulary lacks {w:?}")));
        let specials = Specials { bos: need(BOS)?, eos: need(EOS)?, colon: need(COLON)? };
        let markers = (1..=MAX_ANSWERS).map(|i| need(&format!("{i}."))).collect::<Result<Vec<_>>>()?;
        let world = SynthWorld {
            seed,
            n_answers,
            objects_per_fact,
            vocab,
            specials,
            markers,
            relations,
            subjects,
            objects,
            facts,
        };
        world.validate()?;
        Ok(world)
    }

    fn validate(&self) -> Result<()> {
        let v = self.vocab.len() as u32;
        let all_tokens = self
            .relations
            .iter()
            .chain(self.subjects.iter().flatten())
            .chain(self.objects.iter().flatten().flatten());
        if all_tokens.into_iter().any(|&t| t >= v) {
            return Err(Error::Format("token id outside vocabulary".into()));
        }
        for f in &self.facts {
            if f.subject >= self.subjects.len() || f.relation >= self.relations.len() {
                return Err(Error::Format(format!("fact {} references unknown entity", f.id)));
            }
            if f.objects.iter().any(|&o| o >= self.objects[f.relation].len()) {
                return Err(Error::Format(format!("fact {} references unknown object", f.id)));
            }
        }
        Ok(())
    }
}

pub fn save_instances(path: &Path, instances: &[QueryInstance]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_instances(path: &Path) -> Result<Vec<QueryInstance>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
