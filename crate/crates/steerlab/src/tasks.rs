//! Synthetic multi-skill task suite.
//!
//! Six skill families, each with a deterministic verifier and exactly one
//! gold answer per instance. Alongside the gold program, every family defines
//! a family-specific *corrupted* program (an off-by-one slip, an unreversed
//! copy, a flipped parity, ...) plus a deterministic trigger predicate over
//! the payload. The pretraining stream teaches three execution modes:
//!
//! - rigorous (marker `!` or `@`): always the gold program,
//! - plain (no marker): the corrupted program on triggered payloads,
//! - sloppy (marker `~` or `^`): always the corrupted program.
//!
//! The plain/rigorous gap is what activation steering has to close, and the
//! rigorous/sloppy contrast is what the elicitation phase reads out.
//!
//! Instances are indexed by a canonical payload enumeration; eval instances
//! are the indices with `index % 5 == 4`, so train/eval prompt sets are
//! disjoint by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Token = usize;

// -- vocabulary -------------------------------------------------------------

pub const VOCAB_SIZE: usize = 64;

pub const DIGIT_BASE: Token = 0; // '0'..'9' -> 0..9
pub const LETTER_BASE: Token = 10; // 'a'..'z' -> 10..35
pub const PLUS: Token = 36;
pub const STAR: Token = 37;
pub const EQUALS: Token = 38;
pub const QMARK: Token = 39;
pub const COLON: Token = 40;
pub const RIGOR_A: Token = 41; // '!'
pub const RIGOR_B: Token = 42; // '@'
pub const SLOPPY_A: Token = 43; // '~'
pub const SLOPPY_B: Token = 44; // '^'
pub const BOS: Token = 45;
pub const EOS: Token = 46;
pub const PAD: Token = 47;
pub const NEUTRAL: Token = 48; // '.' plain-mode marker, aligning prompts across modes
// 49..63 reserved

pub fn digit(d: usize) -> Token {
    debug_assert!(d < 10);
    DIGIT_BASE + d
}

pub fn letter(i: usize) -> Token {
    debug_assert!(i < 26);
    LETTER_BASE + i
}

/// Printable form of a token, for dumps and debugging.
pub fn render_token(t: Token) -> char {
    match t {
        0..=9 => (b'0' + t as u8) as char,
        10..=35 => (b'a' + (t - LETTER_BASE) as u8) as char,
        PLUS => '+',
        STAR => '*',
        EQUALS => '=',
        QMARK => '?',
        COLON => ':',
        RIGOR_A => '!',
        RIGOR_B => '@',
        SLOPPY_A => '~',
        SLOPPY_B => '^',
        BOS => '<',
        EOS => '>',
        PAD => '_',
        NEUTRAL => '.',
        _ => '#',
    }
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|&t| render_token(t)).collect()
}

// -- skills -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Skill {
    ModularArithmetic,
    SequenceReversal,
    ParityLogic,
    Ordering,
    LookupFact,
    PatternCompletion,
}

pub const ALL_SKILLS: [Skill; 6] = [
    Skill::ModularArithmetic,
    Skill::SequenceReversal,
    Skill::ParityLogic,
    Skill::Ordering,
    Skill::LookupFact,
    Skill::PatternCompletion,
];

impl Skill {
    pub fn marker(self) -> Token {
        match self {
            Skill::ModularArithmetic => letter(12), // m
            Skill::SequenceReversal => letter(17),  // r
            Skill::ParityLogic => letter(15),       // p
            Skill::Ordering => letter(14),          // o
            Skill::LookupFact => letter(11),        // l
            Skill::PatternCompletion => letter(2),  // c
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::ModularArithmetic => "modular-arithmetic",
            Skill::SequenceReversal => "sequence-reversal",
            Skill::ParityLogic => "parity-logic",
            Skill::Ordering => "ordering",
            Skill::LookupFact => "lookup-fact",
            Skill::PatternCompletion => "pattern-completion",
        }
    }

    pub fn index(self) -> usize {
        ALL_SKILLS.iter().position(|&s| s == self).expect("listed")
    }

    /// Accuracy of a uniform random guess over the family's answer space.
    pub fn chance_accuracy(self) -> f64 {
        match self {
            Skill::ModularArithmetic => 0.1,
            Skill::SequenceReversal => 1e-3,
            Skill::ParityLogic => 0.5,
            Skill::Ordering => 0.1,
            Skill::LookupFact => 0.1,
            Skill::PatternCompletion => 0.1,
        }
    }
}

/// Execution mode taught during pretraining and used for contrast pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Plain,
    Rigorous(u8),
    Sloppy(u8),
}

impl Mode {
    pub fn prefix(self) -> Token {
        match self {
            Mode::Plain => NEUTRAL,
            Mode::Rigorous(0) => RIGOR_A,
            Mode::Rigorous(_) => RIGOR_B,
            Mode::Sloppy(0) => SLOPPY_A,
            Mode::Sloppy(_) => SLOPPY_B,
        }
    }
}

/// How many prefix variants exist per polarity.
pub const PREFIX_VARIANTS: u8 = 2;

// -- lookup tables (fixed facts the model memorizes during pretraining) -----

const LOOKUP_LETTERS: usize = 14; // 'k'..'x'
const LOOKUP_LETTER_BASE: usize = 10; // offset within a..z

fn lookup_value(primary: bool, l1: usize, l2: usize) -> usize {
    let key = rng::derive_seed(0xFAC7, "lookup-table", &[l1 as u64, l2 as u64]);
    let a = (key % 10) as usize;
    if primary {
        a
    } else {
        // confused-memory table: always disagrees with the primary value
        (a + 1 + (key / 10 % 9) as usize) % 10
    }
}

// -- specs and instances ------------------------------------------------------

/// One skill family plus its difficulty band (payload item counts).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SkillSpec {
    pub skill: Skill,
    /// Smallest payload size (operands / sequence length / cycle unit).
    pub min_items: usize,
    /// Largest payload size.
    pub max_items: usize,
}

impl SkillSpec {
    pub fn suite_default(skill: Skill) -> Self {
        let (min_items, max_items) = match skill {
            Skill::ModularArithmetic => (2, 3),
            Skill::SequenceReversal => (3, 4),
            Skill::ParityLogic => (3, 3),
            Skill::Ordering => (4, 4),
            Skill::LookupFact => (2, 2),
            Skill::PatternCompletion => (2, 3),
        };
        SkillSpec {
            skill,
            min_items,
            max_items,
        }
    }
}

/// The default six-family suite.
pub fn default_suite() -> Vec<SkillSpec> {
    ALL_SKILLS.iter().map(|&s| SkillSpec::suite_default(s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

const EVAL_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskInstance {
    pub skill: Skill,
    /// Instance seed: canonical payload index, offset into the eval range for
    /// eval-split instances. Train and eval ranges are disjoint.
    pub seed: u64,
    pub payload: Vec<Token>,
    /// Plain prompt: BOS, marker, ':', payload..., '=', '?'.
    pub prompt: Vec<Token>,
    pub gold: Vec<Token>,
}

impl TaskInstance {
    pub fn split(&self) -> Split {
        if self.seed >= EVAL_SEED_BASE {
            Split::Eval
        } else {
            Split::Train
        }
    }
}

/// A question framed twice: rigorous and sloppy execution around the same
/// payload.
#[derive(Clone, Debug)]
pub struct ContrastPair {
    pub instance: TaskInstance,
    pub variant: u8,
    pub positive_prompt: Vec<Token>,
    pub negative_prompt: Vec<Token>,
}

// -- payload enumeration ------------------------------------------------------

fn space_size_for_items(skill: Skill, items: usize) -> u64 {
    match skill {
        // d1 + d2 (+ d3 ...), addition chains mod 10
        Skill::ModularArithmetic => 10u64.pow(items as u32),
        // letters a..j, non-palindromic
        Skill::SequenceReversal => {
            let all = 10u64.pow(items as u32);
            let palindromes = 10u64.pow(items as u32 - items as u32 / 2);
            all - palindromes
        }
        Skill::ParityLogic => 10u64.pow(items as u32),
        // distinct digits, order matters
        Skill::Ordering => (0..items as u64).map(|i| 10 - i).product(),
        // key pair from 'k'..'t' plus one digit offset
        Skill::LookupFact => (LOOKUP_LETTERS * LOOKUP_LETTERS * 10) as u64,
        // non-constant cycle unit of `items` digits, two shown lengths
        Skill::PatternCompletion => (10u64.pow(items as u32) - 10) * 2,
    }
}

fn space_size(spec: &SkillSpec) -> u64 {
    (spec.min_items..=spec.max_items)
        .map(|k| space_size_for_items(spec.skill, k))
        .sum()
}

/// Decode a canonical index into a payload. Inverse of the enumeration order
/// used by `space_size`.
fn payload_from_index(spec: &SkillSpec, mut idx: u64) -> Vec<Token> {
    let mut items = spec.min_items;
    loop {
        let sz = space_size_for_items(spec.skill, items);
        if idx < sz {
            break;
        }
        idx -= sz;
        items += 1;
        assert!(items <= spec.max_items, "index beyond payload space");
    }
    match spec.skill {
        Skill::ModularArithmetic => {
            let mut digits = Vec::with_capacity(items);
            for _ in 0..items {
                digits.push((idx % 10) as usize);
                idx /= 10;
            }
            let mut payload = vec![digit(digits[0])];
            for &d in &digits[1..] {
                payload.push(PLUS);
                payload.push(digit(d));
            }
            payload
        }
        Skill::SequenceReversal => {
            // enumerate all letter strings, skipping palindromes
            let mut count = 0u64;
            let total = 10u64.pow(items as u32);
            for raw in 0..total {
                let mut v = raw;
                let mut s = Vec::with_capacity(items);
                for _ in 0..items {
                    s.push((v % 10) as usize);
                    v /= 10;
                }
                let is_pal = (0..items / 2).all(|k| s[k] == s[items - 1 - k]);
                if is_pal {
                    continue;
                }
                if count == idx {
                    return s.iter().map(|&i| letter(i)).collect();
                }
                count += 1;
            }
            unreachable!("index within non-palindrome count");
        }
        Skill::ParityLogic => {
            let mut payload = Vec::with_capacity(items);
            for _ in 0..items {
                payload.push(digit((idx % 10) as usize));
                idx /= 10;
            }
            payload
        }
        Skill::Ordering => {
            // factorial-number-system over remaining digits
            let mut avail: Vec<usize> = (0..10).collect();
            let mut payload = Vec::with_capacity(items);
            for k in 0..items {
                let base: u64 = (0..(items - k - 1) as u64).map(|i| 10 - k as u64 - 1 - i).product::<u64>().max(1);
                let pick = (idx / base) as usize;
                idx %= base;
                payload.push(digit(avail.remove(pick)));
            }
            payload
        }
        Skill::LookupFact => {
            let d = (idx % 10) as usize;
            idx /= 10;
            let l2 = (idx % LOOKUP_LETTERS as u64) as usize;
            let l1 = (idx / LOOKUP_LETTERS as u64) as usize;
            vec![
                letter(LOOKUP_LETTER_BASE + l1),
                letter(LOOKUP_LETTER_BASE + l2),
                digit(d),
            ]
        }
        Skill::PatternCompletion => {
            let long = idx % 2 == 1;
            idx /= 2;
            // enumerate non-constant units
            let mut count = 0u64;
            let total = 10u64.pow(items as u32);
            for raw in 0..total {
                let mut v = raw;
                let mut unit = Vec::with_capacity(items);
                for _ in 0..items {
                    unit.push((v % 10) as usize);
                    v /= 10;
                }
                if unit.iter().all(|&x| x == unit[0]) {
                    continue;
                }
                if count == idx {
                    let shown = 2 * items + usize::from(long);
                    return (0..shown).map(|k| digit(unit[k % items])).collect();
                }
                count += 1;
            }
            unreachable!("index within non-constant unit count");
        }
    }
}

// -- gold and corrupted programs ---------------------------------------------

fn payload_digits(payload: &[Token]) -> Vec<usize> {
    payload
        .iter()
        .filter(|&&t| t < 10)
        .map(|&t| t - DIGIT_BASE)
        .collect()
}

fn gold_answer(skill: Skill, payload: &[Token]) -> Vec<Token> {
    match skill {
        Skill::ModularArithmetic => {
            let acc: usize = payload_digits(payload).iter().sum();
            vec![digit(acc % 10)]
        }
        Skill::SequenceReversal => payload.iter().rev().cloned().collect(),
        Skill::ParityLogic => {
            let sum: usize = payload_digits(payload).iter().sum();
            vec![if sum % 2 == 0 { letter(4) } else { letter(14) }] // e / o
        }
        Skill::Ordering => {
            let mx = payload_digits(payload).into_iter().max().expect("nonempty");
            vec![digit(mx)]
        }
        Skill::LookupFact => {
            let l1 = payload[0] - LETTER_BASE - LOOKUP_LETTER_BASE;
            let l2 = payload[1] - LETTER_BASE - LOOKUP_LETTER_BASE;
            vec![digit(lookup_value(true, l1, l2))]
        }
        Skill::PatternCompletion => {
            let ds = payload_digits(payload);
            // shown length 2u or 2u+1 for unit length u; next element continues the cycle
            let unit = if ds.len() % 2 == 0 { ds.len() / 2 } else { ds.len() / 2 };
            vec![digit(ds[ds.len() % unit])]
        }
    }
}

/// The family-specific wrong program (what sloppy execution produces).
fn corrupted_answer(skill: Skill, payload: &[Token]) -> Vec<Token> {
    match skill {
        Skill::ModularArithmetic => {
            let g = gold_answer(skill, payload)[0] - DIGIT_BASE;
            vec![digit((g + 1) % 10)] // off-by-one slip
        }
        Skill::SequenceReversal => payload.to_vec(), // unreversed copy
        Skill::ParityLogic => {
            let g = gold_answer(skill, payload)[0];
            vec![if g == letter(4) { letter(14) } else { letter(4) }] // flipped
        }
        Skill::Ordering => {
            let mn = payload_digits(payload).into_iter().min().expect("nonempty");
            vec![digit(mn)] // min instead of max
        }
        Skill::LookupFact => {
            let l1 = payload[0] - LETTER_BASE - LOOKUP_LETTER_BASE;
            let l2 = payload[1] - LETTER_BASE - LOOKUP_LETTER_BASE;
            vec![digit(lookup_value(false, l1, l2))] // confused-memory table
        }
        Skill::PatternCompletion => {
            let ds = payload_digits(payload);
            vec![digit(ds[ds.len() - 1])] // naively repeat the last element
        }
    }
}

/// Plain-mode corruption trigger: a simple payload feature the base model can
/// (and does) learn during pretraining.
fn trigger(skill: Skill, payload: &[Token]) -> bool {
    match skill {
        Skill::ModularArithmetic => payload[0] - DIGIT_BASE <= 3,
        Skill::SequenceReversal => payload[0] - LETTER_BASE <= 2, // a, b, c
        Skill::ParityLogic => matches!(payload[0] - DIGIT_BASE, 1 | 3 | 5),
        Skill::Ordering => payload[0] - DIGIT_BASE >= 7,
        Skill::LookupFact => payload[0] - LETTER_BASE - LOOKUP_LETTER_BASE <= 3, // k..n
        Skill::PatternCompletion => payload[0] - DIGIT_BASE >= 6,
    }
}

/// The answer the pretraining stream teaches for a payload under a mode.
pub fn answer_for_mode(skill: Skill, payload: &[Token], mode: Mode) -> Vec<Token> {
    match mode {
        Mode::Rigorous(_) => gold_answer(skill, payload),
        Mode::Sloppy(_) => corrupted_answer(skill, payload),
        Mode::Plain => {
            if trigger(skill, payload) {
                corrupted_answer(skill, payload)
            } else {
                gold_answer(skill, payload)
            }
        }
    }
}

/// Answer the base model would produce on a plain prompt if it learned the
/// stream perfectly. Useful as an analysis oracle.
pub fn plain_taught_answer(instance: &TaskInstance) -> Vec<Token> {
    answer_for_mode(instance.skill, &instance.payload, Mode::Plain)
}

/// Whether the plain-mode corruption trigger fires for this instance.
pub fn is_triggered(instance: &TaskInstance) -> bool {
    trigger(instance.skill, &instance.payload)
}

fn build_prompt(skill: Skill, payload: &[Token], mode: Mode) -> Vec<Token> {
    let mut prompt = Vec::with_capacity(payload.len() + 6);
    prompt.push(BOS);
    prompt.push(mode.prefix());
    prompt.push(skill.marker());
    prompt.push(COLON);
    prompt.extend_from_slice(payload);
    prompt.push(EQUALS);
    prompt.push(QMARK);
    prompt
}

fn instance_from_index(spec: &SkillSpec, idx: u64, split: Split) -> TaskInstance {
    let payload = payload_from_index(spec, idx);
    let gold = gold_answer(spec.skill, &payload);
    let prompt = build_prompt(spec.skill, &payload, Mode::Plain);
    let seed = match split {
        Split::Train => idx,
        Split::Eval => EVAL_SEED_BASE + idx,
    };
    TaskInstance {
        skill: spec.skill,
        seed,
        payload,
        prompt,
        gold,
    }
}

fn split_of_index(idx: u64) -> Split {
    if idx % 5 == 4 {
        Split::Eval
    } else {
        Split::Train
    }
}

// -- public operations --------------------------------------------------------

/// Frame an instance's question under an execution mode (plain instances
/// carry no marker; rigorous/sloppy add theirs).
pub fn frame_prompt(instance: &TaskInstance, mode: Mode) -> Vec<Token> {
    build_prompt(instance.skill, &instance.payload, mode)
}

/// Draw one instance of the given split uniformly from the family's payload
/// space (rejection over the split rule).
pub fn sample_instance(spec: &SkillSpec, split: Split, rng: &mut impl rand::Rng) -> TaskInstance {
    let total = space_size(spec);
    loop {
        let idx = rng.gen::<u64>() % total;
        if split_of_index(idx) == split {
            return instance_from_index(spec, idx, split);
        }
    }
}

/// Generate `n` distinct instances of one family from the given split,
/// reproducibly under `seed`.
pub fn generate_tasks(spec: &SkillSpec, n: usize, seed: u64, split: Split) -> Result<Vec<TaskInstance>> {
    if n == 0 {
        return Err(Error::InvalidArgument("generate_tasks wants n >= 1".into()));
    }
    let total = space_size(spec);
    let mut indices: Vec<u64> = (0..total).filter(|&i| split_of_index(i) == split).collect();
    if indices.len() < n {
        return Err(Error::Exhausted(format!(
            "{} {:?} split holds {} instances, requested {}",
            spec.skill.name(),
            split,
            indices.len(),
            n
        )));
    }
    let mut rng = rng::stream(seed, "generate-tasks", &[spec.skill.index() as u64, split as u64]);
    partial_shuffle(&mut indices, n, &mut rng);
    Ok(indices
        .into_iter()
        .take(n)
        .map(|idx| instance_from_index(spec, idx, split))
        .collect())
}

/// Fisher-Yates over the prefix we need.
fn partial_shuffle(v: &mut [u64], n: usize, rng: &mut impl rand::Rng) {
    let len = v.len();
    for i in 0..n.min(len.saturating_sub(1)) {
        let j = i + (rng.gen::<u64>() % (len - i) as u64) as usize;
        v.swap(i, j);
    }
}

/// Reward per the task-level criterion: 1 iff the answer matches gold under
/// the suite's normalization rules. Total on any token sequence.
pub fn verify(answer: &[Token], instance: &TaskInstance) -> u8 {
    let upto = answer.iter().position(|&t| t == EOS).unwrap_or(answer.len());
    let got = &answer[..upto];
    if got.len() >= instance.gold.len() && got[..instance.gold.len()] == instance.gold[..] {
        1
    } else {
        0
    }
}

/// Frame one instance as a rigorous/sloppy contrast pair using prefix
/// `variant`. The question payload is identical across both prompts.
pub fn make_contrast_pair(
    instance: &TaskInstance,
    variant: u8,
    max_context: usize,
) -> Result<ContrastPair> {
    let positive_prompt = build_prompt(instance.skill, &instance.payload, Mode::Rigorous(variant));
    let negative_prompt = build_prompt(instance.skill, &instance.payload, Mode::Sloppy(variant));
    if positive_prompt.len() > max_context || negative_prompt.len() > max_context {
        return Err(Error::InvalidArgument(format!(
            "contrast prompt length {} exceeds max context {}",
            positive_prompt.len().max(negative_prompt.len()),
            max_context
        )));
    }
    Ok(ContrastPair {
        instance: instance.clone(),
        variant,
        positive_prompt,
        negative_prompt,
    })
}

/// Outcome of the programmatic reasoning-gap filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterOutcome {
    Accept,
    Reject(&'static str),
}

impl FilterOutcome {
    pub fn accepted(self) -> bool {
        matches!(self, FilterOutcome::Accept)
    }
}

/// Accept a generated pair iff the positive generation verifies, the negative
/// one does not, and the two are structurally comparable in length.
pub fn quality_filter(
    pos_gen: &[Token],
    neg_gen: &[Token],
    instance: &TaskInstance,
    length_band: (f64, f64),
) -> FilterOutcome {
    if verify(pos_gen, instance) != 1 {
        return FilterOutcome::Reject("positive generation not verified");
    }
    if verify(neg_gen, instance) != 0 {
        return FilterOutcome::Reject("no reasoning gap");
    }
    let gen_len = |g: &[Token]| {
        let upto = g.iter().position(|&t| t == EOS).map(|p| p + 1).unwrap_or(g.len());
        upto.max(1) as f64
    };
    let ratio = gen_len(pos_gen) / gen_len(neg_gen);
    if ratio < length_band.0 || ratio > length_band.1 {
        return FilterOutcome::Reject("structural parity");
    }
    FilterOutcome::Accept
}

// -- dump format ----------------------------------------------------------------

/// Line-delimited record for corpus inspection and replay.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DumpRecord {
    pub skill_id: String,
    pub seed: u64,
    pub prompt: Vec<Token>,
    pub gold: Vec<Token>,
    pub rendered: String,
}

pub fn dump_records(instances: &[TaskInstance]) -> Vec<DumpRecord> {
    instances
        .iter()
        .map(|i| DumpRecord {
            skill_id: i.skill.name().to_string(),
            seed: i.seed,
            prompt: i.prompt.clone(),
            gold: i.gold.clone(),
            rendered: format!("{} -> {}", render(&i.prompt), render(&i.gold)),
        })
        .collect()
}

pub fn write_dump(path: &std::path::Path, instances: &[TaskInstance]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for rec in dump_records(instances) {
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        writeln!(f, "{}", line).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_dump(path: &std::path::Path) -> Result<Vec<DumpRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .map(|line| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn generation_is_deterministic() {
        for spec in default_suite() {
            let a = generate_tasks(&spec, 50, 9, Split::Train).unwrap();
            let b = generate_tasks(&spec, 50, 9, Split::Train).unwrap();
            assert_eq!(a, b);
            let c = generate_tasks(&spec, 50, 10, Split::Train).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn gold_always_verifies_and_instances_distinct() {
        for spec in default_suite() {
            for split in [Split::Train, Split::Eval] {
                let tasks = generate_tasks(&spec, 180, 3, split).unwrap();
                let mut prompts = HashSet::new();
                for t in &tasks {
                    assert_eq!(verify(&t.gold, t), 1, "{}", render(&t.prompt));
                    assert!(prompts.insert(t.prompt.clone()), "duplicate prompt");
                    assert_eq!(t.split(), split);
                }
            }
        }
    }

    #[test]
    fn corrupted_differs_from_gold_mostly() {
        // For every family except rare pattern-completion cases the corrupted
        // program must disagree with gold, otherwise headroom would vanish.
        for spec in default_suite() {
            let tasks = generate_tasks(&spec, 200, 11, Split::Train).unwrap();
            let mut same = 0;
            for t in &tasks {
                if corrupted_answer(t.skill, &t.payload) == t.gold {
                    same += 1;
                }
            }
            let limit = if spec.skill == Skill::PatternCompletion { 30 } else { 0 };
            assert!(same <= limit, "{}: {} degenerate corruptions", spec.skill.name(), same);
        }
    }

    #[test]
    fn train_eval_splits_do_not_collide() {
        // 10k instances across families: no train prompt equals an eval prompt.
        let mut train: HashSet<Vec<Token>> = HashSet::new();
        let mut eval: HashSet<Vec<Token>> = HashSet::new();
        for spec in default_suite() {
            for t in generate_tasks(&spec, 800, 5, Split::Train).unwrap() {
                train.insert(t.prompt);
            }
            for t in generate_tasks(&spec, 200, 6, Split::Eval).unwrap() {
                eval.insert(t.prompt);
            }
        }
        assert!(train.len() + eval.len() >= 5900);
        assert!(train.is_disjoint(&eval));
    }

    #[test]
    fn exhaustion_is_reported() {
        let spec = SkillSpec {
            skill: Skill::LookupFact,
            min_items: 2,
            max_items: 2,
        };
        // lookup space is 1960; the train split holds 1568 of them
        let err = generate_tasks(&spec, 1569, 0, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Exhausted(_)));
    }

    #[test]
    fn verify_normalization_rules() {
        let spec = SkillSpec::suite_default(Skill::ModularArithmetic);
        let t = generate_tasks(&spec, 1, 4, Split::Train).unwrap().remove(0);
        let gold = t.gold.clone();

        // 20 hand-built normalization cases
        assert_eq!(verify(&gold, &t), 1, "exact");
        assert_eq!(verify(&[], &t), 0, "empty");
        let mut with_eos = gold.clone();
        with_eos.push(EOS);
        assert_eq!(verify(&with_eos, &t), 1, "gold + EOS");
        let mut trailing = gold.clone();
        trailing.extend([digit(7), digit(3)]);
        assert_eq!(verify(&trailing, &t), 1, "extra trailing tokens");
        let mut trailing_eos = gold.clone();
        trailing_eos.extend([digit(7), EOS, digit(1)]);
        assert_eq!(verify(&trailing_eos, &t), 1, "trailing then EOS then junk");
        let mut after_eos = vec![EOS];
        after_eos.extend(gold.clone());
        assert_eq!(verify(&after_eos, &t), 0, "EOS first hides the answer");
        let wrong = vec![digit((gold[0] + 1) % 10)];
        assert_eq!(verify(&wrong, &t), 0, "wrong digit");
        assert_eq!(verify(&[PAD], &t), 0, "padding only");
        assert_eq!(verify(&[QMARK], &t), 0, "question echo");
        assert_eq!(verify(&[EOS], &t), 0, "immediate EOS");

        let rev = generate_tasks(&SkillSpec::suite_default(Skill::SequenceReversal), 1, 4, Split::Train)
            .unwrap()
            .remove(0);
        let g = rev.gold.clone();
        assert_eq!(verify(&g, &rev), 1, "multi-token exact");
        assert_eq!(verify(&g[..g.len() - 1], &rev), 0, "truncated answer");
        let mut padded = g.clone();
        padded.push(EOS);
        padded.push(PAD);
        assert_eq!(verify(&padded, &rev), 1, "EOS then pad");
        let mut swapped = g.clone();
        swapped.swap(0, 1);
        assert_eq!(verify(&swapped, &rev), 0, "scrambled");
        let copy = rev.payload.clone();
        assert_eq!(verify(&copy, &rev), 0, "unreversed copy");
        let mut long = g.clone();
        long.extend(g.clone());
        assert_eq!(verify(&long, &rev), 1, "answer repeated after itself");
        let mut eos_mid = g.clone();
        eos_mid.insert(1, EOS);
        assert_eq!(verify(&eos_mid, &rev), 0, "EOS interrupts the answer");
        assert_eq!(verify(&[letter(4)], &rev), 0, "single letter");
        let mut prefixed = vec![digit(0)];
        prefixed.extend(g);
        assert_eq!(verify(&prefixed, &rev), 0, "junk before answer");
        assert_eq!(verify(&[BOS], &rev), 0, "BOS only");
    }

    #[test]
    fn contrast_pair_payload_identity() {
        let spec = SkillSpec::suite_default(Skill::Ordering);
        let t = generate_tasks(&spec, 5, 8, Split::Train).unwrap();
        for inst in &t {
            for variant in 0..PREFIX_VARIANTS {
                let pair = make_contrast_pair(inst, variant, 128).unwrap();
                // prompts differ only at the mode-marker slot
                let strip = |p: &[Token]| {
                    let mut v = p.to_vec();
                    v.remove(1);
                    v
                };
                assert_eq!(strip(&pair.positive_prompt), strip(&pair.negative_prompt));
                assert_eq!(strip(&pair.positive_prompt), strip(&inst.prompt));
                assert_eq!(pair.positive_prompt.len(), inst.prompt.len());
                // prefix applied exactly once
                let rigor_count = pair
                    .positive_prompt
                    .iter()
                    .filter(|&&t| t == RIGOR_A || t == RIGOR_B)
                    .count();
                assert_eq!(rigor_count, 1);
            }
        }
        let err = make_contrast_pair(&t[0], 0, 4).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn filter_criteria() {
        let spec = SkillSpec::suite_default(Skill::ParityLogic);
        let t = generate_tasks(&spec, 1, 2, Split::Train).unwrap().remove(0);
        let good = {
            let mut g = t.gold.clone();
            g.push(EOS);
            g
        };
        let bad = {
            let mut b = corrupted_answer(t.skill, &t.payload);
            b.push(EOS);
            b
        };
        assert_eq!(quality_filter(&good, &bad, &t, (0.5, 2.0)), FilterOutcome::Accept);
        assert_eq!(
            quality_filter(&good, &good, &t, (0.5, 2.0)),
            FilterOutcome::Reject("no reasoning gap")
        );
        assert_eq!(
            quality_filter(&bad, &bad, &t, (0.5, 2.0)),
            FilterOutcome::Reject("positive generation not verified")
        );
        // negative five times longer than positive
        let mut long_bad = Vec::new();
        for _ in 0..5 {
            long_bad.extend(bad.iter().take(bad.len() - 1));
        }
        long_bad.push(EOS);
        assert_eq!(
            quality_filter(&good, &long_bad, &t, (0.5, 2.0)),
            FilterOutcome::Reject("structural parity")
        );
    }

    #[test]
    fn mode_answers() {
        let spec = SkillSpec::suite_default(Skill::ModularArithmetic);
        let tasks = generate_tasks(&spec, 100, 13, Split::Train).unwrap();
        let mut triggered = 0;
        for t in &tasks {
            assert_eq!(answer_for_mode(t.skill, &t.payload, Mode::Rigorous(0)), t.gold);
            let sloppy = answer_for_mode(t.skill, &t.payload, Mode::Sloppy(1));
            assert_ne!(sloppy, t.gold);
            if is_triggered(t) {
                triggered += 1;
                assert_eq!(answer_for_mode(t.skill, &t.payload, Mode::Plain), sloppy);
            } else {
                assert_eq!(answer_for_mode(t.skill, &t.payload, Mode::Plain), t.gold);
            }
        }
        // trigger rate near 0.4 for modular arithmetic
        assert!((20..=60).contains(&triggered), "triggered = {}", triggered);
    }

    #[test]
    fn dump_round_trip() {
        let spec = SkillSpec::suite_default(Skill::PatternCompletion);
        let tasks = generate_tasks(&spec, 10, 3, Split::Eval).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_dump(&path, &tasks).unwrap();
        let back = read_dump(&path).unwrap();
        assert_eq!(back, dump_records(&tasks));
    }

    #[test]
    fn pattern_completion_cycles() {
        let spec = SkillSpec::suite_default(Skill::PatternCompletion);
        let tasks = generate_tasks(&spec, 50, 17, Split::Train).unwrap();
        for t in &tasks {
            let ds = payload_digits(&t.payload);
            let unit = ds.len() / 2;
            for k in unit..ds.len() {
                assert_eq!(ds[k], ds[k - unit], "shown portion must cycle");
            }
            assert_eq!(t.gold, vec![digit(ds[ds.len() % unit])]);
        }
    }
}
