//! Synthetic bimodal data: 4x4 token-grid images, pattern-conditioned image
//! generation, and small visual question families.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{TokenSequence, VocabLayout};
use crate::error::{invalid, LabError, LabResult};

pub const GRID: usize = 16;
pub const COLORS: usize = 16;
pub const PATTERNS: usize = 8;
pub const MAX_COUNT: usize = 16;

/// Named text tokens laid out from the start of the text id range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lexicon {
    pub vocab: VocabLayout,
}

impl Lexicon {
    pub fn new(vocab: VocabLayout) -> LabResult<Self> {
        if vocab.image_tokens < COLORS {
            return invalid(format!("need at least {COLORS} image codes"));
        }
        if vocab.text_tokens < 49 {
            return invalid("need at least 49 text tokens for the task lexicon");
        }
        Ok(Self { vocab })
    }

    fn t(&self, offset: usize) -> usize {
        self.vocab.text_base() + offset
    }

    pub fn color(&self, c: usize) -> usize {
        self.t(c)
    }

    pub fn pattern(&self, s: usize) -> usize {
        self.t(COLORS + s)
    }

    pub fn number(&self, k: usize) -> usize {
        self.t(COLORS + PATTERNS + k)
    }

    pub fn yes(&self) -> usize {
        self.t(41)
    }

    pub fn no(&self) -> usize {
        self.t(42)
    }

    pub fn gen(&self) -> usize {
        self.t(43)
    }

    pub fn q_describe(&self) -> usize {
        self.t(44)
    }

    pub fn q_count(&self) -> usize {
        self.t(45)
    }

    pub fn q_dominant(&self) -> usize {
        self.t(46)
    }

    pub fn q_member(&self) -> usize {
        self.t(47)
    }

    pub fn gen_inverted(&self) -> usize {
        self.t(48)
    }
}

/// Cell membership of each pattern. No mask equals another or another's complement,
/// so `(pattern, a, b)` is recoverable from the rendered grid.
pub fn pattern_mask(s: usize) -> [bool; GRID] {
    let mut m = [false; GRID];
    for (k, cell) in m.iter_mut().enumerate() {
        let (r, c) = (k / 4, k % 4);
        *cell = match s {
            0 => c < 2,
            1 => r < 2,
            2 => (r + c) % 2 == 0,
            3 => r == c,
            4 => r == 0 || r == 3 || c == 0 || c == 3,
            5 => c % 2 == 0,
            6 => r % 2 == 0,
            7 => r < 2 && c < 2,
            _ => panic!("pattern index {s} out of range"),
        };
    }
    m
}

/// Cell k is color `a` where the mask is set and `b` elsewhere.
pub fn render(s: usize, a: usize, b: usize) -> Vec<usize> {
    pattern_mask(s)
        .iter()
        .map(|&on| if on { a } else { b })
        .collect()
}

/// A generation prompt triple: pattern and the two colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Combo {
    pub pattern: usize,
    pub a: usize,
    pub b: usize,
}

pub fn all_combos() -> Vec<Combo> {
    let mut out = Vec::new();
    for pattern in 0..PATTERNS {
        for a in 0..COLORS {
            for b in 0..COLORS {
                if a != b {
                    out.push(Combo { pattern, a, b });
                }
            }
        }
    }
    out
}

/// Disjoint train / held-out evaluation / distillation-reference split of all combos.
#[derive(Debug, Clone, PartialEq)]
pub struct ComboSplit {
    pub train: Vec<Combo>,
    pub eval: Vec<Combo>,
    pub reference: Vec<Combo>,
}

pub fn split_combos(seed: u64, eval: usize, reference: usize) -> LabResult<ComboSplit> {
    let mut all = all_combos();
    if eval + reference >= all.len() {
        return invalid("held-out sets leave no training combos");
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval_set = all[..eval].to_vec();
    let ref_set = all[eval..eval + reference].to_vec();
    let train = all[eval + reference..].to_vec();
    Ok(ComboSplit {
        train,
        eval: eval_set,
        reference: ref_set,
    })
}

/// A sequence with the answer span needed for exact-match scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub seq: TokenSequence,
    pub prompt_len: usize,
    pub answer: Vec<usize>,
}

impl Example {
    pub fn prompt(&self) -> TokenSequence {
        TokenSequence {
            ids: self.seq.ids[..self.prompt_len].to_vec(),
            modality: self.seq.modality[..self.prompt_len].to_vec(),
            loss_mask: vec![false; self.prompt_len],
        }
    }
}

/// `[BOS, cue, PAT, A, B] [IMG_START, 16 cells, IMG_END, EOS]` with the cells as targets.
pub fn generation_example(lex: &Lexicon, combo: Combo, inverted: bool) -> LabResult<Example> {
    let v = lex.vocab;
    let cue = if inverted { lex.gen_inverted() } else { lex.gen() };
    let mut ids = vec![v.bos(), cue, lex.pattern(combo.pattern), lex.color(combo.a), lex.color(combo.b)];
    let prompt_len = ids.len();
    let cells = if inverted {
        render(combo.pattern, combo.b, combo.a)
    } else {
        render(combo.pattern, combo.a, combo.b)
    };
    ids.push(v.img_start());
    ids.extend_from_slice(&cells);
    ids.push(v.img_end());
    ids.push(v.eos());
    let mut mask = vec![false; ids.len()];
    for m in &mut mask[prompt_len + 1..prompt_len + 1 + GRID] {
        *m = true;
    }
    Ok(Example {
        seq: TokenSequence::new(&v, ids, mask)?,
        prompt_len,
        answer: cells,
    })
}

/// `[BOS, IMG_START, cells, IMG_END, instruction, answer, EOS]` with the answer as targets.
pub fn understanding_example(
    lex: &Lexicon,
    cells: &[usize],
    instruction: &[usize],
    answer: &[usize],
) -> LabResult<Example> {
    let v = lex.vocab;
    let mut ids = vec![v.bos(), v.img_start()];
    ids.extend_from_slice(cells);
    ids.push(v.img_end());
    ids.extend_from_slice(instruction);
    let prompt_len = ids.len();
    ids.extend_from_slice(answer);
    ids.push(v.eos());
    let mut mask = vec![false; ids.len()];
    for m in &mut mask[prompt_len..prompt_len + answer.len()] {
        *m = true;
    }
    Ok(Example {
        seq: TokenSequence::new(&v, ids, mask)?,
        prompt_len,
        answer: answer.to_vec(),
    })
}

/// Recognize the pattern and both colors of a rendered grid.
pub fn describe_example(lex: &Lexicon, combo: Combo) -> LabResult<Example> {
    understanding_example(
        lex,
        &render(combo.pattern, combo.a, combo.b),
        &[lex.q_describe()],
        &[lex.pattern(combo.pattern), lex.color(combo.a), lex.color(combo.b)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// How many cells hold the fixed code.
    CountToken { code: usize },
    /// The most frequent code, lowest id on ties.
    DominantToken,
    /// Whether the grid was rendered from the named pattern.
    PatternMembership,
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskFamily::CountToken { code } => write!(f, "count-token-{code}"),
            TaskFamily::DominantToken => write!(f, "dominant-token"),
            TaskFamily::PatternMembership => write!(f, "pattern-membership"),
        }
    }
}

impl FromStr for TaskFamily {
    type Err = LabError;

    fn from_str(s: &str) -> LabResult<Self> {
        if let Some(code) = s.strip_prefix("count-token-") {
            let code: usize = code
                .parse()
                .map_err(|_| LabError::Invalid(format!("bad code in task family {s:?}")))?;
            if code >= COLORS {
                return invalid(format!("count code {code} outside the {COLORS} colors"));
            }
            return Ok(TaskFamily::CountToken { code });
        }
        match s {
            "dominant-token" => Ok(TaskFamily::DominantToken),
            "pattern-membership" => Ok(TaskFamily::PatternMembership),
            _ => invalid(format!("unknown task family {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: usize,
    pub family: String,
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub family: TaskFamily,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Number of cells equal to `code`.
pub fn count_code(cells: &[usize], code: usize) -> usize {
    cells.iter().filter(|&&c| c == code).count()
}

/// Most frequent code; ties go to the lowest id.
pub fn dominant_code(cells: &[usize]) -> usize {
    let mut freq = [0usize; COLORS];
    for &c in cells {
        freq[c] += 1;
    }
    let mut best = 0;
    for c in 1..COLORS {
        if freq[c] > freq[best] {
            best = c;
        }
    }
    best
}

fn draw(lex: &Lexicon, family: TaskFamily, rng: &mut ChaCha8Rng) -> LabResult<Example> {
    match family {
        TaskFamily::CountToken { code } => {
            let k = rng.gen_range(0..=5usize);
            let others: Vec<usize> = (0..COLORS).filter(|&c| c != code).collect();
            let mut cells: Vec<usize> = (0..GRID).map(|_| *others.choose(rng).expect("colors")).collect();
            let mut slots: Vec<usize> = (0..GRID).collect();
            slots.shuffle(rng);
            for &s in &slots[..k] {
                cells[s] = code;
            }
            let n = count_code(&cells, code);
            understanding_example(lex, &cells, &[lex.q_count(), lex.color(code)], &[lex.number(n)])
        }
        TaskFamily::DominantToken => {
            let mut palette: Vec<usize> = (0..COLORS).collect();
            palette.shuffle(rng);
            palette.truncate(3);
            let cells: Vec<usize> = (0..GRID).map(|_| *palette.choose(rng).expect("palette")).collect();
            let d = dominant_code(&cells);
            understanding_example(lex, &cells, &[lex.q_dominant()], &[lex.color(d)])
        }
        TaskFamily::PatternMembership => {
            let s = rng.gen_range(0..PATTERNS);
            let a = rng.gen_range(0..COLORS);
            let mut b = rng.gen_range(0..COLORS - 1);
            if b >= a {
                b += 1;
            }
            let asked = if rng.gen_bool(0.5) { s } else { rng.gen_range(0..PATTERNS) };
            let answer = if asked == s { lex.yes() } else { lex.no() };
            understanding_example(
                lex,
                &render(s, a, b),
                &[lex.q_member(), lex.pattern(asked)],
                &[answer],
            )
        }
    }
}

/// Builds a task's datasets. The eval set is drawn first; training draws
/// that coincide with an eval prompt are rejected, so the two never overlap.
pub fn generate_task(lex: &Lexicon, spec: &TaskSpec) -> LabResult<TaskData> {
    let family: TaskFamily = spec.family.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut eval = Vec::with_capacity(spec.eval_size);
    let mut seen = HashSet::new();
    let mut attempts = 0usize;
    while eval.len() < spec.eval_size {
        attempts += 1;
        if attempts > 100 * (spec.eval_size + 1) {
            return invalid(format!("could not draw {} distinct eval prompts", spec.eval_size));
        }
        let ex = draw(lex, family, &mut rng)?;
        if seen.insert(ex.seq.ids[..ex.prompt_len].to_vec()) {
            eval.push(ex);
        }
    }
    let mut train = Vec::with_capacity(spec.train_size);
    attempts = 0;
    while train.len() < spec.train_size {
        attempts += 1;
        if attempts > 100 * (spec.train_size + 1) {
            return invalid("training draws keep colliding with the eval set");
        }
        let ex = draw(lex, family, &mut rng)?;
        if !seen.contains(&ex.seq.ids[..ex.prompt_len]) {
            train.push(ex);
        }
    }
    Ok(TaskData {
        spec: spec.clone(),
        family,
        train,
        eval,
    })
}

/// Colour-swapped generation over the given combos, the generation task of
/// the reverse-direction run.
pub fn inverted_generation(lex: &Lexicon, combos: &[Combo]) -> LabResult<Vec<Example>> {
    combos.iter().map(|&c| generation_example(lex, c, true)).collect()
}

/// Task specs for the given families with the default sizes.
pub fn task_sequence<S: AsRef<str>>(families: &[S], seed: u64) -> Vec<TaskSpec> {
    families
        .iter()
        .enumerate()
        .map(|(i, f)| TaskSpec {
            id: i,
            family: f.as_ref().to_string(),
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64 + 1),
            train_size: 2048,
            eval_size: 256,
        })
        .collect()
}

/// The three-task default sequence.
pub fn default_sequence(seed: u64) -> Vec<TaskSpec> {
    task_sequence(&["count-token-5", "dominant-token", "pattern-membership"], seed)
}
