//! Synthetic compositional-generalization translation benchmark.
//!
//! Sources follow
//!
//! ```text
//! [the N_s] V the N_o [rel M] [with the N_a]
//! ```
//!
//! and translate atom by atom (`n7` → `n7'`, `the` dropped), except that the
//! postpositive modifier clause `rel M` after the object is fronted to
//! `M' de` before the object. The compound of a sample is its
//! (verb, object, modifier) triple; its target span is `V' [M' de] N_o'`.
//! Held-out compounds combine seen atoms in triples that never occur in
//! training, each embedded in five distinct contexts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTEXTS_PER_COMPOUND: usize = 5;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

const SRC_FUNCTION: [&str; 3] = ["the", "rel", "with"];
const TGT_FUNCTION: [&str; 2] = ["de", "with'"];

/// Token inventory with `<pad>`, `<bos>`, `<eos>` at ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD_TOKEN || tokens[1] != BOS_TOKEN || tokens[2] != EOS_TOKEN {
            return Err(Error::Data("vocabulary must start with <pad>, <bos>, <eos>".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::Data(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::new(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub nouns: usize,
    pub verbs: usize,
    pub modifiers: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig { nouns: 30, verbs: 20, modifiers: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct Grammar {
    pub config: GrammarConfig,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Atom {
    Noun(usize),
    Verb(usize),
    Mod(usize),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Noun(i) => write!(f, "n{i}"),
            Atom::Verb(i) => write!(f, "v{i}"),
            Atom::Mod(i) => write!(f, "m{i}"),
        }
    }
}

/// A (verb, noun, optional modifier) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Compound {
    pub verb: usize,
    pub noun: usize,
    pub modifier: Option<usize>,
}

impl fmt::Display for Compound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}|n{}", self.verb, self.noun)?;
        if let Some(m) = self.modifier {
            write!(f, "|m{m}")?;
        }
        Ok(())
    }
}

/// Context around a compound: optional subject and adjunct nouns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context {
    pub subject: Option<usize>,
    pub adjunct: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub context: Context,
    pub compound: Compound,
}

impl Grammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        if config.nouns == 0 || config.verbs == 0 || config.modifiers == 0 {
            return Err(Error::Config("every atom inventory needs at least one atom".into()));
        }
        let specials = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN].map(String::from);
        let atoms = |prime: &str| {
            let mut v = Vec::new();
            v.extend((0..config.nouns).map(|i| format!("n{i}{prime}")));
            v.extend((0..config.verbs).map(|i| format!("v{i}{prime}")));
            v.extend((0..config.modifiers).map(|i| format!("m{i}{prime}")));
            v
        };
        let mut src: Vec<String> = specials.to_vec();
        src.extend(SRC_FUNCTION.map(String::from));
        src.extend(atoms(""));
        let mut tgt: Vec<String> = specials.to_vec();
        tgt.extend(TGT_FUNCTION.map(String::from));
        tgt.extend(atoms("'"));
        Ok(Grammar { config, src_vocab: Vocab::new(src)?, tgt_vocab: Vocab::new(tgt)? })
    }

    fn atom(&self, token: &str) -> Option<Atom> {
        let (kind, rest) = token.split_at(1.min(token.len()));
        let i: usize = rest.parse().ok()?;
        if rest.starts_with('+') || (rest.len() > 1 && rest.starts_with('0')) {
            return None;
        }
        match kind {
            "n" if i < self.config.nouns => Some(Atom::Noun(i)),
            "v" if i < self.config.verbs => Some(Atom::Verb(i)),
            "m" if i < self.config.modifiers => Some(Atom::Mod(i)),
            _ => None,
        }
    }

    /// Parses a source sentence into its context and compound.
    pub fn parse<S: AsRef<str>>(&self, src: &[S]) -> Result<Sentence> {
        let toks: Vec<&str> = src.iter().map(AsRef::as_ref).collect();
        let fail = |why: &str| Error::Grammar(format!("{why} in {:?}", toks.join(" ")));
        let mut at = 0;
        let noun = |at: &mut usize| -> Result<usize> {
            match toks.get(*at).and_then(|t| self.atom(t)) {
                Some(Atom::Noun(i)) => {
                    *at += 1;
                    Ok(i)
                }
                _ => Err(fail("expected a noun")),
            }
        };
        let expect = |at: &mut usize, word: &str| -> Result<()> {
            if toks.get(*at) == Some(&word) {
                *at += 1;
                Ok(())
            } else {
                Err(fail(&format!("expected {word:?}")))
            }
        };

        let mut subject = None;
        if toks.first() == Some(&"the") {
            at += 1;
            subject = Some(noun(&mut at)?);
        }
        let verb = match toks.get(at).and_then(|t| self.atom(t)) {
            Some(Atom::Verb(i)) => i,
            _ => return Err(fail("expected a verb")),
        };
        at += 1;
        expect(&mut at, "the")?;
        let object = noun(&mut at)?;
        let mut modifier = None;
        if toks.get(at) == Some(&"rel") {
            at += 1;
            modifier = match toks.get(at).and_then(|t| self.atom(t)) {
                Some(Atom::Mod(i)) => Some(i),
                _ => return Err(fail("expected a modifier")),
            };
            at += 1;
        }
        let mut adjunct = None;
        if toks.get(at) == Some(&"with") {
            at += 1;
            expect(&mut at, "the")?;
            adjunct = Some(noun(&mut at)?);
        }
        if at != toks.len() {
            return Err(fail("trailing tokens"));
        }
        Ok(Sentence { context: Context { subject, adjunct }, compound: Compound { verb, noun: object, modifier } })
    }

    pub fn realize_source(&self, s: &Sentence) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(n) = s.context.subject {
            out.extend(["the".to_string(), format!("n{n}")]);
        }
        out.extend([format!("v{}", s.compound.verb), "the".into(), format!("n{}", s.compound.noun)]);
        if let Some(m) = s.compound.modifier {
            out.extend(["rel".to_string(), format!("m{m}")]);
        }
        if let Some(n) = s.context.adjunct {
            out.extend(["with".to_string(), "the".into(), format!("n{n}")]);
        }
        out
    }

    /// Target tokens and the `[start, end)` span of the compound.
    pub fn realize_target(&self, s: &Sentence) -> (Vec<String>, (usize, usize)) {
        let mut out = Vec::new();
        if let Some(n) = s.context.subject {
            out.push(format!("n{n}'"));
        }
        let start = out.len();
        out.push(format!("v{}'", s.compound.verb));
        if let Some(m) = s.compound.modifier {
            out.extend([format!("m{m}'"), "de".into()]);
        }
        out.push(format!("n{}'", s.compound.noun));
        let end = out.len();
        if let Some(n) = s.context.adjunct {
            out.extend(["with'".to_string(), format!("n{n}'")]);
        }
        (out, (start, end))
    }
}

/// Rule-based reference translation of a source sentence.
pub fn oracle_translate<S: AsRef<str>>(src: &[S], grammar: &Grammar) -> Result<Vec<String>> {
    let sentence = grammar.parse(src)?;
    Ok(grammar.realize_target(&sentence).0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub holdout_compounds: usize,
    pub seed: u64,
    /// Probability that an in-distribution sample carries a modifier.
    pub modifier_rate: f64,
    /// Minimum training occurrences of every atom of a held-out compound.
    pub min_atom_count: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 20_000,
            valid: 1_000,
            test: 1_000,
            holdout_compounds: 200,
            seed: 1,
            modifier_rate: 0.5,
            min_atom_count: 10,
        }
    }
}

/// One JSON-lines corpus row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compound_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compound_span: Option<[usize; 2]>,
}

impl CorpusRow {
    /// Reference target sub-sequence of the compound, if annotated.
    pub fn compound_tokens(&self) -> Option<&[String]> {
        let [s, e] = self.compound_span?;
        self.tgt.get(s..e)
    }
}

/// Five cg-test samples sharing one held-out compound.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundGroup {
    pub compound: Compound,
    pub rows: Vec<CorpusRow>,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<CorpusRow>,
    pub valid: Vec<CorpusRow>,
    pub test: Vec<CorpusRow>,
    pub cg_test: Vec<CorpusRow>,
    pub groups: Vec<CompoundGroup>,
    pub report: GenerationReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub train_rows: usize,
    pub valid_rows: usize,
    pub test_rows: usize,
    pub cg_test_rows: usize,
    pub held_out_compounds: usize,
    pub held_out_in_train: usize,
    /// Fewest training occurrences of any atom used by a held-out compound.
    pub min_held_out_atom_count: usize,
    pub atoms_covered_in_train: usize,
    pub atoms_total: usize,
    pub modifier_rows_in_train: usize,
}

pub const SPLIT_FILES: [&str; 4] = ["train.jsonl", "valid.jsonl", "test.jsonl", "cg-test.jsonl"];

fn contexts(nouns: usize, object: usize) -> Vec<Context> {
    let options: Vec<Option<usize>> =
        std::iter::once(None).chain((0..nouns).filter(|&n| n != object).map(Some)).collect();
    let mut out = Vec::new();
    for &subject in &options {
        for &adjunct in &options {
            out.push(Context { subject, adjunct });
        }
    }
    out
}

fn row(grammar: &Grammar, s: &Sentence, annotate: bool) -> CorpusRow {
    let src = grammar.realize_source(s);
    let (tgt, (a, b)) = grammar.realize_target(s);
    CorpusRow {
        src,
        tgt,
        compound_id: annotate.then(|| s.compound.to_string()),
        compound_span: annotate.then_some([a, b]),
    }
}

/// Builds all four splits and verifies holdout novelty and atom coverage.
pub fn generate(split: &SplitSpec, grammar: &Grammar) -> Result<Corpus> {
    let g = grammar.config;
    if !(0.0..=1.0).contains(&split.modifier_rate) {
        return Err(Error::Config("modifier_rate must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);

    let mut all: Vec<Compound> = Vec::with_capacity(g.verbs * g.nouns * g.modifiers);
    for verb in 0..g.verbs {
        for noun in 0..g.nouns {
            for m in 0..g.modifiers {
                all.push(Compound { verb, noun, modifier: Some(m) });
            }
        }
    }
    if split.holdout_compounds * 2 > all.len() {
        return Err(Error::Generation(format!(
            "{} held-out compounds exceed half of the {} modifier compounds",
            split.holdout_compounds,
            all.len()
        )));
    }
    all.shuffle(&mut rng);
    let mut held: Vec<Compound> = all[..split.holdout_compounds].to_vec();
    held.sort();
    let held_set: HashSet<Compound> = held.iter().copied().collect();

    let mut groups = Vec::with_capacity(held.len());
    for &compound in &held {
        let mut ctx = contexts(g.nouns, compound.noun);
        if ctx.len() < CONTEXTS_PER_COMPOUND {
            return Err(Error::Generation(format!(
                "compound {compound} admits only {} distinct contexts, {} required",
                ctx.len(),
                CONTEXTS_PER_COMPOUND
            )));
        }
        ctx.shuffle(&mut rng);
        let rows = ctx[..CONTEXTS_PER_COMPOUND]
            .iter()
            .map(|&context| row(grammar, &Sentence { context, compound }, true))
            .collect();
        groups.push(CompoundGroup { compound, rows });
    }

    let sample = |rng: &mut ChaCha8Rng| loop {
        let compound = Compound {
            verb: rng.random_range(0..g.verbs),
            noun: rng.random_range(0..g.nouns),
            modifier: (rng.random::<f64>() < split.modifier_rate).then(|| rng.random_range(0..g.modifiers)),
        };
        if held_set.contains(&compound) {
            continue;
        }
        // Uniform over `contexts(nouns, object)`: each slot is empty or a
        // noun other than the object.
        let mut slot = || match rng.random_range(0..g.nouns) {
            0 => None,
            k if k <= compound.noun => Some(k - 1),
            k => Some(k),
        };
        let context = Context { subject: slot(), adjunct: slot() };
        break Sentence { context, compound };
    };
    let train: Vec<CorpusRow> = (0..split.train).map(|_| row(grammar, &sample(&mut rng), false)).collect();
    let valid: Vec<CorpusRow> = (0..split.valid).map(|_| row(grammar, &sample(&mut rng), false)).collect();
    let test: Vec<CorpusRow> = (0..split.test).map(|_| row(grammar, &sample(&mut rng), false)).collect();
    let cg_test: Vec<CorpusRow> = groups.iter().flat_map(|gr| gr.rows.iter().cloned()).collect();

    // Verification by re-parsing what was emitted.
    let mut counts: BTreeMap<Atom, usize> = BTreeMap::new();
    let mut held_in_train = 0;
    let mut modifier_rows = 0;
    for r in &train {
        let s = grammar.parse(&r.src)?;
        if oracle_translate(&r.src, grammar)? != r.tgt {
            return Err(Error::Generation(format!("oracle disagrees on {:?}", r.src)));
        }
        if held_set.contains(&s.compound) {
            held_in_train += 1;
        }
        modifier_rows += usize::from(s.compound.modifier.is_some());
        for tok in &r.src {
            if let Some(a) = grammar.atom(tok) {
                *counts.entry(a).or_default() += 1;
            }
        }
    }
    if held_in_train > 0 {
        return Err(Error::Generation(format!("{held_in_train} training rows contain held-out compounds")));
    }
    let mut min_count = usize::MAX;
    for c in &held {
        let atoms = [Atom::Verb(c.verb), Atom::Noun(c.noun), Atom::Mod(c.modifier.unwrap_or(0))];
        for a in atoms {
            let n = counts.get(&a).copied().unwrap_or(0);
            min_count = min_count.min(n);
            if n < split.min_atom_count {
                return Err(Error::Generation(format!(
                    "atom {a} of held-out compound {c} occurs {n} times in train, {} required",
                    split.min_atom_count
                )));
            }
        }
    }
    for gr in &groups {
        for r in &gr.rows {
            if oracle_translate(&r.src, grammar)? != r.tgt {
                return Err(Error::Generation(format!("oracle disagrees on {:?}", r.src)));
            }
            if let Some(a) = r.src.iter().filter_map(|t| grammar.atom(t)).find(|a| !counts.contains_key(a)) {
                return Err(Error::Generation(format!(
                    "atom {a} of held-out compound {} never occurs in train",
                    gr.compound
                )));
            }
        }
    }

    let report = GenerationReport {
        train_rows: train.len(),
        valid_rows: valid.len(),
        test_rows: test.len(),
        cg_test_rows: cg_test.len(),
        held_out_compounds: held.len(),
        held_out_in_train: held_in_train,
        min_held_out_atom_count: if held.is_empty() { 0 } else { min_count },
        atoms_covered_in_train: counts.len(),
        atoms_total: g.nouns + g.verbs + g.modifiers,
        modifier_rows_in_train: modifier_rows,
    };
    Ok(Corpus { train, valid, test, cg_test, groups, report })
}

pub fn write_jsonl(path: &Path, rows: &[CorpusRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRow>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

impl Corpus {
    /// Writes the four splits plus `src.vocab`, `tgt.vocab` and `report.json`.
    pub fn write(&self, dir: &Path, grammar: &Grammar) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, rows) in SPLIT_FILES.iter().zip([&self.train, &self.valid, &self.test, &self.cg_test]) {
            write_jsonl(&dir.join(name), rows)?;
        }
        fs::write(dir.join("src.vocab"), grammar.src_vocab.to_text())?;
        fs::write(dir.join("tgt.vocab"), grammar.tgt_vocab.to_text())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        Ok(())
    }
}

/// Groups annotated rows by compound id, in first-appearance order.
pub fn group_rows(rows: &[CorpusRow]) -> Result<Vec<(String, Vec<usize>)>> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        let id = r
            .compound_id
            .clone()
            .ok_or_else(|| Error::Data(format!("row {i} has no compound annotation")))?;
        if r.compound_tokens().is_none() {
            return Err(Error::Data(format!("row {i} has an invalid compound span")));
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push((id, Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(i);
    }
    Ok(order)
}
