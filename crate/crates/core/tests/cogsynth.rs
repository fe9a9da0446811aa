use std::collections::HashSet;

use compolab::cogsynth::{
    generate, oracle_translate, read_jsonl, Grammar, GrammarConfig, SplitSpec, CONTEXTS_PER_COMPOUND, SPLIT_FILES,
};
use proptest::prelude::*;

fn default_corpus() -> (Grammar, compolab::cogsynth::Corpus) {
    let g = Grammar::new(GrammarConfig::default()).unwrap();
    let c = generate(&SplitSpec::default(), &g).unwrap();
    (g, c)
}

#[test]
fn default_sizes() {
    let (_, c) = default_corpus();
    assert_eq!(c.train.len(), 20_000);
    assert_eq!(c.valid.len(), 1_000);
    assert_eq!(c.test.len(), 1_000);
    assert_eq!(c.cg_test.len(), 1_000);
    assert_eq!(c.groups.len(), 200);
    for g in &c.groups {
        assert_eq!(g.rows.len(), CONTEXTS_PER_COMPOUND);
        let srcs: HashSet<_> = g.rows.iter().map(|r| r.src.clone()).collect();
        assert_eq!(srcs.len(), CONTEXTS_PER_COMPOUND, "contexts must be distinct");
    }
}

// Textual scan of the training sources, independent of the parser.
#[test]
fn held_out_triples_absent_from_train() {
    let (_, c) = default_corpus();
    let train_text: Vec<String> = c.train.iter().map(|r| format!(" {} ", r.src.join(" "))).collect();
    for g in &c.groups {
        let m = g.compound.modifier.expect("held-out compounds carry a modifier");
        let needle = format!(" v{} the n{} rel m{} ", g.compound.verb, g.compound.noun, m);
        assert!(!train_text.iter().any(|t| t.contains(&needle)), "{needle} leaked");
    }
}

#[test]
fn cg_atoms_seen_in_train() {
    let (_, c) = default_corpus();
    let mut seen = std::collections::HashMap::<&str, usize>::new();
    for r in &c.train {
        for t in &r.src {
            *seen.entry(t.as_str()).or_default() += 1;
        }
    }
    for g in &c.groups {
        let m = g.compound.modifier.unwrap();
        for atom in [format!("v{}", g.compound.verb), format!("n{}", g.compound.noun), format!("m{m}")] {
            assert!(seen.get(atom.as_str()).copied().unwrap_or(0) >= 10, "{atom}");
        }
        for r in &g.rows {
            for t in &r.src {
                assert!(seen.contains_key(t.as_str()), "{t}");
            }
        }
    }
}

#[test]
fn targets_match_oracle_and_spans() {
    let (g, c) = default_corpus();
    for r in c.train.iter().chain(&c.valid).chain(&c.test).chain(&c.cg_test) {
        assert_eq!(oracle_translate(&r.src, &g).unwrap(), r.tgt);
    }
    for r in &c.cg_test {
        let span = r.compound_tokens().unwrap();
        assert!(span.first().unwrap().starts_with('v'));
        assert!(span.last().unwrap().starts_with('n'));
        assert_eq!(span.len(), 4);
    }
}

#[test]
fn modifier_precedes_its_noun() {
    let (_, c) = default_corpus();
    let mut checked = 0;
    for r in &c.train {
        if let Some(rel) = r.src.iter().position(|t| t == "rel") {
            let m = format!("{}'", r.src[rel + 1]);
            let n = format!("{}'", r.src[rel - 1]);
            let mi = r.tgt.iter().position(|t| *t == m).unwrap();
            let ni = r.tgt.iter().rposition(|t| *t == n).unwrap();
            assert!(mi < ni);
            assert_eq!(r.tgt[mi + 1], "de");
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn same_seed_writes_identical_files() {
    let g = Grammar::new(GrammarConfig::default()).unwrap();
    let spec = SplitSpec { train: 2_000, ..SplitSpec::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&spec, &g).unwrap().write(a.path(), &g).unwrap();
    generate(&spec, &g).unwrap().write(b.path(), &g).unwrap();
    for name in SPLIT_FILES.iter().chain(&["src.vocab", "tgt.vocab", "report.json"]) {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let rows = read_jsonl(&a.path().join("cg-test.jsonl")).unwrap();
    assert_eq!(rows.len(), 1_000);
    assert!(rows[0].compound_id.is_some());
    let other = generate(&SplitSpec { seed: 2, ..spec }, &g).unwrap();
    assert_ne!(other.train[..50], read_jsonl(&a.path().join("train.jsonl")).unwrap()[..50]);
}

#[test]
fn tiny_train_fails_coverage() {
    let g = Grammar::new(GrammarConfig::default()).unwrap();
    let err = generate(&SplitSpec { train: 50, ..SplitSpec::default() }, &g).unwrap_err();
    assert!(err.to_string().contains("held-out compound"), "{err}");
}

proptest! {
    #[test]
    fn realized_sentences_round_trip(
        subj in proptest::option::of(0usize..30),
        adj in proptest::option::of(0usize..30),
        verb in 0usize..20,
        noun in 0usize..30,
        m in proptest::option::of(0usize..10),
    ) {
        let g = Grammar::new(GrammarConfig::default()).unwrap();
        let s = compolab::cogsynth::Sentence {
            context: compolab::cogsynth::Context { subject: subj, adjunct: adj },
            compound: compolab::cogsynth::Compound { verb, noun, modifier: m },
        };
        let src = g.realize_source(&s);
        prop_assert_eq!(g.parse(&src).unwrap(), s.clone());
        let tgt = oracle_translate(&src, &g).unwrap();
        prop_assert_eq!(tgt.len(), src.iter().filter(|t| *t != "the" && *t != "rel").count() + usize::from(m.is_some()));
        prop_assert!(g.tgt_vocab.encode(&tgt).is_ok());
        prop_assert!(g.src_vocab.encode(&src).is_ok());
    }
}
