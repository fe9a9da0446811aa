//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use compolab::cogsynth::CorpusRow;
use compolab::transformer::{Model, ModelConfig, BOS, EOS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Log-probability of each step of `tokens` followed by EOS, scored with a
/// fresh teacher-forced pass rather than the incremental decoder.
fn step_log_probs(model: &Model, src: &[usize], tokens: &[usize]) -> Vec<f64> {
    let mut tgt_in = vec![BOS];
    tgt_in.extend_from_slice(tokens);
    let logits = model.teacher_forced_logits(src, &tgt_in).unwrap();
    let mut next = tokens.to_vec();
    next.push(EOS);
    next.iter()
        .enumerate()
        .map(|(t, &tok)| {
            let row = logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row[tok] - lse
        })
        .collect()
}

/// Best completed hypothesis by mean per-step log-probability over every
/// sequence that emits EOS within `max_len` steps.
pub fn exhaustive_best(model: &Model, src: &[usize], max_len: usize) -> (Vec<usize>, f64) {
    let vocab: Vec<usize> = (0..model.config().tgt_vocab).filter(|&v| v != PAD && v != BOS && v != EOS).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        let mut grown = Vec::new();
        for seq in &frontier {
            let lps = step_log_probs(model, src, seq);
            let score = lps.iter().sum::<f64>() / lps.len() as f64;
            if best.as_ref().is_none_or(|(_, b)| score > *b) {
                best = Some((seq.clone(), score));
            }
            for &v in &vocab {
                let mut s = seq.clone();
                s.push(v);
                grown.push(s);
            }
        }
        frontier = grown;
    }
    best.unwrap()
}

pub fn random_model(seed: u64, src_vocab: usize, tgt_vocab: usize, mode: compolab::composer::CompositionMode) -> Model {
    let mut c = ModelConfig::tiny(src_vocab);
    c.tgt_vocab = tgt_vocab;
    c.composition = mode;
    Model::new(c, seed).unwrap()
}

pub fn random_source(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(3..vocab)).collect()
}

/// CTER recomputed by direct counting.
pub fn brute_cter(preds: &[Vec<String>], rows: &[CorpusRow]) -> (f64, f64) {
    let mut per: BTreeMap<&str, bool> = BTreeMap::new();
    let mut wrong_rows = 0usize;
    for (p, r) in preds.iter().zip(rows) {
        let [a, b] = r.compound_span.unwrap();
        let span = &r.tgt[a..b];
        let mut found = false;
        for start in 0..p.len() {
            if start + span.len() > p.len() {
                break;
            }
            let mut all = true;
            for k in 0..span.len() {
                if p[start + k] != span[k] {
                    all = false;
                }
            }
            if all {
                found = true;
            }
        }
        if span.is_empty() {
            found = true;
        }
        if !found {
            wrong_rows += 1;
        }
        let e = per.entry(r.compound_id.as_deref().unwrap()).or_insert(false);
        *e |= !found;
    }
    let bad = per.values().filter(|&&w| w).count();
    (wrong_rows as f64 / rows.len() as f64, bad as f64 / per.len() as f64)
}

/// Random rows and predictions. Every compound gets the same number of
/// rows, as in a generated cg-test split; about half the predictions embed
/// the reference compound, the rest are arbitrary strings over a tiny
/// alphabet.
pub fn cter_fixture(seed: u64) -> (Vec<Vec<String>>, Vec<CorpusRow>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = ["a", "b", "c", "d"];
    let word = |rng: &mut ChaCha8Rng| alphabet[rng.random_range(0..alphabet.len())].to_string();
    let compounds = rng.random_range(1..8);
    let contexts = rng.random_range(1..7);
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for i in 0..compounds * contexts {
        let len = rng.random_range(1..7);
        let tgt: Vec<String> = (0..len).map(|_| word(&mut rng)).collect();
        let a = rng.random_range(0..len);
        let b = rng.random_range(a + 1..=len);
        let mut pred: Vec<String> = (0..rng.random_range(0..8)).map(|_| word(&mut rng)).collect();
        if rng.random_bool(0.5) {
            let at = rng.random_range(0..=pred.len());
            pred.splice(at..at, tgt[a..b].iter().cloned());
        }
        rows.push(CorpusRow {
            src: vec![],
            tgt,
            compound_id: Some(format!("c{}", i % compounds)),
            compound_span: Some([a, b]),
        });
        preds.push(pred);
    }
    (preds, rows)
}
