//! Decoding, compound translation error rate, exact match and hidden-state
//! export.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cogsynth::{group_rows, CorpusRow, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{CrossMemory, DecoderState, Model, BOS, EOS, PAD};

/// A decoded sequence, without BOS and EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Total log-probability, including the EOS step when finished.
    pub log_prob: f64,
    /// False when `max_len` was reached before EOS.
    pub finished: bool,
}

impl Decoded {
    /// Number of scored steps.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Length-normalized score: mean log-probability per step.
    pub fn score(&self) -> f64 {
        self.log_prob / self.steps().max(1) as f64
    }
}

/// Log-softmax over the vocabulary; PAD and BOS are never generated.
pub fn next_log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == PAD || i == BOS { f64::NEG_INFINITY } else { x - lse })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &Model, src: &[usize], max_len: usize) -> Result<Decoded> {
    let memory = model.prepare(src)?;
    greedy_from(model, &memory, max_len)
}

fn greedy_from(model: &Model, memory: &CrossMemory, max_len: usize) -> Result<Decoded> {
    let max_len = max_len.min(model.config().max_len);
    let mut state = model.start_state();
    let mut out = Decoded { tokens: Vec::new(), log_prob: 0.0, finished: false };
    let mut token = BOS;
    for _ in 0..max_len {
        let lp = next_log_probs(&model.decode_step(&mut state, memory, token)?);
        token = argmax(&lp);
        out.log_prob += lp[token];
        if token == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(token);
    }
    Ok(out)
}

struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

/// Beam search ranking partial hypotheses by cumulative log-probability and
/// completed ones by [`Decoded::score`]. Truncated hypotheses are returned
/// only when nothing reached EOS within `max_len` steps.
pub fn beam_decode(model: &Model, src: &[usize], beam: usize, max_len: usize) -> Result<Decoded> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let memory = model.prepare(src)?;
    let max_len = max_len.min(model.config().max_len);
    let mut alive = vec![Hyp { tokens: Vec::new(), log_prob: 0.0, state: model.start_state() }];
    let mut finished: Vec<Decoded> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in alive.iter_mut().enumerate() {
            let last = hyp.tokens.last().copied().unwrap_or(BOS);
            let lp = next_log_probs(&model.decode_step(&mut hyp.state, &memory, last)?);
            cands.extend(lp.iter().enumerate().filter(|(_, x)| x.is_finite()).map(|(v, x)| (hyp.log_prob + x, h, v)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(lp, h, v) in cands.iter().take(beam) {
            if v == EOS {
                finished.push(Decoded { tokens: alive[h].tokens.clone(), log_prob: lp, finished: true });
            } else {
                let mut tokens = alive[h].tokens.clone();
                tokens.push(v);
                next.push(Hyp { tokens, log_prob: lp, state: alive[h].state.clone() });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    let pick = |v: Vec<Decoded>| {
        v.into_iter().reduce(|best, d| if d.score() > best.score() { d } else { best })
    };
    if let Some(best) = pick(finished) {
        return Ok(best);
    }
    let truncated = alive.into_iter().map(|h| Decoded { tokens: h.tokens, log_prob: h.log_prob, finished: false });
    pick(truncated.collect()).ok_or_else(|| Error::Config("max_len must be at least 1".into()))
}

/// Decodes every source with the given beam (1 = greedy).
pub fn decode_all(model: &Model, srcs: &[Vec<usize>], beam: usize, max_len: usize) -> Result<Vec<Decoded>> {
    srcs.iter().map(|s| beam_decode(model, s, beam, max_len)).collect()
}

fn contains<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompoundVerdict {
    pub compound_id: String,
    pub rows: usize,
    pub wrong_rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cter {
    pub instance: f64,
    pub aggregate: f64,
    /// Per-row verdicts, true when the compound was mistranslated.
    pub wrong: Vec<bool>,
    pub compounds: Vec<CompoundVerdict>,
}

/// A row is wrong when its reference compound span does not occur
/// contiguously in the prediction.
pub fn cter<S: AsRef<str>>(predictions: &[Vec<S>], rows: &[CorpusRow]) -> Result<Cter> {
    if predictions.len() != rows.len() {
        return Err(Error::Alignment(format!("{} predictions for {} cg-test rows", predictions.len(), rows.len())));
    }
    if rows.is_empty() {
        return Err(Error::Alignment("no cg-test rows".into()));
    }
    let groups = group_rows(rows)?;
    let wrong: Vec<bool> = predictions
        .iter()
        .zip(rows)
        .map(|(p, r)| {
            let p: Vec<&str> = p.iter().map(AsRef::as_ref).collect();
            let span: Vec<&str> = r.compound_tokens().unwrap_or_default().iter().map(String::as_str).collect();
            !contains(&p, &span)
        })
        .collect();
    let compounds: Vec<CompoundVerdict> = groups
        .into_iter()
        .map(|(id, idx)| CompoundVerdict {
            compound_id: id,
            rows: idx.len(),
            wrong_rows: idx.iter().filter(|&&i| wrong[i]).count(),
        })
        .collect();
    let instance = wrong.iter().filter(|&&w| w).count() as f64 / rows.len() as f64;
    let aggregate = compounds.iter().filter(|c| c.wrong_rows > 0).count() as f64 / compounds.len() as f64;
    Ok(Cter { instance, aggregate, wrong, compounds })
}

pub fn exact_match<T: PartialEq>(predictions: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Alignment("nothing to compare".into()));
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cter_instance: f64,
    pub cter_aggregate: f64,
    /// Exact match on the cg-test rows.
    pub exact_match: f64,
    /// Exact match on the in-distribution test split, when evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_exact_match: Option<f64>,
    pub truncated: usize,
    #[serde(skip)]
    pub compounds: Vec<CompoundVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: usize,
    pub tokens: Vec<String>,
}

/// Scores cg-test predictions (and optionally in-distribution ones).
pub fn build_report(
    cg_predictions: &[Vec<String>],
    cg_rows: &[CorpusRow],
    test: Option<(&[Vec<String>], &[CorpusRow])>,
    truncated: usize,
) -> Result<EvalReport> {
    let c = cter(cg_predictions, cg_rows)?;
    let refs: Vec<Vec<String>> = cg_rows.iter().map(|r| r.tgt.clone()).collect();
    let exact = exact_match(cg_predictions, &refs)?;
    let test_exact_match = match test {
        Some((preds, rows)) => {
            let refs: Vec<Vec<String>> = rows.iter().map(|r| r.tgt.clone()).collect();
            Some(exact_match(preds, &refs)?)
        }
        None => None,
    };
    Ok(EvalReport {
        cter_instance: c.instance,
        cter_aggregate: c.aggregate,
        exact_match: exact,
        test_exact_match,
        truncated,
        compounds: c.compounds,
    })
}

/// Decodes the rows with `model` and returns token predictions.
pub fn translate_rows(
    model: &Model,
    rows: &[CorpusRow],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    beam: usize,
    max_len: usize,
) -> Result<(Vec<Vec<String>>, usize)> {
    let mut truncated = 0;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let d = beam_decode(model, &src_vocab.encode(&r.src)?, beam, max_len)?;
        truncated += usize::from(!d.finished);
        out.push(tgt_vocab.decode(&d.tokens));
    }
    Ok((out, truncated))
}

impl EvalReport {
    /// Writes `report.json`, `compounds.csv` and, when given, `predictions.jsonl`.
    pub fn write(&self, dir: &Path, predictions: Option<&[Vec<String>]>) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("compounds.csv"))?;
        w.write_record(["compound_id", "rows", "wrong_rows", "correct"])?;
        for c in &self.compounds {
            w.write_record([
                c.compound_id.clone(),
                c.rows.to_string(),
                c.wrong_rows.to_string(),
                (c.wrong_rows == 0).to_string(),
            ])?;
        }
        w.flush()?;
        if let Some(preds) = predictions {
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join("predictions.jsonl"))?);
            for (id, tokens) in preds.iter().enumerate() {
                serde_json::to_writer(&mut f, &PredictionRow { id, tokens: tokens.clone() })?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

/// Reads predictions JSONL, ordered by id; every id in `0..n` must appear once.
pub fn read_predictions(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut by_id: HashMap<usize, Vec<String>> = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: PredictionRow = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if by_id.insert(row.id, row.tokens).is_some() {
            return Err(Error::Alignment(format!("duplicate prediction id {}", row.id)));
        }
    }
    (0..by_id.len())
        .map(|i| by_id.remove(&i).ok_or_else(|| Error::Alignment(format!("missing prediction id {i}"))))
        .collect()
}

/// Writes one CSV row per (example, decoder layer, role, source position):
/// `example,layer,role,position,h0..h{d-1}`. Composed models emit `key` and
/// `value` rows; the baseline emits identical sources once per layer with
/// role `shared`. Returns the number of data rows.
pub fn export_hidden_states<W: std::io::Write>(model: &Model, inputs: &[Vec<usize>], out: W) -> Result<usize> {
    let d = model.config().d_model;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["example".to_string(), "layer".into(), "role".into(), "position".into()];
    header.extend((0..d).map(|i| format!("h{i}")));
    w.write_record(&header)?;
    let shared = model.composition_table().is_none();
    let mut rows = 0;
    for (ex, src) in inputs.iter().enumerate() {
        let trace = model.encode(src)?;
        let (keys, values) = model.sources(&trace)?;
        for (l, (k, v)) in keys.iter().zip(&values).enumerate() {
            let sets: Vec<(&str, &Tensor)> = if shared { vec![("shared", k)] } else { vec![("key", k), ("value", v)] };
            for (role, t) in sets {
                for p in 0..t.rows() {
                    let mut rec = vec![ex.to_string(), (l + 1).to_string(), role.to_string(), p.to_string()];
                    rec.extend(t.row(p).iter().map(|x| format!("{x:?}")));
                    w.write_record(&rec)?;
                    rows += 1;
                }
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tgt: &str, id: &str, span: [usize; 2]) -> CorpusRow {
        CorpusRow {
            src: vec![],
            tgt: tgt.split_whitespace().map(String::from).collect(),
            compound_id: Some(id.into()),
            compound_span: Some(span),
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn two_compounds_one_wrong_row() {
        let mut rows = Vec::new();
        let mut preds = Vec::new();
        for id in ["A", "B"] {
            for i in 0..5 {
                rows.push(row("n1' v3' m2' de n7'", id, [1, 5]));
                let wrong = id == "A" && i == 2;
                preds.push(toks(if wrong { "n1' v3' n7'" } else { "x v3' m2' de n7' y" }));
            }
        }
        let c = cter(&preds, &rows).unwrap();
        assert!((c.instance - 0.1).abs() < 1e-15);
        assert!((c.aggregate - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let rows: Vec<CorpusRow> = (0..10).map(|i| row("v1' n2'", &format!("c{}", i / 5), [0, 2])).collect();
        let preds: Vec<Vec<String>> = rows.iter().map(|r| r.tgt.clone()).collect();
        let c = cter(&preds, &rows).unwrap();
        assert_eq!((c.instance, c.aggregate), (0.0, 0.0));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let rows = vec![row("v1' n2'", "c", [0, 2])];
        assert!(matches!(cter::<String>(&[], &rows), Err(Error::Alignment(_))));
        assert!(matches!(exact_match(&[vec![1]], &[]), Err(Error::Alignment(_))));
    }

    #[test]
    fn exact_match_ratios() {
        let a = vec![vec![1, 2], vec![3]];
        assert_eq!(exact_match(&a, &a).unwrap(), 1.0);
        assert_eq!(exact_match(&a, &[vec![9], vec![9]]).unwrap(), 0.0);
        assert_eq!(exact_match(&a, &[vec![1, 2], vec![4]]).unwrap(), 0.5);
    }

    #[test]
    fn log_probs_exclude_specials() {
        let lp = next_log_probs(&[5.0, 5.0, 0.0, 0.0]);
        assert_eq!(lp[PAD], f64::NEG_INFINITY);
        assert_eq!(lp[BOS], f64::NEG_INFINITY);
        let total: f64 = lp.iter().filter(|x| x.is_finite()).map(|x| x.exp()).sum();
        assert!(total < 1.0);
    }
}
