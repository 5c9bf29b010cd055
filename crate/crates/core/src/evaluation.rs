//! Entity-level scoring: a predicted entity counts only when its start, end
//! and type all match a gold entity. Counts are pooled over sentences and
//! types (micro average); `O` tokens contribute nothing.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{entity_type, extract_spans, repair_bio, Dataset, EntitySpan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, Counts>,
    pub token_accuracy: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "type,tp,fp,fn,precision,recall,f1";

    fn from_counts(per_type: BTreeMap<String, Counts>, correct_tokens: usize, tokens: usize) -> Self {
        let mut total = Counts::default();
        for c in per_type.values() {
            total.add(c);
        }
        EvalReport {
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            per_type,
            token_accuracy: ratio(correct_tokens, tokens),
        }
    }

    pub fn totals(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    /// One row per type plus `TOTAL`; scores as percentages with 2 decimals.
    pub fn csv_lines(&self) -> Vec<String> {
        let row = |name: &str, c: &Counts| {
            format!(
                "{name},{},{},{},{:.2},{:.2},{:.2}",
                c.tp,
                c.fp,
                c.fn_,
                100.0 * c.precision(),
                100.0 * c.recall(),
                100.0 * c.f1()
            )
        };
        let mut lines = vec![Self::CSV_HEADER.to_string()];
        lines.extend(self.per_type.iter().map(|(name, c)| row(name, c)));
        lines.push(row("TOTAL", &self.totals()));
        lines
    }
}

fn check_alignment<G: AsRef<str>>(gold: &Dataset, predicted: &[Vec<G>]) -> Result<()> {
    if gold.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    for (i, (g, p)) in gold.sentences().iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Shape(format!(
                "sentence {i}: {} gold tokens but {} predicted tags",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

fn token_accuracy<G: AsRef<str>>(gold: &Dataset, predicted: &[Vec<G>]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (g, p) in gold.sentences().iter().zip(predicted) {
        let repaired = repair_bio(p);
        for (token, tag) in g.tokens.iter().zip(&repaired) {
            total += 1;
            if token.tag == *tag {
                correct += 1;
            }
        }
    }
    (correct, total)
}

/// Exact-match entity scores for BIO predictions aligned with `gold`.
/// Predictions are repaired before spans are read.
pub fn evaluate<G: AsRef<str>>(gold: &Dataset, predicted: &[Vec<G>]) -> Result<EvalReport> {
    check_alignment(gold, predicted)?;
    let mut per_type: BTreeMap<String, Counts> = gold
        .entity_types()
        .iter()
        .map(|t| (t.clone(), Counts::default()))
        .collect();
    for (g, p) in gold.sentences().iter().zip(predicted) {
        let gold_spans: BTreeSet<EntitySpan> = extract_spans(&g.tags()).into_iter().collect();
        let pred_spans: BTreeSet<EntitySpan> = extract_spans(p).into_iter().collect();
        for span in &pred_spans {
            let c = per_type.entry(span.etype.clone()).or_default();
            if gold_spans.contains(span) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for span in gold_spans.difference(&pred_spans) {
            per_type.entry(span.etype.clone()).or_default().fn_ += 1;
        }
    }
    let (correct, total) = token_accuracy(gold, predicted);
    Ok(EvalReport::from_counts(per_type, correct, total))
}

/// Same contract as [`evaluate`], computed by testing every `(start, end,
/// type)` triple of every sentence for membership in gold and prediction.
/// Kept as an independent reference for property tests.
pub fn evaluate_oracle<G: AsRef<str>>(gold: &Dataset, predicted: &[Vec<G>]) -> Result<EvalReport> {
    check_alignment(gold, predicted)?;
    let mut types: BTreeSet<String> = gold.entity_types().iter().cloned().collect();
    for tag in predicted.iter().flatten() {
        if let Some(t) = entity_type(tag.as_ref()) {
            types.insert(t.to_string());
        }
    }
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for etype in &types {
        let mut c = Counts::default();
        for (g, p) in gold.sentences().iter().zip(predicted) {
            let g: Vec<&str> = g.tags();
            let p: Vec<&str> = p.iter().map(AsRef::as_ref).collect();
            let n = g.len();
            for start in 0..n {
                for end in start..n {
                    let in_gold = is_chunk(&g, start, end, etype);
                    let in_pred = is_chunk(&p, start, end, etype);
                    match (in_gold, in_pred) {
                        (true, true) => c.tp += 1,
                        (false, true) => c.fp += 1,
                        (true, false) => c.fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
        }
        if gold.entity_types().contains(etype) || c != Counts::default() {
            per_type.insert(etype.clone(), c);
        }
    }
    let (correct, total) = token_accuracy(gold, predicted);
    Ok(EvalReport::from_counts(per_type, correct, total))
}

/// Whether tokens `start..=end` form one complete chunk of `etype` under the
/// repair convention, judged only from the raw tags around the range.
fn is_chunk(tags: &[&str], start: usize, end: usize, etype: &str) -> bool {
    let b = format!("B-{etype}");
    let i = format!("I-{etype}");
    // token k extends a chunk of etype started before it
    let continues = |k: usize| k > 0 && tags[k] == i && (tags[k - 1] == b || tags[k - 1] == i);
    let opens = tags[start] == b || (tags[start] == i && !continues(start));
    opens && (start + 1..=end).all(continues) && (end + 1 >= tags.len() || !continues(end + 1))
}

/// Token-level micro scores over non-`O` tags (diagnostic only).
pub fn evaluate_tokens<G: AsRef<str>>(gold: &Dataset, predicted: &[Vec<G>]) -> Result<EvalReport> {
    check_alignment(gold, predicted)?;
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for (g, p) in gold.sentences().iter().zip(predicted) {
        let repaired = repair_bio(p);
        for (token, pred) in g.tokens.iter().zip(&repaired) {
            let gold_tag = token.tag.as_str();
            if gold_tag == pred {
                if let Some(t) = entity_type(gold_tag) {
                    per_type.entry(t.to_string()).or_default().tp += 1;
                }
                continue;
            }
            if let Some(t) = entity_type(pred) {
                per_type.entry(t.to_string()).or_default().fp += 1;
            }
            if let Some(t) = entity_type(gold_tag) {
                per_type.entry(t.to_string()).or_default().fn_ += 1;
            }
        }
    }
    let (correct, total) = token_accuracy(gold, predicted);
    Ok(EvalReport::from_counts(per_type, correct, total))
}
