//! Symbol error rate, expression recognition rate and error-count buckets.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Bumped whenever [`normalize`] changes; reports are only comparable within a version.
pub const NORMALIZER_VERSION: u32 = 1;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Summed edit distance over summed target length, for `(target, prediction)` pairs.
pub fn wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let total: usize = pairs.iter().map(|(t, _)| t.len()).sum();
    if total == 0 {
        return Err(Error::Input("total target length is zero".into()));
    }
    let errors: usize = pairs.iter().map(|(t, p)| edit_distance(t, p)).sum();
    Ok(errors as f64 / total as f64)
}

/// Splits on whitespace and braces single-token scripts: `x ^ 2` becomes `x ^ { 2 }`.
pub fn normalize(text: &str) -> Vec<String> {
    let raw: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let t = raw[i];
        out.push(t.to_string());
        if (t == "^" || t == "_") && i + 1 < raw.len() && raw[i + 1] != "{" {
            out.extend(["{".to_string(), raw[i + 1].to_string(), "}".to_string()]);
            i += 1;
        }
        i += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExprRecord {
    pub target: Vec<String>,
    pub prediction: Vec<String>,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub exprate: f64,
    pub le1: f64,
    pub le2: f64,
    pub le3: f64,
    pub wer: f64,
    pub records: Vec<ExprRecord>,
}

/// Scores normalized `(target, prediction)` strings.
pub fn exprate_report<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<EvalReport> {
    let tokenized: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|(t, p)| (normalize(t.as_ref()), normalize(p.as_ref())))
        .collect();
    report_from_tokens(tokenized)
}

pub fn report_from_tokens(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Input("no expressions to evaluate".into()));
    }
    let wer = wer(&pairs)?;
    let records: Vec<ExprRecord> = pairs
        .into_iter()
        .map(|(target, prediction)| ExprRecord {
            distance: edit_distance(&target, &prediction),
            target,
            prediction,
        })
        .collect();
    let n = records.len();
    let rate = |k: usize| records.iter().filter(|r| r.distance <= k).count() as f64 / n as f64;
    Ok(EvalReport {
        n,
        exprate: rate(0),
        le1: rate(1),
        le2: rate(2),
        le3: rate(3),
        wer,
        records,
    })
}

impl EvalReport {
    /// Tab-separated summary row followed by one line per expression.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("n\texprate\tle1\tle2\tle3\twer\n");
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.n, self.exprate, self.le1, self.le2, self.le3, self.wer
        );
        s.push_str("index\tdistance\ttarget\tprediction\n");
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}\t{}", r.distance, r.target.join(" "), r.prediction.join(" "));
        }
        s
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "exprate={}\nle1={}\nle2={}\nle3={}\nwer={}\nn={}\nnormalizer_version={NORMALIZER_VERSION}\n",
            self.exprate, self.le1, self.le2, self.le3, self.wer, self.n
        )
    }
}
