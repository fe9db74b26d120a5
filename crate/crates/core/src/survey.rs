//! Scoring of the expert listening questionnaire.
//!
//! Ratings: 1 no symptoms, 2 symptoms other than PD, 3 early-stage PD,
//! 4 advanced-stage PD.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Label;

pub const RATINGS: std::ops::RangeInclusive<u8> = 1..=4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAnswer {
    pub subject_id: String,
    pub expert_id: String,
    pub rating: u8,
    pub set_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub group: Label,
    pub hy_grade: Option<u8>,
}

/// Maps a subject's true class onto the set of ratings counted as correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthMapping {
    /// PD subjects at or above this H-Y grade expect rating 4, below it 3.
    pub advanced_from_hy: u8,
}

impl Default for TruthMapping {
    fn default() -> Self {
        Self { advanced_from_hy: 4 }
    }
}

impl TruthMapping {
    pub fn correct_ratings(&self, truth: &SubjectTruth) -> Result<BTreeSet<u8>> {
        match (truth.group, truth.hy_grade) {
            (Label::Hp, None) => Ok([1].into()),
            (Label::Pd, Some(hy)) if (1..=5).contains(&hy) => {
                Ok([if hy >= self.advanced_from_hy { 4 } else { 3 }].into())
            }
            (Label::Pd, None) => Err(Error::InvalidInput(format!(
                "PD subject {} has no H-Y grade",
                truth.subject_id
            ))),
            (g, Some(hy)) => Err(Error::InvalidInput(format!(
                "subject {} ({g}) has invalid H-Y grade {hy}",
                truth.subject_id
            ))),
        }
    }
}

/// Every rating that attains the maximum count, and the mean rating.
pub fn modes_and_average(ratings: &[u8]) -> Result<(BTreeSet<u8>, f64)> {
    if ratings.is_empty() {
        return Err(Error::InvalidInput("no answers to summarize".into()));
    }
    let mut counts = [0usize; 5];
    for &r in ratings {
        if !RATINGS.contains(&r) {
            return Err(Error::InvalidInput(format!("rating {r} outside 1..=4")));
        }
        counts[r as usize] += 1;
    }
    let max = *counts.iter().max().unwrap();
    let modes = RATINGS.filter(|&r| counts[r as usize] == max).collect();
    let average = ratings.iter().map(|&r| r as f64).sum::<f64>() / ratings.len() as f64;
    Ok((modes, average))
}

pub fn hit(ratings: &[u8], correct: &BTreeSet<u8>) -> bool {
    ratings.iter().any(|r| correct.contains(r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub set_id: String,
    pub modes: BTreeSet<u8>,
    pub average: f64,
    pub hit: bool,
    pub true_group: Label,
    pub true_hy: Option<u8>,
}

impl SubjectSummary {
    pub fn modes_display(&self) -> String {
        self.modes.iter().map(u8::to_string).collect::<Vec<_>>().join(", ")
    }

    pub fn average_display(&self) -> String {
        format!("{:.1}", self.average)
    }
}

pub fn summarize(answers: &[&ExpertAnswer], truth: &SubjectTruth, mapping: &TruthMapping) -> Result<SubjectSummary> {
    let first = answers
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("no answers for subject {}", truth.subject_id)))?;
    let ratings: Vec<u8> = answers.iter().map(|a| a.rating).collect();
    let (modes, average) = modes_and_average(&ratings)?;
    Ok(SubjectSummary {
        subject_id: truth.subject_id.clone(),
        set_id: first.set_id.clone(),
        modes,
        average,
        hit: hit(&ratings, &mapping.correct_ratings(truth)?),
        true_group: truth.group,
        true_hy: truth.hy_grade,
    })
}

/// Summaries for every answered subject, in order of first appearance.
pub fn score(answers: &[ExpertAnswer], truths: &[SubjectTruth], mapping: &TruthMapping) -> Result<Vec<SubjectSummary>> {
    let truth_by_id: HashMap<&str, &SubjectTruth> = truths.iter().map(|t| (t.subject_id.as_str(), t)).collect();
    if truth_by_id.len() != truths.len() {
        return Err(Error::InvalidInput("duplicate subject in truth table".into()));
    }
    let mut seen = HashSet::new();
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<&ExpertAnswer>> = HashMap::new();
    for a in answers {
        if !seen.insert((a.subject_id.as_str(), a.expert_id.as_str())) {
            return Err(Error::InvalidInput(format!(
                "expert {} answered subject {} twice",
                a.expert_id, a.subject_id
            )));
        }
        let entry = grouped.entry(&a.subject_id).or_default();
        if entry.is_empty() {
            order.push(&a.subject_id);
        } else if entry[0].set_id != a.set_id {
            return Err(Error::InvalidInput(format!(
                "subject {} appears in two sets",
                a.subject_id
            )));
        }
        entry.push(a);
    }
    order
        .into_iter()
        .map(|id| {
            let truth = truth_by_id
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("no truth for subject {id}")))?;
            summarize(&grouped[id], truth, mapping)
        })
        .collect()
}

/// Binary reading of a mode set: ratings 1–2 are non-PD, 3–4 are PD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryCall {
    Pd,
    NonPd,
    /// Modes span both classes.
    Mixed,
}

pub fn binary_call(modes: &BTreeSet<u8>) -> BinaryCall {
    let pd = modes.iter().any(|&r| r >= 3);
    let non = modes.iter().any(|&r| r <= 2);
    match (pd, non) {
        (true, false) => BinaryCall::Pd,
        (false, true) => BinaryCall::NonPd,
        _ => BinaryCall::Mixed,
    }
}

/// How subjects with mixed-class modes are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    /// Counted wrong.
    Strict,
    /// Half a correct answer.
    CountHalf,
    /// Resolved to PD.
    FavorPd,
    /// Excluded from the denominator.
    Drop,
}

impl TieRule {
    pub const ALL: [TieRule; 4] = [TieRule::Strict, TieRule::CountHalf, TieRule::FavorPd, TieRule::Drop];

    pub fn name(self) -> &'static str {
        match self {
            TieRule::Strict => "strict",
            TieRule::CountHalf => "count-half",
            TieRule::FavorPd => "favor-pd",
            TieRule::Drop => "drop",
        }
    }
}

impl fmt::Display for TieRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TieRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        TieRule::ALL
            .into_iter()
            .find(|r| r.name() == norm)
            .ok_or_else(|| Error::InvalidInput(format!("unknown tie rule {s:?}")))
    }
}

pub fn binary_mode_accuracy(summaries: &[SubjectSummary], rule: TieRule) -> Result<f64> {
    let mut credit = 0.0;
    let mut counted = 0usize;
    for s in summaries {
        let pd = s.true_group.is_pd();
        let score = match binary_call(&s.modes) {
            BinaryCall::Pd => Some(if pd { 1.0 } else { 0.0 }),
            BinaryCall::NonPd => Some(if pd { 0.0 } else { 1.0 }),
            BinaryCall::Mixed => match rule {
                TieRule::Strict => Some(0.0),
                TieRule::CountHalf => Some(0.5),
                TieRule::FavorPd => Some(if pd { 1.0 } else { 0.0 }),
                TieRule::Drop => None,
            },
        };
        if let Some(x) = score {
            credit += x;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidInput("no subjects left to score".into()));
    }
    Ok(credit / counted as f64)
}

/// Best-matching answer set for a published summary row, searched over all
/// `4^n` rating sequences. Among sequences with the exact mode set, the
/// smallest average error wins; ties go to the lexicographically first.
/// `hit` constrains whether any rating lies in `correct`.
pub fn construct_answers(
    n_experts: usize,
    modes: &BTreeSet<u8>,
    average: f64,
    tolerance: f64,
    hit_constraint: Option<(&BTreeSet<u8>, bool)>,
) -> Option<Vec<u8>> {
    let total = 4usize.checked_pow(n_experts as u32)?;
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut ratings = vec![1u8; n_experts];
    for code in 0..total {
        let mut c = code;
        for slot in ratings.iter_mut().rev() {
            *slot = (c % 4) as u8 + 1;
            c /= 4;
        }
        let (m, avg) = modes_and_average(&ratings).ok()?;
        if &m != modes {
            continue;
        }
        let err = (avg - average).abs();
        if err > tolerance {
            continue;
        }
        if let Some((correct, want)) = hit_constraint {
            if hit(&ratings, correct) != want {
                continue;
            }
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, ratings.clone()));
        }
    }
    best.map(|(_, r)| r)
}

#[derive(Debug, Deserialize)]
struct TruthRow {
    subject_id: String,
    group: String,
    hy_grade: String,
}

/// `subject_id,expert_id,rating,set_id`; `#` lines are comments.
pub fn parse_answers_csv(text: &str) -> Result<Vec<ExpertAnswer>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<ExpertAnswer>() {
        let a = row?;
        if !RATINGS.contains(&a.rating) {
            return Err(Error::InvalidInput(format!(
                "subject {} expert {}: rating {} outside 1..=4",
                a.subject_id, a.expert_id, a.rating
            )));
        }
        out.push(a);
    }
    Ok(out)
}

/// `subject_id,group,hy_grade` with an empty grade for HP.
pub fn parse_truth_csv(text: &str) -> Result<Vec<SubjectTruth>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<TruthRow>() {
        let r = row?;
        let hy_grade = match r.hy_grade.trim() {
            "" | "-" => None,
            g => Some(
                g.parse()
                    .map_err(|_| Error::InvalidInput(format!("subject {}: bad hy_grade {g:?}", r.subject_id)))?,
            ),
        };
        out.push(SubjectTruth {
            subject_id: r.subject_id,
            group: r.group.parse()?,
            hy_grade,
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_answers(path: &Path) -> Result<Vec<ExpertAnswer>> {
    parse_answers_csv(&read(path)?)
}

pub fn load_truths(path: &Path) -> Result<Vec<SubjectTruth>> {
    parse_truth_csv(&read(path)?)
}

pub fn answers_csv(answers: &[ExpertAnswer]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for a in answers {
        w.serialize(a)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<answers buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

/// One row per subject: set, subject, group, true H-Y, modes, average, hit.
pub fn table_csv(summaries: &[SubjectSummary], comment: Option<&str>) -> Result<String> {
    let mut out = Vec::new();
    if let Some(c) = comment {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["set_id", "subject_id", "group", "true_hy", "modes", "average", "hit"])?;
        for s in summaries {
            w.write_record([
                s.set_id.clone(),
                s.subject_id.clone(),
                s.true_group.to_string(),
                s.true_hy.map(|h| h.to_string()).unwrap_or_else(|| "-".into()),
                s.modes_display(),
                s.average_display(),
                if s.hit { "YES" } else { "NO" }.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<survey buffer>", e))?;
    }
    Ok(String::from_utf8(out).expect("CSV of UTF-8 fields"))
}

/// `binary_mode_accuracy[<rule>] = <value>` for each tie rule.
pub fn accuracy_report(summaries: &[SubjectSummary]) -> Result<String> {
    let mut out = String::new();
    for rule in TieRule::ALL {
        let acc = binary_mode_accuracy(summaries, rule)?;
        out.push_str(&format!("binary_mode_accuracy[{rule}] = {acc:.6}\n"));
    }
    Ok(out)
}
