use std::collections::BTreeSet;
use std::path::PathBuf;

use voicepd::survey::{load_answers, load_truths, score, SubjectSummary, TruthMapping};

pub struct PublishedRow {
    pub subject_id: String,
    pub group: String,
    pub modes: BTreeSet<u8>,
    pub average: f64,
    pub hit: bool,
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/survey")
        .join(name)
}

pub fn published() -> Vec<PublishedRow> {
    let mut reader = csv::Reader::from_path(fixture("published_summary.csv")).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            PublishedRow {
                subject_id: r[1].to_string(),
                group: r[2].to_string(),
                modes: r[4].split(',').map(|m| m.trim().parse().unwrap()).collect(),
                average: r[5].parse().unwrap(),
                hit: &r[6] == "YES",
            }
        })
        .collect()
}

pub fn summaries(mapping: TruthMapping) -> Vec<SubjectSummary> {
    let answers = load_answers(&fixture("answers.csv")).unwrap();
    let truths = load_truths(&fixture("truth.csv")).unwrap();
    score(&answers, &truths, &mapping).unwrap()
}

/// Binary accuracy recomputed straight from the published mode column:
/// (strict, half credit, ties to PD, ties dropped).
pub fn oracle_accuracy(rows: &[PublishedRow]) -> (f64, f64, f64, f64) {
    let (mut right, mut mixed_pd, mut mixed_hp, mut wrong) = (0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let calls: BTreeSet<bool> = r.modes.iter().map(|&m| m >= 3).collect();
        let pd = r.group == "PD";
        if calls.len() == 2 {
            if pd {
                mixed_pd += 1.0;
            } else {
                mixed_hp += 1.0;
            }
        } else if calls.contains(&pd) {
            right += 1.0;
        } else {
            wrong += 1.0;
        }
    }
    let n = right + wrong + mixed_pd + mixed_hp;
    (
        right / n,
        (right + 0.5 * (mixed_pd + mixed_hp)) / n,
        (right + mixed_pd) / n,
        right / (right + wrong),
    )
}
