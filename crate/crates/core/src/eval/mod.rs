//! Patient-level cross-validation, voting inference and metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::NoiseCorpus;
use crate::data::{Dataset, PatientInfo};
use crate::error::{Error, Result};
use crate::features::{conv_forward, ConvStackParams};
use crate::model::{classify_features, encode, Label, ModelConfig, ModelParams, Prediction};
use crate::seed::{self, purpose};
use crate::train::{initial_params, train, TrainConfig, TrainSample, TrainingLog};

/// Patient to fold index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.folds.get(patient_id).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Seeded round-robin within strata (HP, HY1..HY5). Strata are visited in
/// sorted order, patients shuffled within each, and the fold pointer carries
/// over from one stratum to the next.
pub fn stratified_group_kfold(patients: &[PatientInfo], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    if patients.len() < k {
        return Err(Error::InvalidConfig(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    let mut ids = HashSet::new();
    for p in patients {
        if !ids.insert(p.patient_id.as_str()) {
            return Err(Error::Dataset(format!("duplicate patient {}", p.patient_id)));
        }
        strata.entry(p.stratum()).or_default().push(&p.patient_id);
    }
    let mut folds = BTreeMap::new();
    let mut next = 0usize;
    for (i, (_, mut members)) in strata.into_iter().enumerate() {
        members.sort_unstable();
        members.shuffle(&mut seed::derived_rng(seed, &[purpose::FOLDS, i as u64]));
        for id in members {
            folds.insert(id.to_string(), next % k);
            next += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingResult {
    pub patient_id: String,
    pub votes_pd: usize,
    pub votes_total: usize,
    pub certainty: f64,
    pub label: Label,
}

/// Majority vote over single-sample labels; an exact tie goes to PD.
pub fn vote_labels(patient_id: &str, labels: &[Label]) -> Result<VotingResult> {
    if labels.is_empty() {
        return Err(Error::InvalidInput(format!("no predictions for patient {patient_id}")));
    }
    let votes_pd = labels.iter().filter(|l| l.is_pd()).count();
    let certainty = votes_pd as f64 / labels.len() as f64;
    Ok(VotingResult {
        patient_id: patient_id.to_string(),
        votes_pd,
        votes_total: labels.len(),
        certainty,
        label: if 2 * votes_pd >= labels.len() {
            Label::Pd
        } else {
            Label::Hp
        },
    })
}

pub fn vote(patient_id: &str, predictions: &[Prediction]) -> Result<VotingResult> {
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    vote_labels(patient_id, &labels)
}

/// Area under the ROC curve as the Mann–Whitney statistic, with ties
/// counted as one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("ROC AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, with average ranks over ties
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_run = order[i..=j].iter().filter(|&&o| positive[o]).count() as u64;
        // ranks i+1 ..= j+1 average to (i + j + 2) / 2
        rank_sum_x2 += pos_in_run * (i + j + 2) as u64;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` without positive patients.
    pub sensitivity: Option<f64>,
    /// `None` without negative patients.
    pub specificity: Option<f64>,
    pub accuracy: f64,
}

pub fn confusion_metrics(results: &[VotingResult], truth: &HashMap<String, Label>) -> Result<ConfusionMetrics> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no voting results".into()));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for r in results {
        let t = truth
            .get(&r.patient_id)
            .ok_or_else(|| Error::InvalidInput(format!("no ground truth for patient {}", r.patient_id)))?;
        match (t, r.label) {
            (Label::Pd, Label::Pd) => tp += 1,
            (Label::Pd, Label::Hp) => fn_ += 1,
            (Label::Hp, Label::Hp) => tn += 1,
            (Label::Hp, Label::Pd) => fp += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(ConfusionMetrics {
        tp,
        tn,
        fp,
        fn_,
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        accuracy: (tp + tn) as f64 / results.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    /// 1-based.
    pub fold: usize,
    pub patients: usize,
    pub samples: usize,
    /// Pooled over all test samples of the fold.
    pub single_sample_accuracy: f64,
    pub voting_accuracy: f64,
    /// `None` when the fold lacks one class.
    pub voting_roc_auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Across-fold means; optional metrics average over the folds where they
/// are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub single_sample_accuracy: f64,
    pub voting_accuracy: f64,
    pub voting_roc_auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub folds: Vec<FoldMetrics>,
    pub mean: MeanMetrics,
}

pub const METRIC_COLUMNS: [&str; 5] = [
    "Single-sample accuracy",
    "Inferred voting accuracy",
    "Inferred voting ROC AUC",
    "Inferred voting sensitivity (true positive rate)",
    "Inferred voting specificity (true negative rate)",
];

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn from_folds(model: impl Into<String>, folds: Vec<FoldMetrics>) -> Self {
        let mean = MeanMetrics {
            single_sample_accuracy: mean(folds.iter().map(|f| f.single_sample_accuracy)).unwrap_or(0.0),
            voting_accuracy: mean(folds.iter().map(|f| f.voting_accuracy)).unwrap_or(0.0),
            voting_roc_auc: mean(folds.iter().filter_map(|f| f.voting_roc_auc)),
            sensitivity: mean(folds.iter().filter_map(|f| f.sensitivity)),
            specificity: mean(folds.iter().filter_map(|f| f.specificity)),
        };
        Self {
            model: model.into(),
            folds,
            mean,
        }
    }

    /// `Model,Fold,<metric columns>`: one row per fold and a `mean` row.
    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut out = Vec::new();
        if let Some(c) = comment {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header = vec!["Model", "Fold"];
            header.extend(METRIC_COLUMNS);
            w.write_record(&header)?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for f in &self.folds {
                w.write_record([
                    self.model.clone(),
                    f.fold.to_string(),
                    f.single_sample_accuracy.to_string(),
                    f.voting_accuracy.to_string(),
                    opt(f.voting_roc_auc),
                    opt(f.sensitivity),
                    opt(f.specificity),
                ])?;
            }
            let m = &self.mean;
            w.write_record([
                self.model.clone(),
                "mean".to_string(),
                m.single_sample_accuracy.to_string(),
                m.voting_accuracy.to_string(),
                opt(m.voting_roc_auc),
                opt(m.sensitivity),
                opt(m.specificity),
            ])?;
            w.flush().map_err(|e| Error::io("<metrics buffer>", e))?;
        }
        Ok(String::from_utf8(out).expect("metrics are ASCII"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Voting outcome for one held-out patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    /// 1-based; 0 outside cross-validation.
    pub fold: usize,
    pub info: PatientInfo,
    pub voting: VotingResult,
}

pub const VOTING_COLUMNS: [&str; 8] = [
    "fold",
    "patient_id",
    "group",
    "hy_grade",
    "votes_pd",
    "votes_total",
    "certainty",
    "label",
];

pub fn voting_csv(outcomes: &[PatientOutcome], comment: Option<&str>) -> Result<String> {
    let mut out = Vec::new();
    if let Some(c) = comment {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(VOTING_COLUMNS)?;
        for o in outcomes {
            w.write_record([
                o.fold.to_string(),
                o.info.patient_id.clone(),
                o.info.group.to_string(),
                o.info.hy_grade.map(|g| g.to_string()).unwrap_or_default(),
                o.voting.votes_pd.to_string(),
                o.voting.votes_total.to_string(),
                o.voting.certainty.to_string(),
                o.voting.label.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<voting buffer>", e))?;
    }
    Ok(String::from_utf8(out).expect("voting rows are UTF-8"))
}

#[derive(Debug, Deserialize)]
struct VotingRow {
    fold: usize,
    patient_id: String,
    group: String,
    hy_grade: String,
    votes_pd: usize,
    votes_total: usize,
    certainty: f64,
    label: String,
}

/// Parses [`voting_csv`] output; `#` lines are ignored.
pub fn parse_voting_csv(text: &str) -> Result<Vec<PatientOutcome>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.deserialize::<VotingRow>() {
        let row = row?;
        let hy_grade =
            if row.hy_grade.is_empty() {
                None
            } else {
                Some(row.hy_grade.parse().map_err(|_| {
                    Error::InvalidInput(format!("bad hy_grade {:?} for {}", row.hy_grade, row.patient_id))
                })?)
            };
        out.push(PatientOutcome {
            fold: row.fold,
            info: PatientInfo {
                patient_id: row.patient_id.clone(),
                group: row.group.parse()?,
                hy_grade,
            },
            voting: VotingResult {
                patient_id: row.patient_id,
                votes_pd: row.votes_pd,
                votes_total: row.votes_total,
                certainty: row.certainty,
                label: row.label.parse()?,
            },
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("voting CSV has no rows".into()));
    }
    Ok(out)
}

/// Metrics for one held-out fold given per-sample predictions per patient.
pub fn fold_metrics(
    fold: usize,
    patients: &[(PatientInfo, Vec<Prediction>)],
) -> Result<(FoldMetrics, Vec<PatientOutcome>)> {
    let mut correct = 0usize;
    let mut samples = 0usize;
    let mut outcomes = Vec::with_capacity(patients.len());
    for (info, preds) in patients {
        correct += preds.iter().filter(|p| p.label == info.group).count();
        samples += preds.len();
        outcomes.push(PatientOutcome {
            fold,
            info: info.clone(),
            voting: vote(&info.patient_id, preds)?,
        });
    }
    let truth: HashMap<String, Label> = patients.iter().map(|(i, _)| (i.patient_id.clone(), i.group)).collect();
    let votes: Vec<VotingResult> = outcomes.iter().map(|o| o.voting.clone()).collect();
    let cm = confusion_metrics(&votes, &truth)?;
    let scores: Vec<f64> = votes.iter().map(|v| v.certainty).collect();
    let positive: Vec<bool> = patients.iter().map(|(i, _)| i.group.is_pd()).collect();
    let auc = roc_auc(&scores, &positive).ok();
    Ok((
        FoldMetrics {
            fold,
            patients: patients.len(),
            samples,
            single_sample_accuracy: correct as f64 / samples.max(1) as f64,
            voting_accuracy: cm.accuracy,
            voting_roc_auc: auc,
            sensitivity: cm.sensitivity,
            specificity: cm.specificity,
        },
        outcomes,
    ))
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub assignment: FoldAssignment,
    pub report: MetricsReport,
    pub outcomes: Vec<PatientOutcome>,
    pub logs: Vec<TrainingLog>,
}

/// Per-sample predictions for every clip of a patient.
pub fn predict_patient(clips: &[Vec<f64>], params: &ModelParams, model: &ModelConfig) -> Result<Vec<Prediction>> {
    let features = clips
        .iter()
        .map(|c| encode(c, params, model))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    classify_features(&views, params)
}

/// Conv features of every clip, indexed `[patient][clip]`. Clips are
/// encoded in parallel when `threads > 1`; the result does not depend on it.
pub fn encode_dataset(
    dataset: &Dataset,
    conv: &ConvStackParams,
    model: &ModelConfig,
    threads: usize,
) -> Result<Vec<Vec<Array2<f64>>>> {
    conv.check_shapes(&model.conv)?;
    let encode_patient = |p: &crate::data::PatientAudio| {
        p.clips
            .iter()
            .map(|c| Ok(conv_forward(c, model.sample_rate, conv, &model.conv)?.data))
            .collect::<Result<Vec<_>>>()
    };
    if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| dataset.patients.par_iter().map(encode_patient).collect())
    } else {
        dataset.patients.iter().map(encode_patient).collect()
    }
}

/// Trains on k-1 folds and evaluates the held-out fold, k times.
/// Evaluation never augments.
pub fn cross_validate(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    k: usize,
    pretrained: Option<&ConvStackParams>,
    noise: &NoiseCorpus,
) -> Result<CrossValidation> {
    config.validate()?;
    model.validate()?;
    if dataset.sample_rate != model.sample_rate {
        return Err(Error::Dataset(format!(
            "dataset is {} Hz, model expects {} Hz",
            dataset.sample_rate, model.sample_rate
        )));
    }
    if let Some(p) = dataset.patients.iter().find(|p| p.clips.is_empty()) {
        return Err(Error::Dataset(format!("patient {} has no samples", p.info.patient_id)));
    }
    let assignment = stratified_group_kfold(&dataset.infos(), k, config.seed)?;

    // a frozen pretrained stack gives the same features in every fold
    let frozen = config.configuration.conv_frozen();
    let cached: Option<Vec<Vec<Array2<f64>>>> = if frozen {
        let conv = pretrained
            .ok_or_else(|| Error::InvalidConfig("frozen configuration needs pretrained conv weights".into()))?;
        Some(encode_dataset(dataset, conv, model, config.threads)?)
    } else {
        None
    };

    let mut folds = Vec::with_capacity(k);
    let mut outcomes = Vec::new();
    let mut logs = Vec::with_capacity(k);
    for fold in 0..k {
        let in_fold = |pid: &str| assignment.fold_of(pid) == Some(fold);
        let use_cache = cached.is_some() && config.augmentation.is_disabled();
        let mut train_set = Vec::new();
        for (pi, p) in dataset.patients.iter().enumerate() {
            if in_fold(&p.info.patient_id) {
                continue;
            }
            for (ci, clip) in p.clips.iter().enumerate() {
                train_set.push(TrainSample {
                    waveform: clip,
                    label: p.info.group,
                    features: cached.as_ref().filter(|_| use_cache).map(|c| c[pi][ci].view()),
                });
            }
        }
        let fold_config = TrainConfig {
            seed: seed::derive(config.seed, &[fold as u64]),
            augment_seed: config.augment_seed.map(|s| seed::derive(s, &[fold as u64])),
            ..config.clone()
        };
        let params = initial_params(model, config.configuration, pretrained.cloned(), fold_config.seed)?;
        let (params, log) = train(&train_set, params, model, &fold_config, noise)?;
        logs.push(log);

        let mut held_out = Vec::new();
        for (pi, p) in dataset.patients.iter().enumerate() {
            if !in_fold(&p.info.patient_id) {
                continue;
            }
            let preds = match &cached {
                Some(c) => {
                    let views: Vec<_> = c[pi].iter().map(|f| f.view()).collect();
                    classify_features(&views, &params)?
                }
                None => predict_patient(&p.clips, &params, model)?,
            };
            held_out.push((p.info.clone(), preds));
        }
        let (m, o) = fold_metrics(fold + 1, &held_out)?;
        folds.push(m);
        outcomes.extend(o);
    }
    Ok(CrossValidation {
        assignment,
        report: MetricsReport::from_folds(config.configuration.name(), folds),
        outcomes,
        logs,
    })
}
