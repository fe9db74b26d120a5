//! Dataset manifests, the recording protocol's utterance inventory, and a
//! synthetic voice corpus generator.

mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, AudioClip};
use crate::error::{Error, Result};
use crate::model::Label;

pub use synth::{
    hy_grade_bins, render_clip, severity_to_hy, synth_generate, PathologyRange, SynthConfig, VoiceParams,
    TABLE3_HY_COUNTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtteranceType {
    Vowel,
    SustainedVowel,
    Word,
    Sentence,
}

impl UtteranceType {
    pub fn as_str(self) -> &'static str {
        match self {
            UtteranceType::Vowel => "vowel",
            UtteranceType::SustainedVowel => "sustained_vowel",
            UtteranceType::Word => "word",
            UtteranceType::Sentence => "sentence",
        }
    }
}

impl fmt::Display for UtteranceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UtteranceType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vowel" => Ok(UtteranceType::Vowel),
            "sustained_vowel" => Ok(UtteranceType::SustainedVowel),
            "word" => Ok(UtteranceType::Word),
            "sentence" => Ok(UtteranceType::Sentence),
            other => Err(Error::InvalidInput(format!(
                "unknown utterance type {other:?} (vowel, sustained_vowel, word, sentence)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub utterance_type: UtteranceType,
    pub text: &'static str,
    pub repetitions: u32,
}

const fn entry(utterance_type: UtteranceType, text: &'static str, repetitions: u32) -> CatalogEntry {
    CatalogEntry {
        utterance_type,
        text,
        repetitions,
    }
}

const CATALOG: [CatalogEntry; 18] = [
    entry(UtteranceType::Vowel, "a", 3),
    entry(UtteranceType::Vowel, "e", 3),
    entry(UtteranceType::Vowel, "i", 3),
    entry(UtteranceType::Vowel, "u", 3),
    entry(UtteranceType::SustainedVowel, "a", 3),
    entry(UtteranceType::SustainedVowel, "e", 3),
    entry(UtteranceType::SustainedVowel, "i", 3),
    entry(UtteranceType::SustainedVowel, "u", 3),
    entry(UtteranceType::Word, "ala", 3),
    entry(UtteranceType::Word, "as", 3),
    entry(UtteranceType::Word, "ula", 3),
    entry(UtteranceType::Word, "ela", 3),
    entry(UtteranceType::Word, "igła", 3),
    entry(UtteranceType::Sentence, "Dziś jest ładna pogoda.", 3),
    entry(UtteranceType::Sentence, "Jacek mył kota.", 1),
    entry(UtteranceType::Sentence, "Lola lubi bal.", 1),
    entry(UtteranceType::Sentence, "Rysiek narysował bar.", 1),
    entry(UtteranceType::Sentence, "Marysia namalowała dym.", 1),
];

/// The recording protocol: every prompt with its repetition count.
pub fn phonetic_catalog() -> &'static [CatalogEntry] {
    &CATALOG
}

/// Catalog prompts expanded by repetition, in protocol order (46 items).
pub fn protocol_sequence() -> Vec<(UtteranceType, &'static str)> {
    CATALOG
        .iter()
        .flat_map(|e| std::iter::repeat_n((e.utterance_type, e.text), e.repetitions as usize))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Relative to the manifest directory unless absolute.
    pub file: PathBuf,
    pub utterance_type: UtteranceType,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub group: Label,
    pub hy_grade: Option<u8>,
    pub samples: Vec<SampleEntry>,
}

impl PatientRecord {
    pub fn info(&self) -> PatientInfo {
        PatientInfo {
            patient_id: self.patient_id.clone(),
            group: self.group,
            hy_grade: self.hy_grade,
        }
    }

    /// `HP` or `HY<grade>`.
    pub fn stratum(&self) -> String {
        self.info().stratum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Directory that relative sample paths resolve against.
    pub root: PathBuf,
    pub patients: Vec<PatientRecord>,
}

pub const MANIFEST_COLUMNS: [&str; 5] = ["patient_id", "group", "hy_grade", "file", "utterance_type"];

#[derive(Debug, Deserialize)]
struct Row {
    patient_id: String,
    group: String,
    hy_grade: String,
    file: String,
    utterance_type: String,
    #[serde(default)]
    duration_s: Option<String>,
}

fn row_err(row: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        row,
        message: message.into(),
    }
}

impl Manifest {
    pub fn resolve(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.root.join(file)
        }
    }

    pub fn sample_count(&self) -> usize {
        self.patients.iter().map(|p| p.samples.len()).sum()
    }

    pub fn group_counts(&self) -> (usize, usize) {
        let pd = self.patients.iter().filter(|p| p.group == Label::Pd).count();
        (pd, self.patients.len() - pd)
    }

    /// Parses manifest CSV text. Line numbers in errors count from 1 at the
    /// header. Files are checked for existence when `check_files` is set.
    pub fn parse(text: &str, root: impl Into<PathBuf>, check_files: bool) -> Result<Self> {
        let root = root.into();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        for col in MANIFEST_COLUMNS {
            if !headers.iter().any(|h| h == col) {
                return Err(row_err(1, format!("missing column {col:?}")));
            }
        }

        let mut patients: Vec<PatientRecord> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut seen: HashSet<(String, PathBuf)> = HashSet::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let row: Row = record
                .deserialize(Some(&headers))
                .map_err(|e| row_err(line, e.to_string()))?;
            if row.patient_id.is_empty() {
                return Err(row_err(line, "empty patient_id"));
            }
            let group: Label = row.group.parse().map_err(|e: Error| row_err(line, e.to_string()))?;
            let hy_grade = match (group, row.hy_grade.as_str()) {
                (Label::Pd, "") => return Err(row_err(line, "PD patient without hy_grade")),
                (Label::Hp, "") => None,
                (Label::Hp, g) => return Err(row_err(line, format!("HP patient with hy_grade {g:?}"))),
                (Label::Pd, g) => match g.parse::<u8>() {
                    Ok(v @ 1..=5) => Some(v),
                    _ => return Err(row_err(line, format!("hy_grade {g:?} is not in 1..=5"))),
                },
            };
            let utterance_type: UtteranceType = row
                .utterance_type
                .parse()
                .map_err(|e: Error| row_err(line, e.to_string()))?;
            let duration_s = match row.duration_s.as_deref() {
                None | Some("") => None,
                Some(d) => match d.parse::<f64>() {
                    Ok(v) if v > 0.0 && v.is_finite() => Some(v),
                    _ => return Err(row_err(line, format!("duration {d:?} is not a positive number"))),
                },
            };
            if row.file.is_empty() {
                return Err(row_err(line, "empty file path"));
            }
            let file = PathBuf::from(&row.file);
            if !seen.insert((row.patient_id.clone(), file.clone())) {
                return Err(row_err(
                    line,
                    format!("duplicate file {:?} for patient {}", row.file, row.patient_id),
                ));
            }
            let resolved = if file.is_absolute() {
                file.clone()
            } else {
                root.join(&file)
            };
            if check_files && !resolved.is_file() {
                return Err(row_err(line, format!("file {} does not exist", resolved.display())));
            }

            let sample = SampleEntry {
                file,
                utterance_type,
                duration_s,
            };
            match index.get(&row.patient_id) {
                Some(&i) => {
                    let p = &mut patients[i];
                    if p.group != group || p.hy_grade != hy_grade {
                        return Err(row_err(
                            line,
                            format!("patient {} changes group or hy_grade between rows", row.patient_id),
                        ));
                    }
                    p.samples.push(sample);
                }
                None => {
                    index.insert(row.patient_id.clone(), patients.len());
                    patients.push(PatientRecord {
                        patient_id: row.patient_id,
                        group,
                        hy_grade,
                        samples: vec![sample],
                    });
                }
            }
        }
        if patients.is_empty() {
            return Err(Error::Dataset("manifest has no samples".into()));
        }
        Ok(Self { root, patients })
    }

    /// CSV with the standard columns plus `duration_s`, one row per sample,
    /// optionally preceded by a `# comment` line.
    pub fn to_csv(&self, comment: Option<&str>) -> Result<String> {
        let mut out = Vec::new();
        if let Some(c) = comment {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
            header.push("duration_s");
            w.write_record(&header)?;
            for p in &self.patients {
                let group = p.group.to_string();
                let hy = p.hy_grade.map(|g| g.to_string()).unwrap_or_default();
                for s in &p.samples {
                    let duration = s.duration_s.map(|d| d.to_string()).unwrap_or_default();
                    let file = s.file.to_string_lossy();
                    w.write_record([
                        p.patient_id.as_str(),
                        group.as_str(),
                        hy.as_str(),
                        &file,
                        s.utterance_type.as_str(),
                        duration.as_str(),
                    ])?;
                }
            }
            w.flush().map_err(|e| Error::io("<manifest buffer>", e))?;
        }
        Ok(String::from_utf8(out).expect("manifest fields are UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv(comment)?).map_err(|e| Error::io(path, e))
    }

    /// Reads every sample. Clips must already be mono at `sample_rate`.
    pub fn load_audio(&self, sample_rate: u32) -> Result<Vec<Vec<AudioClip>>> {
        self.patients
            .iter()
            .map(|p| {
                p.samples
                    .iter()
                    .map(|s| {
                        let path = self.resolve(&s.file);
                        let clip = read_wav(&path)?;
                        if clip.sample_rate() != sample_rate || clip.num_channels() != 1 {
                            return Err(Error::Dataset(format!(
                                "{} is {} Hz with {} channel(s); preprocess to mono {} Hz first",
                                path.display(),
                                clip.sample_rate(),
                                clip.num_channels(),
                                sample_rate
                            )));
                        }
                        Ok(clip)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Identity, class and stage of one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientInfo {
    pub patient_id: String,
    pub group: Label,
    pub hy_grade: Option<u8>,
}

impl PatientInfo {
    /// `HP` or `HY<grade>`.
    pub fn stratum(&self) -> String {
        match self.hy_grade {
            Some(g) => format!("HY{g}"),
            None => "HP".to_string(),
        }
    }
}

/// Decoded mono clips for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientAudio {
    pub info: PatientInfo,
    pub clips: Vec<Vec<f64>>,
}

/// All patients of a manifest with their audio in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_rate: u32,
    pub patients: Vec<PatientAudio>,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest, sample_rate: u32) -> Result<Self> {
        let audio = manifest.load_audio(sample_rate)?;
        Ok(Self {
            sample_rate,
            patients: manifest
                .patients
                .iter()
                .zip(audio)
                .map(|(p, clips)| PatientAudio {
                    info: p.info(),
                    clips: clips.into_iter().map(AudioClip::into_samples).collect(),
                })
                .collect(),
        })
    }

    pub fn infos(&self) -> Vec<PatientInfo> {
        self.patients.iter().map(|p| p.info.clone()).collect()
    }

    pub fn sample_count(&self) -> usize {
        self.patients.iter().map(|p| p.clips.len()).sum()
    }
}

/// Loads and validates a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text, root, true)
}
