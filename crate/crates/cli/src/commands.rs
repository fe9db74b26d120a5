use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use voicepd::audio::{self, read_wav, write_wav_with_comment};
use voicepd::augment::{apply_pipeline, NoiseCorpus};
use voicepd::data::{load_manifest, synth_generate, Dataset, Manifest, PatientRecord};
use voicepd::eval::{
    cross_validate, encode_dataset, parse_voting_csv, predict_patient, vote, voting_csv, PatientOutcome,
};
use voicepd::features::{conv_forward, load_weights, stft_spectrogram, ConvStackParams, SpectrogramConfig};
use voicepd::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams};
use voicepd::seed;
use voicepd::survey::{accuracy_report, load_answers, load_truths, score, table_csv};
use voicepd::train::{initial_params, train_with_observer, EpochObserver, EpochRecord, TrainSample};

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::svg;

/// Seed-derivation tag for the `--random-conv` stack.
const RANDOM_CONV: u64 = 0x7261_6e64_636f_6e76;
/// Seed-derivation tag for augment-preview draws.
const PREVIEW: u64 = 0x0070_7265_7669_6577;

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::write(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::write(path, e))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a str,
    #[serde(flatten)]
    body: T,
}

fn stamped_json<T: Serialize>(stamp: &str, body: T) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(&Stamped {
        provenance: stamp,
        body,
    })? + "\n")
}

/// Conv weights from a file, a seeded random init, or none for the
/// from-scratch configuration.
fn conv_weights(run: &RunConfig) -> Result<Option<ConvStackParams>, Failure> {
    if let Some(path) = &run.pretrained {
        require_file(path, "weight file")?;
        return Ok(Some(load_weights(path, &run.model.conv)?));
    }
    if run.random_conv {
        let mut rng = seed::derived_rng(run.seed, &[RANDOM_CONV]);
        return Ok(Some(ConvStackParams::kaiming_uniform(&run.model.conv, &mut rng)?));
    }
    if run.train.configuration.needs_pretrained() {
        return Err(Failure::Validation(format!(
            "configuration {} needs conv weights: pass --pretrained <weights.w2vc>, or --random-conv for a random frozen stack",
            run.train.configuration.name()
        )));
    }
    Ok(None)
}

fn noise_corpus(run: &RunConfig) -> Result<NoiseCorpus, Failure> {
    let mut paths = run.train.augmentation.noise_corpus.clone();
    if let Some(dir) = &run.noise_dir {
        if !dir.is_dir() {
            return Err(Failure::Validation(format!(
                "noise directory {} does not exist",
                dir.display()
            )));
        }
        paths.extend(NoiseCorpus::wav_files_in(dir)?);
    }
    if paths.is_empty() && run.train.augmentation.p_background > 0.0 {
        return Err(Failure::Validation(
            "background noise is enabled but there are no noise recordings: pass --noise-dir, or set p_background to 0"
                .into(),
        ));
    }
    Ok(NoiseCorpus::load(&paths, run.model.sample_rate)?)
}

fn load_dataset(manifest: &Path, sample_rate: u32) -> Result<Dataset, Failure> {
    require_file(manifest, "manifest")?;
    let m = load_manifest(manifest)?;
    Ok(Dataset::from_manifest(&m, sample_rate)?)
}

#[derive(Serialize)]
struct FileFailure {
    file: PathBuf,
    error: String,
}

#[derive(Serialize, Default)]
struct PreprocessReport {
    processed: usize,
    failures: Vec<FileFailure>,
    warnings: Vec<String>,
}

/// Output location for a manifest entry, mirroring its relative path.
fn output_path(file: &Path, patient: &str) -> PathBuf {
    if file.is_absolute() {
        PathBuf::from(patient).join(file.file_name().unwrap_or_default())
    } else {
        file.to_path_buf()
    }
}

pub fn preprocess(run: &RunConfig, manifest_path: &Path, out: &Path) -> Result<(), Failure> {
    let text = read(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    // missing files go to the report rather than aborting the run
    let manifest = Manifest::parse(&text, root, false)?;
    create_dir(out)?;
    let stamp = run.stamp();
    let rate = run.model.sample_rate;

    let jobs: Vec<(usize, usize)> = manifest
        .patients
        .iter()
        .enumerate()
        .flat_map(|(p, rec)| (0..rec.samples.len()).map(move |s| (p, s)))
        .collect();
    let results: Vec<Result<(f64, Vec<String>), String>> = pool(run.threads)?.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(p, s)| {
                let rec = &manifest.patients[p];
                let entry = &rec.samples[s];
                let src = manifest.resolve(&entry.file);
                let dst = out.join(output_path(&entry.file, &rec.patient_id));
                let clip = read_wav(&src).map_err(|e| e.to_string())?;
                let done = audio::preprocess(&clip, rate).map_err(|e| e.to_string())?;
                let mut warnings = Vec::new();
                if done.subtraction_skipped {
                    warnings.push(format!("{}: mono input, channel subtraction skipped", src.display()));
                }
                if done.silent {
                    warnings.push(format!("{}: silent recording", src.display()));
                }
                if let Some(dir) = dst.parent() {
                    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                }
                write_wav_with_comment(&done.clip, &dst, Some(&stamp)).map_err(|e| e.to_string())?;
                Ok((done.clip.duration_secs(), warnings))
            })
            .collect()
    });

    let mut report = PreprocessReport::default();
    let mut patients: Vec<PatientRecord> = Vec::new();
    for (&(p, s), result) in jobs.iter().zip(results) {
        let rec = &manifest.patients[p];
        let entry = &rec.samples[s];
        match result {
            Ok((duration, warnings)) => {
                for w in warnings {
                    eprintln!("warning: {w}");
                    report.warnings.push(w);
                }
                report.processed += 1;
                if patients.last().is_none_or(|last| last.patient_id != rec.patient_id) {
                    patients.push(PatientRecord {
                        samples: Vec::new(),
                        ..rec.clone()
                    });
                }
                let mut sample = entry.clone();
                sample.file = output_path(&entry.file, &rec.patient_id);
                sample.duration_s = Some(duration);
                patients.last_mut().expect("pushed above").samples.push(sample);
            }
            Err(error) => {
                eprintln!("failed: {}: {error}", entry.file.display());
                report.failures.push(FileFailure {
                    file: entry.file.clone(),
                    error,
                });
            }
        }
    }
    if !patients.is_empty() {
        Manifest {
            root: out.to_path_buf(),
            patients,
        }
        .write(out.join("manifest.csv"), Some(&stamp))?;
    }
    write(&out.join("preprocess_report.json"), stamped_json(&stamp, &report)?)?;
    println!("processed {} files, {} failed", report.processed, report.failures.len());
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "{} files could not be processed; see {}",
            report.failures.len(),
            out.join("preprocess_report.json").display()
        )))
    }
}

struct Progress;

impl EpochObserver for Progress {
    fn epoch_end(&mut self, record: &EpochRecord, _: &ModelParams) -> voicepd::Result<()> {
        eprintln!("epoch {:>4}  loss {:.5}", record.epoch, record.mean_loss);
        Ok(())
    }
}

pub fn train(run: &RunConfig, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let conv = conv_weights(run)?;
    let noise = noise_corpus(run)?;
    let dataset = load_dataset(manifest, run.model.sample_rate)?;
    create_dir(out)?;
    let stamp = run.stamp();
    let cfg = &run.train;

    let cache = match &conv {
        Some(c) if cfg.configuration.conv_frozen() && cfg.augmentation.is_disabled() => {
            Some(encode_dataset(&dataset, c, &run.model, run.threads)?)
        }
        _ => None,
    };
    let samples: Vec<TrainSample<'_>> = dataset
        .patients
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| {
            let cache = &cache;
            p.clips.iter().enumerate().map(move |(ci, clip)| TrainSample {
                waveform: clip,
                label: p.info.group,
                features: cache.as_ref().map(|c| c[pi][ci].view()),
            })
        })
        .collect();
    let params = initial_params(&run.model, cfg.configuration, conv, cfg.seed)?;
    let (params, log) = train_with_observer(&samples, params, &run.model, cfg, &noise, &mut Progress)?;

    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(
        &Checkpoint {
            config: run.model.clone(),
            params,
            epoch: Some(cfg.epochs),
            seed: Some(run.seed),
        },
        &ckpt_path,
    )?;
    write(&out.join("training_log.csv"), log.to_csv(Some(&stamp)))?;
    if cfg.trace_augment {
        write(&out.join("augment_trace.jsonl"), log.trace_jsonl())?;
    }
    let last = log.losses().last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs on {} samples, final loss {last:.5}",
        cfg.epochs,
        samples.len()
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

pub fn evaluate(run: &RunConfig, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let conv = conv_weights(run)?;
    let noise = noise_corpus(run)?;
    let dataset = load_dataset(manifest, run.model.sample_rate)?;
    create_dir(out)?;
    let stamp = run.stamp();
    let cv = cross_validate(&dataset, &run.model, &run.train, run.folds, conv.as_ref(), &noise)?;

    let metrics = cv.report.to_csv(Some(&stamp))?;
    write(&out.join("metrics.csv"), &metrics)?;
    write(&out.join("metrics.json"), stamped_json(&stamp, &cv.report)?)?;
    write(&out.join("voting.csv"), voting_csv(&cv.outcomes, Some(&stamp))?)?;
    write(&out.join("folds.json"), stamped_json(&stamp, &cv.assignment)?)?;
    for (i, log) in cv.logs.iter().enumerate() {
        write(
            &out.join(format!("training_log_fold{}.csv", i + 1)),
            log.to_csv(Some(&stamp)),
        )?;
        if run.train.trace_augment {
            write(
                &out.join(format!("augment_trace_fold{}.jsonl", i + 1)),
                log.trace_jsonl(),
            )?;
        }
    }
    print!("{metrics}");
    Ok(())
}

pub fn infer(run: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<(), Failure> {
    require_file(checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(manifest, ckpt.config.sample_rate)?;
    let mut outcomes = Vec::with_capacity(dataset.patients.len());
    for p in &dataset.patients {
        let preds = predict_patient(&p.clips, &ckpt.params, &ckpt.config)?;
        outcomes.push(PatientOutcome {
            fold: 0,
            info: p.info.clone(),
            voting: vote(&p.info.patient_id, &preds)?,
        });
    }
    let text = voting_csv(&outcomes, Some(&voicepd::provenance::stamp(run.seed, &ckpt.config)))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(out, &text)?;
    for o in &outcomes {
        println!(
            "{}\t{}\tcertainty {:.3}\t({}/{})",
            o.info.patient_id, o.voting.label, o.voting.certainty, o.voting.votes_pd, o.voting.votes_total
        );
    }
    Ok(())
}

pub fn viz_voting(run: &RunConfig, input: &Path, out: &Path) -> Result<(), Failure> {
    let outcomes = parse_voting_csv(&read(input)?)?;
    write(out, svg::voting_plot(&outcomes, &run.stamp()))
}

fn model_input(run: &RunConfig, wav: &Path) -> Result<audio::AudioClip, Failure> {
    require_file(wav, "audio file")?;
    let clip = read_wav(wav)?;
    Ok(audio::preprocess(&clip, run.model.sample_rate)?.clip)
}

pub fn viz_featuremap(run: &RunConfig, wav: &Path, out: &Path) -> Result<(), Failure> {
    let mut run = run.clone();
    if run.pretrained.is_none() {
        // a picture of the frontend needs some weights; fall back to random
        run.random_conv = true;
    }
    let conv = conv_weights(&run)?.expect("weights resolved above");
    let clip = model_input(&run, wav)?;
    let spec = stft_spectrogram(clip.samples(), &SpectrogramConfig::default())?;
    let features = conv_forward(clip.samples(), clip.sample_rate(), &conv, &run.model.conv)?;
    write(
        out,
        svg::featuremap(&spec, &features.data, clip.duration_secs(), &run.stamp()),
    )
}

pub fn synth(run: &RunConfig, out: &Path) -> Result<(), Failure> {
    let manifest = pool(run.threads)?.install(|| synth_generate(&run.synth, out))?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn survey(run: &RunConfig, answers: &Path, truth: &Path, out: &Path) -> Result<(), Failure> {
    require_file(answers, "answers file")?;
    require_file(truth, "truth file")?;
    let summaries = score(&load_answers(answers)?, &load_truths(truth)?, &run.survey)?;
    create_dir(out)?;
    let stamp = run.stamp();
    let table = table_csv(&summaries, Some(&stamp))?;
    let report = accuracy_report(&summaries)?;
    write(&out.join("survey_table.csv"), &table)?;
    write(&out.join("survey_accuracy.txt"), format!("# {stamp}\n{report}"))?;
    print!("{table}{report}");
    Ok(())
}

pub fn augment_preview(run: &RunConfig, wav: &Path, out: &Path) -> Result<(), Failure> {
    let noise = noise_corpus(run)?;
    let clip = model_input(run, wav)?;
    create_dir(out)?;
    let stamp = run.stamp();
    let mut rng = seed::derived_rng(run.seed, &[PREVIEW]);
    let (augmented, applied) = apply_pipeline(&clip, &run.train.augmentation, &noise, &mut rng)?;
    write(
        &out.join("preview.svg"),
        svg::waveform_pair(clip.samples(), augmented.samples(), clip.sample_rate(), &stamp),
    )?;
    write(&out.join("applied.json"), stamped_json(&stamp, &applied)?)?;
    write_wav_with_comment(&augmented, out.join("augmented.wav"), Some(&stamp))?;
    println!("{}", serde_json::to_string(&applied)?);
    Ok(())
}
