//! Command line driver: synthesize cohorts, prepare instruction records,
//! train any of the models, evaluate, run zero-shot transfer, and verify
//! gradients.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use respllm::baselines::{
    AudioOnlyModel, DmsHardModel, DmsSchemaDict, DmsSoftModel, FusionModel, FusionVariant,
};
use respllm::model::RespLlmModel;
use respllm::pipeline::checkpoint::{
    checkpoint_model, model_from_checkpoint, AnyModel, Checkpoint, SaveContext,
};
use respllm::pipeline::config::RunConfig;
use respllm::pipeline::dataset::{
    build_instruction_dataset, records_from_jsonl, records_to_jsonl, test_split, train_split,
    AudioSource, InstructionRecord,
};
use respllm::pipeline::eval::{evaluate, zero_shot, EvalReport};
use respllm::pipeline::pretrain::{load_weights, pretrain_encoder};
use respllm::pipeline::train::train;
use respllm::pipeline::{AudioNeed, ClassifierModel, ModelKind};
use respllm::synth::{gen_cohort, CohortManifest, SynthSpecFile};
use respllm::text::Vocabulary;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "respllm",
    about = "Multimodal respiratory health screening at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (WAV files + manifest) from a spec file.
    Synth {
        /// TOML file listing the sources to generate.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for wavs/ and manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render instruction records (JSONL) from a manifest and its spec file.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Instruction-tune a model on the train split of a records file.
    Train {
        /// One of: respllm, audio, dms-hard, dms-soft, fusion-concat,
        /// fusion-add, fusion-xattn.
        #[arg(long)]
        model: String,
        #[arg(long)]
        records: PathBuf,
        /// Optional TOML run configuration; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output checkpoint path; the loss curve CSV and vocabulary TSV are
        /// written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a records file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// Write the report JSON here (printed as a table regardless).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot evaluation on tasks absent from the checkpoint's training.
    Zeroshot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient-check suite.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Prepare {
            manifest,
            spec,
            out,
        } => cmd_prepare(&manifest, &spec, &out),
        Command::Train {
            model,
            records,
            config,
            seed,
            out,
        } => cmd_train(&model, &records, config.as_deref(), seed, &out),
        Command::Eval { ckpt, records, out } => cmd_eval(&ckpt, &records, out.as_deref(), false),
        Command::Zeroshot { ckpt, records, out } => {
            cmd_eval(&ckpt, &records, out.as_deref(), true)
        }
        Command::Gradcheck { coords, seed } => cmd_gradcheck(coords, seed),
    }
}

fn cmd_synth(spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let specs = SynthSpecFile::load(spec)?;
    std::fs::create_dir_all(out)?;
    let manifest = gen_cohort(&specs.sources, seed, Some(out))?;
    let path = out.join("manifest.jsonl");
    std::fs::write(&path, manifest.to_jsonl()?)?;
    println!(
        "wrote {} samples across {} sources to {}",
        manifest.rows.len(),
        specs.sources.len(),
        path.display()
    );
    Ok(())
}

fn cmd_prepare(manifest: &Path, spec: &Path, out: &Path) -> Result<()> {
    let specs = SynthSpecFile::load(spec)?;
    let text = std::fs::read_to_string(manifest)
        .with_context(|| format!("reading {}", manifest.display()))?;
    let manifest = CohortManifest::from_jsonl(&text)?;
    let tasks: BTreeMap<String, _> = specs
        .sources
        .iter()
        .map(|s| (s.source_id.clone(), s.task_spec()))
        .collect();
    let records = build_instruction_dataset(&manifest, &tasks)?;
    std::fs::write(out, records_to_jsonl(&records)?)?;
    println!(
        "wrote {} instruction records to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<InstructionRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(records_from_jsonl(&text)?)
}

fn cmd_train(
    model_name: &str,
    records_path: &Path,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let kind = ModelKind::parse(model_name)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let records = load_records(records_path)?;
    let train_recs = train_split(&records);
    if train_recs.is_empty() {
        bail!("no training rows in {}", records_path.display());
    }

    // Vocabulary and DMS schema come from the training split only.
    let corpus: Vec<String> = train_recs
        .iter()
        .flat_map(|r| [r.prompt_text.clone(), r.dms_text.clone()])
        .collect();
    let vocab = Vocabulary::build(&corpus, cfg.train.max_vocab);
    let schema = DmsSchemaDict::from_records(train_recs.iter().map(|r| &r.dms));
    let trained_task_ids: Vec<String> = {
        let mut ids: Vec<String> = train_recs.iter().map(|r| r.task_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    };

    let mut model = build_model(kind, &cfg, vocab, schema, seed)?;

    // Stand-in for a pretrained encoder, for every model with an audio path.
    if cfg.pretrain.enabled && model.audio_need() != AudioNeed::None {
        eprintln!(
            "pretraining audio encoder ({} samples)...",
            cfg.pretrain.n_samples
        );
        let weights = pretrain_encoder(&cfg.model.encoder, &cfg.pretrain, seed)?;
        load_weights(model.store_mut(), &weights)?;
    }

    let source = AudioSource::wav_files();
    eprintln!(
        "training {} on {} records (seed {seed})...",
        kind.as_str(),
        train_recs.len()
    );
    let outcome = train(&mut model, &train_recs, &source, &cfg.train.hyper(), seed)?;
    eprintln!(
        "finished {} steps, final loss {:.4}",
        outcome.steps,
        outcome.final_loss().unwrap_or(f64::NAN)
    );

    let ckpt = checkpoint_model(
        &model,
        SaveContext {
            step: outcome.steps as u64,
            seed,
            trained_task_ids,
            rng: outcome.rng.clone(),
        },
    )?;
    ckpt.save(out)?;
    let curve_path = out.with_extension("loss.csv");
    std::fs::write(&curve_path, outcome.curve_csv())?;
    if let AnyModel::Respllm(m) = &model {
        std::fs::write(out.with_extension("vocab.tsv"), m.vocab.to_tsv())?;
    }
    println!("checkpoint written to {}", out.display());
    println!("loss curve written to {}", curve_path.display());
    Ok(())
}

fn build_model(
    kind: ModelKind,
    cfg: &RunConfig,
    vocab: Vocabulary,
    schema: DmsSchemaDict,
    seed: u64,
) -> Result<AnyModel> {
    let enc = cfg.model.encoder.clone();
    Ok(match kind {
        ModelKind::Respllm => {
            AnyModel::Respllm(RespLlmModel::build(cfg.model.clone(), vocab, seed)?)
        }
        ModelKind::Audio => AnyModel::Audio(AudioOnlyModel::build(enc, seed)?),
        ModelKind::DmsHard => AnyModel::DmsHard(DmsHardModel::build(schema, seed)),
        ModelKind::DmsSoft => AnyModel::DmsSoft(DmsSoftModel::build(vocab, enc.width, seed)),
        ModelKind::FusionConcat | ModelKind::FusionAdd | ModelKind::FusionXattn => {
            let variant = match kind {
                ModelKind::FusionConcat => FusionVariant::Concat,
                ModelKind::FusionAdd => FusionVariant::Add,
                _ => FusionVariant::CrossAttn,
            };
            AnyModel::Fusion(FusionModel::build(
                variant,
                cfg.fusion.dms_encoding,
                enc,
                Some(schema),
                Some(vocab),
                seed,
            )?)
        }
    })
}

fn cmd_eval(ckpt: &Path, records_path: &Path, out: Option<&Path>, zeroshot: bool) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let model = model_from_checkpoint(&ckpt)?;
    let records = load_records(records_path)?;
    let eval_recs = test_split(&records);
    if eval_recs.is_empty() {
        bail!("no test rows in {}", records_path.display());
    }
    let source = AudioSource::wav_files();
    let report: EvalReport = if zeroshot {
        zero_shot(
            &model,
            &eval_recs,
            &source,
            &ckpt.meta.trained_task_ids,
            ckpt.meta.seed,
        )?
    } else {
        evaluate(&model, &eval_recs, &source, ckpt.meta.seed)?
    };
    print!("{}", report.to_table());
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(coords: usize, seed: u64) -> Result<()> {
    let reports = respllm::pipeline::gradsuite::run_gradient_suite(coords, seed);
    let mut failed = false;
    for (name, report) in &reports {
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {name}: {} coords checked, worst rel err {:.3e}",
            report.checked, report.worst_rel_err
        );
        for f in &report.failures {
            println!("    {f}");
            failed = true;
        }
    }
    if failed {
        bail!("gradient check failed");
    }
    Ok(())
}
