//! Manual tuning harness for the fusion experiment; run with
//! `cargo test --test tune -- --ignored --nocapture`.

use respllm::audio::encoder::AudioEncoderConfig;
use respllm::model::{RespLlmConfig, RespLlmModel};
use respllm::pipeline::config::TrainSettings;
use respllm::pipeline::dataset::{
    build_instruction_dataset, test_split, train_split, AudioSource,
};
use respllm::pipeline::eval::evaluate;
use respllm::pipeline::pretrain::{load_weights, pretrain_encoder, PretrainConfig};
use respllm::pipeline::train::train;
use respllm::pipeline::ClassifierModel;
use respllm::synth::{gen_cohort, DmsSchema, LabelOp, LabelRule, SourceSpec, SynthSpecFile};
use respllm::text::Vocabulary;
use std::collections::BTreeMap;
use std::time::Instant;

fn xor_sources(n_train: usize, n_test: usize) -> Vec<SourceSpec> {
    let bands = [(900.0, 1300.0), (1800.0, 2400.0), (2900.0, 3500.0)];
    let sounds = ["cough", "breath", "exhalation"];
    let datasets = [
        "City Breathing Study",
        "Remote Cough Archive",
        "Hospital Screening Panel",
    ];
    bands
        .iter()
        .zip(sounds)
        .zip(datasets)
        .enumerate()
        .map(|(i, ((band, sound), dataset))| SourceSpec {
            source_id: format!("s{}", i + 1),
            dataset_description: dataset.to_string(),
            sound_type: sound.to_string(),
            condition: "COVID-19".into(),
            positive_phrase: "positive".into(),
            negative_phrase: "negative".into(),
            n_train,
            n_test,
            marker_band: *band,
            marker_snr_db: (3.0, 9.0),
            label_rule: LabelRule {
                op: LabelOp::Xor,
                symptom: "fever".into(),
                noise: 0.0,
            },
            dms: DmsSchema {
                genders: vec!["male".into(), "female".into()],
                age_range: Some((18, 80)),
                medical_history_pool: vec![],
                distractor_symptoms: vec!["headache".into()],
                locations: vec![],
            },
        })
        .collect()
}

#[test]
#[ignore]
fn tune_fusion_experiment() {
    let seed = 1u64;
    let t0 = Instant::now();
    let sources = xor_sources(1500, 500);
    let manifest = gen_cohort(&sources, seed, None).unwrap();
    let tasks: BTreeMap<String, _> = sources
        .iter()
        .map(|s| (s.source_id.clone(), s.task_spec()))
        .collect();
    let records = build_instruction_dataset(&manifest, &tasks).unwrap();
    let specs = SynthSpecFile { sources };
    let source = AudioSource::synthetic(specs, seed);
    println!("[{:?}] cohort planned: {} records", t0.elapsed(), records.len());

    let enc_cfg = AudioEncoderConfig {
        width: 64,
        layers: 2,
        heads: 2,
        ..Default::default()
    };
    let pre_cfg = PretrainConfig {
        n_samples: 600,
        epochs: 3,
        ..Default::default()
    };
    let t = Instant::now();
    let weights = pretrain_encoder(&enc_cfg, &pre_cfg, seed).unwrap();
    println!("[{:?}] encoder pretrained", t.elapsed());

    let train_recs = train_split(&records);
    let test_recs = test_split(&records);
    let corpus: Vec<String> = train_recs
        .iter()
        .flat_map(|r| [r.prompt_text.clone(), r.dms_text.clone()])
        .collect();
    let vocab = Vocabulary::build(&corpus, 2000);
    println!("vocab size {}", vocab.len());

    let cfg = RespLlmConfig {
        hidden: 64,
        layers: 2,
        heads: 2,
        ffn_mult: 4,
        lora_rank: 16,
        lora_alpha: 32.0,
        max_len: 192,
        encoder: enc_cfg.clone(),
        ..Default::default()
    };
    let mut model = RespLlmModel::build(cfg, vocab, seed).unwrap();
    load_weights(&mut model.store, &weights).unwrap();

    let settings = TrainSettings {
        epochs: 2,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let t = Instant::now();
    let outcome = train(&mut model, &train_recs, &source, &settings.hyper(), seed).unwrap();
    println!(
        "[{:?}] respllm trained, {} steps, final loss {:?}",
        t.elapsed(),
        outcome.steps,
        outcome.final_loss()
    );
    for p in outcome.curve.iter().step_by(50) {
        println!("  step {:4} epoch {} loss {:.4}", p.step, p.epoch, p.loss);
    }

    let t = Instant::now();
    let report = evaluate(&model, &test_recs, &source, seed).unwrap();
    println!("[{:?}] eval:\n{}", t.elapsed(), report.to_table());
    println!("total {:?}", t0.elapsed());
}

#[test]
#[ignore]
fn tune_speed_probe() {
    // One batch timing probe at acceptance scale.
    let seed = 2u64;
    let sources = xor_sources(32, 8);
    let manifest = gen_cohort(&sources, seed, None).unwrap();
    let tasks: BTreeMap<String, _> = sources
        .iter()
        .map(|s| (s.source_id.clone(), s.task_spec()))
        .collect();
    let records = build_instruction_dataset(&manifest, &tasks).unwrap();
    let specs = SynthSpecFile {
        sources: sources.clone(),
    };
    let source = AudioSource::synthetic(specs, seed);

    let enc_cfg = AudioEncoderConfig {
        width: 64,
        layers: 2,
        heads: 2,
        ..Default::default()
    };
    let cfg = RespLlmConfig {
        hidden: 64,
        layers: 2,
        heads: 2,
        max_len: 192,
        encoder: enc_cfg,
        ..Default::default()
    };
    let corpus: Vec<String> = records.iter().map(|r| r.prompt_text.clone()).collect();
    let model = RespLlmModel::build(cfg, Vocabulary::build(&corpus, 2000), seed).unwrap();

    let recs = train_split(&records);
    let t = Instant::now();
    let sample = respllm::pipeline::dataset::prepare_sample(&model, recs[0], &source).unwrap();
    println!("prepare one sample: {:?}", t.elapsed());
    if let respllm::pipeline::AudioFeatures::Encoded(z) = &sample.audio {
        println!("za shape {}x{}", z.rows(), z.cols());
    }
    println!(
        "prompt tokens {} dms tokens {}",
        model.vocab.encode(&sample.prompt_text).len(),
        model.vocab.encode(&sample.dms_text).len()
    );

    let t = Instant::now();
    for _ in 0..10 {
        let _ = model.loss_and_grads(&sample).unwrap();
    }
    println!("fwd+bwd per sample: {:?}", t.elapsed() / 10);

    let t = Instant::now();
    for _ in 0..10 {
        let _ = model.predict(&sample).unwrap();
    }
    println!("fwd per sample: {:?}", t.elapsed() / 10);
}
