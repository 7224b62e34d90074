use super::*;
use crate::audio::frontend::{log_mel, standardize};

pub(crate) fn xor_source(id: &str, band: (f64, f64), n_train: usize, n_test: usize) -> SourceSpec {
    SourceSpec {
        source_id: id.into(),
        dataset_description: format!("{id} respiratory study"),
        sound_type: "cough".into(),
        condition: "COVID-19".into(),
        positive_phrase: "positive".into(),
        negative_phrase: "negative".into(),
        n_train,
        n_test,
        marker_band: band,
        marker_snr_db: (3.0, 9.0),
        label_rule: LabelRule {
            op: LabelOp::Xor,
            symptom: "fever".into(),
            noise: 0.0,
        },
        dms: DmsSchema {
            genders: vec!["male".into(), "female".into()],
            age_range: Some((18, 80)),
            medical_history_pool: vec!["asthma".into(), "hypertension".into()],
            distractor_symptoms: vec!["headache".into(), "fatigue".into()],
            locations: vec![],
        },
    }
}

#[test]
fn same_seed_gives_bit_identical_waveforms() {
    let spec = xor_source("s1", (900.0, 1300.0), 4, 2);
    let a = gen_waveform(true, &spec, 7, "s1-00000");
    let b = gen_waveform(true, &spec, 7, "s1-00000");
    assert_eq!(a, b);
    let c = gen_waveform(true, &spec, 8, "s1-00000");
    assert_ne!(a, c);
}

#[test]
fn generated_audio_survives_standardize_at_full_length() {
    let spec = xor_source("s1", (900.0, 1300.0), 4, 2);
    let w = gen_waveform(false, &spec, 7, "s1-00001");
    assert_eq!(w.samples.len(), TARGET_SAMPLES);
    let s = standardize(&w).unwrap();
    assert_eq!(s.samples.len(), TARGET_SAMPLES);
}

#[test]
fn marker_raises_band_energy_on_every_seeded_pair() {
    let spec = xor_source("s1", (1000.0, 1500.0), 4, 2);
    for i in 0..100 {
        let id = format!("s1-{i:05}");
        let with = gen_waveform(true, &spec, 3, &id);
        let without = gen_waveform(false, &spec, 3, &id);
        let e_with = band_log_energy(spec.marker_band, &log_mel(&standardize(&with).unwrap()));
        let e_without =
            band_log_energy(spec.marker_band, &log_mel(&standardize(&without).unwrap()));
        assert!(
            e_with > e_without,
            "pair {i}: {e_with} <= {e_without}"
        );
    }
}

#[test]
fn plan_produces_exact_split_counts() {
    let spec = xor_source("s1", (900.0, 1300.0), 1500, 1000);
    let rows = plan_source(&spec, 11).unwrap();
    assert_eq!(rows.len(), 2500);
    let train = rows.iter().filter(|r| r.split == Split::Train).count();
    let test = rows.iter().filter(|r| r.split == Split::Test).count();
    assert_eq!((train, test), (1500, 1000));
    let ids: std::collections::HashSet<&str> =
        rows.iter().map(|r| r.sample_id.as_str()).collect();
    assert_eq!(ids.len(), 2500, "sample ids must be unique");
}

#[test]
fn zero_noise_labels_follow_the_rule_exactly() {
    for op in [LabelOp::And, LabelOp::Or, LabelOp::Xor] {
        let mut spec = xor_source("s1", (900.0, 1300.0), 200, 100);
        spec.label_rule.op = op;
        for row in plan_source(&spec, 13).unwrap() {
            assert_eq!(
                row.label == 1,
                op.apply(row.marker_present, row.symptom_present)
            );
        }
    }
}

#[test]
fn designated_symptom_appears_iff_planted() {
    let spec = xor_source("s1", (900.0, 1300.0), 300, 100);
    for row in plan_source(&spec, 17).unwrap() {
        assert_eq!(
            row.symptom_present,
            row.dms.symptoms.iter().any(|s| s == "fever")
        );
    }
}

#[test]
fn class_balance_tracks_configured_prior_over_10_seeds() {
    for (op, prior) in [
        (LabelOp::Xor, 0.5),
        (LabelOp::And, 0.25),
        (LabelOp::Or, 0.75),
    ] {
        let mut positives = 0usize;
        let mut total = 0usize;
        for seed in 0..10u64 {
            let mut spec = xor_source("s1", (900.0, 1300.0), 1200, 300);
            spec.label_rule.op = op;
            let rows = plan_source(&spec, seed).unwrap();
            positives += rows.iter().filter(|r| r.label == 1).count();
            total += rows.len();
        }
        let rate = positives as f64 / total as f64;
        assert!(
            (rate - prior).abs() <= 0.02,
            "{op:?}: rate {rate} vs prior {prior}"
        );
    }
}

#[test]
fn manifest_jsonl_roundtrip_is_byte_identical() {
    let spec = xor_source("s1", (900.0, 1300.0), 30, 10);
    let manifest = gen_cohort(&[spec], 23, None).unwrap();
    let text = manifest.to_jsonl().unwrap();
    let reread = CohortManifest::from_jsonl(&text).unwrap();
    assert_eq!(text, reread.to_jsonl().unwrap());
    assert_eq!(manifest.seed, reread.seed);
}

#[test]
fn cohort_generation_is_deterministic() {
    let spec = xor_source("s1", (900.0, 1300.0), 40, 20);
    let a = gen_cohort(&[spec.clone()], 31, None).unwrap();
    let b = gen_cohort(&[spec], 31, None).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
}

#[test]
fn written_cohort_includes_readable_wavs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = xor_source("s1", (900.0, 1300.0), 3, 1);
    let manifest = gen_cohort(&[spec.clone()], 37, Some(dir.path())).unwrap();
    for row in &manifest.rows {
        let path = row.wav_path.as_ref().expect("path missing");
        let loaded = crate::audio::read_wav(Path::new(path)).unwrap();
        let regen = gen_waveform(row.marker_present, &spec, 37, &row.sample_id);
        assert_eq!(loaded.samples.len(), regen.samples.len());
        // 16-bit quantization error only.
        for (a, b) in loaded.samples.iter().zip(&regen.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

#[test]
fn spec_file_toml_roundtrip() {
    let file = SynthSpecFile {
        sources: vec![xor_source("s1", (900.0, 1300.0), 10, 5)],
    };
    let text = toml::to_string(&file).unwrap();
    let reread = SynthSpecFile::from_toml(&text).unwrap();
    assert_eq!(reread.sources.len(), 1);
    assert_eq!(reread.sources[0].source_id, "s1");
    assert_eq!(reread.sources[0].marker_band, (900.0, 1300.0));
}

#[test]
fn invalid_noise_rate_is_rejected() {
    let mut spec = xor_source("s1", (900.0, 1300.0), 4, 2);
    spec.label_rule.noise = 0.5;
    assert!(plan_source(&spec, 1).is_err());
}
