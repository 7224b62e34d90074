//! Deterministic multi-source synthetic cohorts with planted cross-modal
//! ground truth.
//!
//! Each sample has two hidden binary factors: an acoustic marker (tone
//! bursts in a source-specific frequency band) and a designated DMS symptom.
//! The label is AND / OR / XOR of the two, optionally flipped by label
//! noise. Under XOR with fair factors, neither modality alone carries any
//! label information, while together they determine it — which is what the
//! fusion experiments rely on.
//!
//! Everything is reproducible: per-sample RNG streams are derived by hashing
//! (seed, sample_id), so generation order never affects output.

use crate::audio::frontend::{
    self, mel_filter_centers, LogMelSpectrogram, Waveform, TARGET_SAMPLES,
};
use crate::audio::wav::write_wav;
use crate::error::{Error, Result};
use crate::text::{DmsRecord, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelOp {
    And,
    Or,
    Xor,
}

impl LabelOp {
    pub fn apply(&self, marker: bool, symptom: bool) -> bool {
        match self {
            LabelOp::And => marker && symptom,
            LabelOp::Or => marker || symptom,
            LabelOp::Xor => marker ^ symptom,
        }
    }

    /// P(label = 1) with independent fair factors, before noise.
    pub fn positive_prior(&self) -> f64 {
        match self {
            LabelOp::And => 0.25,
            LabelOp::Or => 0.75,
            LabelOp::Xor => 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRule {
    pub op: LabelOp,
    /// The designated symptom string whose presence enters the rule.
    pub symptom: String,
    /// Probability of flipping the label after applying the rule.
    #[serde(default)]
    pub noise: f64,
}

/// Which optional DMS fields a source emits, and from which pools.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DmsSchema {
    #[serde(default)]
    pub genders: Vec<String>,
    #[serde(default)]
    pub age_range: Option<(u32, u32)>,
    #[serde(default)]
    pub medical_history_pool: Vec<String>,
    /// Label-independent symptoms mixed in alongside the designated one.
    #[serde(default)]
    pub distractor_symptoms: Vec<String>,
    #[serde(default)]
    pub locations: Vec<String>,
}

fn default_positive() -> String {
    "positive".into()
}

fn default_negative() -> String {
    "negative".into()
}

fn default_snr() -> (f64, f64) {
    (3.0, 9.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: String,
    pub dataset_description: String,
    pub sound_type: String,
    pub condition: String,
    #[serde(default = "default_positive")]
    pub positive_phrase: String,
    #[serde(default = "default_negative")]
    pub negative_phrase: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Tone-burst frequency band (Hz) of the acoustic marker.
    pub marker_band: (f64, f64),
    /// Burst level relative to the noise bed, sampled per burst (dB).
    #[serde(default = "default_snr")]
    pub marker_snr_db: (f64, f64),
    pub label_rule: LabelRule,
    #[serde(default)]
    pub dms: DmsSchema,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_rule.noise) {
            return Err(Error::Config(format!(
                "source {}: label noise {} outside [0, 0.5)",
                self.source_id, self.label_rule.noise
            )));
        }
        if self.marker_band.0 <= 0.0 || self.marker_band.1 <= self.marker_band.0 {
            return Err(Error::Config(format!(
                "source {}: bad marker band {:?}",
                self.source_id, self.marker_band
            )));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            dataset_description: self.dataset_description.clone(),
            sound_type: self.sound_type.clone(),
            condition: self.condition.clone(),
            positive_phrase: self.positive_phrase.clone(),
            negative_phrase: self.negative_phrase.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub source_id: String,
    /// Present when the cohort was written to disk; in-memory cohorts
    /// regenerate audio from (seed, sample_id) instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav_path: Option<String>,
    pub dms: DmsRecord,
    pub label: u8,
    pub split: Split,
    pub marker_present: bool,
    pub symptom_present: bool,
}

#[derive(Debug, Clone)]
pub struct CohortManifest {
    pub seed: u64,
    pub rows: Vec<ManifestRow>,
}

impl CohortManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "{}", serde_json::to_string(&HeaderLine { seed: self.seed })?);
        for row in &self.rows {
            let _ = writeln!(out, "{}", serde_json::to_string(row)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<CohortManifest> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: HeaderLine = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Input("empty manifest".into()))?,
        )?;
        let rows = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(CohortManifest {
            seed: header.seed,
            rows,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    seed: u64,
}

/// Independent RNG stream for one sample, independent of generation order.
pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stable hash for deriving per-sound-type shaping parameters.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// 8 s of shaped noise at 16 kHz, with tone bursts in the marker band when
/// `marker_present`. Fully determined by (seed, sample_id).
pub fn gen_waveform(
    marker_present: bool,
    spec: &SourceSpec,
    seed: u64,
    sample_id: &str,
) -> Waveform {
    let mut rng = sample_rng(seed, &format!("{sample_id}/audio"));
    let sr = frontend::TARGET_SAMPLE_RATE as f64;
    let n = TARGET_SAMPLES;

    // Sound-type-specific shaping so different sources (and unseen types)
    // sound different without code changes.
    let h = fnv1a(&spec.sound_type);
    let cutoff = 500.0 + (h % 2000) as f64;
    let env_rate = 0.5 + ((h >> 8) % 30) as f64 / 10.0;
    let env_depth = 0.3 + ((h >> 16) % 50) as f64 / 100.0;
    // One-pole output never exceeds the white-noise bound, so |base| <= gain.
    let base_gain = 0.5;

    let alpha = (-2.0 * std::f64::consts::PI * cutoff / sr).exp();
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut samples = vec![0.0f64; n];
    let mut prev = 0.0;
    let mut sum_sq = 0.0;
    for (i, s) in samples.iter_mut().enumerate() {
        let white: f64 = rng.gen_range(-1.0..1.0);
        prev = alpha * prev + (1.0 - alpha) * white;
        let t = i as f64 / sr;
        let env =
            1.0 - env_depth * 0.5 * (1.0 + (std::f64::consts::TAU * env_rate * t + phase).sin());
        *s = base_gain * env * prev;
        sum_sq += *s * *s;
    }
    let base_rms = (sum_sq / n as f64).sqrt();

    if marker_present {
        // Burst level is set relative to the measured noise bed so the tone
        // peaks stay well below full scale; the bed is identical with and
        // without markers.
        let n_bursts = rng.gen_range(5..=9);
        for _ in 0..n_bursts {
            let dur = rng.gen_range(0.2..0.4);
            let dur_n = (dur * sr) as usize;
            let start = rng.gen_range(0..n - dur_n);
            let freq = rng.gen_range(spec.marker_band.0..spec.marker_band.1);
            let snr_db = rng.gen_range(spec.marker_snr_db.0..spec.marker_snr_db.1);
            let amp = base_rms * 10f64.powf(snr_db / 20.0);
            let tone_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for j in 0..dur_n {
                let t = j as f64 / sr;
                let hann = 0.5 * (1.0 - (std::f64::consts::TAU * j as f64 / dur_n as f64).cos());
                samples[start + j] +=
                    amp * hann * (std::f64::consts::TAU * freq * t + tone_phase).sin();
            }
        }
        for s in samples.iter_mut() {
            *s = s.clamp(-1.0, 1.0);
        }
    }

    Waveform {
        samples,
        sample_rate: frontend::TARGET_SAMPLE_RATE,
    }
}

fn gen_dms(spec: &SourceSpec, symptom_present: bool, rng: &mut ChaCha8Rng) -> DmsRecord {
    let schema = &spec.dms;
    let mut symptoms = Vec::new();
    if symptom_present {
        symptoms.push(spec.label_rule.symptom.clone());
    }
    for s in &schema.distractor_symptoms {
        if rng.gen_bool(0.35) {
            symptoms.push(s.clone());
        }
    }
    DmsRecord {
        gender: pick(&schema.genders, rng),
        age: schema
            .age_range
            .map(|(lo, hi)| rng.gen_range(lo..=hi)),
        medical_history: schema
            .medical_history_pool
            .iter()
            .filter(|_| rng.gen_bool(0.3))
            .cloned()
            .collect(),
        symptoms,
        location: pick(&schema.locations, rng),
    }
}

fn pick(pool: &[String], rng: &mut ChaCha8Rng) -> Option<String> {
    if pool.is_empty() {
        None
    } else {
        Some(pool[rng.gen_range(0..pool.len())].clone())
    }
}

/// Plan one source: factors, DMS, labels, and a stratified train/test split.
/// No audio is rendered here.
pub fn plan_source(spec: &SourceSpec, seed: u64) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let total = spec.n_train + spec.n_test;
    let mut rows: Vec<ManifestRow> = (0..total)
        .map(|i| {
            let sample_id = format!("{}-{:05}", spec.source_id, i);
            let mut rng = sample_rng(seed, &sample_id);
            let marker = rng.gen_bool(0.5);
            let symptom = rng.gen_bool(0.5);
            let mut label = spec.label_rule.op.apply(marker, symptom);
            if spec.label_rule.noise > 0.0 && rng.gen_bool(spec.label_rule.noise) {
                label = !label;
            }
            let dms = gen_dms(spec, symptom, &mut rng);
            ManifestRow {
                sample_id,
                source_id: spec.source_id.clone(),
                wav_path: None,
                dms,
                label: label as u8,
                split: Split::Train, // assigned below
                marker_present: marker,
                symptom_present: symptom,
            }
        })
        .collect();

    // Stratified split with a cohort-level stream so per-sample streams stay
    // order-independent.
    let mut split_rng = sample_rng(seed, &format!("{}/split", spec.source_id));
    let mut pos: Vec<usize> = (0..total).filter(|&i| rows[i].label == 1).collect();
    let mut neg: Vec<usize> = (0..total).filter(|&i| rows[i].label == 0).collect();
    use rand::seq::SliceRandom;
    pos.shuffle(&mut split_rng);
    neg.shuffle(&mut split_rng);
    let train_pos = ((pos.len() as f64) * (spec.n_train as f64) / (total as f64)).round() as usize;
    let train_pos = train_pos.min(pos.len()).min(spec.n_train);
    let train_neg = spec.n_train - train_pos;
    if train_neg > neg.len() {
        return Err(Error::Config(format!(
            "source {}: cannot stratify {} train rows from {} negatives",
            spec.source_id,
            spec.n_train,
            neg.len()
        )));
    }
    for &i in pos.iter().take(train_pos).chain(neg.iter().take(train_neg)) {
        rows[i].split = Split::Train;
    }
    for &i in pos.iter().skip(train_pos).chain(neg.iter().skip(train_neg)) {
        rows[i].split = Split::Test;
    }
    Ok(rows)
}

/// Generate every source of a cohort. With `out_dir` set, WAV files are
/// written and rows carry their paths; otherwise the cohort is in-memory
/// and audio is regenerated on demand from (seed, sample_id).
pub fn gen_cohort(
    specs: &[SourceSpec],
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<CohortManifest> {
    let mut rows = Vec::new();
    for spec in specs {
        let mut source_rows = plan_source(spec, seed)?;
        if let Some(dir) = out_dir {
            let wav_dir = dir.join("wavs");
            std::fs::create_dir_all(&wav_dir)
                .map_err(|e| Error::io(wav_dir.display().to_string(), e))?;
            for row in &mut source_rows {
                let w = gen_waveform(row.marker_present, spec, seed, &row.sample_id);
                let path = wav_dir.join(format!("{}.wav", row.sample_id));
                write_wav(&path, &w)?;
                row.wav_path = Some(path.display().to_string());
            }
        }
        rows.extend(source_rows);
    }
    Ok(CohortManifest { seed, rows })
}

/// Mean log-mel energy over the mel bins whose centers fall in `band`.
pub fn band_log_energy(band: (f64, f64), spec: &LogMelSpectrogram) -> f64 {
    let centers = mel_filter_centers();
    let bins: Vec<usize> = centers
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= band.0 && c <= band.1)
        .map(|(i, _)| i)
        .collect();
    assert!(!bins.is_empty(), "no mel bins in band {band:?}");
    let mut acc = 0.0;
    for t in 0..spec.frames() {
        for &b in &bins {
            acc += spec.values.get(t, b);
        }
    }
    acc / (spec.frames() * bins.len()) as f64
}

/// Convenience spec-file wrapper (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpecFile {
    pub sources: Vec<SourceSpec>,
}

impl SynthSpecFile {
    pub fn from_toml(text: &str) -> Result<SynthSpecFile> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad synth spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<SynthSpecFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn source(&self, id: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.source_id == id)
    }
}

#[cfg(test)]
pub(crate) mod tests;
