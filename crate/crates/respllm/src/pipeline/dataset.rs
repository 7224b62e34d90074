//! Instruction records: rendered prompts paired with DMS text, audio
//! references, and labels, pooled across sources.

use super::sample::{AudioFeatures, AudioNeed, ClassifierModel, PreparedSample};
use crate::audio::frontend::{patchify, standardize, PatchGrid, Waveform};
use crate::audio::frontend::log_mel;
use crate::audio::wav::read_wav;
use crate::error::{Error, Result};
use crate::synth::{gen_waveform, CohortManifest, Split, SynthSpecFile};
use crate::text::{render_dms, render_task_prompt, DmsRecord, TaskSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub task_id: String,
    pub sample_id: String,
    pub prompt_text: String,
    pub dms_text: String,
    pub dms: DmsRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav_path: Option<String>,
    pub label: u8,
    pub split: Split,
    /// Planted acoustic-marker flag, carried through for the in-memory
    /// audio provider and the oracle calibration checks.
    pub marker_present: bool,
}

/// Render one instruction per manifest row. Every source must have a task
/// spec; records from all sources are pooled in manifest order.
pub fn build_instruction_dataset(
    manifest: &CohortManifest,
    tasks: &BTreeMap<String, TaskSpec>,
) -> Result<Vec<InstructionRecord>> {
    let mut records = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let task = tasks.get(&row.source_id).ok_or_else(|| {
            Error::Config(format!(
                "no task spec for source '{}' in the manifest",
                row.source_id
            ))
        })?;
        records.push(InstructionRecord {
            task_id: row.source_id.clone(),
            sample_id: row.sample_id.clone(),
            prompt_text: render_task_prompt(task)?,
            dms_text: render_dms(&row.dms),
            dms: row.dms.clone(),
            wav_path: row.wav_path.clone(),
            label: row.label,
            split: row.split,
            marker_present: row.marker_present,
        });
    }
    Ok(records)
}

pub fn records_to_jsonl(records: &[InstructionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", serde_json::to_string(r)?);
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<InstructionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Where waveforms come from: WAV files named in the records, or on-demand
/// regeneration from the synth spec for in-memory cohorts.
#[derive(Clone)]
pub struct AudioSource {
    pub synth: Option<(SynthSpecFile, u64)>,
}

impl AudioSource {
    pub fn wav_files() -> AudioSource {
        AudioSource { synth: None }
    }

    pub fn synthetic(specs: SynthSpecFile, seed: u64) -> AudioSource {
        AudioSource {
            synth: Some((specs, seed)),
        }
    }

    pub fn waveform(&self, rec: &InstructionRecord) -> Result<Waveform> {
        if let Some(path) = &rec.wav_path {
            return read_wav(Path::new(path));
        }
        if let Some((specs, seed)) = &self.synth {
            let spec = specs.source(&rec.task_id).ok_or_else(|| {
                Error::Config(format!("no synth spec for source '{}'", rec.task_id))
            })?;
            return Ok(gen_waveform(rec.marker_present, spec, *seed, &rec.sample_id));
        }
        Err(Error::Input(format!(
            "record {} has no wav_path and no synthetic provider",
            rec.sample_id
        )))
    }

    pub fn patches(&self, rec: &InstructionRecord) -> Result<PatchGrid> {
        let w = standardize(&self.waveform(rec)?)?;
        patchify(&log_mel(&w))
    }
}

/// Prepare one record for a given model: attach exactly the audio features
/// it consumes.
pub fn prepare_sample<M: ClassifierModel + ?Sized>(
    model: &M,
    rec: &InstructionRecord,
    source: &AudioSource,
) -> Result<PreparedSample> {
    let audio = match model.audio_need() {
        AudioNeed::None => AudioFeatures::None,
        AudioNeed::Patches => AudioFeatures::Patches(source.patches(rec)?),
        AudioNeed::Encoded => AudioFeatures::Encoded(model.encode_grid(&source.patches(rec)?)?),
    };
    Ok(PreparedSample {
        task_id: rec.task_id.clone(),
        prompt_text: rec.prompt_text.clone(),
        dms_text: rec.dms_text.clone(),
        dms: rec.dms.clone(),
        label: rec.label as usize,
        audio,
    })
}

pub fn train_split(records: &[InstructionRecord]) -> Vec<&InstructionRecord> {
    records.iter().filter(|r| r.split == Split::Train).collect()
}

pub fn test_split(records: &[InstructionRecord]) -> Vec<&InstructionRecord> {
    records.iter().filter(|r| r.split == Split::Test).collect()
}
