//! Instruction templates for the task prompt and the DMS description.
//!
//! Rendering is byte-deterministic; the expected strings are frozen in the
//! golden fixture file under `tests/fixtures/`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// The five text slots of a diagnostic task prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Data-source description, e.g. "COVID-19 Sounds project".
    pub dataset_description: String,
    /// Sound type, e.g. "cough".
    pub sound_type: String,
    /// Condition to predict, e.g. "COVID-19".
    pub condition: String,
    /// Phrase for the positive answer ("1").
    pub positive_phrase: String,
    /// Phrase for the negative answer ("0").
    pub negative_phrase: String,
}

/// Demographics, medical history, and symptoms. Every field is optional;
/// absent fields produce no text at all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmsRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub medical_history: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symptoms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

/// Instantiate the diagnostic query template. All five slots are required.
pub fn render_task_prompt(t: &TaskSpec) -> Result<String> {
    for (name, value) in [
        ("dataset_description", &t.dataset_description),
        ("sound_type", &t.sound_type),
        ("condition", &t.condition),
        ("positive_phrase", &t.positive_phrase),
        ("negative_phrase", &t.negative_phrase),
    ] {
        if value.is_empty() {
            return Err(Error::Input(format!("task spec field {name} is empty")));
        }
    }
    Ok(format!(
        "Dataset description: This data comes from the {}. \
         Task description: classify whether the participant has {} given the \
         following information and audio of the person's {} sounds. \
         Please output 1 for {}, and 0 for {}.",
        t.dataset_description, t.condition, t.sound_type, t.positive_phrase, t.negative_phrase
    ))
}

/// Render the DMS description. Sentences appear in the order gender, age,
/// medical history, symptoms, location; absent fields are omitted entirely
/// and list fields are joined with ", ".
pub fn render_dms(r: &DmsRecord) -> String {
    let mut sentences: Vec<String> = Vec::new();
    if let Some(g) = &r.gender {
        sentences.push(format!("Gender: {g}."));
    }
    if let Some(a) = r.age {
        sentences.push(format!("Age: {a}."));
    }
    if !r.medical_history.is_empty() {
        sentences.push(format!(
            "Patient presents with {} medical history conditions.",
            r.medical_history.join(", ")
        ));
    }
    if !r.symptoms.is_empty() {
        sentences.push(format!(
            "Patient presents with the following respiratory symptoms: {}.",
            r.symptoms.join(", ")
        ));
    }
    if let Some(l) = &r.location {
        sentences.push(format!("Recorded location: {l}."));
    }
    sentences.join(" ")
}
