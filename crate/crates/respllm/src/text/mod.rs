//! Instruction templates, tokenizer, vocabulary, and embedding lookup.

pub mod template;
pub mod vocab;

pub use template::{render_dms, render_task_prompt, DmsRecord, TaskSpec};
pub use vocab::{tokenize, tokenize_embed, EmbeddingSequence, Vocabulary, PAD_ID, UNK_ID};
