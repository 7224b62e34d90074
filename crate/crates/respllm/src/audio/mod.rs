//! Audio ingestion: WAV files, log-mel spectrograms, patch grids, and the
//! patch-embedding transformer encoder.

pub mod encoder;
pub mod frontend;
pub mod wav;

pub use encoder::{AudioEncoder, AudioEncoderConfig};
pub use frontend::{
    log_mel, patchify, reassemble, standardize, LogMelSpectrogram, PatchGrid, Waveform,
};
pub use wav::{read_wav, write_wav};
