//! Waveform standardization, log-mel spectrograms, and patch extraction.
//!
//! The pipeline is fixed-geometry: 8 s of 16 kHz mono audio becomes a
//! 249-frame 64-mel log spectrogram (1024-sample Hann window, 512 hop),
//! which is padded to 256 frames and tiled into 64 non-overlapping 16x16
//! patches.

use crate::error::{Error, Result};
use crate::nn::RealMatrix;
use rustfft::{num_complex::Complex, FftPlanner};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
pub const TARGET_SAMPLES: usize = 128_000; // 8 seconds
pub const STFT_WINDOW: usize = 1024; // 64 ms
pub const STFT_HOP: usize = 512; // 32 ms
pub const N_MELS: usize = 64;
pub const MEL_FMIN: f64 = 0.0;
pub const MEL_FMAX: f64 = 8_000.0;
pub const POWER_FLOOR: f64 = 1e-10;
pub const PADDED_FRAMES: usize = 256;
pub const PATCH_SIDE: usize = 16;
pub const N_PATCHES: usize = 64; // (256/16) * (64/16)
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;

/// The log of the power floor; silence and padding both map to this value.
pub fn log_floor() -> f64 {
    POWER_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone)]
pub struct LogMelSpectrogram {
    /// frames x N_MELS matrix of natural-log mel energies.
    pub values: RealMatrix,
}

impl LogMelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn mels(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// N_PATCHES x PATCH_DIM, patches ordered time-major then mel, each
    /// patch flattened frame-major.
    pub patches: RealMatrix,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

/// Resample to 16 kHz, pad or crop to 8 s, and peak-normalize so amplitudes
/// stay within [-1, 1]. Signals already in range pass through untouched,
/// which keeps relative loudness comparable across a cohort.
pub fn standardize(w: &Waveform) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::Input("cannot standardize an empty waveform".into()));
    }
    let mut samples = if w.sample_rate == TARGET_SAMPLE_RATE {
        w.samples.clone()
    } else {
        resample_linear(&w.samples, w.sample_rate, TARGET_SAMPLE_RATE)
    };
    match samples.len().cmp(&TARGET_SAMPLES) {
        std::cmp::Ordering::Less => samples.resize(TARGET_SAMPLES, 0.0),
        std::cmp::Ordering::Greater => samples.truncate(TARGET_SAMPLES),
        std::cmp::Ordering::Equal => {}
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 1.0 {
        let inv = 1.0 / peak;
        samples.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Waveform {
        samples,
        sample_rate: TARGET_SAMPLE_RATE,
    })
}

fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    let ratio = from as f64 / to as f64;
    let out_len = ((samples.len() as f64) / ratio).round() as usize;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let idx = t.floor() as usize;
            let frac = t - idx as f64;
            let a = samples[idx.min(samples.len() - 1)];
            let b = samples[(idx + 1).min(samples.len() - 1)];
            a * (1.0 - frac) + b * frac
        })
        .collect()
}

/// STFT power spectrum mapped through 64 triangular mel filters, then
/// floored natural log. Frame count is floor((N - win)/hop) + 1.
pub fn log_mel(w: &Waveform) -> LogMelSpectrogram {
    debug_assert_eq!(w.sample_rate, TARGET_SAMPLE_RATE, "standardize first");
    let n = w.samples.len();
    let frames = if n >= STFT_WINDOW {
        (n - STFT_WINDOW) / STFT_HOP + 1
    } else {
        0
    };
    let window = hann_window(STFT_WINDOW);
    let filters = mel_filterbank();
    let n_bins = STFT_WINDOW / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(STFT_WINDOW);
    let mut values = RealMatrix::zeros(frames, N_MELS);
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_WINDOW];
    let mut power = vec![0.0f64; n_bins];
    for t in 0..frames {
        let start = t * STFT_HOP;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        let row = values.row_mut(t);
        for (m, filter) in filters.iter().enumerate() {
            let mut e = 0.0;
            for &(k, wgt) in filter {
                e += wgt * power[k];
            }
            row[m] = e.max(POWER_FLOOR).ln();
        }
    }
    LogMelSpectrogram { values }
}

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each of the 64 triangular filters.
pub fn mel_filter_centers() -> Vec<f64> {
    mel_points().windows(3).map(|w| w[1]).collect()
}

fn mel_points() -> Vec<f64> {
    let lo = hz_to_mel(MEL_FMIN);
    let hi = hz_to_mel(MEL_FMAX);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Sparse filterbank: per mel bin, the contributing FFT bins with weights.
fn mel_filterbank() -> Vec<Vec<(usize, f64)>> {
    let points = mel_points();
    let n_bins = STFT_WINDOW / 2 + 1;
    let bin_hz = TARGET_SAMPLE_RATE as f64 / STFT_WINDOW as f64;
    (0..N_MELS)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let mut filter = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f < center {
                    (f - left) / (center - left)
                } else if (f - center).abs() < f64::EPSILON {
                    1.0
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    filter.push((k, w));
                }
            }
            filter
        })
        .collect()
}

/// Pad the time axis with the log floor to 256 frames and tile into 64
/// non-overlapping 16x16 patches.
pub fn patchify(spec: &LogMelSpectrogram) -> Result<PatchGrid> {
    if spec.mels() != N_MELS {
        return Err(Error::Config(format!(
            "patchify expects {N_MELS} mel bins, got {}",
            spec.mels()
        )));
    }
    let floor = log_floor();
    let mut patches = RealMatrix::zeros(N_PATCHES, PATCH_DIM);
    let t_blocks = PADDED_FRAMES / PATCH_SIDE;
    let m_blocks = N_MELS / PATCH_SIDE;
    for tb in 0..t_blocks {
        for mb in 0..m_blocks {
            let p = tb * m_blocks + mb;
            let row = patches.row_mut(p);
            for df in 0..PATCH_SIDE {
                let frame = tb * PATCH_SIDE + df;
                for dm in 0..PATCH_SIDE {
                    let mel = mb * PATCH_SIDE + dm;
                    row[df * PATCH_SIDE + dm] = if frame < spec.frames() {
                        spec.values.get(frame, mel)
                    } else {
                        floor
                    };
                }
            }
        }
    }
    Ok(PatchGrid { patches })
}

/// Invert [`patchify`]: rebuild the padded 256x64 spectrogram.
pub fn reassemble(grid: &PatchGrid) -> RealMatrix {
    let mut out = RealMatrix::zeros(PADDED_FRAMES, N_MELS);
    let m_blocks = N_MELS / PATCH_SIDE;
    for p in 0..N_PATCHES {
        let (tb, mb) = (p / m_blocks, p % m_blocks);
        let row = grid.patches.row(p);
        for df in 0..PATCH_SIDE {
            for dm in 0..PATCH_SIDE {
                out.set(
                    tb * PATCH_SIDE + df,
                    mb * PATCH_SIDE + dm,
                    row[df * PATCH_SIDE + dm],
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() * 0.5)
                .collect(),
            sample_rate: sr,
        }
    }

    #[test]
    fn standardize_rejects_empty() {
        let w = Waveform {
            samples: vec![],
            sample_rate: 16000,
        };
        assert!(matches!(standardize(&w), Err(Error::Input(_))));
    }

    #[test]
    fn standardize_full_length_input_only_normalizes() {
        // In-range input: returned unchanged.
        let w = sine(440.0, 8.0, 16000);
        let s = standardize(&w).unwrap();
        assert_eq!(s.samples.len(), TARGET_SAMPLES);
        assert_eq!(s.samples, w.samples);

        // Out-of-range input: scaled so the peak is exactly 1.
        let loud = Waveform {
            samples: w.samples.iter().map(|v| v * 4.0).collect(),
            sample_rate: 16000,
        };
        let s = standardize(&loud).unwrap();
        let peak = loud.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for (a, b) in s.samples.iter().zip(&loud.samples) {
            assert!((a - b / peak).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_pads_short_input_with_trailing_zeros() {
        let w = sine(440.0, 4.0, 16000);
        let s = standardize(&w).unwrap();
        assert_eq!(s.samples.len(), 128000);
        assert!(s.samples[64000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_truncates_long_input_to_first_8s() {
        let w = sine(440.0, 10.0, 16000);
        let s = standardize(&w).unwrap();
        assert_eq!(s.samples.len(), 128000);
        assert_eq!(s.samples, w.samples[..128000]);
    }

    #[test]
    fn standardize_resamples_other_rates() {
        let w = sine(440.0, 8.0, 8000);
        let s = standardize(&w).unwrap();
        assert_eq!(s.sample_rate, 16000);
        assert_eq!(s.samples.len(), 128000);
    }

    #[test]
    fn standardize_is_idempotent() {
        let w = sine(440.0, 5.0, 22050);
        let once = standardize(&w).unwrap();
        let twice = standardize(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn log_mel_of_silence_is_all_floor() {
        let w = Waveform {
            samples: vec![0.0; TARGET_SAMPLES],
            sample_rate: 16000,
        };
        let spec = log_mel(&w);
        let floor = log_floor();
        assert!(spec.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_matches_stft_formula() {
        let w = Waveform {
            samples: vec![0.0; TARGET_SAMPLES],
            sample_rate: 16000,
        };
        // floor((128000 - 1024)/512) + 1 = 249
        assert_eq!(log_mel(&w).frames(), 249);
    }

    #[test]
    fn pure_tone_peaks_in_nearest_mel_bin() {
        let w = standardize(&sine(1000.0, 8.0, 16000)).unwrap();
        let spec = log_mel(&w);
        let mut avg = vec![0.0f64; N_MELS];
        for t in 0..spec.frames() {
            for (m, a) in avg.iter_mut().enumerate() {
                *a += spec.values.get(t, m);
            }
        }
        let argmax = avg
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let centers = mel_filter_centers();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0)
                    .abs()
                    .partial_cmp(&(b.1 - 1000.0).abs())
                    .unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn patchify_always_yields_64_patches() {
        let w = standardize(&sine(500.0, 8.0, 16000)).unwrap();
        let grid = patchify(&log_mel(&w)).unwrap();
        assert_eq!(grid.n_patches(), 64);
        assert_eq!(grid.patch_dim(), 256);
    }

    #[test]
    fn reassemble_inverts_patchify() {
        let w = standardize(&sine(1234.0, 8.0, 16000)).unwrap();
        let spec = log_mel(&w);
        let grid = patchify(&spec).unwrap();
        let rebuilt = reassemble(&grid);
        for t in 0..spec.frames() {
            for m in 0..N_MELS {
                assert_eq!(rebuilt.get(t, m), spec.values.get(t, m));
            }
        }
        let floor = log_floor();
        for t in spec.frames()..PADDED_FRAMES {
            for m in 0..N_MELS {
                assert_eq!(rebuilt.get(t, m), floor);
            }
        }
    }

    #[test]
    fn single_hot_corner_touches_exactly_one_patch() {
        let floor = log_floor();
        let mut values = RealMatrix::zeros(249, N_MELS);
        values.fill(floor);
        for t in 0..16 {
            for m in 0..16 {
                values.set(t, m, 1.0);
            }
        }
        let grid = patchify(&LogMelSpectrogram { values }).unwrap();
        let all_floor = vec![floor; PATCH_DIM];
        let differing = (0..N_PATCHES)
            .filter(|&p| grid.patches.row(p) != all_floor.as_slice())
            .count();
        assert_eq!(differing, 1);
    }

    #[test]
    fn shifting_by_one_hop_shifts_frames() {
        // Noise-like deterministic signal; shift by exactly one hop and
        // compare interior frames.
        let n = TARGET_SAMPLES;
        let base: Vec<f64> = (0..n)
            .map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract() - 0.5)
            .collect();
        let mut shifted = vec![0.0; STFT_HOP];
        shifted.extend_from_slice(&base[..n - STFT_HOP]);
        let wa = Waveform {
            samples: base,
            sample_rate: 16000,
        };
        let wb = Waveform {
            samples: shifted,
            sample_rate: 16000,
        };
        let sa = log_mel(&wa);
        let sb = log_mel(&wb);
        for t in 0..sa.frames() - 1 {
            for m in 0..N_MELS {
                let a = sa.values.get(t, m);
                let b = sb.values.get(t + 1, m);
                assert!(
                    (a - b).abs() < 1e-6,
                    "frame {t} mel {m}: {a} vs {b}"
                );
            }
        }
    }
}
