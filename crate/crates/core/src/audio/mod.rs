//! Waveforms, log-mel analysis, Griffin-Lim inversion and block masking.

mod augment;
mod griffin_lim;
mod mel;
mod spectrogram;
mod waveform;

pub use augment::{spec_augment, spec_augment_with_masks, Mask, MaskAxis, SpecAugmentPolicy};
pub use griffin_lim::{griffin_lim_invert, DEFAULT_ITERATIONS};
pub use mel::{hann, hz_to_mel, mel_to_hz, stft_logmel, FrontendConfig, MelFilterbank};
pub use spectrogram::{prompt_frames, split_prompt, Spectrogram, SpectrogramMeta};
pub use waveform::{speech_like, tone, Waveform};
