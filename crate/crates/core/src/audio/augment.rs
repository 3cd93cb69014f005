use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spectrogram::Spectrogram;
use crate::error::{Error, Result};

/// Block-masking augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecAugmentPolicy {
    pub freq_blocks: usize,
    pub time_blocks: usize,
    pub freq_mask_max_bins: usize,
    pub time_mask_max_frames: usize,
    pub time_block_max_length_ratio: f64,
    /// Value written into masked cells; `None` uses the spectrogram's log floor.
    pub fill_value: Option<f64>,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            freq_blocks: 2,
            time_blocks: 10,
            freq_mask_max_bins: 27,
            time_mask_max_frames: 40,
            time_block_max_length_ratio: 0.05,
            fill_value: None,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn identity() -> Self {
        Self {
            freq_blocks: 0,
            time_blocks: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time_block_max_length_ratio) {
            return Err(Error::invalid(format!(
                "time_block_max_length_ratio {} outside [0, 1]",
                self.time_block_max_length_ratio
            )));
        }
        if let Some(v) = self.fill_value {
            if !v.is_finite() {
                return Err(Error::invalid("fill_value must be finite"));
            }
        }
        Ok(())
    }

    /// Largest time mask for a spectrogram of `n_frames` frames.
    pub fn max_time_width(&self, n_frames: usize) -> usize {
        let by_ratio = (self.time_block_max_length_ratio * n_frames as f64).floor() as usize;
        self.time_mask_max_frames.min(by_ratio)
    }
}

/// One applied mask: `[start, start + width)` along its axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

pub fn spec_augment(spec: &Spectrogram, policy: &SpecAugmentPolicy, seed: u64) -> Result<Spectrogram> {
    spec_augment_with_masks(spec, policy, seed).map(|(s, _)| s)
}

/// Like [`spec_augment`], also returning the masks in the order drawn.
/// Masks are independent draws and may overlap.
pub fn spec_augment_with_masks(
    spec: &Spectrogram,
    policy: &SpecAugmentPolicy,
    seed: u64,
) -> Result<(Spectrogram, Vec<Mask>)> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, f_len) = (spec.n_frames(), spec.n_mels());
    let mut masks = Vec::with_capacity(policy.freq_blocks + policy.time_blocks);
    for _ in 0..policy.freq_blocks {
        masks.push(draw(&mut rng, MaskAxis::Frequency, policy.freq_mask_max_bins.min(f_len), f_len));
    }
    let max_t = policy.max_time_width(t_len);
    for _ in 0..policy.time_blocks {
        masks.push(draw(&mut rng, MaskAxis::Time, max_t, t_len));
    }

    let fill = policy.fill_value.unwrap_or_else(|| spec.log_floor());
    let mut out = spec.clone();
    let data = out.data_mut();
    for m in &masks {
        match m.axis {
            MaskAxis::Frequency => {
                for t in 0..t_len {
                    data[t * f_len + m.start..t * f_len + m.start + m.width].fill(fill);
                }
            }
            MaskAxis::Time => data[m.start * f_len..(m.start + m.width) * f_len].fill(fill),
        }
    }
    Ok((out, masks))
}

fn draw(rng: &mut ChaCha8Rng, axis: MaskAxis, max_width: usize, extent: usize) -> Mask {
    let width = rng.gen_range(0..=max_width);
    let start = rng.gen_range(0..=extent - width);
    Mask { axis, start, width }
}

#[cfg(test)]
mod tests {
    use super::super::spectrogram::SpectrogramMeta;
    use super::*;

    fn sample(t: usize, f: usize) -> Spectrogram {
        let meta = SpectrogramMeta {
            frame_step_ms: 12.5,
            frame_size_ms: 50.0,
            mel_lo_hz: 20.0,
            mel_hi_hz: 8000.0,
            floor: 1e-2,
        };
        Spectrogram::new((0..t * f).map(|i| (i % 97) as f64 * 0.1).collect(), t, f, meta).unwrap()
    }

    #[test]
    fn identity_policy_is_bit_identical() {
        let s = sample(50, 16);
        let out = spec_augment(&s, &SpecAugmentPolicy::identity(), 9).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn default_policy_bounds() {
        let s = sample(400, 128);
        let policy = SpecAugmentPolicy::default();
        assert_eq!(policy.max_time_width(400), 20);
        for seed in 0..50 {
            let (out, masks) = spec_augment_with_masks(&s, &policy, seed).unwrap();
            assert_eq!((out.n_frames(), out.n_mels()), (400, 128));
            for m in &masks {
                match m.axis {
                    MaskAxis::Frequency => assert!(m.width <= 27 && m.start + m.width <= 128),
                    MaskAxis::Time => assert!(m.width <= 20 && m.start + m.width <= 400),
                }
            }
            // unmasked cells untouched
            for t in 0..400 {
                for f in 0..128 {
                    let covered = masks.iter().any(|m| match m.axis {
                        MaskAxis::Frequency => (m.start..m.start + m.width).contains(&f),
                        MaskAxis::Time => (m.start..m.start + m.width).contains(&t),
                    });
                    if covered {
                        assert_eq!(out.at(t, f), s.log_floor());
                    } else {
                        assert_eq!(out.at(t, f).to_bits(), s.at(t, f).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_determinism() {
        let s = sample(400, 128);
        let p = SpecAugmentPolicy::default();
        assert_eq!(spec_augment(&s, &p, 5).unwrap(), spec_augment(&s, &p, 5).unwrap());
        assert_ne!(spec_augment(&s, &p, 5).unwrap(), spec_augment(&s, &p, 6).unwrap());
    }

    #[test]
    fn tiny_inputs_are_handled() {
        let s = sample(3, 4);
        let out = spec_augment(&s, &SpecAugmentPolicy::default(), 1).unwrap();
        assert_eq!((out.n_frames(), out.n_mels()), (3, 4));
    }
}
