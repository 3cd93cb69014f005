use super::corpus::Utterance;
use crate::audio::{spec_augment, split_prompt, stft_logmel, FrontendConfig, SpecAugmentPolicy, Spectrogram};
use crate::error::Result;
use crate::tokenizer::Vocabulary;

/// Prompt and continuation spectrograms with the teacher-forcing text layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x_p: Spectrogram,
    pub x_c: Spectrogram,
    /// `[sos, y...]`.
    pub text_in: Vec<usize>,
    /// `[y..., eos]`.
    pub targets: Vec<usize>,
}

/// Log-mel analysis, prompt split, optional masking of the prompt only,
/// and tokenisation of the full transcript.
pub fn make_training_example(
    utt: &Utterance,
    frontend: &FrontendConfig,
    vocab: &Vocabulary,
    augment: Option<&SpecAugmentPolicy>,
    seed: u64,
) -> Result<TrainingExample> {
    let spec = stft_logmel(&utt.wave, frontend)?;
    let (mut x_p, x_c) = split_prompt(&spec, utt.split_seconds)?;
    if let Some(policy) = augment {
        x_p = spec_augment(&x_p, policy, seed)?;
    }
    let (text_in, targets) = vocab.teacher_forcing(&utt.transcript)?;
    Ok(TrainingExample {
        x_p,
        x_c,
        text_in,
        targets,
    })
}

/// Mixes a global seed with an item index into an independent stream seed.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined value
    let mut z = global ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Prepares every utterance (in parallel when enabled); results are in
/// input order and independent of scheduling.
pub fn prepare_examples(
    utts: &[Utterance],
    frontend: &FrontendConfig,
    vocab: &Vocabulary,
    augment: Option<&SpecAugmentPolicy>,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    crate::par::map_indexed(utts.len(), |i| {
        make_training_example(&utts[i], frontend, vocab, augment, derive_seed(seed, i as u64))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::super::corpus::{ToneGrammar, Utterance};
    use super::*;
    use crate::tokenizer::{build_vocab, EOS_ID, SOS_ID};

    #[test]
    fn five_second_utterance_layout() {
        let g = ToneGrammar::default();
        let utt = Utterance::new(g.render(&g.sequence('a', 20).unwrap(), 1.0).unwrap(), "ab", 3.0).unwrap();
        let vocab = build_vocab(&["abcdef"]).unwrap();
        let cfg = FrontendConfig::default();
        let ex = make_training_example(&utt, &cfg, &vocab, None, 0).unwrap();
        assert_eq!(ex.x_p.n_frames(), 240);
        // 5 s → 1 + (80000 - 800) / 200 = 397 frames in total
        assert_eq!(ex.x_c.n_frames(), 157);
        assert_eq!(ex.text_in, vec![SOS_ID, 3, 4]);
        assert_eq!(ex.targets, vec![3, 4, EOS_ID]);
        assert_eq!(ex, make_training_example(&utt, &cfg, &vocab, None, 0).unwrap());
    }

    #[test]
    fn augmentation_touches_the_prompt_only() {
        let g = ToneGrammar::default();
        let utt = Utterance::new(g.render(&g.sequence('c', 16).unwrap(), 1.0).unwrap(), "cd", 3.0).unwrap();
        let vocab = build_vocab(&["abcdef"]).unwrap();
        let cfg = FrontendConfig::default();
        let clean = make_training_example(&utt, &cfg, &vocab, None, 0).unwrap();
        let aug = make_training_example(&utt, &cfg, &vocab, Some(&SpecAugmentPolicy::default()), 3).unwrap();
        assert_eq!(clean.x_c, aug.x_c);
        assert_ne!(clean.x_p, aug.x_p);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
