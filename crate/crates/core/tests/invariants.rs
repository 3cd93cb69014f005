use proptest::prelude::*;

use speechcont::audio::{stft_logmel, FrontendConfig, Waveform};
use speechcont::losses::{ce_loss, recon_loss, LossBreakdown};
use speechcont::model::{Model, ModelConfig};
use speechcont::numeric::{adam_step, AdamConfig, Graph, OptimizerState, Tensor};
use speechcont::pipeline::{
    infer_frames, infer_text, make_training_example, InferConfig, TextStop, ToneGrammar, Utterance,
};
use speechcont::selfcheck::toy_example;
use speechcont::tokenizer::{build_vocab, EOS_ID, PAD_ID, SOS_ID};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_size_matches_shape(shape in proptest::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.clone(), vec![0.0f64; n]).unwrap();
        prop_assert_eq!(t.numel(), n);
        prop_assert!(Tensor::new(shape, vec![0.0f64; n + extra]).is_err());
    }

    #[test]
    fn graphs_reject_non_finite_values(pos in 0usize..6, bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY)]) {
        let mut v = vec![1.0; 6];
        v[pos] = bad;
        let mut g = Graph::new();
        prop_assert!(g.input(Tensor::new(vec![2, 3], v.clone()).unwrap()).is_err());
        // overflow inside an op is caught too
        v[pos] = 1e200;
        let x = g.input(Tensor::new(vec![2, 3], v).unwrap()).unwrap();
        prop_assert!(g.square(x).is_err());
    }

    #[test]
    fn adam_keeps_shapes_and_counts_steps(a in matrix(3, 4), b in matrix(1, 5), steps in 1u64..5) {
        let mut params = vec![a.clone(), b.clone()];
        let mut state = OptimizerState::new(&params);
        let names = vec!["a".to_string(), "b".to_string()];
        for i in 0..steps {
            adam_step(&mut params, &[a.clone(), b.clone()], &mut state, &names, 1e-3, &AdamConfig::default()).unwrap();
            prop_assert_eq!(state.step_count, i + 1);
        }
        for (p, (m, v)) in params.iter().zip(state.first_moment.iter().zip(&state.second_moment)) {
            prop_assert_eq!(p.shape(), m.shape());
            prop_assert_eq!(p.shape(), v.shape());
        }
    }

    #[test]
    fn log_mel_respects_the_floor(seed in any::<u64>(), n in 800usize..4000, amp in 0.0f64..1.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect();
        let cfg = FrontendConfig::default();
        let spec = stft_logmel(&Waveform::new(samples, 16_000).unwrap(), &cfg).unwrap();
        prop_assert_eq!(spec.n_mels(), 128);
        prop_assert_eq!(spec.n_frames(), 1 + (n - 800) / 200);
        let floor = cfg.floor.ln();
        prop_assert!(spec.data().iter().all(|&v| v >= floor && v.is_finite()));
    }

    #[test]
    fn loss_breakdown_adds_up(target in matrix(6, 5), pred in matrix(6, 5), k in 1usize..6, logits in matrix(4, 7),
                              lambda in 0.0f64..2.0) {
        let r = recon_loss(&target, &pred, k).unwrap();
        let ce = ce_loss(&logits, &[1, 6, 3, 0]).unwrap();
        let b = LossBreakdown::new(ce, r, lambda, k);
        prop_assert_eq!(b.recon, b.recon_s + b.recon_f + b.recon_t);
        prop_assert_eq!(b.total, b.ce + lambda * b.recon);
        prop_assert!(b.ce >= 0.0 && b.recon_s >= 0.0 && b.recon_f >= 0.0 && b.recon_t >= 0.0);
    }

    #[test]
    fn vocabulary_ids_are_dense(text in "[a-z]{1,30}") {
        let v = build_vocab(&[text.as_str()]).unwrap();
        prop_assert!(v.size() >= 4);
        prop_assert!(PAD_ID != SOS_ID && SOS_ID != EOS_ID && PAD_ID != EOS_ID);
        for c in text.chars() {
            let id = v.id_of(c).unwrap();
            prop_assert!(id < v.size() && !v.is_reserved(id));
            prop_assert_eq!(v.symbol(id), Some(c));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn training_examples_are_framed(first in 0usize..6, symbols in 13usize..18, split in prop_oneof![Just(2.0), Just(3.0)]) {
        let g = ToneGrammar { symbols_per_utterance: symbols, ..ToneGrammar::default() };
        let transcript = g.sequence(g.alphabet[first], symbols).unwrap();
        let utt = Utterance::new(g.render(&transcript, 1.0).unwrap(), transcript.clone(), split).unwrap();
        let vocab = build_vocab(&[transcript.as_str()]).unwrap();
        let cfg = FrontendConfig::default();
        let ex = make_training_example(&utt, &cfg, &vocab, None, 0).unwrap();
        prop_assert_eq!(ex.x_p.n_frames(), (split * 1000.0 / cfg.frame_step_ms).round() as usize);
        prop_assert_eq!(ex.targets.last(), Some(&EOS_ID));
        prop_assert_eq!(ex.targets.iter().filter(|&&t| t == EOS_ID).count(), 1);
        prop_assert_eq!(ex.text_in.first(), Some(&SOS_ID));
        prop_assert!(!ex.text_in.contains(&EOS_ID));
    }

    #[test]
    fn generated_text_ends_in_eos_unless_cut(init_seed in any::<u64>(), max_text in 1usize..8, max_frames in 1usize..6) {
        let mut cfg = ModelConfig::tiny(7, 8);
        cfg.init_seed = init_seed;
        let model = Model::<f64>::new(cfg).unwrap();
        let ex = toy_example(init_seed, 8, 7);
        let icfg = InferConfig { max_text, max_frames, ..InferConfig::default() };
        let (tokens, stop) = infer_text(&model, &ex.x_p, &icfg).unwrap();
        if stop == TextStop::Eos {
            prop_assert_eq!(tokens.last(), Some(&EOS_ID));
        } else {
            prop_assert_eq!(tokens.len(), max_text);
        }
        // the text phase never depends on the frame budget
        let (again, _) = infer_text(&model, &ex.x_p, &InferConfig { max_frames: max_frames + 7, ..icfg }).unwrap();
        prop_assert_eq!(&again, &tokens);
        let (frames, _) = infer_frames(&model, &ex.x_p, &tokens, &icfg).unwrap();
        prop_assert!(frames.n_frames() <= max_frames);
    }
}
