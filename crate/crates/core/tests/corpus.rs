use std::collections::HashSet;
use std::fs;

use avsep::corpus::{
    build_dataset, make_speaker, mix_clips, nearest_template, parse_wav, render_face,
    render_face_template, render_utterance, wav_read, wav_write, DatasetConfig, FaceConfig,
    Manifest, PairClass, RegisterClass, Split,
};
use avsep::dsp::{log_mel, mel_filterbank, stft, AudioClip, DspConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_log_mel(clip: &AudioClip, cfg: &DspConfig) -> Vec<f64> {
    let spec = stft(clip, cfg).unwrap();
    let fb = mel_filterbank(cfg).unwrap();
    let lm = log_mel(&spec.magnitude(), spec.n_frames, &fb, cfg).unwrap();
    (0..lm.n_mels)
        .map(|m| lm.data[m * lm.n_frames..(m + 1) * lm.n_frames].iter().sum::<f64>() / lm.n_frames as f64)
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn utterances_of_one_speaker_are_closer_than_across_speakers() {
    let cfg = DspConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut wins = 0;
    for t in 0..100u64 {
        let class_a = if rng.random::<bool>() { RegisterClass::Low } else { RegisterClass::High };
        let class_b = if rng.random::<bool>() { RegisterClass::Low } else { RegisterClass::High };
        let a = make_speaker(1000 + 2 * t, class_a);
        let b = make_speaker(1001 + 2 * t, class_b);
        let a1 = mean_log_mel(&render_utterance(&a, 2.0, 16000, rng.random()).unwrap(), &cfg);
        let a2 = mean_log_mel(&render_utterance(&a, 2.0, 16000, rng.random()).unwrap(), &cfg);
        let b1 = mean_log_mel(&render_utterance(&b, 2.0, 16000, rng.random()).unwrap(), &cfg);
        if cosine(&a1, &a2) > cosine(&a1, &b1) {
            wins += 1;
        }
    }
    assert!(wins >= 95, "same-speaker closer in only {wins}/100 triples");
}

#[test]
fn faces_are_identified_by_nearest_template() {
    let cfg = FaceConfig::default();
    let speakers: Vec<_> = (0..16)
        .map(|i| make_speaker(500 + i, if i % 2 == 0 { RegisterClass::Low } else { RegisterClass::High }))
        .collect();
    let templates: Vec<_> = speakers.iter().map(|p| render_face_template(p, &cfg)).collect();
    let mut correct = 0;
    for k in 0..64 {
        let who = k % speakers.len();
        let face = render_face(&speakers[who], &cfg, 9000 + k as u64);
        if nearest_template(&face, &templates) == Some(who) {
            correct += 1;
        }
    }
    assert_eq!(correct, 64);
}

#[test]
fn equal_power_mixture_at_zero_db_has_zero_sdr() {
    let a = render_utterance(&make_speaker(1, RegisterClass::Low), 2.0, 16000, 1).unwrap();
    let mut b = render_utterance(&make_speaker(2, RegisterClass::High), 2.0, 16000, 2).unwrap();
    let s = (a.energy() / b.energy()).sqrt();
    b.samples.iter_mut().for_each(|v| *v *= s);
    let m = mix_clips(&a, &b, 0.0).unwrap();
    let err: f64 = a.samples.iter().zip(&m.samples).map(|(x, y)| (x - y).powi(2)).sum();
    let sdr = 10.0 * (a.energy() / err).log10();
    assert!(sdr.abs() <= 0.5, "sdr {sdr}");
}

#[test]
fn default_config_counts() {
    let cfg = DatasetConfig::default();
    assert_eq!(cfg.sample_count(Split::Train), 2000);
    assert_eq!(cfg.sample_count(Split::Seen) + cfg.sample_count(Split::Unseen), 400);
    assert_eq!(cfg.speakers(Split::Seen).len() + cfg.speakers(Split::Unseen).len(), 24);
}

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        seen_speakers_per_class: 4,
        unseen_speakers_per_class: 4,
        train_mixtures: 12,
        eval_per_pair_class: 3,
        duration_s: 0.5,
        ..DatasetConfig::default()
    }
}

#[test]
fn build_dataset_is_consistent_and_reproducible() {
    let cfg = small_config(42);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = build_dataset(&cfg, d1.path()).unwrap();
    let m2 = build_dataset(&cfg, d2.path()).unwrap();
    m1.validate().unwrap();

    let read = Manifest::read(d1.path()).unwrap();
    assert_eq!(read, m1);
    assert_eq!(m1.split(Split::Train).count(), 12);
    for split in Split::EVAL {
        for pc in PairClass::ALL {
            assert_eq!(m1.split(split).filter(|r| r.pair_class == pc).count(), 3);
        }
    }
    let ids = |s: Split| -> HashSet<String> {
        m1.split(s)
            .flat_map(|r| [r.target_id.clone(), r.interferer_id.clone()])
            .collect()
    };
    assert!(ids(Split::Seen).is_disjoint(&ids(Split::Unseen)));
    assert!(ids(Split::Train).is_disjoint(&ids(Split::Unseen)));

    assert_eq!(
        fs::read(d1.path().join("manifest.tsv")).unwrap(),
        fs::read(d2.path().join("manifest.tsv")).unwrap()
    );
    for (r1, r2) in m1.records.iter().zip(&m2.records) {
        for (p1, p2) in [(&r1.mixture, &r2.mixture), (&r1.target, &r2.target), (&r1.face, &r2.face)] {
            assert_eq!(fs::read(d1.path().join(p1)).unwrap(), fs::read(d2.path().join(p2)).unwrap());
        }
    }

    let rec = &m1.records[0];
    let s = m1.load_sample(rec).unwrap();
    let fresh = cfg.generate(rec.split, 0).unwrap();
    for (a, b) in s.mixture.samples.iter().zip(&fresh.mixture.samples) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
    for (a, b) in s.face.pixels.iter().zip(&fresh.face.pixels) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    assert_eq!(
        m1.speakers(Split::Seen).unwrap().len() + m1.speakers(Split::Unseen).unwrap().len(),
        m1.speakers(Split::Seen).unwrap().len() + 8
    );
}

#[test]
fn missing_files_and_bad_manifests_are_reported() {
    let cfg = small_config(3);
    let d = tempfile::tempdir().unwrap();
    let m = build_dataset(&cfg, d.path()).unwrap();
    fs::remove_file(d.path().join(&m.records[2].face)).unwrap();
    let err = m.validate().unwrap_err().to_string();
    assert!(err.contains("face.pgm"), "{err}");
    assert!(Manifest::parse("a\tb\n", d.path()).is_err());
    let err = build_dataset(&cfg, &d.path().join("manifest.tsv").join("x")).unwrap_err();
    assert!(err.to_string().contains("manifest.tsv"), "{err}");
}

#[test]
fn wav_file_round_trip_and_truncation() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("c.wav");
    let clip = render_utterance(&make_speaker(5, RegisterClass::High), 0.25, 8000, 5).unwrap();
    wav_write(&path, &clip).unwrap();
    let back = wav_read(&path).unwrap();
    assert_eq!(back.sample_rate, 8000);
    let bytes = fs::read(&path).unwrap();
    assert!(parse_wav(&bytes[..bytes.len() / 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wav_round_trip_is_within_one_lsb(
        samples in prop::collection::vec(-1.0f64..1.0, 0..400),
        rate in 1u32..200_000,
    ) {
        let clip = AudioClip::new(samples, rate);
        let back = parse_wav(&avsep::corpus::wav_bytes(&clip).unwrap()).unwrap();
        prop_assert_eq!(back.sample_rate, rate);
        prop_assert_eq!(back.len(), clip.len());
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn mixture_is_exact_sum(
        a in prop::collection::vec(-0.5f64..0.5, 1..200),
        seed in any::<u64>(),
        gain in -2.5f64..2.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let m = mix_clips(&AudioClip::new(a.clone(), 16000), &AudioClip::new(b.clone(), 16000), gain).unwrap();
        let g = 10f64.powf(gain / 20.0);
        for i in 0..a.len() {
            prop_assert_eq!(m.samples[i], a[i] + g * b[i]);
        }
    }

    #[test]
    fn dataset_samples_keep_invariants(seed in any::<u64>(), idx in 0usize..200) {
        let cfg = DatasetConfig { seed, duration_s: 0.2, ..DatasetConfig::default() };
        let s = cfg.generate(Split::Unseen, idx).unwrap();
        prop_assert_ne!(&s.target_id, &s.interferer_id);
        let (tc, ic) = s.pair_class.classes();
        prop_assert!(s.target_id.starts_with(tc.as_str()));
        prop_assert!(s.interferer_id.starts_with(ic.as_str()));
        prop_assert_eq!(s.pair_class, PairClass::ALL[idx / 50]);
        let unseen: HashSet<String> = cfg.speakers(Split::Unseen).into_iter().map(|p| p.speaker_id).collect();
        let seen: HashSet<String> = cfg.speakers(Split::Seen).into_iter().map(|p| p.speaker_id).collect();
        prop_assert!(unseen.is_disjoint(&seen));
        prop_assert!(unseen.contains(&s.target_id));
    }
}
