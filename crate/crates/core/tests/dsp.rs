mod common;

use avsep::dsp::{istft, stft, DspConfig};
use common::dsp::{default_grid, gl_outcomes, interior_rel_rms, noise_clip, worst_round_trip};
use proptest::prelude::*;

#[test]
fn round_trip_is_exact_in_the_interior() {
    let worst = worst_round_trip(100);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn two_seconds_give_a_257_by_200_grid() {
    assert_eq!(default_grid(), (257, 200));
}

#[test]
fn griffin_lim_never_increases_its_error() {
    for o in gl_outcomes() {
        assert!(o.monotone, "{}: {:?}", o.label, o.curve);
        assert!(o.last() < o.curve[0], "{}", o.label);
        assert!(o.last() < 0.2, "{}: {}", o.label, o.last());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_holds_for_any_hop_multiple(frames in 4usize..60, seed in 0u64..1000, gain in 0.01f64..100.0) {
        let cfg = DspConfig::default();
        let mut x = noise_clip(frames * cfg.hop_length, seed);
        x.samples.iter_mut().for_each(|v| *v *= gain);
        let s = stft(&x, &cfg).unwrap();
        prop_assert_eq!(s.n_frames, frames);
        let y = istft(&s, &cfg).unwrap();
        prop_assert_eq!(y.len(), x.len());
        if x.len() > 3 * cfg.win_length {
            prop_assert!(interior_rel_rms(&x.samples, &y.samples, cfg.win_length) < 1e-6);
        }
    }
}
