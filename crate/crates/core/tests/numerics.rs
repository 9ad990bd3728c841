use avsep::dsp::{istft, stft, AudioClip, DspConfig};
use avsep::numerics::{Graph, Tensor};
use avsep::training::{loss_ss, LOSS_FLOOR};
use proptest::collection::vec;
use proptest::prelude::*;

proptest! {
    #[test]
    fn concat_then_slice_recovers_both_inputs(
        b in 1usize..3, ca in 1usize..4, cb in 1usize..4, t in 1usize..6, seed in any::<u64>(),
    ) {
        let val = |i: usize| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 37.0 - 13.0;
        let x = Tensor::new(&[b, ca, t], (0..b * ca * t).map(val).collect()).unwrap();
        let y = Tensor::new(&[b, cb, t], (0..b * cb * t).map(|i| val(i + 7)).collect()).unwrap();
        let mut g = Graph::<f64>::new();
        let (xv, yv) = (g.input(x.clone(), false), g.input(y.clone(), false));
        let c = g.concat_channels(xv, yv).unwrap();
        let x2 = g.slice_channels(c, 0, ca).unwrap();
        let y2 = g.slice_channels(c, ca, cb).unwrap();
        prop_assert_eq!(g.value(x2), &x);
        prop_assert_eq!(g.value(y2), &y);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_the_unit_interval(v in vec(-30.0f64..30.0, 1..64)) {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[v.len()], v).unwrap(), false);
        let s = g.sigmoid(x);
        prop_assert!(g.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn stft_is_linear(frames in 3usize..20, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let cfg = DspConfig::default();
        let n = frames * cfg.hop_length;
        let sig = |k: u64| -> Vec<f64> {
            (0..n).map(|i| (((i as u64 + k).wrapping_mul(seed | 1) >> 7) % 2001) as f64 / 1000.0 - 1.0).collect()
        };
        let (x, y) = (sig(1), sig(2));
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let s = |v: Vec<f64>| stft(&AudioClip::new(v, 16_000), &cfg).unwrap();
        let (sx, sy, sz) = (s(x), s(y), s(z));
        for i in 0..sz.data.len() {
            prop_assert!((sz.data[i] - (sx.data[i] * a + sy.data[i] * b)).norm() < 1e-9);
        }
        let back = istft(&sz, &cfg).unwrap();
        prop_assert_eq!(back.len(), n);
    }

    #[test]
    fn loss_ss_vanishes_only_at_reconstruction(
        mask in vec(0.0f64..1.0, 1..64),
        mix in vec(0.01f64..4.0, 64),
        bump in 0usize..64,
        delta in 0.05f64..1.0,
    ) {
        let mix = &mix[..mask.len()];
        let exact: Vec<f64> = mask.iter().zip(mix).map(|(m, s)| m * s).collect();
        prop_assert_eq!(loss_ss(&mask, mix, &exact).unwrap(), 0.0);
        // Move one target bin that sits above the floor.
        let k = bump % exact.len();
        let mut off = exact.clone();
        off[k] = off[k].max(LOSS_FLOOR) + delta;
        prop_assert!(loss_ss(&mask, mix, &off).unwrap() > 0.0);
        // Below the floor every value reads as the floor.
        let floored: Vec<f64> = exact.iter().map(|&v| if v < LOSS_FLOOR { 0.0 } else { v }).collect();
        prop_assert_eq!(loss_ss(&mask, mix, &floored).unwrap(), 0.0);
    }
}
