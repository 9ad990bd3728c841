//! Loss identities against direct formula oracles.

use avsep::biometric::{BiometricConfig, BiometricModel};
use avsep::dsp::DspConfig;
use avsep::training::{loss_srl, loss_ss, loss_total, pit_loss, srl_from_embeddings, Permutation, LOSS_FLOOR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

/// `mean((ln max(x, ε) − ln max(m·s, ε))²)` written out directly.
pub fn loss_ss_oracle(mask: &[f64], mix: &[f64], target: &[f64]) -> f64 {
    let n = mask.len() as f64;
    mask.iter()
        .zip(mix)
        .zip(target)
        .map(|((m, s), x)| (x.max(LOSS_FLOOR).ln() - (m * s).max(LOSS_FLOOR).ln()).powi(2))
        .sum::<f64>()
        / n
}

/// Both assignments enumerated; ties keep the identity assignment.
pub fn pit_oracle(masks: [&[f64]; 2], mix: &[f64], refs: [&[f64]; 2]) -> (f64, Permutation) {
    let ident = loss_ss_oracle(masks[0], mix, refs[0]) + loss_ss_oracle(masks[1], mix, refs[1]);
    let swap = loss_ss_oracle(masks[0], mix, refs[1]) + loss_ss_oracle(masks[1], mix, refs[0]);
    if swap < ident {
        (swap, Permutation::Swapped)
    } else {
        (ident, Permutation::Identity)
    }
}

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + b.abs())
}

pub const INSTANCES: usize = 200;

pub fn loss_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut out = Vec::new();

    let mut worst_zero = 0.0f64;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..300);
        let mask = uniform(n, 0.0, 1.0, &mut rng);
        let mix = uniform(n, 0.0, 5.0, &mut rng);
        let target: Vec<f64> = mask.iter().zip(&mix).map(|(m, s)| m * s).collect();
        worst_zero = worst_zero.max(loss_ss(&mask, &mix, &target).unwrap().abs());
    }
    out.push(Check {
        name: "loss_ss is zero at exact reconstruction",
        ok: worst_zero == 0.0,
        detail: format!("max |loss| = {worst_zero:e} over {INSTANCES} grids"),
    });

    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..300);
        let (mask, mix, target) = (uniform(n, 0.0, 1.0, &mut rng), uniform(n, 0.0, 3.0, &mut rng), uniform(n, 0.0, 3.0, &mut rng));
        let got = loss_ss(&mask, &mix, &target).unwrap();
        worst = worst.max((got - loss_ss_oracle(&mask, &mix, &target)).abs());
    }
    out.push(Check {
        name: "loss_ss matches the direct formula",
        ok: worst < 1e-10,
        detail: format!("max deviation {worst:e}"),
    });

    let mut in_range = true;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..INSTANCES {
        let d = rng.random_range(1..64);
        let u = uniform(d, -1.0, 1.0, &mut rng);
        let v = uniform(d, -1.0, 1.0, &mut rng);
        let l = srl_from_embeddings(&u, &v);
        in_range &= (0.0..=2.0).contains(&l);
        lo = lo.min(l);
        hi = hi.max(l);
    }
    let u = uniform(32, -1.0, 1.0, &mut rng);
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    let (same, opposite) = (srl_from_embeddings(&u, &u), srl_from_embeddings(&u, &neg));
    out.push(Check {
        name: "loss_srl lies in [0, 2] and hits both ends",
        ok: in_range && same.abs() < 1e-6 && (opposite - 2.0).abs() < 1e-6,
        detail: format!("random range [{lo:.3}, {hi:.3}], identical {same:.2e}, opposite {opposite:.7}"),
    });

    // Through an (untrained) extractor on real grids.
    let dsp = DspConfig::default();
    let bio = BiometricModel::new(
        BiometricConfig { face_channels: 8, speech_channels: 8, embed_dim: 16, ..BiometricConfig::default() },
        3,
    )
    .unwrap();
    let frames = 24;
    let a = uniform(dsp.freq_bins() * frames, 0.0, 2.0, &mut rng);
    let b = uniform(dsp.freq_bins() * frames, 0.0, 2.0, &mut rng);
    let self_loss = loss_srl(&a, &a, frames, &bio, &dsp).unwrap();
    let cross = loss_srl(&a, &b, frames, &bio, &dsp).unwrap();
    out.push(Check {
        name: "loss_srl through the extractor",
        ok: self_loss.abs() < 1e-5 && (0.0..=2.0).contains(&cross),
        detail: format!("self {self_loss:.2e}, other {cross:.4}"),
    });

    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (a, b, lambda) = (rng.random_range(0.0..10.0), rng.random_range(0.0..2.0), rng.random_range(0.0..5.0));
        worst = worst.max((loss_total(a, b, lambda) - (a + lambda * b)).abs());
        worst = worst.max((loss_total(a, b, 1.0) - (a + b)).abs());
        worst = worst.max((loss_total(a, b, 0.0) - a).abs());
    }
    out.push(Check {
        name: "loss_total = loss_ss + λ·loss_srl",
        ok: worst == 0.0,
        detail: format!("max deviation {worst:e}"),
    });

    let (mut match_oracle, mut invariant, mut minimal) = (true, true, true);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..200);
        let m1 = uniform(n, 0.0, 1.0, &mut rng);
        let m2 = uniform(n, 0.0, 1.0, &mut rng);
        let mix = uniform(n, 0.0, 3.0, &mut rng);
        let r1 = uniform(n, 0.0, 3.0, &mut rng);
        let r2 = uniform(n, 0.0, 3.0, &mut rng);
        let (l, perm) = pit_loss([&m1, &m2], &mix, [&r1, &r2]).unwrap();
        let (lo, operm) = pit_oracle([&m1, &m2], &mix, [&r1, &r2]);
        match_oracle &= close(l, lo) && perm == operm;
        let (ls, _) = pit_loss([&m1, &m2], &mix, [&r2, &r1]).unwrap();
        let (lm, _) = pit_loss([&m2, &m1], &mix, [&r1, &r2]).unwrap();
        invariant &= close(ls, l) && close(lm, l);
        let fixed = loss_ss(&m1, &mix, &r1).unwrap() + loss_ss(&m2, &mix, &r2).unwrap();
        let crossed = loss_ss(&m1, &mix, &r2).unwrap() + loss_ss(&m2, &mix, &r1).unwrap();
        minimal &= l <= fixed + 1e-12 && l <= crossed + 1e-12;
    }
    out.push(Check {
        name: "pit_loss equals the brute-force assignment oracle",
        ok: match_oracle,
        detail: format!("{INSTANCES} random instances"),
    });
    out.push(Check {
        name: "pit_loss is invariant to swapping references or outputs",
        ok: invariant,
        detail: format!("{INSTANCES} random instances"),
    });
    out.push(Check {
        name: "pit_loss is the minimum over assignments",
        ok: minimal,
        detail: format!("{INSTANCES} random instances"),
    });
    out
}
