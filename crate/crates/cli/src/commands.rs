use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use avsep::biometric::{embed_trials, matching_accuracy, train_biometric as fit_biometric, BiometricModel, IdentityPools};
use avsep::corpus::{build_dataset, gain_linear, pgm_read, pgm_write, wav_read, wav_write, FaceImage, Manifest, Split, MANIFEST_FILE};
use avsep::dsp::{stft, AudioClip, DspConfig};
use avsep::eval::{evaluate_suite, isolation, sdr, write_eval_outputs, EvalOptions};
use avsep::seed::{derive, tag};
use avsep::separation::{separate as run_separation, SeparateOptions, SeparatorKind, SeparatorModel};
use avsep::training::{train_separator as fit_separator, write_loss_curve, Checkpoint, ModelKind, SeparationData};
use avsep::{Error, Result};

use crate::config::RunConfig;
use crate::{ConfigArgs, SplitArg};

pub const BIOMETRIC_CKPT: &str = "biometric.ckpt";
pub const SEPARATOR_CKPT: &str = "separator.ckpt";
pub const PIT_CKPT: &str = "pit.ckpt";
pub const LOSS_CURVE: &str = "loss_curve.tsv";

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let mut sets = args.sets.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    sets.extend(extra);
    let cfg = RunConfig::load(args.config.as_deref(), &sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_manifest(data: &Path) -> Result<Manifest> {
    if !data.join(MANIFEST_FILE).is_file() {
        return Err(Error::Prerequisite {
            what: format!("dataset manifest {}", data.join(MANIFEST_FILE).display()),
            command: "avsep synth".into(),
        });
    }
    Manifest::read(data)
}

fn load_biometric(path: &Path) -> Result<BiometricModel> {
    if !path.is_file() {
        return Err(Error::Prerequisite {
            what: format!("identity checkpoint {}", path.display()),
            command: "avsep train-biometric".into(),
        });
    }
    BiometricModel::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args, vec![])?;
    let t = Instant::now();
    let manifest = build_dataset(&cfg.dataset, out)?;
    cfg.echo(out)?;
    let count = |s: Split| manifest.split(s).count();
    println!(
        "wrote {} samples to {} (train {}, seen {}, unseen {}) in {:.1?}",
        manifest.records.len(),
        out.display(),
        count(Split::Train),
        count(Split::Seen),
        count(Split::Unseen),
        t.elapsed()
    );
    Ok(())
}

pub fn train_biometric(args: &ConfigArgs, data: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let extra = steps.map(|s| format!("biometric_train.steps={s}")).into_iter().collect();
    let cfg = load_config(args, extra)?;
    let manifest = read_manifest(data)?;
    let pools = IdentityPools::from_manifest(&manifest, Split::Train, &cfg.dsp)?;
    let mut model = BiometricModel::new(cfg.biometric.clone(), derive(cfg.seed, &[tag("biometric-init")]))?;
    let t = Instant::now();
    let history = fit_biometric(&mut model, &pools, &cfg.biometric_train, derive(cfg.seed, &[tag("biometric-train")]))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(BIOMETRIC_CKPT);
    model
        .to_checkpoint(cfg.biometric_train.steps as u64, cfg.seed)?
        .save(&ckpt)?;
    let mut curve = String::from("step\tl_match\n");
    for (s, l) in &history {
        curve.push_str(&format!("{s}\t{l}\n"));
    }
    let curve_path = out.join(LOSS_CURVE);
    fs::write(&curve_path, curve).map_err(|e| Error::io(&curve_path, e))?;
    cfg.echo(out)?;
    println!("trained identity extractor in {:.1?}; wrote {}", t.elapsed(), ckpt.display());
    if let Some((_, l)) = history.last() {
        println!("final matching loss {l:.4}");
    }
    if manifest.split(Split::Seen).next().is_some() {
        let seen = IdentityPools::from_manifest(&manifest, Split::Seen, &cfg.dsp)?;
        let n_way = model.config.n_way;
        let trials = seen.trials(n_way, 200, derive(cfg.seed, &[tag("biometric-trials")]))?;
        let acc = matching_accuracy(&embed_trials(&model, &trials)?);
        println!("{n_way}-way matching accuracy on seen speakers: {:.1}%", 100.0 * acc);
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct SeparatorOverrides {
    pub steps: Option<usize>,
    pub fusion: Option<String>,
    pub lambda_srl: Option<f64>,
}

fn fit_and_save(cfg: &RunConfig, model: &mut SeparatorModel, data: &SeparationData, out: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(name);
    let seed = cfg.seed;
    let every = cfg.checkpoint_every;
    let total = cfg.train.steps;
    let log_every = cfg.train.log_every.max(1);
    let t = Instant::now();
    let history = fit_separator(model, data, &cfg.train, derive(seed, &[tag("separator-train")]), |r, m| {
        if r.step % log_every == 0 {
            log::info!(
                "step {}/{total}: l_ss {:.4} l_srl {:.4} l_tot {:.4}",
                r.step,
                r.l_ss,
                r.l_srl,
                r.l_tot
            );
        }
        if every > 0 && (r.step + 1) % every == 0 && r.step + 1 < total {
            m.to_checkpoint(r.step as u64 + 1, seed)?.save(&ckpt)?;
        }
        Ok(())
    })?;
    model.to_checkpoint(total as u64, seed)?.save(&ckpt)?;
    write_loss_curve(&out.join(LOSS_CURVE), &history)?;
    cfg.echo(out)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("l_tot {:.4} -> {:.4} over {total} steps", first.l_tot, last.l_tot);
    }
    println!("trained in {:.1?}; wrote {}", t.elapsed(), ckpt.display());
    Ok(())
}

pub fn train_separator(args: &ConfigArgs, data: &Path, bio_path: &Path, out: &Path, o: SeparatorOverrides) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = o.steps {
        extra.push(format!("train.steps={s}"));
    }
    if let Some(f) = o.fusion {
        extra.push(format!("separator.fusion=\"{f}\""));
    }
    if let Some(l) = o.lambda_srl {
        extra.push(format!("train.lambda_srl={l:?}"));
    }
    let cfg = load_config(args, extra)?;
    let bio = load_biometric(bio_path)?;
    let manifest = read_manifest(data)?;
    let sep_cfg = cfg.separator_config(SeparatorKind::Conditioned, bio.config.clone());
    let mut model = SeparatorModel::new(sep_cfg, derive(cfg.seed, &[tag("separator-init")]))?;
    model.load_identity_speech(&bio)?;
    let train = SeparationData::load(&manifest, Split::Train, &cfg.dsp, Some(&bio), false)?;
    fit_and_save(&cfg, &mut model, &train, out, SEPARATOR_CKPT)
}

pub fn train_pit(args: &ConfigArgs, data: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let extra = steps.map(|s| format!("train.steps={s}")).into_iter().collect();
    let cfg = load_config(args, extra)?;
    let manifest = read_manifest(data)?;
    let sep_cfg = cfg.separator_config(SeparatorKind::Pit, cfg.biometric.clone());
    let mut model = SeparatorModel::new(sep_cfg, derive(cfg.seed, &[tag("pit-init")]))?;
    let train = SeparationData::load(&manifest, Split::Train, &cfg.dsp, None, true)?;
    fit_and_save(&cfg, &mut model, &train, out, PIT_CKPT)
}

fn load_separator(path: &Path) -> Result<SeparatorModel> {
    if !path.is_file() {
        return Err(Error::Prerequisite {
            what: format!("separator checkpoint {}", path.display()),
            command: "avsep train-separator` or `avsep train-pit".into(),
        });
    }
    SeparatorModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn identity_for(model: &SeparatorModel, bio: Option<&Path>) -> Result<Option<BiometricModel>> {
    match model.config.kind {
        SeparatorKind::Pit => Ok(None),
        SeparatorKind::Conditioned => {
            let p = bio.ok_or_else(|| Error::Argument("a conditioned separator needs --biometric".into()))?;
            Ok(Some(load_biometric(p)?))
        }
    }
}

pub struct SeparateArgs {
    pub mixture: PathBuf,
    pub face: Option<PathBuf>,
    pub separator: PathBuf,
    pub biometric: Option<PathBuf>,
    pub output: PathBuf,
    pub target: Option<PathBuf>,
    pub interferer: Option<PathBuf>,
    pub interferer_gain_db: f64,
}

fn read_face(path: &Path) -> Result<FaceImage> {
    let (w, h, pixels) = pgm_read(path)?;
    if w != h {
        return Err(Error::Format {
            field: format!("{} dimensions", path.display()),
            detail: format!("face images must be square, got {w}x{h}"),
        });
    }
    FaceImage::new(w, pixels)
}

pub fn separate(args: &ConfigArgs, a: &SeparateArgs) -> Result<()> {
    let cfg = load_config(args, vec![])?;
    let model = load_separator(&a.separator)?;
    let bio = identity_for(&model, a.biometric.as_deref())?;
    let face = match (&a.face, model.config.kind) {
        (Some(p), _) => Some(read_face(p)?),
        (None, SeparatorKind::Conditioned) => {
            return Err(Error::Argument("a conditioned separator needs --face".into()));
        }
        (None, SeparatorKind::Pit) => None,
    };
    let mixture = wav_read(&a.mixture)?;
    let opts = SeparateOptions {
        gl_iters: cfg.eval.gl_iters,
        seed: cfg.seed,
        channel: cfg.eval.channel,
        unit_mask: false,
    };
    let est = run_separation(&model, bio.as_ref(), &mixture, face.as_ref(), &opts)?.clip;
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    wav_write(&a.output, &est)?;
    let echo = a.output.with_extension("config.toml");
    fs::write(&echo, cfg.to_toml()?).map_err(|e| Error::io(&echo, e))?;
    println!("wrote {} ({:.3} s)", a.output.display(), est.duration_s());
    if let Some(tp) = &a.target {
        let target = wav_read(tp)?;
        let sdr_mix = sdr(&mixture, &target)?;
        let sdr_est = sdr(&est, &target)?;
        println!("sdr_mixture\t{sdr_mix:.3}");
        println!("sdr_estimate\t{sdr_est:.3}");
        println!("sdri\t{:.3}", sdr_est - sdr_mix);
        if let Some(ip) = &a.interferer {
            let raw = wav_read(ip)?;
            let g = gain_linear(a.interferer_gain_db);
            let inter = AudioClip::new(raw.samples.iter().map(|v| g * v).collect(), raw.sample_rate);
            let iso = isolation(&est, &target, &inter)?;
            println!(
                "isolation\t{}\t(margin {:.3} dB{})",
                if iso.correct { "target" } else { "interferer" },
                iso.margin_db,
                if iso.confident() { "" } else { ", not confident" }
            );
        }
    }
    Ok(())
}

pub fn evaluate(args: &ConfigArgs, data: &Path, sep: &Path, bio: Option<&Path>, split: SplitArg, out: &Path) -> Result<()> {
    let cfg = load_config(args, vec![])?;
    let manifest = read_manifest(data)?;
    let model = load_separator(sep)?;
    let bio = identity_for(&model, bio)?;
    let splits: Vec<Split> = match split {
        SplitArg::Seen => vec![Split::Seen],
        SplitArg::Unseen => vec![Split::Unseen],
        SplitArg::All => Split::EVAL.to_vec(),
    };
    let opts = EvalOptions {
        gl_iters: cfg.eval.gl_iters,
        seed: cfg.seed,
        channel: cfg.eval.channel,
    };
    let t = Instant::now();
    let (records, report) = evaluate_suite(&model, bio.as_ref(), &manifest, &splits, &opts)?;
    let kind = match model.config.kind {
        SeparatorKind::Conditioned => ModelKind::Separator,
        SeparatorKind::Pit => ModelKind::PitBaseline,
    };
    let title = format!("{} model {} on {} samples", kind.tag(), sep.display(), records.len());
    write_eval_outputs(out, &title, &records, &report)?;
    cfg.echo(out)?;
    print!("{}", report.to_text(&title));
    println!("evaluated {} samples in {:.1?}; wrote {}", records.len(), t.elapsed(), out.display());
    Ok(())
}

/// Log-magnitude spectrogram as `(width, height, values)`, low frequencies at the bottom,
/// min-max normalized to `[0, 1]` (a constant image maps to 0).
pub fn spectrogram_image(clip: &AudioClip, dsp: &DspConfig) -> Result<(usize, usize, Vec<f64>)> {
    let dsp = DspConfig {
        sample_rate: clip.sample_rate,
        ..dsp.clone()
    };
    let mut padded = clip.clone();
    padded.samples.resize(clip.len().div_ceil(dsp.hop_length).max(1) * dsp.hop_length, 0.0);
    let spec = stft(&padded, &dsp)?;
    let (bins, frames) = (spec.freq_bins, spec.n_frames);
    let logs: Vec<f64> = spec.magnitude().iter().map(|m| m.max(1e-8).ln()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let mut img = vec![0.0; bins * frames];
    for b in 0..bins {
        let row = bins - 1 - b;
        for f in 0..frames {
            img[row * frames + f] = if range > 0.0 { (logs[b * frames + f] - lo) / range } else { 0.0 };
        }
    }
    Ok((frames, bins, img))
}

const TRIPTYCH_GAP: usize = 2;

pub fn plot(args: &ConfigArgs, wavs: &[PathBuf], out: &Path, triptych: bool) -> Result<()> {
    let cfg = load_config(args, vec![])?;
    if triptych && wavs.len() != 3 {
        return Err(Error::Argument(format!(
            "triptych mode takes exactly three WAVs (clean, mixture, separated), got {}",
            wavs.len()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut panels = Vec::new();
    let mut failures = 0;
    for p in wavs {
        match wav_read(p).and_then(|c| spectrogram_image(&c, &cfg.dsp)) {
            Ok((w, h, img)) => {
                let stem = p.file_stem().map_or("plot".into(), |s| s.to_string_lossy().into_owned());
                let dest = out.join(format!("{stem}.pgm"));
                pgm_write(&dest, w, h, &img)?;
                println!("wrote {} ({w}x{h})", dest.display());
                panels.push((w, h, img));
            }
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                failures += 1;
            }
        }
    }
    if triptych && failures == 0 {
        let h = panels.iter().map(|p| p.1).max().unwrap_or(0);
        let width: usize = panels.iter().map(|p| p.0).sum::<usize>() + TRIPTYCH_GAP * (panels.len() - 1);
        let mut img = vec![1.0; width * h];
        let mut x0 = 0;
        for (w, ph, data) in &panels {
            for r in 0..*ph {
                let dst = (h - ph + r) * width + x0;
                img[dst..dst + w].copy_from_slice(&data[r * w..(r + 1) * w]);
            }
            x0 += w + TRIPTYCH_GAP;
        }
        let dest = out.join("triptych.pgm");
        pgm_write(&dest, width, h, &img)?;
        println!("wrote {} ({width}x{h})", dest.display());
    }
    cfg.echo(out)?;
    if failures > 0 {
        return Err(Error::Argument(format!("{failures} of {} inputs could not be plotted", wavs.len())));
    }
    Ok(())
}
