//! Two-speaker mixtures, the manifest format and the dataset builder.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::face::{render_face, FaceConfig, FaceImage};
use crate::corpus::pgm::{pgm_read, pgm_write};
use crate::corpus::speaker::{make_speaker, render_utterance, speaker_from_id, RegisterClass, SpeakerProfile};
use crate::corpus::wav::{wav_read, wav_write};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::seed;

/// Mixture peaks above this trigger a common rescale of all three clips.
const CLIP_GUARD: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairClass {
    LowLow,
    LowHigh,
    HighLow,
    HighHigh,
}

impl PairClass {
    pub const ALL: [PairClass; 4] = [
        PairClass::LowLow,
        PairClass::LowHigh,
        PairClass::HighLow,
        PairClass::HighHigh,
    ];

    pub fn new(target: RegisterClass, interferer: RegisterClass) -> Self {
        use RegisterClass::*;
        match (target, interferer) {
            (Low, Low) => PairClass::LowLow,
            (Low, High) => PairClass::LowHigh,
            (High, Low) => PairClass::HighLow,
            (High, High) => PairClass::HighHigh,
        }
    }

    pub fn classes(self) -> (RegisterClass, RegisterClass) {
        use RegisterClass::*;
        match self {
            PairClass::LowLow => (Low, Low),
            PairClass::LowHigh => (Low, High),
            PairClass::HighLow => (High, Low),
            PairClass::HighHigh => (High, High),
        }
    }

    pub fn is_cross(self) -> bool {
        let (a, b) = self.classes();
        a != b
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairClass::LowLow => "low-low",
            PairClass::LowHigh => "low-high",
            PairClass::HighLow => "high-low",
            PairClass::HighHigh => "high-high",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown pair class `{s}`")))
    }
}

impl std::fmt::Display for PairClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `Train` mixtures use seen speakers; `Seen` and `Unseen` are the evaluation splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Seen,
    Unseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Seen, Split::Unseen];
    pub const EVAL: [Split; 2] = [Split::Seen, Split::Unseen];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown split `{s}`")))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub mixture: AudioClip,
    pub target_ref: AudioClip,
    pub interferer_ref: AudioClip,
    pub face: FaceImage,
    pub target_id: String,
    pub interferer_id: String,
    pub pair_class: PairClass,
    pub split: Split,
    pub gain_db: f64,
}

/// `a + 10^(gain_db/20)·b`, sample for sample.
pub fn mix_clips(a: &AudioClip, b: &AudioClip, gain_db: f64) -> Result<AudioClip> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "cannot mix clips of {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::Argument(format!(
            "cannot mix clips at {} Hz and {} Hz",
            a.sample_rate, b.sample_rate
        )));
    }
    if gain_db.is_nan() || gain_db == f64::INFINITY {
        return Err(Error::Argument(format!("invalid mixing gain {gain_db} dB")));
    }
    let g = gain_linear(gain_db);
    let samples = a.samples.iter().zip(&b.samples).map(|(x, y)| x + g * y).collect();
    Ok(AudioClip::new(samples, a.sample_rate))
}

pub fn gain_linear(gain_db: f64) -> f64 {
    10f64.powf(gain_db / 20.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub seen_speakers_per_class: usize,
    pub unseen_speakers_per_class: usize,
    pub train_mixtures: usize,
    pub eval_per_pair_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Relative interferer gain is drawn from `[−max, +max]` dB.
    pub gain_db_max: f64,
    pub face: FaceConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seen_speakers_per_class: 8,
            unseen_speakers_per_class: 4,
            train_mixtures: 2000,
            eval_per_pair_class: 50,
            duration_s: 2.0,
            sample_rate: 16000,
            gain_db_max: 2.5,
            face: FaceConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seen_speakers_per_class < 4 || self.unseen_speakers_per_class < 4 {
            return Err(Error::Config(format!(
                "need at least 4 speakers per class per split, got {} seen and {} unseen",
                self.seen_speakers_per_class, self.unseen_speakers_per_class
            )));
        }
        if self.sample_rate == 0 || self.sample_rate % 100 != 0 {
            return Err(Error::Config(format!(
                "sample rate {} must be a positive multiple of 100 Hz",
                self.sample_rate
            )));
        }
        let hops = self.duration_s * 100.0;
        if !(hops >= 1.0) || (hops - hops.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "duration {} s is not a whole number of 10 ms hops",
                self.duration_s
            )));
        }
        if !(self.gain_db_max >= 0.0 && self.gain_db_max.is_finite()) {
            return Err(Error::Config(format!("gain_db_max {} is invalid", self.gain_db_max)));
        }
        self.face.validate()
    }

    fn speaker_count(&self, split: Split) -> usize {
        match split {
            Split::Train | Split::Seen => self.seen_speakers_per_class,
            Split::Unseen => self.unseen_speakers_per_class,
        }
    }

    /// Speakers of one register available to a split.
    pub fn speakers_of(&self, split: Split, class: RegisterClass) -> Vec<SpeakerProfile> {
        let pool = match split {
            Split::Train | Split::Seen => "seen",
            Split::Unseen => "unseen",
        };
        (0..self.speaker_count(split))
            .map(|i| {
                let s = seed::derive(
                    self.seed,
                    &[seed::tag("speaker"), seed::tag(pool), class as u64, i as u64],
                );
                make_speaker(s, class)
            })
            .collect()
    }

    /// All speakers of a split, low register first.
    pub fn speakers(&self, split: Split) -> Vec<SpeakerProfile> {
        RegisterClass::ALL
            .into_iter()
            .flat_map(|c| self.speakers_of(split, c))
            .collect()
    }

    pub fn sample_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_mixtures,
            Split::Seen | Split::Unseen => 4 * self.eval_per_pair_class,
        }
    }

    /// Generates one sample; a pure function of the config, split and index.
    pub fn generate(&self, split: Split, index: usize) -> Result<MixtureSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            self.seed,
            &[seed::tag("sample"), seed::tag(split.as_str()), index as u64],
        ));
        let pair_class = match split {
            Split::Train => PairClass::ALL[rng.random_range(0..4)],
            _ => PairClass::ALL[(index / self.eval_per_pair_class.max(1)).min(3)],
        };
        let (tc, ic) = pair_class.classes();
        let targets = self.speakers_of(split, tc);
        let target = &targets[rng.random_range(0..targets.len())];
        let interferers: Vec<SpeakerProfile> = self
            .speakers_of(split, ic)
            .into_iter()
            .filter(|p| p.speaker_id != target.speaker_id)
            .collect();
        let interferer = &interferers[rng.random_range(0..interferers.len())];
        let gain_db = if self.gain_db_max > 0.0 {
            rng.random_range(-self.gain_db_max..=self.gain_db_max)
        } else {
            0.0
        };
        let (ta, ib, fs) = (rng.random::<u64>(), rng.random::<u64>(), rng.random::<u64>());
        let mut a = render_utterance(target, self.duration_s, self.sample_rate, ta)?;
        let mut b = render_utterance(interferer, self.duration_s, self.sample_rate, ib)?;
        let mut mixture = mix_clips(&a, &b, gain_db)?;
        let peak = mixture.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > CLIP_GUARD {
            let s = CLIP_GUARD / peak;
            for clip in [&mut a, &mut b] {
                clip.samples.iter_mut().for_each(|v| *v *= s);
            }
            mixture = mix_clips(&a, &b, gain_db)?;
        }
        Ok(MixtureSample {
            mixture,
            target_ref: a,
            interferer_ref: b,
            face: render_face(target, &self.face, fs),
            target_id: target.speaker_id.clone(),
            interferer_id: interferer.speaker_id.clone(),
            pair_class,
            split,
            gain_db,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub sample_id: String,
    /// Paths relative to the manifest's directory.
    pub mixture: PathBuf,
    pub target: PathBuf,
    pub interferer: PathBuf,
    pub face: PathBuf,
    pub target_id: String,
    pub interferer_id: String,
    pub pair_class: PairClass,
    pub split: Split,
    pub gain_db: f64,
}

impl ManifestRecord {
    fn for_sample(split: Split, index: usize, s: &MixtureSample) -> Self {
        let sample_id = format!("{}-{index:05}", split.as_str());
        let dir = PathBuf::from(split.as_str()).join(&sample_id);
        Self {
            mixture: dir.join("mixture.wav"),
            target: dir.join("target.wav"),
            interferer: dir.join("interferer.wav"),
            face: dir.join("face.pgm"),
            sample_id,
            target_id: s.target_id.clone(),
            interferer_id: s.interferer_id.clone(),
            pair_class: s.pair_class,
            split,
            gain_db: s.gain_db,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_COLUMNS: &str =
    "sample_id\tmixture\ttarget\tinterferer\tface\ttarget_id\tinterferer_id\tpair_class\tsplit\tgain_db";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# {MANIFEST_COLUMNS}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.sample_id,
                r.mixture.display(),
                r.target.display(),
                r.interferer.display(),
                r.face.display(),
                r.target_id,
                r.interferer_id,
                r.pair_class,
                r.split,
                r.gain_db
            );
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let field = |what: &str, detail: String| Error::Format {
                field: format!("manifest line {} {what}", n + 1),
                detail,
            };
            if f.len() != 10 {
                return Err(field("fields", format!("expected 10 tab-separated fields, found {}", f.len())));
            }
            let gain_db = f[9]
                .parse()
                .map_err(|_| field("gain_db", format!("`{}` is not a number", f[9])))?;
            records.push(ManifestRecord {
                sample_id: f[0].to_string(),
                mixture: PathBuf::from(f[1]),
                target: PathBuf::from(f[2]),
                interferer: PathBuf::from(f[3]),
                face: PathBuf::from(f[4]),
                target_id: f[5].to_string(),
                interferer_id: f[6].to_string(),
                pair_class: PairClass::parse(f[7]).map_err(|e| field("pair_class", e.to_string()))?,
                split: Split::parse(f[8]).map_err(|e| field("split", e.to_string()))?,
                gain_db,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    /// Reads `path`, or `path/manifest.tsv` when `path` is a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn write(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        fs::write(&file, self.to_tsv()).map_err(|e| Error::io(&file, e))
    }

    /// Checks that every referenced file exists and lives under `<split>/<sample_id>/`.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let dir = PathBuf::from(r.split.as_str()).join(&r.sample_id);
            for p in [&r.mixture, &r.target, &r.interferer, &r.face] {
                if !p.starts_with(&dir) {
                    return Err(Error::Format {
                        field: format!("manifest record {}", r.sample_id),
                        detail: format!("{} is outside {}", p.display(), dir.display()),
                    });
                }
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
            if r.target_id == r.interferer_id {
                return Err(Error::Format {
                    field: format!("manifest record {}", r.sample_id),
                    detail: "target and interferer are the same speaker".into(),
                });
            }
        }
        Ok(())
    }

    /// Every referenced file of the given records that does not exist.
    pub fn missing_files<'a>(&self, records: impl IntoIterator<Item = &'a ManifestRecord>) -> Vec<PathBuf> {
        records
            .into_iter()
            .flat_map(|r| [&r.mixture, &r.target, &r.interferer, &r.face])
            .map(|p| self.root.join(p))
            .filter(|p| !p.is_file())
            .collect()
    }

    pub fn load_sample(&self, r: &ManifestRecord) -> Result<MixtureSample> {
        let (w, h, pixels) = pgm_read(&self.root.join(&r.face))?;
        if w != h {
            return Err(Error::Format {
                field: "face".into(),
                detail: format!("{} is {w}×{h}, expected square", r.face.display()),
            });
        }
        Ok(MixtureSample {
            mixture: wav_read(&self.root.join(&r.mixture))?,
            target_ref: wav_read(&self.root.join(&r.target))?,
            interferer_ref: wav_read(&self.root.join(&r.interferer))?,
            face: FaceImage::new(w, pixels)?,
            target_id: r.target_id.clone(),
            interferer_id: r.interferer_id.clone(),
            pair_class: r.pair_class,
            split: r.split,
            gain_db: r.gain_db,
        })
    }

    /// Distinct speaker profiles appearing in a split, sorted by id.
    pub fn speakers(&self, split: Split) -> Result<Vec<SpeakerProfile>> {
        let mut ids: Vec<&str> = self
            .split(split)
            .flat_map(|r| [r.target_id.as_str(), r.interferer_id.as_str()])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().map(speaker_from_id).collect()
    }
}

fn write_sample(root: &Path, r: &ManifestRecord, s: &MixtureSample) -> Result<()> {
    let dir = root.join(r.mixture.parent().unwrap_or(Path::new("")));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    wav_write(&root.join(&r.mixture), &s.mixture)?;
    wav_write(&root.join(&r.target), &s.target_ref)?;
    wav_write(&root.join(&r.interferer), &s.interferer_ref)?;
    pgm_write(&root.join(&r.face), s.face.size, s.face.size, &s.face.pixels)
}

/// Generates every split, writes WAV/PGM files under `out_dir` and the manifest beside them.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for split in Split::ALL {
        let part: Vec<ManifestRecord> = (0..cfg.sample_count(split))
            .into_par_iter()
            .map(|i| {
                let s = cfg.generate(split, i)?;
                let r = ManifestRecord::for_sample(split, i, &s);
                write_sample(out_dir, &r, &s)?;
                Ok(r)
            })
            .collect::<Result<_>>()?;
        records.extend(part);
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write()?;
    log::info!(
        "wrote {} samples to {}",
        manifest.records.len(),
        out_dir.display()
    );
    Ok(manifest)
}
