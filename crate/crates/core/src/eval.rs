//! Separation metrics and the split × pair-class evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::biometric::BiometricModel;
use crate::corpus::{gain_linear, Manifest, PairClass, Split};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::separation::{separate, SeparateOptions, SeparatorKind, SeparatorModel};

pub const SDR_CAP_DB: f64 = 60.0;
/// Isolation verdicts with a smaller SDR margin are excluded from the confident tally.
pub const CONFIDENT_MARGIN_DB: f64 = 0.1;

fn check_pair(what: &str, est: &AudioClip, reference: &AudioClip) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::Argument(format!(
            "{what}: estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    if reference.energy() == 0.0 {
        return Err(Error::Argument(format!("{what}: reference is all zeros")));
    }
    Ok(())
}

fn ratio_db(signal: f64, residual: f64) -> f64 {
    if residual <= signal * 10f64.powf(-SDR_CAP_DB / 10.0) {
        SDR_CAP_DB
    } else {
        (10.0 * (signal / residual).log10()).min(SDR_CAP_DB)
    }
}

/// `10·log10(‖ref‖² / ‖ref − est‖²)`, capped at +60 dB.
pub fn sdr(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    check_pair("sdr", est, reference)?;
    let residual: f64 = reference
        .samples
        .iter()
        .zip(&est.samples)
        .map(|(r, e)| (r - e).powi(2))
        .sum();
    Ok(ratio_db(reference.energy(), residual))
}

/// Scale-invariant SDR: the reference is rescaled to best match the estimate.
pub fn si_sdr(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    check_pair("si_sdr", est, reference)?;
    let dot: f64 = est.samples.iter().zip(&reference.samples).map(|(e, r)| e * r).sum();
    let a = dot / reference.energy();
    let target: f64 = reference.energy() * a * a;
    let residual: f64 = est
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| (e - a * r).powi(2))
        .sum();
    Ok(ratio_db(target, residual))
}

pub fn sdri(est: &AudioClip, mixture: &AudioClip, reference: &AudioClip) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mixture, reference)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Isolation {
    pub correct: bool,
    /// `sdr(est, target) − sdr(est, interferer)` in dB.
    pub margin_db: f64,
}

impl Isolation {
    pub fn confident(&self) -> bool {
        self.margin_db.abs() >= CONFIDENT_MARGIN_DB
    }
}

/// Whether the estimate is closer (by SDR) to the target than to the interferer.
pub fn isolation(est: &AudioClip, target: &AudioClip, interferer: &AudioClip) -> Result<Isolation> {
    let margin_db = sdr(est, target)? - sdr(est, interferer)?;
    if margin_db == 0.0 {
        log::info!("isolation tie (equal SDR to both references); counted as incorrect");
    }
    Ok(Isolation {
        correct: margin_db > 0.0,
        margin_db,
    })
}

pub fn isolation_correct(est: &AudioClip, target: &AudioClip, interferer: &AudioClip) -> Result<bool> {
    Ok(isolation(est, target, interferer)?.correct)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub split: Split,
    pub pair_class: PairClass,
    pub sdr_mixture: f64,
    pub sdr_estimate: f64,
    pub sdri: f64,
    pub si_sdri: f64,
    pub isolated_correctly: bool,
    pub margin_db: f64,
}

pub const RECORD_HEADER: &str =
    "sample_id\tsplit\tpair_class\tsdr_mixture\tsdr_estimate\tsdri\tsi_sdri\tisolated_correctly\tmargin_db";

pub fn records_tsv(records: &[EvalRecord]) -> String {
    let mut out = format!("{RECORD_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.sample_id,
            r.split,
            r.pair_class,
            r.sdr_mixture,
            r.sdr_estimate,
            r.sdri,
            r.si_sdri,
            u8::from(r.isolated_correctly),
            r.margin_db
        );
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Format {
            field: format!("record line {} {what}", n + 1),
            detail: format!("cannot parse `{line}`"),
        };
        if f.len() != 9 {
            return Err(bad("fields"));
        }
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        out.push(EvalRecord {
            sample_id: f[0].into(),
            split: Split::parse(f[1]).map_err(|_| bad("split"))?,
            pair_class: PairClass::parse(f[2]).map_err(|_| bad("pair_class"))?,
            sdr_mixture: num(3, "sdr_mixture")?,
            sdr_estimate: num(4, "sdr_estimate")?,
            sdri: num(5, "sdri")?,
            si_sdri: num(6, "si_sdri")?,
            isolated_correctly: match f[7] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("isolated_correctly")),
            },
            margin_db: num(8, "margin_db")?,
        });
    }
    Ok(out)
}

/// Aggregates of one group of records.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub count: usize,
    pub median_sdri: f64,
    pub mean_sdri: f64,
    pub median_si_sdri: f64,
    pub accuracy: f64,
    pub confident_count: usize,
    pub confident_accuracy: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl CellStats {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Self {
        let rs: Vec<&EvalRecord> = records.into_iter().collect();
        let n = rs.len();
        let frac = |k: usize, d: usize| if d == 0 { f64::NAN } else { k as f64 / d as f64 };
        let confident: Vec<&&EvalRecord> = rs.iter().filter(|r| r.margin_db.abs() >= CONFIDENT_MARGIN_DB).collect();
        Self {
            count: n,
            median_sdri: median(rs.iter().map(|r| r.sdri).collect()),
            mean_sdri: if n == 0 { f64::NAN } else { rs.iter().map(|r| r.sdri).sum::<f64>() / n as f64 },
            median_si_sdri: median(rs.iter().map(|r| r.si_sdri).collect()),
            accuracy: frac(rs.iter().filter(|r| r.isolated_correctly).count(), n),
            confident_count: confident.len(),
            confident_accuracy: frac(confident.iter().filter(|r| r.isolated_correctly).count(), confident.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// One cell per (split, pair class) present in the records, split-major.
    pub cells: Vec<(Split, PairClass, CellStats)>,
    pub splits: Vec<(Split, CellStats)>,
    pub cross_class: CellStats,
    pub same_class: CellStats,
    pub overall: CellStats,
}

impl EvalReport {
    /// Pure reduction of a record list.
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let mut cells = Vec::new();
        let mut splits = Vec::new();
        for split in Split::ALL {
            let in_split: Vec<&EvalRecord> = records.iter().filter(|r| r.split == split).collect();
            if in_split.is_empty() {
                continue;
            }
            for pc in PairClass::ALL {
                cells.push((split, pc, CellStats::of(in_split.iter().copied().filter(|r| r.pair_class == pc))));
            }
            splits.push((split, CellStats::of(in_split.iter().copied())));
        }
        Self {
            cells,
            splits,
            cross_class: CellStats::of(records.iter().filter(|r| r.pair_class.is_cross())),
            same_class: CellStats::of(records.iter().filter(|r| !r.pair_class.is_cross())),
            overall: CellStats::of(records),
        }
    }

    pub fn cell(&self, split: Split, pc: PairClass) -> Option<&CellStats> {
        self.cells.iter().find(|(s, p, _)| *s == split && *p == pc).map(|c| &c.2)
    }

    pub fn split(&self, split: Split) -> Option<&CellStats> {
        self.splits.iter().find(|(s, _)| *s == split).map(|c| &c.1)
    }

    /// Aligned table followed by a `key=value` section.
    pub fn to_text(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {title}");
        let _ = writeln!(
            out,
            "# isolation: an output counts as correct when its SDR against the face-designated \
             target exceeds its SDR against the interferer (as mixed); |margin| < {CONFIDENT_MARGIN_DB} dB \
             is excluded from the confident tally"
        );
        let _ = writeln!(
            out,
            "{:<8} {:<10} {:>5} {:>12} {:>10} {:>12} {:>9} {:>11}",
            "split", "pair", "n", "median_sdri", "mean_sdri", "median_sisdri", "accuracy", "confident"
        );
        let row = |out: &mut String, a: &str, b: &str, c: &CellStats| {
            let _ = writeln!(
                out,
                "{:<8} {:<10} {:>5} {:>12.3} {:>10.3} {:>12.3} {:>8.1}% {:>5}/{:<5}",
                a,
                b,
                c.count,
                c.median_sdri,
                c.mean_sdri,
                c.median_si_sdri,
                100.0 * c.accuracy,
                (c.confident_accuracy * c.confident_count as f64).round() as usize,
                c.confident_count
            );
        };
        for (s, p, c) in &self.cells {
            row(&mut out, s.as_str(), p.as_str(), c);
        }
        for (s, c) in &self.splits {
            row(&mut out, s.as_str(), "all", c);
        }
        row(&mut out, "all", "cross", &self.cross_class);
        row(&mut out, "all", "same", &self.same_class);
        row(&mut out, "all", "all", &self.overall);
        out.push_str("\n[summary]\n");
        let kv = |out: &mut String, key: &str, c: &CellStats| {
            let _ = writeln!(out, "{key}.count={}", c.count);
            let _ = writeln!(out, "{key}.median_sdri={}", c.median_sdri);
            let _ = writeln!(out, "{key}.mean_sdri={}", c.mean_sdri);
            let _ = writeln!(out, "{key}.median_si_sdri={}", c.median_si_sdri);
            let _ = writeln!(out, "{key}.accuracy={}", c.accuracy);
            let _ = writeln!(out, "{key}.confident_count={}", c.confident_count);
            let _ = writeln!(out, "{key}.confident_accuracy={}", c.confident_accuracy);
        };
        for (s, p, c) in &self.cells {
            kv(&mut out, &format!("{s}.{p}"), c);
        }
        for (s, c) in &self.splits {
            kv(&mut out, &format!("{s}.all"), c);
        }
        kv(&mut out, "cross", &self.cross_class);
        kv(&mut out, "same", &self.same_class);
        kv(&mut out, "overall", &self.overall);
        out
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub gl_iters: usize,
    pub seed: u64,
    /// Output channel scored for multi-output (PIT) models.
    pub channel: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            gl_iters: crate::dsp::DEFAULT_GL_ITERS,
            seed: 0,
            channel: 0,
        }
    }
}

/// Separates every sample of the requested splits and scores it.
pub fn evaluate_suite(
    model: &SeparatorModel,
    bio: Option<&BiometricModel>,
    manifest: &Manifest,
    splits: &[Split],
    opts: &EvalOptions,
) -> Result<(Vec<EvalRecord>, EvalReport)> {
    let records: Vec<_> = manifest.records.iter().filter(|r| splits.contains(&r.split)).collect();
    if records.is_empty() {
        return Err(Error::Config(format!("manifest has no records in splits {splits:?}")));
    }
    let missing = manifest.missing_files(records.iter().copied());
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Config(format!("missing evaluation files:\n  {}", list.join("\n  "))));
    }
    if model.config.kind == SeparatorKind::Conditioned && bio.is_none() {
        return Err(Error::Config("conditioned separator evaluation needs the identity model".into()));
    }
    let out: Vec<EvalRecord> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let s = manifest.load_sample(r)?;
            let sep_opts = SeparateOptions {
                gl_iters: opts.gl_iters,
                seed: crate::seed::derive(opts.seed, &[i as u64]),
                channel: opts.channel,
                unit_mask: false,
            };
            let est = separate(model, bio, &s.mixture, Some(&s.face), &sep_opts)?.clip;
            let g = gain_linear(s.gain_db);
            let inter = AudioClip::new(
                s.interferer_ref.samples.iter().map(|v| g * v).collect(),
                s.interferer_ref.sample_rate,
            );
            let sdr_mixture = sdr(&s.mixture, &s.target_ref)?;
            let sdr_estimate = sdr(&est, &s.target_ref)?;
            let iso = isolation(&est, &s.target_ref, &inter)?;
            Ok(EvalRecord {
                sample_id: r.sample_id.clone(),
                split: r.split,
                pair_class: r.pair_class,
                sdr_mixture,
                sdr_estimate,
                sdri: sdr_estimate - sdr_mixture,
                si_sdri: si_sdr(&est, &s.target_ref)? - si_sdr(&s.mixture, &s.target_ref)?,
                isolated_correctly: iso.correct,
                margin_db: iso.margin_db,
            })
        })
        .collect::<Result<_>>()?;
    let report = EvalReport::from_records(&out);
    Ok((out, report))
}

/// Writes `records.tsv` and `report.txt` into `dir`.
pub fn write_eval_outputs(dir: &Path, title: &str, records: &[EvalRecord], report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rp = dir.join("records.tsv");
    fs::write(&rp, records_tsv(records)).map_err(|e| Error::io(&rp, e))?;
    let tp = dir.join("report.txt");
    fs::write(&tp, report.to_text(title)).map_err(|e| Error::io(&tp, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, 16000)
    }

    #[test]
    fn sdr_examples() {
        let r = clip(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(sdr(&r, &r).unwrap(), SDR_CAP_DB);
        assert_eq!(sdr(&clip(vec![0.0; 4]), &r).unwrap(), 0.0);
        let e = r.energy();
        let n = (e / 100.0 / 4.0).sqrt();
        let noisy = clip(r.samples.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { n } else { -n }).collect());
        assert!((sdr(&noisy, &r).unwrap() - 20.0).abs() < 1e-9);
        assert!(sdr(&r, &clip(vec![0.0; 4])).is_err());
        assert!(sdr(&clip(vec![0.0; 3]), &r).is_err());
        assert_eq!(sdri(&r, &r, &r).unwrap(), 0.0);
    }

    #[test]
    fn isolation_examples() {
        let t = clip(vec![1.0, 0.0, 1.0, 0.0]);
        let i = clip(vec![0.0, 1.0, 0.0, -1.0]);
        assert!(isolation_correct(&t, &t, &i).unwrap());
        assert!(!isolation_correct(&i, &t, &i).unwrap());
        let mix = clip(vec![1.0, 1.0, 1.0, -1.0]);
        let iso = isolation(&mix, &t, &i).unwrap();
        assert!(!iso.correct && !iso.confident());
    }

    #[test]
    fn records_round_trip_and_report_structure() {
        let mut recs = Vec::new();
        for (k, (split, pc)) in Split::EVAL
            .iter()
            .flat_map(|s| PairClass::ALL.iter().map(move |p| (*s, *p)))
            .enumerate()
        {
            recs.push(EvalRecord {
                sample_id: format!("x{k}"),
                split,
                pair_class: pc,
                sdr_mixture: 0.25 * k as f64,
                sdr_estimate: 1.0 + k as f64,
                sdri: 1.0 + 0.75 * k as f64,
                si_sdri: 0.5,
                isolated_correctly: k % 2 == 0,
                margin_db: if k == 3 { 0.05 } else { 1.0 },
            });
        }
        let back = parse_records(&records_tsv(&recs)).unwrap();
        assert_eq!(back, recs);
        let rep = EvalReport::from_records(&back);
        assert_eq!(rep.cells.len(), 8);
        assert_eq!(rep.overall.count, 8);
        assert_eq!(rep.overall.confident_count, 7);
        let text = rep.to_text("t");
        assert!(text.contains("seen.low-high.median_sdri="));
        let again = EvalReport::from_records(&parse_records(&records_tsv(&recs)).unwrap());
        assert_eq!(again.to_text("t"), text);
    }
}
