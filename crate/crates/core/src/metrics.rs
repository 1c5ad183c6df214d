//! Pain metrics, the intensity functional and the two retrieval baselines.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::{LatentSequence, Rng, Scalar};

/// `v_t = max(0, w·y_t)` with the manifest's extraction weights, on raw latents.
pub fn intensity_extract<T: Scalar>(y: &LatentSequence<T>, manifest: &DatasetManifest) -> Result<Vec<f64>> {
    let w = &manifest.extraction;
    if w.len() != y.dim() {
        return Err(Error::Data(format!(
            "extraction weights have {} entries for {}-dim latents",
            w.len(),
            y.dim()
        )));
    }
    Ok(y
        .rows()
        .map(|row| {
            let v: f64 = row.iter().zip(w).map(|(a, b)| a.as_f64() * b).sum();
            v.max(0.0)
        })
        .collect())
}

/// Unnormalized DTW cost with local cost `|a_i − b_j|` and match/insert/delete steps.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("dtw needs non-empty signals".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, &x) in a.iter().enumerate() {
        for j in 0..m {
            let c = (x - b[j]).abs();
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = c + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub value: f64,
    /// Set when either signal is constant; `value` is then 0.
    pub degenerate: bool,
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Pearson> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("pearson of lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Data("pearson needs at least two samples".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let flat = |s: f64, v: &[f64]| {
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        s <= n * (1e-12 * scale).powi(2)
    };
    if flat(saa, a) || flat(sbb, b) {
        return Ok(Pearson {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Pearson {
        value: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn pain_sim<T: Scalar>(gen: &LatentSequence<T>, gt: &LatentSequence<T>, manifest: &DatasetManifest) -> Result<f64> {
    dtw(&intensity_extract(gen, manifest)?, &intensity_extract(gt, manifest)?)
}

pub fn pain_corr<T: Scalar>(
    gen: &LatentSequence<T>,
    gt: &LatentSequence<T>,
    manifest: &DatasetManifest,
) -> Result<Pearson> {
    pearson(&intensity_extract(gen, manifest)?, &intensity_extract(gt, manifest)?)
}

pub fn pain_acc<T: Scalar>(gen: &LatentSequence<T>, stimuli: &[f64], manifest: &DatasetManifest) -> Result<f64> {
    dtw(&intensity_extract(gen, manifest)?, stimuli)
}

/// Frame-aligned mean squared latent difference.
pub fn pain_dist<T: Scalar>(gen: &LatentSequence<T>, gt: &LatentSequence<T>) -> Result<f64> {
    if gen.frames() != gt.frames() || gen.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            gen.frames(),
            gen.dim(),
            gt.frames(),
            gt.dim()
        )));
    }
    let n = gen.as_slice().len();
    if n == 0 {
        return Err(Error::Data("empty sequences".into()));
    }
    let s: f64 = gen
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(s / n as f64)
}

/// Mean [`pain_dist`] over all unordered pairs of samples.
pub fn pain_divrs<T: Scalar>(samples: &[LatentSequence<T>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Data("diversity needs at least two samples".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            sum += pain_dist(&samples[i], &samples[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Per-dimension temporal variance (population form), averaged over dimensions.
pub fn pain_var<T: Scalar>(gen: &LatentSequence<T>) -> f64 {
    let (t, d) = (gen.frames(), gen.dim());
    if t == 0 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..d {
        // shifting by the first frame keeps constant dimensions exactly zero
        let x0 = gen.get(0, k).as_f64();
        let dev = |i| gen.get(i, k).as_f64() - x0;
        let mean = (0..t).map(dev).sum::<f64>() / t as f64;
        total += (0..t).map(|i| (dev(i) - mean).powi(2)).sum::<f64>() / t as f64;
    }
    total / d as f64
}

/// Raw training sequences available to the retrieval baselines, in
/// (subject id, sequence id) order.
#[derive(Clone, Debug)]
pub struct RetrievalPool {
    entries: Vec<PoolEntry>,
}

#[derive(Clone, Debug)]
struct PoolEntry {
    subject: String,
    latents: LatentSequence<f64>,
    stimuli: Vec<f64>,
}

/// A training window chosen by a baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    pub subject: String,
    pub start: usize,
    pub latents: LatentSequence<f64>,
}

impl RetrievalPool {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let mut recs: Vec<_> = ds.records_in(Split::Train).collect();
        recs.sort_by(|a, b| (&a.subject, &a.id).cmp(&(&b.subject, &b.id)));
        Self::new(
            recs.into_iter()
                .map(|r| (r.subject.clone(), r.latents.clone(), r.stimuli.clone()))
                .collect(),
        )
    }

    /// Entries must already be in tie-break order.
    pub fn new(entries: Vec<(String, LatentSequence<f64>, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let entries = entries
            .into_iter()
            .map(|(subject, latents, stimuli)| {
                if stimuli.len() != latents.frames() {
                    return Err(Error::Shape(format!("subject {subject}: stimuli and latents differ in length")));
                }
                Ok(PoolEntry {
                    subject,
                    latents,
                    stimuli,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RetrievalPool { entries })
    }

    fn windows(&self, len: usize) -> usize {
        self.entries.iter().map(|e| (e.latents.frames() + 1).saturating_sub(len)).sum()
    }

    fn take(&self, entry: usize, start: usize, len: usize) -> Result<Retrieved> {
        let e = &self.entries[entry];
        Ok(Retrieved {
            subject: e.subject.clone(),
            start,
            latents: e.latents.window(start, len)?,
        })
    }

    /// Training window whose stimuli are closest in L2 to `query`; ties go to
    /// the earliest entry and start. Partial sums abandon a candidate once it
    /// exceeds the best distance so far.
    pub fn nearest_neighbor(&self, query: &[f64]) -> Result<Retrieved> {
        let len = query.len();
        if len == 0 || self.windows(len) == 0 {
            return Err(Error::Data(format!("no training window of {len} frames")));
        }
        let mut best = (f64::INFINITY, 0, 0);
        for (ei, e) in self.entries.iter().enumerate() {
            if e.stimuli.len() < len {
                continue;
            }
            for start in 0..=e.stimuli.len() - len {
                let w = &e.stimuli[start..start + len];
                let mut acc = 0.0;
                let mut done = true;
                for (a, b) in w.iter().zip(query) {
                    acc += (a - b) * (a - b);
                    if acc > best.0 {
                        done = false;
                        break;
                    }
                }
                if done && acc < best.0 {
                    best = (acc, ei, start);
                }
            }
        }
        self.take(best.1, best.2, len)
    }

    /// Uniformly random training window of `len` frames.
    pub fn random_window(&self, len: usize, rng: &mut Rng) -> Result<Retrieved> {
        let total = self.windows(len);
        if len == 0 || total == 0 {
            return Err(Error::Data(format!("no training window of {len} frames")));
        }
        let mut pick = rng.below(total);
        for (ei, e) in self.entries.iter().enumerate() {
            let n = (e.latents.frames() + 1).saturating_sub(len);
            if pick < n {
                return self.take(ei, pick, len);
            }
            pick -= n;
        }
        unreachable!("pick is below the window count")
    }
}

/// Per-sequence scores; per-sample metrics are averaged over the samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScores {
    pub id: String,
    pub samples: usize,
    pub pain_sim: f64,
    pub pain_corr: f64,
    pub degenerate_corr: usize,
    pub pain_dist: f64,
    pub pain_var: f64,
    pub pain_acc: f64,
    pub pain_acc_gt: f64,
    pub pain_divrs: Option<f64>,
}

/// Scores the generations for one ground-truth sequence (raw latent space).
pub fn score_sequence(
    id: &str,
    samples: &[LatentSequence<f64>],
    gt: &LatentSequence<f64>,
    stimuli: &[f64],
    manifest: &DatasetManifest,
) -> Result<SequenceScores> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to score".into()));
    }
    let gt_int = intensity_extract(gt, manifest)?;
    let n = samples.len() as f64;
    let mut s = SequenceScores {
        id: id.to_string(),
        samples: samples.len(),
        pain_sim: 0.0,
        pain_corr: 0.0,
        degenerate_corr: 0,
        pain_dist: 0.0,
        pain_var: 0.0,
        pain_acc: 0.0,
        pain_acc_gt: dtw(&gt_int, stimuli)?,
        pain_divrs: if samples.len() > 1 {
            Some(pain_divrs(samples)?)
        } else {
            None
        },
    };
    for g in samples {
        let gi = intensity_extract(g, manifest)?;
        s.pain_sim += dtw(&gi, &gt_int)? / n;
        let c = pearson(&gi, &gt_int)?;
        s.pain_corr += c.value / n;
        s.degenerate_corr += c.degenerate as usize;
        s.pain_dist += pain_dist(g, gt)? / n;
        s.pain_var += pain_var(g) / n;
        s.pain_acc += dtw(&gi, stimuli)? / n;
    }
    Ok(s)
}

/// Aggregate metrics for one method. `pain_acc_gap` is `|pain_acc − pain_acc_gt|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub sequences: usize,
    pub samples: usize,
    pub pain_sim: f64,
    pub pain_corr: f64,
    pub degenerate_corr: usize,
    pub pain_dist: f64,
    pub pain_divrs: Option<f64>,
    pub pain_var: f64,
    pub pain_acc: f64,
    pub pain_acc_gt: f64,
    pub pain_acc_gap: f64,
    pub seed: u64,
    /// Effective configuration that produced the numbers.
    pub config: serde_json::Value,
}

/// Column order of [`MetricsReport::csv_row`].
pub const CSV_HEADER: [&str; 14] = [
    "method",
    "sequences",
    "samples",
    "pain_sim",
    "pain_corr",
    "degenerate_corr",
    "pain_dist",
    "pain_divrs",
    "pain_var",
    "pain_acc",
    "pain_acc_gt",
    "pain_acc_gap",
    "seed",
    "config",
];

impl MetricsReport {
    /// Averages per-sequence scores (each sequence weighs equally).
    pub fn aggregate(method: &str, scores: &[SequenceScores], seed: u64, config: serde_json::Value) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("no sequences scored".into()));
        }
        let n = scores.len() as f64;
        let mean = |f: &dyn Fn(&SequenceScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let divrs = if scores.iter().all(|s| s.pain_divrs.is_some()) {
            Some(mean(&|s| s.pain_divrs.unwrap_or(0.0)))
        } else {
            None
        };
        let pain_acc = mean(&|s| s.pain_acc);
        let pain_acc_gt = mean(&|s| s.pain_acc_gt);
        Ok(MetricsReport {
            method: method.to_string(),
            sequences: scores.len(),
            samples: scores.iter().map(|s| s.samples).sum(),
            pain_sim: mean(&|s| s.pain_sim),
            pain_corr: mean(&|s| s.pain_corr),
            degenerate_corr: scores.iter().map(|s| s.degenerate_corr).sum(),
            pain_dist: mean(&|s| s.pain_dist),
            pain_divrs: divrs,
            pain_var: mean(&|s| s.pain_var),
            pain_acc,
            pain_acc_gt,
            pain_acc_gap: (pain_acc - pain_acc_gt).abs(),
            seed,
            config,
        })
    }

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.sequences.to_string(),
            self.samples.to_string(),
            self.pain_sim.to_string(),
            self.pain_corr.to_string(),
            self.degenerate_corr.to_string(),
            self.pain_dist.to_string(),
            self.pain_divrs.map(|v| v.to_string()).unwrap_or_default(),
            self.pain_var.to_string(),
            self.pain_acc.to_string(),
            self.pain_acc_gt.to_string(),
            self.pain_acc_gap.to_string(),
            self.seed.to_string(),
            self.config.to_string(),
        ]
    }
}

/// Writes reports as CSV (header plus one row each).
pub fn write_reports_csv<W: std::io::Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in reports {
        w.write_record(r.csv_row()).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}
