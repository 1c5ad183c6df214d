//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/subjects.csv          subject,expressiveness,emotion
//! <dir>/sequences/<id>.bin    "PDLT", u32 version, u32 frames, u32 dim, f32 LE row-major
//! <dir>/stimuli/<id>.csv      frame,stimulus
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, SequenceRecord};
use crate::error::{Error, Result};
use crate::LatentSequence;

pub const RECORD_MAGIC: [u8; 4] = *b"PDLT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
struct StimulusRow {
    frame: usize,
    stimulus: f64,
}

#[derive(Serialize, Deserialize)]
struct SubjectRow {
    subject: String,
    expressiveness: f64,
    emotion: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Encodes latents as a binary record (values rounded to `f32`).
pub fn write_sequence_record(path: &Path, latents: &LatentSequence<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + latents.as_slice().len() * 4);
    buf.extend_from_slice(&RECORD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(latents.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(latents.dim() as u32).to_le_bytes());
    for &v in latents.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Decodes a binary record, returning `(frames, dim, values)`.
pub fn read_sequence_record(path: &Path, id: &str) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            id: id.to_string(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..4] != RECORD_MAGIC {
        return Err(Error::Magic(format!("sequence record `{id}`")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            what: format!("sequence record `{id}`"),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + frames * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            id: id.to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((frames, dim, values))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["sequences", "stimuli"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mpath = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&ds.manifest)?;
    json.push('\n');
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let spath = dir.join("subjects.csv");
    let mut w = csv::Writer::from_path(&spath).map_err(|e| csv_err(&spath, e))?;
    for s in &ds.manifest.subjects {
        w.serialize(SubjectRow {
            subject: s.id.clone(),
            expressiveness: s.expressiveness,
            emotion: s.emotion,
        })
        .map_err(|e| csv_err(&spath, e))?;
    }
    w.flush().map_err(|e| Error::io(&spath, e))?;

    for r in &ds.records {
        write_sequence_record(&dir.join("sequences").join(format!("{}.bin", r.id)), &r.latents)?;
        let p = dir.join("stimuli").join(format!("{}.csv", r.id));
        let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
        for (frame, &stimulus) in r.stimuli.iter().enumerate() {
            w.serialize(StimulusRow { frame, stimulus }).map_err(|e| csv_err(&p, e))?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Loads a dataset directory. Statistics missing from the manifest are
/// computed from the training split.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            what: "manifest".into(),
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.dim == 0 || manifest.jaw_dims.iter().any(|&j| j >= manifest.dim) {
        return Err(Error::Data("manifest dimensions are inconsistent".into()));
    }
    if !manifest.extraction.is_empty() && manifest.extraction.len() != manifest.dim {
        return Err(Error::Data("extraction weights do not match the latent dimension".into()));
    }

    let spath = dir.join("subjects.csv");
    let mut rdr = csv::Reader::from_path(&spath).map_err(|e| csv_err(&spath, e))?;
    let rows: Vec<SubjectRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(&spath, e))?;
    if rows.len() != manifest.subjects.len() {
        return Err(Error::ManifestMismatch {
            id: "subjects.csv".into(),
            detail: format!("{} rows for {} subjects", rows.len(), manifest.subjects.len()),
        });
    }
    for (row, s) in rows.iter().zip(&manifest.subjects) {
        if row.subject != s.id || row.expressiveness != s.expressiveness || row.emotion != s.emotion {
            return Err(Error::ManifestMismatch {
                id: s.id.clone(),
                detail: "subjects.csv disagrees with the manifest".into(),
            });
        }
    }

    let mut records = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        if manifest.subject(&entry.subject).is_none() {
            return Err(Error::ManifestMismatch {
                id: entry.id.clone(),
                detail: format!("unknown subject `{}`", entry.subject),
            });
        }
        let (frames, dim, values) =
            read_sequence_record(&dir.join("sequences").join(format!("{}.bin", entry.id)), &entry.id)?;
        if frames != entry.frames || dim != manifest.dim {
            return Err(Error::ManifestMismatch {
                id: entry.id.clone(),
                detail: format!(
                    "record is {frames}x{dim}, manifest says {}x{}",
                    entry.frames, manifest.dim
                ),
            });
        }
        let latents = LatentSequence::new(values, frames, dim, manifest.frame_rate)?;
        let p = dir.join("stimuli").join(format!("{}.csv", entry.id));
        let mut rdr = csv::Reader::from_path(&p).map_err(|e| csv_err(&p, e))?;
        let mut stimuli = Vec::with_capacity(frames);
        for (i, row) in rdr.deserialize::<StimulusRow>().enumerate() {
            let row = row.map_err(|e| csv_err(&p, e))?;
            if row.frame != i || !row.stimulus.is_finite() || row.stimulus < 0.0 {
                return Err(Error::Data(format!("{}: bad stimulus row {i}", p.display())));
            }
            stimuli.push(row.stimulus);
        }
        if stimuli.len() != frames {
            return Err(Error::ManifestMismatch {
                id: entry.id.clone(),
                detail: format!("{} stimulus frames for {frames} latent frames", stimuli.len()),
            });
        }
        records.push(SequenceRecord {
            id: entry.id.clone(),
            subject: entry.subject.clone(),
            latents,
            stimuli,
        });
    }
    let mut ds = Dataset { manifest, records };
    if !ds.manifest.has_stats() {
        ds.compute_stats()?;
    }
    Ok(ds)
}
