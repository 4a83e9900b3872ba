//! Labelled and unlabelled compound files.
//!
//! Labelled CSV: `id,fingerprint,activity`. Unlabelled CSV: `id,fingerprint`,
//! one file per segment in the order given.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledCompound {
    pub id: String,
    pub fp: Fingerprint,
    /// pIC50 or another activity on a scale where larger is more active.
    pub activity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledSet {
    pub compounds: Vec<LabelledCompound>,
    /// Reporting cutoff: every activity is at least this value.
    pub l_min: f64,
    /// Number of compounds screened to produce this set, if known.
    pub screened_count: Option<u64>,
}

impl LabelledSet {
    pub fn new(compounds: Vec<LabelledCompound>, l_min: f64, screened_count: Option<u64>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(compounds.len());
        let nbits = compounds.first().map(|c| c.fp.len());
        for (row, c) in compounds.iter().enumerate() {
            if !c.activity.is_finite() {
                return Err(Error::domain(format!("compound {} has non-finite activity", c.id)));
            }
            if c.activity < l_min {
                return Err(Error::domain(format!(
                    "compound {} has activity {} below cutoff {l_min}",
                    c.id, c.activity
                )));
            }
            if Some(c.fp.len()) != nbits {
                return Err(Error::Dimension {
                    expected: nbits.unwrap_or(0),
                    found: c.fp.len(),
                });
            }
            if !ids.insert(c.id.as_str()) {
                return Err(Error::domain(format!("duplicate id {} at position {row}", c.id)));
            }
        }
        Ok(Self {
            compounds,
            l_min,
            screened_count,
        })
    }

    pub fn len(&self) -> usize {
        self.compounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compounds.is_empty()
    }

    pub fn nbits(&self) -> Option<usize> {
        self.compounds.first().map(|c| c.fp.len())
    }

    pub fn fingerprints(&self) -> Vec<Fingerprint> {
        self.compounds.iter().map(|c| c.fp.clone()).collect()
    }

    pub fn activities(&self) -> Vec<f64> {
        self.compounds.iter().map(|c| c.activity).collect()
    }

    /// Subset keeping compounds whose activity satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(f64) -> bool) -> LabelledSet {
        LabelledSet {
            compounds: self.compounds.iter().filter(|c| keep(c.activity)).cloned().collect(),
            l_min: self.l_min,
            screened_count: self.screened_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabelledCompound {
    pub id: String,
    pub fp: Fingerprint,
    pub segment: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabelledPool {
    pub compounds: Vec<UnlabelledCompound>,
    pub segment_count: usize,
}

impl UnlabelledPool {
    pub fn len(&self) -> usize {
        self.compounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compounds.is_empty()
    }

    pub fn fingerprints(&self) -> Vec<Fingerprint> {
        self.compounds.iter().map(|c| c.fp.clone()).collect()
    }

    pub fn segments(&self) -> Vec<usize> {
        self.compounds.iter().map(|c| c.segment).collect()
    }

    /// Drop every compound whose fingerprint appears in `labelled`; returns
    /// the number removed.
    pub fn remove_labelled(&mut self, labelled: &LabelledSet) -> usize {
        let known: HashSet<&Fingerprint> = labelled.compounds.iter().map(|c| &c.fp).collect();
        let before = self.compounds.len();
        self.compounds.retain(|c| !known.contains(&c.fp));
        before - self.compounds.len()
    }
}

/// Affine map to zero mean and unit sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityTransform {
    pub mean: f64,
    pub sd: f64,
}

impl ActivityTransform {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelledReport {
    pub rows_read: usize,
    pub accepted: usize,
    /// `(row, id, activity)` for rows below the cutoff. Rows are 1-based data
    /// rows (the header is row 0).
    pub rejected: Vec<(usize, String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlabelledReport {
    pub rows_read: Vec<usize>,
    /// Compounds dropped because their fingerprint equals a labelled one.
    pub removed: usize,
}

fn check_header(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(|h| h.trim().trim_start_matches('\u{feff}')).collect();
    if got != expected {
        return Err(Error::Ingestion {
            path: path.to_owned(),
            row: 0,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn parse_fp(path: &Path, row: usize, field: &str, nbits: &mut Option<usize>) -> Result<Fingerprint> {
    let ingest = |message: String| Error::Ingestion {
        path: path.to_owned(),
        row,
        message,
    };
    let fp = Fingerprint::from_hex(field).map_err(|e| ingest(format!("bad fingerprint: {e}")))?;
    match nbits {
        Some(p) if *p != fp.len() => Err(ingest(format!(
            "fingerprint has {} bits, expected {p}",
            fp.len()
        ))),
        Some(_) => Ok(fp),
        None => {
            *nbits = Some(fp.len());
            Ok(fp)
        }
    }
}

/// Parse a labelled CSV from any reader. `path` is used only in messages.
pub fn read_labelled<R: Read>(
    input: R,
    path: &Path,
    l_min: f64,
    screened_count: Option<u64>,
    nbits: Option<usize>,
) -> Result<(LabelledSet, LabelledReport)> {
    let mut rdr = reader(input);
    check_header(path, rdr.headers()?, &["id", "fingerprint", "activity"])?;
    let mut nbits = nbits;
    let mut ids = HashSet::new();
    let mut compounds = Vec::new();
    let mut report = LabelledReport::default();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let ingest = |message: String| Error::Ingestion {
            path: path.to_owned(),
            row,
            message,
        };
        if rec.len() != 3 {
            return Err(ingest(format!("expected 3 fields, found {}", rec.len())));
        }
        report.rows_read += 1;
        let id = rec[0].to_string();
        let fp = parse_fp(path, row, &rec[1], &mut nbits)?;
        let activity: f64 = rec[2]
            .parse()
            .ok()
            .filter(|a: &f64| a.is_finite())
            .ok_or_else(|| ingest(format!("activity {:?} is not a finite number", &rec[2])))?;
        if !ids.insert(id.clone()) {
            return Err(ingest(format!("duplicate id {id}")));
        }
        if activity < l_min {
            report.rejected.push((row, id, activity));
            continue;
        }
        compounds.push(LabelledCompound { id, fp, activity });
    }
    report.accepted = compounds.len();
    if !report.rejected.is_empty() {
        log::warn!(
            "{}: rejected {} rows with activity below {l_min}",
            path.display(),
            report.rejected.len()
        );
    }
    Ok((
        LabelledSet {
            compounds,
            l_min,
            screened_count,
        },
        report,
    ))
}

pub fn load_labelled(
    path: impl AsRef<Path>,
    l_min: f64,
    screened_count: Option<u64>,
    nbits: Option<usize>,
) -> Result<(LabelledSet, LabelledReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_labelled(file, path, l_min, screened_count, nbits)
}

fn read_segment<R: Read>(
    input: R,
    path: &Path,
    segment: usize,
    nbits: &mut Option<usize>,
    ids: &mut HashSet<String>,
    out: &mut Vec<UnlabelledCompound>,
) -> Result<usize> {
    let mut rdr = reader(input);
    check_header(path, rdr.headers()?, &["id", "fingerprint"])?;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Ingestion {
                path: path.to_owned(),
                row,
                message: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        let id = rec[0].to_string();
        let fp = parse_fp(path, row, &rec[1], nbits)?;
        if !ids.insert(id.clone()) {
            return Err(Error::Ingestion {
                path: path.to_owned(),
                row,
                message: format!("duplicate id {id}"),
            });
        }
        out.push(UnlabelledCompound { id, fp, segment });
        rows += 1;
    }
    Ok(rows)
}

/// Load unlabelled segments (one file each, in order) and drop compounds
/// whose fingerprint matches a labelled compound.
pub fn load_unlabelled(
    paths: &[PathBuf],
    labelled: &LabelledSet,
) -> Result<(UnlabelledPool, UnlabelledReport)> {
    if paths.is_empty() {
        return Err(Error::domain("no unlabelled files given"));
    }
    let mut nbits = labelled.nbits();
    let mut ids = HashSet::new();
    let mut compounds = Vec::new();
    let mut report = UnlabelledReport::default();
    for (segment, path) in paths.iter().enumerate() {
        let file = std::fs::File::open(path)?;
        let rows = read_segment(file, path, segment, &mut nbits, &mut ids, &mut compounds)?;
        report.rows_read.push(rows);
    }
    let mut pool = UnlabelledPool {
        compounds,
        segment_count: paths.len(),
    };
    report.removed = pool.remove_labelled(labelled);
    log::info!(
        "loaded {} unlabelled compounds in {} segments, removed {} matching labelled fingerprints",
        pool.len(),
        pool.segment_count,
        report.removed
    );
    Ok((pool, report))
}

/// Standardize activities to sample mean 0 and sample sd 1 (n - 1
/// denominator). The cutoff is mapped with the same transform.
pub fn standardize_activities(set: &LabelledSet) -> Result<(LabelledSet, ActivityTransform)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::degenerate(format!(
            "standardization needs at least 2 compounds, got {n}"
        )));
    }
    let ys = set.activities();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::degenerate("activities have zero variance"));
    }
    let t = ActivityTransform { mean, sd };
    let compounds = set
        .compounds
        .iter()
        .map(|c| LabelledCompound {
            id: c.id.clone(),
            fp: c.fp.clone(),
            activity: t.apply(c.activity),
        })
        .collect();
    Ok((
        LabelledSet {
            compounds,
            l_min: t.apply(set.l_min),
            screened_count: set.screened_count,
        },
        t,
    ))
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn write_labelled<W: Write>(out: W, set: &LabelledSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "fingerprint", "activity"])?;
    for c in &set.compounds {
        w.write_record([c.id.as_str(), &c.fp.to_hex(), &fmt_f64(c.activity)])?;
    }
    w.flush()?;
    Ok(())
}

/// One unlabelled segment in the input format.
pub fn write_unlabelled_segment<W: Write>(out: W, pool: &UnlabelledPool, segment: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "fingerprint"])?;
    for c in pool.compounds.iter().filter(|c| c.segment == segment) {
        w.write_record([c.id.as_str(), &c.fp.to_hex()])?;
    }
    w.flush()?;
    Ok(())
}

/// Write each segment to `dir/segment_NN.csv`; returns the paths in order.
pub fn write_unlabelled_segments(dir: &Path, pool: &UnlabelledPool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..pool.segment_count)
        .map(|s| {
            let path = dir.join(format!("segment_{s:02}.csv"));
            write_unlabelled_segment(std::fs::File::create(&path)?, pool, s)?;
            Ok(path)
        })
        .collect()
}
