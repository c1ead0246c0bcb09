//! Request traces: per-slot request counts per file, optionally split per
//! user.
//!
//! Interchange is plain CSV: `slot,file_id,count` for aggregate traces and
//! `slot,user_id,file_id,count` for per-user traces. Rows are sorted by
//! slot and slots are 0-based and contiguous.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Request counts `d_f(t)` and, when allocated, `d_{k,f}(t)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandTrace {
    slots: usize,
    file_ids: Vec<u64>,
    /// `T x F`, row-major.
    aggregate: Vec<u64>,
    per_user: Option<PerUser>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PerUser {
    users: usize,
    /// `T x K x F`, row-major.
    counts: Vec<u64>,
}

impl DemandTrace {
    /// Aggregate-only trace from a row-major `T x F` count matrix. Files get
    /// ids `0..F`.
    pub fn from_aggregate(slots: usize, files: usize, aggregate: Vec<u64>) -> Result<Self> {
        if aggregate.len() != slots * files {
            return Err(Error::Shape(format!(
                "{} counts for a {slots}x{files} trace",
                aggregate.len()
            )));
        }
        Ok(Self {
            slots,
            file_ids: (0..files as u64).collect(),
            aggregate,
            per_user: None,
        })
    }

    /// Trace from a row-major `T x K x F` per-user tensor; the aggregate is
    /// the sum over users.
    pub fn from_per_user(
        slots: usize,
        users: usize,
        files: usize,
        counts: Vec<u64>,
    ) -> Result<Self> {
        if counts.len() != slots * users * files {
            return Err(Error::Shape(format!(
                "{} counts for a {slots}x{users}x{files} trace",
                counts.len()
            )));
        }
        let mut aggregate = vec![0; slots * files];
        for t in 0..slots {
            for k in 0..users {
                for f in 0..files {
                    aggregate[t * files + f] += counts[(t * users + k) * files + f];
                }
            }
        }
        Ok(Self {
            slots,
            file_ids: (0..files as u64).collect(),
            aggregate,
            per_user: Some(PerUser { users, counts }),
        })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn files(&self) -> usize {
        self.file_ids.len()
    }

    /// Number of users, when a per-user split exists.
    pub fn users(&self) -> Option<usize> {
        self.per_user.as_ref().map(|p| p.users)
    }

    /// Original identifier of each file column.
    pub fn file_ids(&self) -> &[u64] {
        &self.file_ids
    }

    pub fn aggregate(&self, slot: usize, file: usize) -> u64 {
        self.aggregate[slot * self.files() + file]
    }

    /// `d(t)` for all files.
    pub fn aggregate_row(&self, slot: usize) -> &[u64] {
        let f = self.files();
        &self.aggregate[slot * f..(slot + 1) * f]
    }

    /// The whole history of one file.
    pub fn file_series(&self, file: usize) -> Vec<u64> {
        (0..self.slots).map(|t| self.aggregate(t, file)).collect()
    }

    /// `d_{k,f}(t)` as a row-major `K x F` block, if allocated.
    pub fn per_user_slot(&self, slot: usize) -> Option<&[u64]> {
        self.per_user.as_ref().map(|p| {
            let block = p.users * self.files();
            &p.counts[slot * block..(slot + 1) * block]
        })
    }

    /// Per-user counts of one slot as reals, ready for the cost model.
    pub fn per_user_slot_f64(&self, slot: usize) -> Option<Vec<f64>> {
        self.per_user_slot(slot)
            .map(|s| s.iter().map(|&c| c as f64).collect())
    }

    /// Checks that per-user counts add up to the aggregate.
    pub fn check_conservation(&self) -> bool {
        let Some(p) = &self.per_user else { return true };
        let f = self.files();
        (0..self.slots).all(|t| {
            (0..f).all(|file| {
                let sum: u64 = (0..p.users)
                    .map(|k| p.counts[(t * p.users + k) * f + file])
                    .sum();
                sum == self.aggregate(t, file)
            })
        })
    }

    /// First `slots` slots only.
    pub fn truncate(&self, slots: usize) -> DemandTrace {
        let slots = slots.min(self.slots);
        let f = self.files();
        DemandTrace {
            slots,
            file_ids: self.file_ids.clone(),
            aggregate: self.aggregate[..slots * f].to_vec(),
            per_user: self.per_user.as_ref().map(|p| PerUser {
                users: p.users,
                counts: p.counts[..slots * p.users * f].to_vec(),
            }),
        }
    }
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    path: &Path,
    line: usize,
) -> Result<T> {
    let raw = record.get(idx).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("missing field `{name}`"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad `{name}` value {raw:?}"),
    })
}

fn check_header(reader: &mut csv::Reader<impl Read>, want: &[&str], path: &Path) -> Result<()> {
    let header = reader.headers()?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != want {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!(
                "expected header `{}`, found `{}`",
                want.join(","),
                got.join(",")
            ),
        });
    }
    Ok(())
}

/// Tracks slot contiguity while reading sorted rows.
struct SlotCursor {
    last: Option<usize>,
}

impl SlotCursor {
    fn advance(&mut self, slot: usize, path: &Path, line: usize) -> Result<()> {
        let ok = match self.last {
            None => slot == 0,
            Some(prev) => slot == prev || slot == prev + 1,
        };
        if !ok {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("slot {slot} breaks the 0-based contiguous, sorted slot sequence"),
            });
        }
        self.last = Some(slot);
        Ok(())
    }

    fn count(&self) -> usize {
        self.last.map_or(0, |s| s + 1)
    }
}

/// Reads an aggregate `slot,file_id,count` trace. Missing pairs are zero.
pub fn load_trace(path: impl AsRef<Path>) -> Result<DemandTrace> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    check_header(&mut reader, &["slot", "file_id", "count"], path)?;
    let mut cursor = SlotCursor { last: None };
    let mut cells: BTreeMap<(usize, u64), u64> = BTreeMap::new();
    let mut ids = std::collections::BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let slot: usize = parse_field(&record, 0, "slot", path, line)?;
        let file: u64 = parse_field(&record, 1, "file_id", path, line)?;
        let count: i64 = parse_field(&record, 2, "count", path, line)?;
        if count < 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("negative count {count}"),
            });
        }
        cursor.advance(slot, path, line)?;
        if cells.insert((slot, file), count as u64).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("duplicate row for slot {slot}, file {file}"),
            });
        }
        ids.insert(file);
    }
    let file_ids: Vec<u64> = ids.into_iter().collect();
    let column: HashMap<u64, usize> = file_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let slots = cursor.count();
    let mut aggregate = vec![0; slots * file_ids.len()];
    for ((slot, file), count) in cells {
        aggregate[slot * file_ids.len() + column[&file]] = count;
    }
    Ok(DemandTrace {
        slots,
        file_ids,
        aggregate,
        per_user: None,
    })
}

/// Writes the aggregate counts, one row per (slot, file) including zeros.
pub fn save_trace(trace: &DemandTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "slot,file_id,count")?;
    for t in 0..trace.slots() {
        for (f, id) in trace.file_ids.iter().enumerate() {
            writeln!(out, "{t},{id},{}", trace.aggregate(t, f))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `slot,user_id,file_id,count` rows for a per-user trace.
pub fn save_per_user_trace(trace: &DemandTrace, path: impl AsRef<Path>) -> Result<()> {
    let users = trace
        .users()
        .ok_or_else(|| Error::Input("trace has no per-user split".into()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "slot,user_id,file_id,count")?;
    for t in 0..trace.slots() {
        let block = trace.per_user_slot(t).unwrap_or_default();
        for k in 0..users {
            for (f, id) in trace.file_ids.iter().enumerate() {
                writeln!(out, "{t},{k},{id},{}", block[k * trace.files() + f])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a per-user `slot,user_id,file_id,count` trace. Users are
/// `0..=max user_id`; the aggregate is derived.
pub fn load_per_user_trace(path: impl AsRef<Path>) -> Result<DemandTrace> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    check_header(&mut reader, &["slot", "user_id", "file_id", "count"], path)?;
    let mut cursor = SlotCursor { last: None };
    let mut cells: BTreeMap<(usize, usize, u64), u64> = BTreeMap::new();
    let mut ids = std::collections::BTreeSet::new();
    let mut users = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let slot: usize = parse_field(&record, 0, "slot", path, line)?;
        let user: usize = parse_field(&record, 1, "user_id", path, line)?;
        let file: u64 = parse_field(&record, 2, "file_id", path, line)?;
        let count: i64 = parse_field(&record, 3, "count", path, line)?;
        if count < 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("negative count {count}"),
            });
        }
        cursor.advance(slot, path, line)?;
        if cells.insert((slot, user, file), count as u64).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("duplicate row for slot {slot}, user {user}, file {file}"),
            });
        }
        users = users.max(user + 1);
        ids.insert(file);
    }
    let file_ids: Vec<u64> = ids.into_iter().collect();
    let column: HashMap<u64, usize> = file_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let (slots, files) = (cursor.count(), file_ids.len());
    let mut counts = vec![0; slots * users * files];
    for ((slot, user, file), count) in cells {
        counts[(slot * users + user) * files + column[&file]] = count;
    }
    let mut trace = DemandTrace::from_per_user(slots, users, files, counts)?;
    trace.file_ids = file_ids;
    Ok(trace)
}

/// Keeps the `keep` files with the largest total request count. Ties go to
/// the smaller file id; kept files stay in their original column order.
pub fn top_f_filter(trace: &DemandTrace, keep: usize) -> Result<DemandTrace> {
    let files = trace.files();
    if keep > files {
        return Err(Error::Input(format!(
            "asked for {keep} files from a catalogue of {files}"
        )));
    }
    let totals: Vec<u64> = (0..files)
        .map(|f| trace.file_series(f).iter().sum())
        .collect();
    let mut order: Vec<usize> = (0..files).collect();
    order.sort_by(|&a, &b| {
        totals[b]
            .cmp(&totals[a])
            .then(trace.file_ids[a].cmp(&trace.file_ids[b]))
    });
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();

    let mut aggregate = Vec::with_capacity(trace.slots * keep);
    for t in 0..trace.slots {
        aggregate.extend(kept.iter().map(|&f| trace.aggregate(t, f)));
    }
    let per_user = trace.per_user.as_ref().map(|p| {
        let mut counts = Vec::with_capacity(trace.slots * p.users * keep);
        for t in 0..trace.slots {
            for k in 0..p.users {
                let base = (t * p.users + k) * files;
                counts.extend(kept.iter().map(|&f| p.counts[base + f]));
            }
        }
        PerUser {
            users: p.users,
            counts,
        }
    });
    Ok(DemandTrace {
        slots: trace.slots,
        file_ids: kept.iter().map(|&f| trace.file_ids[f]).collect(),
        aggregate,
        per_user,
    })
}

/// Splits every aggregate count uniformly at random over `users` users.
///
/// Each request picks its user independently, drawn here as an exact
/// multinomial via sequential binomials.
pub fn allocate_to_users(trace: &DemandTrace, users: usize, seed: u64) -> Result<DemandTrace> {
    if users == 0 {
        return Err(Error::Input("need at least one user".into()));
    }
    let files = trace.files();
    let mut rng = rng_from_seed(seed);
    let mut counts = vec![0u64; trace.slots * users * files];
    for t in 0..trace.slots {
        for f in 0..files {
            let mut remaining = trace.aggregate(t, f);
            for k in 0..users {
                if remaining == 0 {
                    break;
                }
                let share = if k + 1 == users {
                    remaining
                } else {
                    let p = 1.0 / (users - k) as f64;
                    Binomial::new(remaining, p)
                        .map_err(|e| Error::Parameter(e.to_string()))?
                        .sample(&mut rng)
                };
                counts[(t * users + k) * files + f] = share;
                remaining -= share;
            }
        }
    }
    Ok(DemandTrace {
        slots: trace.slots,
        file_ids: trace.file_ids.clone(),
        aggregate: trace.aggregate.clone(),
        per_user: Some(PerUser { users, counts }),
    })
}

/// Parameters of the synthetic request generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub files: usize,
    pub slots: usize,
    pub users: usize,
    /// Number of latent request-shape patterns files are grouped into.
    pub patterns: usize,
    /// Length of one cycle in slots (24 for a diurnal cycle of hourly slots).
    pub period: usize,
    /// Scales both per-slot sampling noise and slow popularity drift. At
    /// zero every file is exactly periodic.
    pub noise_level: f64,
    /// Peak request rate range of a file, drawn log-uniformly.
    pub min_peak: f64,
    pub max_peak: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            files: 50,
            slots: 600,
            users: 20,
            patterns: 4,
            period: 24,
            noise_level: 0.3,
            min_peak: 20.0,
            max_peak: 200.0,
        }
    }
}

/// Shape of pattern `p` at (fractional) cycle position `tau`, in (0, 1].
///
/// Each pattern peaks at its own time of day and has its own sharpness, so
/// windows of different patterns are well separated after max-normalization.
fn pattern_shape(p: usize, patterns: usize, period: usize, tau: f64) -> f64 {
    let peak = p as f64 * period as f64 / patterns as f64;
    let sharpness = 1.0 + (p % 3) as f64;
    let phase = 2.0 * std::f64::consts::PI * (tau - peak) / period as f64;
    (sharpness * (phase.cos() - 1.0)).exp().max(0.05)
}

/// Generates a reproducible periodic trace with latent pattern groups,
/// already split uniformly over `spec.users` users.
pub fn synth_trace(spec: &SynthSpec, seed: u64) -> Result<DemandTrace> {
    if spec.patterns == 0 || spec.patterns > spec.files {
        return Err(Error::Input(format!(
            "need 1 <= patterns <= files, got {} patterns for {} files",
            spec.patterns, spec.files
        )));
    }
    if spec.period == 0 || !(spec.min_peak > 0.0 && spec.max_peak >= spec.min_peak) {
        return Err(Error::Parameter(
            "period and peak range must be positive".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let files = spec.files;
    let peaks: Vec<f64> = (0..files)
        .map(|_| {
            let (lo, hi) = (spec.min_peak.ln(), spec.max_peak.ln());
            if hi > lo {
                rng.gen_range(lo..hi).exp()
            } else {
                spec.min_peak
            }
        })
        .collect();
    let jitter: Vec<f64> = (0..files).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut drift = vec![0.0f64; files];
    let mut aggregate = vec![0u64; spec.slots * files];
    for t in 0..spec.slots {
        for f in 0..files {
            if spec.noise_level > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                drift[f] = 0.98 * drift[f] + 0.1 * z;
            }
            let shape = pattern_shape(
                f % spec.patterns,
                spec.patterns,
                spec.period,
                t as f64 + jitter[f],
            );
            let rate = peaks[f] * shape * (spec.noise_level * drift[f]).exp();
            let noisy = if spec.noise_level > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                rate + spec.noise_level * rate.sqrt() * z
            } else {
                rate
            };
            aggregate[t * files + f] = noisy.max(0.0).round() as u64;
        }
    }
    let trace = DemandTrace::from_aggregate(spec.slots, files, aggregate)?;
    allocate_to_users(&trace, spec.users.max(1), rng.gen())
}

/// Pattern group of each file in a [`synth_trace`] output.
pub fn synth_pattern_of(file: usize, spec: &SynthSpec) -> usize {
    file % spec.patterns
}

/// Converts a dump of cumulative per-item counters (for example hourly view
/// counts of videos) into a per-slot request trace.
///
/// `records` are `(item_id, time, cumulative_count)`; time is bucketed into
/// slots of `slot_length` starting at the earliest observation, and requests
/// in a slot are the increase of the counter over that slot. Decreases
/// (counter resets) count as zero.
pub fn from_cumulative(records: &[(u64, i64, u64)], slot_length: i64) -> Result<DemandTrace> {
    if slot_length <= 0 {
        return Err(Error::Parameter("slot length must be positive".into()));
    }
    let Some(t0) = records.iter().map(|r| r.1).min() else {
        return DemandTrace::from_aggregate(0, 0, vec![]);
    };
    let mut by_item: BTreeMap<u64, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut slots = 0;
    for &(id, time, count) in records {
        let slot = ((time - t0) / slot_length) as usize;
        slots = slots.max(slot + 1);
        let last = by_item.entry(id).or_default().entry(slot).or_insert(0);
        *last = (*last).max(count);
    }
    let file_ids: Vec<u64> = by_item.keys().copied().collect();
    let files = file_ids.len();
    let mut aggregate = vec![0; slots * files];
    for (f, series) in by_item.values().enumerate() {
        let mut prev: Option<u64> = None;
        for (&slot, &count) in series {
            if let Some(p) = prev {
                aggregate[slot * files + f] = count.saturating_sub(p);
            }
            prev = Some(count);
        }
    }
    Ok(DemandTrace {
        slots,
        file_ids,
        aggregate,
        per_user: None,
    })
}

/// Reads a raw dump for [`from_cumulative`] from CSV, picking the id, time
/// and counter columns by header name.
pub fn load_cumulative_csv(
    path: impl AsRef<Path>,
    id_column: &str,
    time_column: &str,
    count_column: &str,
    slot_length: i64,
) -> Result<DemandTrace> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("no column named `{name}`"),
            })
    };
    let (ci, ct, cc) = (find(id_column)?, find(time_column)?, find(count_column)?);
    let mut ids: HashMap<String, u64> = HashMap::new();
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let raw_id = record.get(ci).unwrap_or_default().trim().to_string();
        let next = ids.len() as u64;
        let id = *ids.entry(raw_id).or_insert(next);
        let time: i64 = parse_field(&record, ct, time_column, path, line)?;
        let count: u64 = parse_field(&record, cc, count_column, path, line)?;
        records.push((id, time, count));
    }
    from_cumulative(&records, slot_length)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_dense_and_missing_pairs() {
        let f = write_tmp("slot,file_id,count\n0,7,3\n0,9,1\n1,9,4\n");
        let tr = load_trace(f.path()).unwrap();
        assert_eq!((tr.slots(), tr.files()), (2, 2));
        assert_eq!(tr.file_ids(), &[7, 9]);
        assert_eq!(tr.aggregate_row(0), &[3, 1]);
        assert_eq!(tr.aggregate_row(1), &[0, 4]);
    }

    #[test]
    fn load_empty_body() {
        let f = write_tmp("slot,file_id,count\n");
        let tr = load_trace(f.path()).unwrap();
        assert_eq!(tr.slots(), 0);
    }

    #[test]
    fn load_rejects_bad_rows() {
        let neg = write_tmp("slot,file_id,count\n0,1,2\n0,2,-1\n");
        match load_trace(neg.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let gap = write_tmp("slot,file_id,count\n0,1,2\n2,1,2\n");
        assert!(matches!(
            load_trace(gap.path()),
            Err(Error::Parse { line: 3, .. })
        ));
        let junk = write_tmp("slot,file_id,count\n0,x,2\n");
        assert!(matches!(
            load_trace(junk.path()),
            Err(Error::Parse { line: 2, .. })
        ));
        let header = write_tmp("t,f,c\n0,1,2\n");
        assert!(matches!(
            load_trace(header.path()),
            Err(Error::Parse { line: 1, .. })
        ));
        let dup = write_tmp("slot,file_id,count\n0,1,2\n0,1,3\n");
        assert!(load_trace(dup.path()).is_err());
    }

    #[test]
    fn full_sized_csv() {
        let tr =
            DemandTrace::from_aggregate(600, 50, (0..30_000).map(|i| i % 17).collect()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_trace(&tr, f.path()).unwrap();
        let back = load_trace(f.path()).unwrap();
        assert_eq!((back.slots(), back.files()), (600, 50));
        assert_eq!(back, tr);
    }

    #[test]
    fn per_user_csv_round_trip() {
        let tr = allocate_to_users(
            &DemandTrace::from_aggregate(3, 2, vec![5, 0, 2, 7, 1, 1]).unwrap(),
            3,
            9,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_per_user_trace(&tr, f.path()).unwrap();
        assert_eq!(load_per_user_trace(f.path()).unwrap(), tr);
    }

    #[test]
    fn top_f_ties_prefer_lower_ids() {
        let tr = DemandTrace::from_aggregate(1, 4, vec![5, 9, 9, 1]).unwrap();
        let top = top_f_filter(&tr, 2).unwrap();
        assert_eq!(top.file_ids(), &[1, 2]);
        assert_eq!(top_f_filter(&tr, 4).unwrap(), tr);
        assert_eq!(top_f_filter(&tr, 1).unwrap().file_ids(), &[1]);
        assert!(top_f_filter(&tr, 5).is_err());
    }

    #[test]
    fn allocation_examples() {
        let tr = DemandTrace::from_aggregate(1, 1, vec![10]).unwrap();
        let one = allocate_to_users(&tr, 1, 0).unwrap();
        assert_eq!(one.per_user_slot(0).unwrap(), &[10]);
        assert!(allocate_to_users(&tr, 0, 0).is_err());

        // Binomial(10000, 1/2) has sd 50; [4000, 6000] is 20 sd wide.
        let big = DemandTrace::from_aggregate(1, 1, vec![10_000]).unwrap();
        for seed in 0..20 {
            let split = allocate_to_users(&big, 2, seed).unwrap();
            let share = split.per_user_slot(0).unwrap()[0];
            assert!((4000..=6000).contains(&share), "share {share}");
            assert!(split.check_conservation());
        }
    }

    #[test]
    fn synth_is_periodic_without_noise() {
        let spec = SynthSpec {
            files: 8,
            slots: 96,
            users: 3,
            noise_level: 0.0,
            ..SynthSpec::default()
        };
        let tr = synth_trace(&spec, 1).unwrap();
        for f in 0..8 {
            let s = tr.file_series(f);
            for t in 24..96 {
                assert_eq!(s[t], s[t - 24]);
            }
        }
        assert!(tr.check_conservation());
    }

    #[test]
    fn synth_depends_on_seed() {
        let spec = SynthSpec {
            files: 8,
            slots: 48,
            ..SynthSpec::default()
        };
        assert_ne!(
            synth_trace(&spec, 1).unwrap(),
            synth_trace(&spec, 2).unwrap()
        );
        assert_eq!(
            synth_trace(&spec, 1).unwrap(),
            synth_trace(&spec, 1).unwrap()
        );
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn synth_pattern_groups_are_correlated() {
        let spec = SynthSpec {
            noise_level: 0.1,
            ..SynthSpec::default()
        };
        let tr = synth_trace(&spec, 5).unwrap();
        // Correlation of max-normalized request windows (one period long,
        // concatenated over the trace), computed per pair.
        let normalized = |f: usize| -> Vec<f64> {
            let s = tr.file_series(f);
            s.chunks(spec.period)
                .flat_map(|w| {
                    let m = *w.iter().max().unwrap_or(&1) as f64;
                    w.iter().map(move |&c| c as f64 / m.max(1.0))
                })
                .collect()
        };
        let mut worst_same: f64 = 1.0;
        let mut best_other: f64 = -1.0;
        for a in 0..spec.files {
            for b in a + 1..spec.files {
                let r = pearson(&normalized(a), &normalized(b));
                if synth_pattern_of(a, &spec) == synth_pattern_of(b, &spec) {
                    worst_same = worst_same.min(r);
                } else {
                    best_other = best_other.max(r);
                }
            }
        }
        assert!(worst_same > 0.8, "same-pattern correlation {worst_same}");
        assert!(best_other < worst_same);
    }

    #[test]
    fn cumulative_conversion() {
        let records = [
            (1, 0, 10),
            (1, 3600, 25),
            (1, 7200, 26),
            (2, 3600, 5),
            (2, 7200, 9),
        ];
        let tr = from_cumulative(&records, 3600).unwrap();
        assert_eq!((tr.slots(), tr.files()), (3, 2));
        assert_eq!(tr.file_series(0), vec![0, 15, 1]);
        assert_eq!(tr.file_series(1), vec![0, 0, 4]);
    }
}
