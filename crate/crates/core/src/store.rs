//! Dataset model and the embedding CSV format.
//!
//! An embedding file starts with a metadata line
//!
//! ```text
//! #meta,backbone=<name>,q=<int>,p=<int>,level=<clip|footage>
//! ```
//!
//! followed by one row per clip (`runner_id,rp,clip_index,v0,...`) or per
//! footage (`runner_id,rp,v0,...`). Clip-level files are pooled into
//! footage vectors while loading, so a [`Dataset`] only ever holds one
//! vector per (runner, recording point).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Describes the backbone that produced the clip vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneMeta {
    pub name: String,
    /// Frames consumed per prediction (q).
    pub frames_per_clip: usize,
    /// Feature width (p).
    pub feature_dim: usize,
}

impl BackboneMeta {
    pub fn new(name: impl Into<String>, frames_per_clip: usize, feature_dim: usize) -> Result<Self> {
        let name = name.into();
        check_identifier(&name)?;
        if frames_per_clip == 0 || feature_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "backbone {name}: q and p must be positive (q={frames_per_clip}, p={feature_dim})"
            )));
        }
        Ok(Self {
            name,
            frames_per_clip,
            feature_dim,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEmbedding {
    pub runner_id: String,
    pub recording_point: u32,
    pub clip_index: usize,
    pub vector: Vec<f64>,
}

/// Clip-averaged vector for one runner at one recording point.
#[derive(Debug, Clone, PartialEq)]
pub struct FootageEmbedding {
    pub runner_id: String,
    pub recording_point: u32,
    pub vector: Vec<f64>,
}

/// A window of consecutive frames fed to the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipWindow {
    pub start: usize,
    pub len: usize,
}

impl ClipWindow {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Evenly spaced clip windows over a footage of `total_frames` frames.
///
/// Start `i` is `round(i * (total - q) / (n - 1))`, so the first window
/// begins at frame 0 and the last one ends at `total_frames`. Halves round
/// away from zero (`floor(x + 0.5)`), not to even as Python's `round` does;
/// producers of clip-level files must use the same rule.
pub fn clip_schedule(total_frames: usize, frames_per_clip: usize, num_clips: usize) -> Result<Vec<ClipWindow>> {
    if frames_per_clip == 0 || num_clips == 0 {
        return Err(Error::InvalidSchedule(format!(
            "frames_per_clip ({frames_per_clip}) and num_clips ({num_clips}) must be positive"
        )));
    }
    if total_frames < frames_per_clip {
        return Err(Error::InvalidSchedule(format!(
            "footage of {total_frames} frames cannot hold a {frames_per_clip}-frame clip"
        )));
    }
    if num_clips == 1 {
        return Ok(vec![ClipWindow {
            start: 0,
            len: frames_per_clip,
        }]);
    }
    let span = (total_frames - frames_per_clip) as f64;
    let steps = (num_clips - 1) as f64;
    Ok((0..num_clips)
        .map(|i| ClipWindow {
            start: (i as f64 * span / steps).round() as usize,
            len: frames_per_clip,
        })
        .collect())
}

/// Average-pools the clips of one (runner, recording point).
///
/// Clips are summed in canonical order (clip index, then values), so the
/// result is bit-identical under any permutation of `clips`.
pub fn pool_clips(clips: &[ClipEmbedding]) -> Result<FootageEmbedding> {
    let first = clips.first().ok_or(Error::EmptyInput)?;
    let dim = first.vector.len();
    let mut sum = vec![0.0; dim];
    for clip in clips {
        if clip.runner_id != first.runner_id || clip.recording_point != first.recording_point {
            return Err(Error::MixedIdentity(format!(
                "{}@RP{} vs {}@RP{}",
                first.runner_id, first.recording_point, clip.runner_id, clip.recording_point
            )));
        }
        if clip.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: clip.vector.len(),
            });
        }
    }
    let mut ordered: Vec<&ClipEmbedding> = clips.iter().collect();
    ordered.sort_by(|x, y| {
        x.clip_index.cmp(&y.clip_index).then_with(|| {
            x.vector
                .iter()
                .zip(&y.vector)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    for clip in ordered {
        for (s, v) in sum.iter_mut().zip(&clip.vector) {
            *s += v;
        }
    }
    let n = clips.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(FootageEmbedding {
        runner_id: first.runner_id.clone(),
        recording_point: first.recording_point,
        vector: sum,
    })
}

/// Footage-level dataset. Records are kept sorted by (runner_id, rp).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: BackboneMeta,
    records: Vec<FootageEmbedding>,
    identity_index: BTreeMap<String, BTreeSet<u32>>,
}

impl Dataset {
    pub fn new(meta: BackboneMeta, mut records: Vec<FootageEmbedding>) -> Result<Self> {
        let mut identity_index: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
        for rec in &records {
            check_identifier(&rec.runner_id)?;
            check_vector(&rec.vector, meta.feature_dim, &rec.runner_id, rec.recording_point)?;
            if !identity_index
                .entry(rec.runner_id.clone())
                .or_default()
                .insert(rec.recording_point)
            {
                return Err(Error::DuplicateRecord {
                    runner_id: rec.runner_id.clone(),
                    rp: rec.recording_point,
                });
            }
        }
        records.sort_by(|a, b| {
            (a.runner_id.as_str(), a.recording_point).cmp(&(b.runner_id.as_str(), b.recording_point))
        });
        Ok(Self {
            meta,
            records,
            identity_index,
        })
    }

    pub fn meta(&self) -> &BackboneMeta {
        &self.meta
    }

    pub fn records(&self) -> &[FootageEmbedding] {
        &self.records
    }

    pub fn identity_index(&self) -> &BTreeMap<String, BTreeSet<u32>> {
        &self.identity_index
    }

    pub fn num_identities(&self) -> usize {
        self.identity_index.len()
    }

    pub fn get(&self, runner_id: &str, rp: u32) -> Option<&FootageEmbedding> {
        self.records
            .binary_search_by(|r| (r.runner_id.as_str(), r.recording_point).cmp(&(runner_id, rp)))
            .ok()
            .map(|i| &self.records[i])
    }

    /// All footage recorded at `rp`, in runner order.
    pub fn at_rp(&self, rp: u32) -> impl Iterator<Item = &FootageEmbedding> {
        self.records.iter().filter(move |r| r.recording_point == rp)
    }

    pub fn present_at(&self, runner_id: &str, rp: u32) -> bool {
        self.identity_index
            .get(runner_id)
            .is_some_and(|rps| rps.contains(&rp))
    }
}

/// Clip-level dataset, as emitted by the extractor and the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipDataset {
    meta: BackboneMeta,
    clips: Vec<ClipEmbedding>,
}

impl ClipDataset {
    pub fn new(meta: BackboneMeta, clips: Vec<ClipEmbedding>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for clip in &clips {
            check_identifier(&clip.runner_id)?;
            check_vector(&clip.vector, meta.feature_dim, &clip.runner_id, clip.recording_point)?;
            if !seen.insert((clip.runner_id.as_str(), clip.recording_point, clip.clip_index)) {
                return Err(Error::DuplicateRecord {
                    runner_id: clip.runner_id.clone(),
                    rp: clip.recording_point,
                });
            }
        }
        Ok(Self { meta, clips })
    }

    pub fn meta(&self) -> &BackboneMeta {
        &self.meta
    }

    pub fn clips(&self) -> &[ClipEmbedding] {
        &self.clips
    }

    /// Groups clips by (runner, rp) and average-pools each group in clip order.
    pub fn pool(&self) -> Result<Dataset> {
        let mut groups: BTreeMap<(&str, u32), Vec<&ClipEmbedding>> = BTreeMap::new();
        for clip in &self.clips {
            groups
                .entry((clip.runner_id.as_str(), clip.recording_point))
                .or_default()
                .push(clip);
        }
        let mut records = Vec::with_capacity(groups.len());
        for (_, mut group) in groups {
            group.sort_by_key(|c| c.clip_index);
            let owned: Vec<ClipEmbedding> = group.into_iter().cloned().collect();
            records.push(pool_clips(&owned)?);
        }
        Dataset::new(self.meta.clone(), records)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    Clip,
    Footage,
}

fn check_identifier(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', '=', '\n', '\r']) {
        return Err(Error::InvalidIdentifier(id.to_string()));
    }
    Ok(())
}

fn check_vector(v: &[f64], dim: usize, runner_id: &str, rp: u32) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue(format!("{runner_id}@RP{rp} component {i} = {}", v[i])));
    }
    Ok(())
}

fn header_line(meta: &BackboneMeta, level: Level) -> String {
    let level = match level {
        Level::Clip => "clip",
        Level::Footage => "footage",
    };
    format!(
        "#meta,backbone={},q={},p={},level={}\n",
        meta.name, meta.frames_per_clip, meta.feature_dim, level
    )
}

fn push_values(line: &mut String, v: &[f64]) {
    for x in v {
        // Debug formatting is the shortest representation that parses back
        // to the same bits.
        let _ = write!(line, ",{x:?}");
    }
    line.push('\n');
}

fn render_footage(dataset: &Dataset) -> String {
    let mut out = header_line(&dataset.meta, Level::Footage);
    for rec in &dataset.records {
        let _ = write!(out, "{},{}", rec.runner_id, rec.recording_point);
        push_values(&mut out, &rec.vector);
    }
    out
}

fn render_clips(dataset: &ClipDataset) -> String {
    let mut out = header_line(&dataset.meta, Level::Clip);
    for clip in &dataset.clips {
        let _ = write!(out, "{},{},{}", clip.runner_id, clip.recording_point, clip.clip_index);
        push_values(&mut out, &clip.vector);
    }
    out
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Result<(BackboneMeta, Level)> {
    let mut fields = line.split(',');
    if fields.next() != Some("#meta") {
        return Err(parse_err(1, "header must start with '#meta'"));
    }
    let (mut name, mut q, mut p, mut level) = (None, None, None, None);
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("header field {field:?} is not key=value")))?;
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| parse_err(1, format!("{key}={v} is not a non-negative integer")))
        };
        match key {
            "backbone" => name = Some(value.to_string()),
            "q" => q = Some(int(value)?),
            "p" => p = Some(int(value)?),
            "level" => {
                level = Some(match value {
                    "clip" => Level::Clip,
                    "footage" => Level::Footage,
                    other => return Err(parse_err(1, format!("unknown level {other:?}"))),
                })
            }
            other => return Err(parse_err(1, format!("unknown header key {other:?}"))),
        }
    }
    let missing = |k: &str| parse_err(1, format!("header is missing {k}"));
    let meta = BackboneMeta::new(
        name.ok_or_else(|| missing("backbone"))?,
        q.ok_or_else(|| missing("q"))?,
        p.ok_or_else(|| missing("p"))?,
    )?;
    Ok((meta, level.ok_or_else(|| missing("level"))?))
}

struct ParsedFile {
    meta: BackboneMeta,
    level: Level,
    clips: Vec<ClipEmbedding>,
    footage: Vec<FootageEmbedding>,
}

fn parse_file(text: &str) -> Result<ParsedFile> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "file is empty"))?;
    let (meta, level) = parse_header(header.trim_end_matches('\r'))?;
    let key_cols = match level {
        Level::Clip => 3,
        Level::Footage => 2,
    };
    let mut clips = Vec::new();
    let mut footage = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < key_cols {
            return Err(parse_err(line_no, "row is missing key columns"));
        }
        let runner_id = cols[0].to_string();
        let rp = cols[1]
            .parse::<u32>()
            .map_err(|_| parse_err(line_no, format!("bad recording point {:?}", cols[1])))?;
        let values = cols[key_cols..]
            .iter()
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line_no, format!("bad number {c:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match level {
            Level::Clip => {
                let clip_index = cols[2]
                    .parse::<usize>()
                    .map_err(|_| parse_err(line_no, format!("bad clip index {:?}", cols[2])))?;
                clips.push(ClipEmbedding {
                    runner_id,
                    recording_point: rp,
                    clip_index,
                    vector: values,
                });
            }
            Level::Footage => footage.push(FootageEmbedding {
                runner_id,
                recording_point: rp,
                vector: values,
            }),
        }
    }
    Ok(ParsedFile {
        meta,
        level,
        clips,
        footage,
    })
}

/// Loads an embedding file of either level; clip files are pooled.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let parsed = parse_file(text)?;
    match parsed.level {
        Level::Footage => Dataset::new(parsed.meta, parsed.footage),
        Level::Clip => ClipDataset::new(parsed.meta, parsed.clips)?.pool(),
    }
}

/// Loads a clip-level file without pooling.
pub fn load_clip_dataset(path: impl AsRef<Path>) -> Result<ClipDataset> {
    let parsed = parse_file(&fs::read_to_string(path)?)?;
    if parsed.level != Level::Clip {
        return Err(parse_err(1, "expected level=clip"));
    }
    ClipDataset::new(parsed.meta, parsed.clips)
}

/// Writes a footage-level file.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_footage(dataset))?;
    Ok(())
}

pub fn save_clip_dataset(dataset: &ClipDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_clips(dataset))?;
    Ok(())
}
