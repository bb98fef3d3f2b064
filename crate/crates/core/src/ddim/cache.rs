//! Per-step record of a source inversion, and its on-disk form.
//!
//! File layout: a UTF-8 header of `key=value` lines opened by [`CACHE_MAGIC`]
//! and closed by `end_header`, then for each record in ascending position
//! order two length-prefixed arrays (`u64` element count, then that many
//! little-endian `f32`): the latent, then the features (count 0 when the
//! features were not cached).

use std::borrow::Cow;
use std::io::{BufRead, Write};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::backends::{FeatureExtractor, PromptEmbedding};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Latent;

pub const CACHE_MAGIC: &str = "oig-trajectory-cache v1";
const END_HEADER: &str = "end_header";

/// Whether features are stored during inversion or recomputed on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CachePolicy {
    #[default]
    Eager,
    Recompute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub position: usize,
    pub latent: Latent,
    pub features: Option<Latent>,
}

/// Header fields read back from a cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheHeader {
    pub schedule_fingerprint: String,
    pub prompt_text: String,
    pub prompt_fingerprint: String,
    pub seed: u64,
    pub latent_shape: Vec<usize>,
    pub feature_shape: Option<Vec<usize>>,
    pub records: usize,
}

/// Source-side latents and features for grid positions `1..=T`.
///
/// Sealed once inversion completes; later writes are rejected.
#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    schedule_fingerprint: String,
    prompt_fingerprint: String,
    prompt: Option<PromptEmbedding>,
    prompt_text: String,
    policy: CachePolicy,
    records: Vec<CacheRecord>,
    sealed: bool,
}

/// SHA-256 over the prompt text and its embedding vector.
pub fn prompt_fingerprint(y: &PromptEmbedding) -> String {
    let mut h = Sha256::new();
    h.update(y.prompt_text.as_bytes());
    h.update([0u8]);
    for v in &y.vector {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl TrajectoryCache {
    pub fn new(schedule: &DiffusionSchedule, y_src: PromptEmbedding, policy: CachePolicy) -> Self {
        Self {
            schedule_fingerprint: schedule.fingerprint(),
            prompt_fingerprint: prompt_fingerprint(&y_src),
            prompt_text: y_src.prompt_text.clone(),
            prompt: Some(y_src),
            policy,
            records: Vec::new(),
            sealed: false,
        }
    }

    /// Append the record for the next position.
    pub fn push(&mut self, record: CacheRecord) -> Result<()> {
        if self.sealed {
            return Err(Error::Cache("cache is sealed".into()));
        }
        let expected = self.records.len() + 1;
        if record.position != expected {
            return Err(Error::Cache(format!(
                "expected record for position {expected}, got {}",
                record.position
            )));
        }
        if let Some(first) = self.records.first() {
            if first.latent.shape() != record.latent.shape() {
                return Err(Error::ShapeMismatch {
                    expected: first.latent.shape().to_vec(),
                    got: record.latent.shape().to_vec(),
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn schedule_fingerprint(&self) -> &str {
        &self.schedule_fingerprint
    }

    pub fn prompt_fingerprint(&self) -> &str {
        &self.prompt_fingerprint
    }

    pub fn prompt_text(&self) -> &str {
        &self.prompt_text
    }

    /// Source prompt, if known. Caches read from disk only know its fingerprint
    /// until [`TrajectoryCache::attach_prompt`] is called.
    pub fn prompt(&self) -> Option<&PromptEmbedding> {
        self.prompt.as_ref()
    }

    /// Supply the source prompt for a loaded cache; it must match the fingerprint.
    pub fn attach_prompt(&mut self, y_src: PromptEmbedding) -> Result<()> {
        let fp = prompt_fingerprint(&y_src);
        if fp != self.prompt_fingerprint {
            return Err(Error::Cache("source prompt does not match the cache".into()));
        }
        self.prompt = Some(y_src);
        Ok(())
    }

    /// Check the cache was produced under this schedule and source prompt.
    pub fn verify(&self, schedule: &DiffusionSchedule, y_src: &PromptEmbedding) -> Result<()> {
        if schedule.fingerprint() != self.schedule_fingerprint {
            return Err(Error::Cache("schedule fingerprint mismatch".into()));
        }
        if prompt_fingerprint(y_src) != self.prompt_fingerprint {
            return Err(Error::Cache("source prompt fingerprint mismatch".into()));
        }
        if self.records.len() != schedule.steps() {
            return Err(Error::Cache(format!(
                "cache has {} records, schedule has {} steps",
                self.records.len(),
                schedule.steps()
            )));
        }
        Ok(())
    }

    pub fn record(&self, position: usize) -> Result<&CacheRecord> {
        if position == 0 || position > self.records.len() {
            return Err(Error::Cache(format!("no record for position {position}")));
        }
        Ok(&self.records[position - 1])
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn latent(&self, position: usize) -> Result<&Latent> {
        Ok(&self.record(position)?.latent)
    }

    /// The inverted terminal latent `x_T`.
    pub fn terminal(&self) -> Result<&Latent> {
        self.latent(self.records.len())
    }

    /// Features at `position`, recomputed from the stored latent when absent.
    pub fn features(
        &self,
        position: usize,
        extractor: &dyn FeatureExtractor,
        schedule: &DiffusionSchedule,
    ) -> Result<Cow<'_, Latent>> {
        let rec = self.record(position)?;
        if let Some(f) = &rec.features {
            return Ok(Cow::Borrowed(f));
        }
        let y = self
            .prompt
            .as_ref()
            .ok_or_else(|| Error::Cache("source prompt unknown; cannot recompute features".into()))?;
        Ok(Cow::Owned(extractor.features(
            &rec.latent,
            schedule.timestep(position)?,
            y,
        )?))
    }

    fn header_text(&self, schedule: &DiffusionSchedule, seed: u64) -> Result<String> {
        if schedule.fingerprint() != self.schedule_fingerprint {
            return Err(Error::Cache("schedule fingerprint mismatch".into()));
        }
        let latent_shape = self
            .records
            .first()
            .map(|r| r.latent.shape().to_vec())
            .unwrap_or_default();
        let feature_shape = self
            .records
            .first()
            .and_then(|r| r.features.as_ref())
            .map(|f| f.shape().to_vec());
        let mut out = String::new();
        out.push_str(CACHE_MAGIC);
        out.push('\n');
        out.push_str(&schedule.to_kv());
        out.push_str(&kv::render([
            ("schedule.fingerprint", self.schedule_fingerprint.clone()),
            ("prompt.text", escape(&self.prompt_text)),
            ("prompt.fingerprint", self.prompt_fingerprint.clone()),
            ("seed", seed.to_string()),
            ("dtype", "f32".to_string()),
            ("latent_shape", kv::join(&latent_shape)),
            ("feature_shape", feature_shape.map(|s| kv::join(&s)).unwrap_or_default()),
            ("records", self.records.len().to_string()),
        ]));
        out.push_str(END_HEADER);
        out.push('\n');
        Ok(out)
    }

    /// Serialize; equal inputs give byte-identical output.
    pub fn write_to(&self, w: &mut dyn Write, schedule: &DiffusionSchedule, seed: u64) -> Result<()> {
        let io = |e| Error::Cache(format!("write failed: {e}"));
        w.write_all(self.header_text(schedule, seed)?.as_bytes()).map_err(io)?;
        for rec in &self.records {
            write_array(w, Some(&rec.latent)).map_err(io)?;
            write_array(w, rec.features.as_ref()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Parse a cache file. The returned cache is sealed and has no prompt attached.
    pub fn read_from(r: &mut dyn BufRead) -> Result<(Self, DiffusionSchedule, CacheHeader)> {
        let io = |e| Error::Cache(format!("read failed: {e}"));
        let mut first = String::new();
        r.read_line(&mut first).map_err(io)?;
        if first.trim_end() != CACHE_MAGIC {
            return Err(Error::Cache("not a trajectory cache file".into()));
        }
        let mut text = String::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(io)? == 0 {
                return Err(Error::Cache("truncated header".into()));
            }
            if line.trim_end() == END_HEADER {
                break;
            }
            text.push_str(&line);
        }
        let map = KvMap::parse(&text, "cache header")?;
        let schedule = DiffusionSchedule::from_kv(&map)?;
        let header = CacheHeader {
            schedule_fingerprint: map.require("schedule.fingerprint")?,
            prompt_text: unescape(map.get("prompt.text").unwrap_or("")),
            prompt_fingerprint: map.require("prompt.fingerprint")?,
            seed: map.require("seed")?,
            latent_shape: map.parse_list("latent_shape")?.unwrap_or_default(),
            feature_shape: map.parse_list("feature_shape")?.filter(|s: &Vec<usize>| !s.is_empty()),
            records: map.require("records")?,
        };
        if schedule.fingerprint() != header.schedule_fingerprint {
            return Err(Error::Cache("schedule block does not match its fingerprint".into()));
        }
        let dtype: String = map.require("dtype")?;
        if dtype != "f32" {
            return Err(Error::Cache(format!("unsupported dtype `{dtype}`")));
        }
        let latent_len: usize = header.latent_shape.iter().product();
        let mut records = Vec::with_capacity(header.records);
        for i in 0..header.records {
            let latent = read_array(r, &header.latent_shape)?
                .ok_or_else(|| Error::Cache(format!("record {} has no latent", i + 1)))?;
            if latent.len() != latent_len {
                return Err(Error::Cache("latent length disagrees with header".into()));
            }
            let features = match &header.feature_shape {
                Some(shape) => read_array(r, shape)?,
                None => {
                    if read_array(r, &[0])?.is_some() {
                        return Err(Error::Cache("unexpected feature data".into()));
                    }
                    None
                }
            };
            records.push(CacheRecord {
                position: i + 1,
                latent,
                features,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(Error::Cache("trailing bytes after last record".into()));
        }
        let policy = if header.feature_shape.is_some() {
            CachePolicy::Eager
        } else {
            CachePolicy::Recompute
        };
        let cache = Self {
            schedule_fingerprint: header.schedule_fingerprint.clone(),
            prompt_fingerprint: header.prompt_fingerprint.clone(),
            prompt: None,
            prompt_text: header.prompt_text.clone(),
            policy,
            records,
            sealed: true,
        };
        Ok((cache, schedule, header))
    }

    pub fn save(&self, path: &std::path::Path, schedule: &DiffusionSchedule, seed: u64) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, schedule, seed)?;
        crate::fsio::write_atomic(path, &buf)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, DiffusionSchedule, CacheHeader)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}

fn write_array(w: &mut dyn Write, a: Option<&Latent>) -> std::io::Result<()> {
    let n = a.map_or(0, |a| a.len()) as u64;
    w.write_all(&n.to_le_bytes())?;
    if let Some(a) = a {
        for v in a.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array(r: &mut dyn BufRead, shape: &[usize]) -> Result<Option<Latent>> {
    let io = |e| Error::Cache(format!("truncated record: {e}"));
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let n = u64::from_le_bytes(len) as usize;
    if n == 0 {
        return Ok(None);
    }
    if n != shape.iter().product::<usize>() {
        return Err(Error::Cache(format!(
            "array of {n} elements does not fit shape {shape:?}"
        )));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map(Some)
        .map_err(|e| Error::Cache(e.to_string()))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}
