//! Sample shards in the `DPSG` container plus a JSON shard index.
//!
//! A shard holds `predictors` `[N, 27, H, W]` and `target_rain` `[N, H, W]`,
//! with timestamps, lead times and the threshold schema in the meta block.
//! Values are stored as f32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PredictorStack, Sample, NUM_CHANNELS};
use crate::container::{Container, NamedArray};
use crate::error::{Error, Result};
use crate::grid::{RainGrid, ThresholdSchema};

const SHARD_KIND: &str = "samples";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub height: usize,
    pub width: usize,
    pub thresholds: ThresholdSchema,
    pub shards: Vec<ShardEntry>,
}

impl DatasetIndex {
    pub fn total_samples(&self) -> usize {
        self.shards.iter().map(|s| s.samples).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct ShardMeta {
    kind: String,
    timestamps: Vec<String>,
    lead_hours: Vec<u32>,
    thresholds: ThresholdSchema,
}

fn header_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save_archive(samples: &[Sample], schema: &ThresholdSchema, path: &Path) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("cannot write an empty shard".into()))?;
    let (h, w) = (first.target_rain.height(), first.target_rain.width());
    let mut pred = Vec::with_capacity(samples.len() * NUM_CHANNELS * h * w);
    let mut rain = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.target_rain.height() != h || s.target_rain.width() != w {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{w}"),
                actual: format!("{}x{}", s.target_rain.height(), s.target_rain.width()),
            });
        }
        pred.extend(s.predictors.data().iter().map(|&v| v as f32));
        rain.extend(s.target_rain.values().iter().map(|&v| v as f32));
    }
    let meta = ShardMeta {
        kind: SHARD_KIND.into(),
        timestamps: samples.iter().map(|s| s.timestamp.clone()).collect(),
        lead_hours: samples.iter().map(|s| s.lead_hours).collect(),
        thresholds: schema.clone(),
    };
    let mut c = Container::new(serde_json::to_value(meta)?);
    c.push(NamedArray::new("predictors", vec![samples.len(), NUM_CHANNELS, h, w], pred));
    c.push(NamedArray::new("target_rain", vec![samples.len(), h, w], rain));
    c.write(path)
}

pub fn load_archive(path: &Path) -> Result<Vec<Sample>> {
    let c = Container::read(path)?;
    let meta: ShardMeta =
        serde_json::from_value(c.meta.clone()).map_err(|e| header_err(path, format!("shard meta: {e}")))?;
    if meta.kind != SHARD_KIND {
        return Err(header_err(path, format!("expected a sample shard, found {:?}", meta.kind)));
    }
    let pred = c
        .array("predictors")
        .ok_or_else(|| header_err(path, "missing array `predictors`"))?;
    let rain = c
        .array("target_rain")
        .ok_or_else(|| header_err(path, "missing array `target_rain`"))?;
    let (n, h, w) = match (pred.shape.as_slice(), rain.shape.as_slice()) {
        ([n, ch, h, w], [n2, h2, w2]) if n == n2 && h == h2 && w == w2 => {
            if *ch != NUM_CHANNELS {
                return Err(Error::ChannelMismatch {
                    expected: NUM_CHANNELS,
                    actual: *ch,
                });
            }
            (*n, *h, *w)
        }
        _ => {
            return Err(Error::ShapeMismatch {
                expected: "predictors [N,27,H,W] and target_rain [N,H,W]".into(),
                actual: format!("{:?} and {:?}", pred.shape, rain.shape),
            })
        }
    };
    if meta.timestamps.len() != n || meta.lead_hours.len() != n {
        return Err(header_err(
            path,
            format!(
                "{} samples but {} timestamps and {} lead times",
                n,
                meta.timestamps.len(),
                meta.lead_hours.len()
            ),
        ));
    }
    let px = h * w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p: Vec<f64> = pred.data[i * NUM_CHANNELS * px..(i + 1) * NUM_CHANNELS * px]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let r: Vec<f64> = rain.data[i * px..(i + 1) * px].iter().map(|&v| f64::from(v)).collect();
        let stack = PredictorStack::new(NUM_CHANNELS, h, w, p)?;
        let grid = RainGrid::new(h, w, r)?;
        out.push(Sample::new(
            stack,
            grid,
            &meta.thresholds,
            meta.timestamps[i].clone(),
            meta.lead_hours[i],
        )?);
    }
    Ok(out)
}

/// Writes `samples` as shards of at most `shard_size` samples plus `index.json`.
pub fn save_dataset(
    samples: &[Sample],
    schema: &ThresholdSchema,
    dir: &Path,
    shard_size: usize,
) -> Result<DatasetIndex> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("cannot write an empty dataset".into()))?;
    fs::create_dir_all(dir)?;
    let mut shards = Vec::new();
    for (k, chunk) in samples.chunks(shard_size.max(1)).enumerate() {
        let file = format!("shard-{k:04}.dpsg");
        save_archive(chunk, schema, &dir.join(&file))?;
        shards.push(ShardEntry {
            file,
            samples: chunk.len(),
        });
    }
    let index = DatasetIndex {
        schema_version: 1,
        height: first.target_rain.height(),
        width: first.target_rain.width(),
        thresholds: schema.clone(),
        shards,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(index)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<Sample>)> {
    let index_path: PathBuf = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| header_err(&index_path, format!("index: {e}")))?;
    if index.schema_version != 1 {
        return Err(Error::UnsupportedVersion(index.schema_version));
    }
    let mut samples = Vec::with_capacity(index.total_samples());
    for entry in &index.shards {
        let path = dir.join(&entry.file);
        let shard = load_archive(&path)?;
        if shard.len() != entry.samples {
            return Err(Error::Truncated {
                path,
                detail: format!("index lists {} samples, shard holds {}", entry.samples, shard.len()),
            });
        }
        samples.extend(shard);
    }
    Ok((index, samples))
}
