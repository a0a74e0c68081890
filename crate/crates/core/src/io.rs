//! Run configuration, metrics stream, checkpoints, exports and dataset
//! files. Every binary format is little-endian; see `docs/formats.md`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::tensor::Real;
use crate::train::{EpochMetrics, TrainConfig, Trainer};
use crate::vit::ModelConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TPSKGCKP";

/// Every setting of a run in one flat document. All keys are required and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub seed: u64,
    pub lr0: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub mu: f64,
    pub mode: Mode,
    pub precision: u32,
    pub top_k: usize,
    pub pad: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter: usize,
    pub noise_std: f64,
    pub data_seed: u64,
}

impl RunConfig {
    /// The shipped toy setting for a given mode.
    pub fn toy(mode: Mode) -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 1,
            patch: 8,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4.0,
            classes: 8,
            seed: 0,
            lr0: 3e-3,
            momentum: 0.9,
            batch: 8,
            epochs: 30,
            mu: crate::knowledge::DEFAULT_MU,
            mode,
            precision: 32,
            top_k: 1,
            pad: 0,
            train_per_class: 64,
            test_per_class: 32,
            jitter: 0,
            noise_std: 1.2,
            data_seed: 1,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            channels: self.channels,
            patch: self.patch,
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            classes: self.classes,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            batch: self.batch,
            epochs: self.epochs,
            mu: self.mu,
            seed: self.seed,
            mode: self.mode,
            top_k: self.top_k,
            pad: self.pad,
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            image_h: self.image_h,
            image_w: self.image_w,
            channels: self.channels,
            glyph: self.patch,
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            jitter: self.jitter,
            noise_std: self.noise_std,
            seed: self.data_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::config("precision", "must be 32 or 64"));
        }
        self.model().validate()?;
        self.train().validate()?;
        self.dataset().validate()?;
        if self.top_k > self.model().num_patches() {
            return Err(Error::config("top_k", "exceeds the number of patches"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_error(&e, path))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn config_error(e: &serde_json::Error, path: &Path) -> Error {
    let msg = e.to_string();
    // serde names the offending key in backticks
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| path.display().to_string());
    Error::config(key, format!("{} ({})", msg, path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    #[serde(flatten)]
    pub metrics: EpochMetrics,
}

pub fn metrics_line(config_hash: &str, m: &EpochMetrics) -> String {
    let rec = MetricsRecord {
        config_hash: config_hash.to_string(),
        metrics: m.clone(),
    };
    serde_json::to_string(&rec).expect("metrics serialize")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Little-endian byte writer.
#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn reals<T: Real>(&mut self, v: &[T]) {
        self.u64(v.len() as u64);
        for &x in v {
            x.write_le(&mut self.buf);
        }
    }
}

/// Little-endian byte reader that reports truncation against a path.
struct Decoder<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.path, "invalid utf-8 string"))
    }
    fn reals<T: Real>(&mut self) -> Result<Vec<T>> {
        let n = self.u64()? as usize;
        let w = (T::BITS / 8) as usize;
        let raw = self.take(n.checked_mul(w).ok_or_else(|| Error::format(self.path, "bad length"))?)?;
        Ok(raw.chunks_exact(w).map(T::read_le).collect())
    }
}

/// Fixed leading fields of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub precision: u32,
    pub config_hash: String,
    pub epoch: u64,
    pub step: u64,
    pub config: RunConfig,
}

fn read_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(CheckpointHeader, Decoder<'a>)> {
    let mut d = Decoder { bytes, at: 0, path };
    if d.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = d.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint format {version}, this build reads {FORMAT_VERSION}"),
        ));
    }
    let precision = d.u32()?;
    let config_hash = d.str()?;
    let epoch = d.u64()?;
    let step = d.u64()?;
    let config_text = d.str()?;
    let config = RunConfig::from_json(&config_text, path)?;
    if config.hash() != config_hash {
        return Err(Error::format(
            path,
            "embedded config does not match the stored config hash",
        ));
    }
    if config.precision != precision {
        return Err(Error::format(path, "precision field disagrees with config"));
    }
    Ok((
        CheckpointHeader {
            version,
            precision,
            config_hash,
            epoch,
            step,
            config,
        },
        d,
    ))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(&bytes, path)?.0)
}

pub fn encode_checkpoint<T: Real>(cfg: &RunConfig, trainer: &Trainer<T>) -> Vec<u8> {
    let mut e = Encoder::default();
    e.buf.extend_from_slice(CHECKPOINT_MAGIC);
    e.u32(FORMAT_VERSION);
    e.u32(T::BITS);
    e.str(&cfg.hash());
    e.u64(trainer.epoch as u64);
    e.u64(trainer.step);
    e.str(&serde_json::to_string(cfg).expect("config serializes"));
    let store = &trainer.model.store;
    e.u32(store.len() as u32);
    for (name, t) in store.iter() {
        e.str(name);
        e.u32(t.shape().len() as u32);
        for &d in t.shape() {
            e.u64(d as u64);
        }
        e.reals(t.data());
    }
    e.u32(trainer.sgd.velocity().len() as u32);
    for v in trainer.sgd.velocity() {
        e.reals(v);
    }
    e.buf
}

pub fn save_checkpoint<T: Real>(path: &Path, cfg: &RunConfig, trainer: &Trainer<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(cfg, trainer))
}

/// Rebuilds the trainer, with parameters, momentum buffers and schedule
/// position restored.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(RunConfig, Trainer<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut d) = read_header(&bytes, path)?;
    if header.precision != T::BITS {
        return Err(Error::format(
            path,
            format!(
                "checkpoint holds {}-bit values, {}-bit requested",
                header.precision,
                T::BITS
            ),
        ));
    }
    let cfg = header.config;
    let mut model = Model::<T>::new(&cfg.model(), cfg.mode)?;
    let count = d.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::format(
            path,
            format!("{count} parameters stored, model has {}", model.store.len()),
        ));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = d.str()?;
        if name != model.store.name(id) {
            return Err(Error::format(
                path,
                format!("expected parameter `{}`, found `{name}`", model.store.name(id)),
            ));
        }
        let ndim = d.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| d.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = d.reals::<T>()?;
        let t = model.store.get_mut(id);
        if shape != t.shape() || data.len() != t.numel() {
            return Err(Error::format(path, format!("shape mismatch for `{name}`")));
        }
        t.data_mut().copy_from_slice(&data);
    }
    let nv = d.u32()? as usize;
    let velocity = (0..nv).map(|_| d.reals::<T>()).collect::<Result<Vec<_>>>()?;
    if d.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    let mut trainer = Trainer::new(model, cfg.train())?;
    trainer
        .sgd
        .set_velocity(velocity)
        .map_err(|e| Error::format(path, e.to_string()))?;
    trainer.epoch = header.epoch as usize;
    trainer.step = header.step;
    Ok((cfg, trainer))
}

/// Comment line that opens every exported CSV file.
pub fn csv_header(config_hash: &str) -> String {
    format!("# tpskg-format {FORMAT_VERSION} config-hash {config_hash}\n")
}

/// Comma-separated rows after the format header and optional extra
/// comment lines.
pub fn csv_text<V: std::fmt::Display>(config_hash: &str, comments: &[&str], rows: &[Vec<V>]) -> String {
    let mut out = csv_header(config_hash);
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Numeric rows of a CSV file, skipping `#` comment lines.
pub fn parse_csv(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| format!("`{c}`: {e}")))
                .collect()
        })
        .collect()
}

/// Binary graymap of a patch-grid map, each cell drawn as `scale × scale`
/// pixels, linearly rescaled so the minimum maps to 0 and the maximum to
/// 255. A constant map renders black.
pub fn pgm_bytes(values: &[f64], grid_h: usize, grid_w: usize, scale: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let level = |v: f64| -> u8 {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    };
    let (w, h) = (grid_w * scale, grid_h * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(level(values[(y / scale) * grid_w + x / scale]));
        }
    }
    out
}

/// Pixel values and size of a binary graymap.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err("not an 8-bit binary graymap".into());
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    let pixels = bytes[at + 1..].to_vec();
    if pixels.len() != w * h {
        return Err(format!("expected {} pixels, found {}", w * h, pixels.len()));
    }
    Ok((w, h, pixels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub file: String,
    pub count: usize,
    pub labels: Vec<usize>,
}

/// `manifest.json` of a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// `[H, W, C]`.
    pub shape: [usize; 3],
    pub seed: u64,
    pub spec: DatasetSpec,
    pub spec_hash: String,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

pub fn dataset_spec_hash(spec: &DatasetSpec) -> String {
    sha256_hex(serde_json::to_string(spec).expect("spec serializes").as_bytes())
}

/// Writes `train.bin`, `test.bin` (raw `f64` little-endian pixels) and
/// `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let split = |name: &str, data: &Dataset| -> Result<SplitManifest> {
        let mut bytes = Vec::with_capacity(data.len() * data.images.first().map_or(0, Vec::len) * 8);
        for img in &data.images {
            for &v in img {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let file = format!("{name}.bin");
        write_atomic(&dir.join(&file), &bytes)?;
        Ok(SplitManifest {
            file,
            count: data.len(),
            labels: data.labels.clone(),
        })
    };
    let manifest = DatasetManifest {
        format: "tpskg-dataset".into(),
        version: FORMAT_VERSION,
        dtype: "f64le".into(),
        shape: spec.image_shape(),
        seed: spec.seed,
        spec: spec.clone(),
        spec_hash: dataset_spec_hash(spec),
        train: split("train", train)?,
        test: split("test", test)?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset, Dataset)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != "tpskg-dataset" || manifest.version != FORMAT_VERSION {
        return Err(Error::format(&mpath, "unsupported dataset format or version"));
    }
    if manifest.dtype != "f64le" {
        return Err(Error::format(&mpath, format!("unsupported dtype {}", manifest.dtype)));
    }
    if manifest.spec_hash != dataset_spec_hash(&manifest.spec) {
        return Err(Error::format(&mpath, "spec hash does not match the spec"));
    }
    let numel: usize = manifest.shape.iter().product();
    let read = |s: &SplitManifest| -> Result<Dataset> {
        let path: PathBuf = dir.join(&s.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != s.count * numel * 8 || s.labels.len() != s.count {
            return Err(Error::format(&path, "size does not match the manifest"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Dataset {
            shape: manifest.shape,
            images: values.chunks(numel).map(<[f64]>::to_vec).collect(),
            labels: s.labels.clone(),
        })
    };
    let train = read(&manifest.train)?;
    let test = read(&manifest.test)?;
    Ok((manifest, train, test))
}
