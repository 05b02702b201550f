// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-contained checkpoints and the on-disk run directory.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RCECKPT\0"
//! version  u32
//! count    u32      number of sections
//! section  × count:
//!   name_len u32, name (UTF-8)
//!   len      u64, payload (bincode; floats as raw 64-bit LE)
//!   digest   32 bytes, SHA-256 of the payload
//! ```
//!
//! A JSON manifest next to each file records the step, the section digests
//! and the SHA-256 of the whole file.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamSet;
use crate::base_model::ToyBaseModel;
use crate::error::{Error, Result};
use crate::evolution::{CoActivation, GeneratorNet};
use crate::numerics::Matrix;
use crate::optim::AdamW;
use crate::pipeline::RunConfig;
use crate::concepts::ConceptLibrary;
use crate::training::{Observer, StepRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"RCECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub base: ToyBaseModel,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub step: u64,
    pub n_concepts: usize,
    pub base_param_hash: String,
    pub file_sha256: String,
    pub sections: Vec<SectionInfo>,
}

#[derive(Serialize, Deserialize)]
struct Scalars {
    step: u64,
    lambda_kl: f64,
    events_emitted: u64,
}

type NamedMatrices = Vec<(String, Matrix)>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn encode_section<T: Serialize>(name: &str, value: &T) -> Result<(String, Vec<u8>)> {
    let bytes = bincode::serialize(value).map_err(|e| Error::integrity(name, e.to_string()))?;
    Ok((name.to_string(), bytes))
}

fn base_params(base: &ToyBaseModel) -> NamedMatrices {
    base.params().iter().map(|(n, p)| (n.clone(), p.value.clone())).collect()
}

/// Serializes named payloads into the container format.
pub fn write_container(sections: &[(String, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
        out.extend_from_slice(&Sha256::digest(payload));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::integrity(section, "file truncated")),
        }
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a container, returning its sections in file order.
pub fn read_container(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "header")? != MAGIC {
        return Err(Error::integrity("header", "bad magic bytes"));
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("header")?;
    let mut sections = Vec::with_capacity(count as usize);
    for i in 0..count {
        let placeholder = format!("#{i}");
        let name_len = r.u32(&placeholder)? as usize;
        let name = String::from_utf8(r.take(name_len, &placeholder)?.to_vec())
            .map_err(|_| Error::integrity(&placeholder, "section name is not UTF-8"))?;
        let len = usize::try_from(r.u64(&name)?).map_err(|_| Error::integrity(&name, "length overflow"))?;
        let payload = r.take(len, &name)?.to_vec();
        let digest = r.take(32, &name)?;
        if Sha256::digest(&payload).as_slice() != digest {
            return Err(Error::integrity(&name, "payload digest mismatch"));
        }
        sections.push((name, payload));
    }
    if r.at != bytes.len() {
        return Err(Error::integrity("trailer", "unexpected bytes after the last section"));
    }
    Ok(sections)
}

fn section<T: DeserializeOwned>(sections: &[(String, Vec<u8>)], name: &str) -> Result<T> {
    let (_, payload) = sections
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| Error::integrity(name, "section missing"))?;
    bincode::deserialize(payload).map_err(|e| Error::integrity(name, e.to_string()))
}

fn check_shape(section: &str, what: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) || m.data().len() != rows * cols {
        return Err(Error::integrity(
            section,
            format!("{what} has shape {:?}, expected ({rows}, {cols})", m.shape()),
        ));
    }
    Ok(())
}

fn rebuild_base(config: &RunConfig, named: NamedMatrices) -> Result<ToyBaseModel> {
    let mut params = ParamSet::new();
    for (name, m) in named {
        if m.data().len() != m.rows() * m.cols() {
            return Err(Error::integrity("base", format!("`{name}` payload length mismatch")));
        }
        params.insert(name, m, false);
    }
    ToyBaseModel::from_parts(config.model.clone(), params, true).map_err(|e| Error::integrity("base", e.to_string()))
}

fn validate_library(lib: &ConceptLibrary) -> Result<()> {
    let (d, r, h) = (lib.config.d_model, lib.config.rank, lib.config.gate_hidden);
    for c in &lib.concepts {
        check_shape("library", &format!("basis {}", c.id), &c.basis, d, r)?;
        let head = lib
            .gate
            .heads
            .get(&c.id)
            .ok_or_else(|| Error::integrity("library", format!("no gate head for concept {}", c.id)))?;
        check_shape("library", &format!("head {}", c.id), head, 1, h)?;
    }
    if lib.gate.heads.len() != lib.concepts.len() {
        return Err(Error::integrity("library", "gate heads and concepts disagree"));
    }
    check_shape("library", "gate w1", &lib.gate.w1, d, h)?;
    check_shape("library", "gate w2", &lib.gate.w2, h, h)?;
    Ok(())
}

fn checkpoint_sections(ckpt: &Checkpoint) -> Result<Vec<(String, Vec<u8>)>> {
    let s = &ckpt.state;
    Ok(vec![
        encode_section("kind", &"checkpoint".to_string())?,
        encode_section("config", &ckpt.config)?,
        encode_section("base", &base_params(&ckpt.base))?,
        encode_section("library", &s.library)?,
        encode_section("generator", &s.generator)?,
        encode_section("optimizer", &s.optimizer)?,
        encode_section("coactivation", &s.coact)?,
        encode_section(
            "scalars",
            &Scalars {
                step: s.step,
                lambda_kl: s.lambda_kl,
                events_emitted: s.events_emitted,
            },
        )?,
    ])
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    Ok(write_container(&checkpoint_sections(ckpt)?))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let sections = read_container(bytes)?;
    let kind: String = section(&sections, "kind")?;
    if kind != "checkpoint" {
        return Err(Error::integrity("kind", format!("expected a checkpoint, found `{kind}`")));
    }
    let config: RunConfig = section(&sections, "config")?;
    let base = rebuild_base(&config, section(&sections, "base")?)?;
    let library: ConceptLibrary = section(&sections, "library")?;
    validate_library(&library)?;
    let generator: GeneratorNet = section(&sections, "generator")?;
    let optimizer: AdamW = section(&sections, "optimizer")?;
    let coact: CoActivation = section(&sections, "coactivation")?;
    let scalars: Scalars = section(&sections, "scalars")?;
    Ok(Checkpoint {
        config,
        base,
        state: TrainState {
            step: scalars.step,
            library,
            generator,
            optimizer,
            lambda_kl: scalars.lambda_kl,
            coact,
            events_emitted: scalars.events_emitted,
        },
    })
}

fn manifest_for(kind: &str, sections: &[(String, Vec<u8>)], file: &[u8], step: u64, n: usize, base: &ToyBaseModel) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        step,
        n_concepts: n,
        base_param_hash: base.param_hash(),
        file_sha256: sha256_hex(file),
        sections: sections
            .iter()
            .map(|(name, p)| SectionInfo {
                name: name.clone(),
                bytes: p.len() as u64,
                sha256: sha256_hex(p),
            })
            .collect(),
    }
}

/// `<path>.json` next to the binary file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_with_manifest(path: &Path, bytes: &[u8], manifest: &Manifest) -> Result<()> {
    write_atomic(path, bytes)?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&manifest_path(path), json.as_bytes())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Manifest> {
    let sections = checkpoint_sections(ckpt)?;
    let bytes = write_container(&sections);
    let m = manifest_for("checkpoint", &sections, &bytes, ckpt.state.step, ckpt.state.library.len(), &ckpt.base);
    write_with_manifest(path, &bytes, &m)?;
    Ok(m)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Frozen base model plus the configuration that produced it.
pub fn save_base(config: &RunConfig, base: &ToyBaseModel, path: &Path) -> Result<Manifest> {
    let sections = vec![
        encode_section("kind", &"base".to_string())?,
        encode_section("config", config)?,
        encode_section("base", &base_params(base))?,
    ];
    let bytes = write_container(&sections);
    let m = manifest_for("base", &sections, &bytes, 0, 0, base);
    write_with_manifest(path, &bytes, &m)?;
    Ok(m)
}

pub fn load_base(path: &Path) -> Result<(RunConfig, ToyBaseModel)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sections = read_container(&bytes)?;
    let config: RunConfig = section(&sections, "config")?;
    let base = rebuild_base(&config, section(&sections, "base")?)?;
    Ok((config, base))
}

/// Recomputes the file hash and compares it with the manifest.
pub fn verify_manifest(path: &Path) -> Result<Manifest> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::integrity("manifest", e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if sha256_hex(&bytes) != m.file_sha256 {
        return Err(Error::integrity("manifest", "file hash differs from manifest"));
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// `config.echo`, `metrics.jsonl`, `events.jsonl`, `checkpoints/`, `reports/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for d in [root.to_path_buf(), root.join("checkpoints"), root.join("reports")] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.echo")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.ckpt"))
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        write_atomic(&self.config_echo(), config.to_toml()?.as_bytes())
    }

    /// Newest checkpoint by step, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        let mut best: Option<PathBuf> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.extension().is_some_and(|x| x == "ckpt") && best.as_ref().is_none_or(|b| p > *b) {
                best = Some(p);
            }
        }
        Ok(best)
    }

    /// Drops log lines written after `state` (metrics of later steps, events
    /// beyond its offset) so a resumed run appends cleanly.
    pub fn truncate_logs(&self, state: &TrainState) -> Result<()> {
        let keep_metrics = |line: &str| {
            serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| s < state.step)
        };
        filter_lines(&self.metrics(), |_, l| keep_metrics(l))?;
        filter_lines(&self.events(), |i, _| (i as u64) < state.events_emitted)
    }
}

fn filter_lines(path: &Path, keep: impl Fn(usize, &str) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if keep(i, &line) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Observer that appends logs and writes periodic checkpoints.
pub struct RunWriter<'a> {
    pub dir: RunDir,
    pub base: &'a ToyBaseModel,
    pub config: RunConfig,
    metrics: File,
    events: File,
}

impl<'a> RunWriter<'a> {
    pub fn open(dir: RunDir, base: &'a ToyBaseModel, config: RunConfig) -> Result<Self> {
        let open = |p: PathBuf| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))
        };
        let metrics = open(dir.metrics())?;
        let events = open(dir.events())?;
        Ok(Self {
            dir,
            base,
            config,
            metrics,
            events,
        })
    }

    pub fn save(&self, state: &TrainState) -> Result<Manifest> {
        let ckpt = Checkpoint {
            config: self.config.clone(),
            base: self.base.clone(),
            state: state.clone(),
        };
        save_checkpoint(&ckpt, &self.dir.checkpoint(state.step))
    }
}

impl Observer for RunWriter<'_> {
    fn on_step(&mut self, record: &StepRecord, state: &TrainState, config: &TrainConfig) -> Result<()> {
        let mp = self.dir.metrics();
        let line = serde_json::to_string(&record.metrics).expect("metrics serialize");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&mp, e))?;
        let ep = self.dir.events();
        for e in &record.events {
            let line = serde_json::to_string(e).expect("events serialize");
            writeln!(self.events, "{line}").map_err(|e| Error::io(&ep, e))?;
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            self.metrics.flush().map_err(|e| Error::io(&mp, e))?;
            self.events.flush().map_err(|e| Error::io(&ep, e))?;
            self.save(state)?;
        }
        Ok(())
    }
}
