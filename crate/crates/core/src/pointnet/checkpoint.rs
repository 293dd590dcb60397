//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes   "MIPNCKPT"
//! format_version   u32       currently 1
//! config_len       u32       length of the config block in bytes
//! config           UTF-8     `key=value` lines (see `ClassifierConfig` keys below)
//! n_params         u32
//!   name_len       u32
//!   name           UTF-8
//!   ndim           u32
//!   dims           u64 × ndim
//!   payload        f64 × product(dims), row-major
//! n_buffers        u32       batch-norm running statistics
//!   name_len       u32
//!   name           UTF-8
//!   channels       u64
//!   mean           f64 × channels
//!   var            f64 × channels
//! history_len      u64
//! history          f64 × history_len   per-epoch mean training loss
//! ```
//!
//! Config keys: `input_channels`, `use_input_tnet`, `use_feature_tnet`,
//! `encoder_widths`, `head_widths`, `dropout_probs`, `use_batch_norm`,
//! `ortho_reg_weight`, `tnet_encoder_widths`, `tnet_head_widths`. Lists are
//! comma-separated; floats use Rust's shortest round-trip formatting.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ClassifierConfig, ParamStore, TNetWidths, TrainedModel};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MIPNCKPT";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn config_text(c: &ClassifierConfig) -> String {
    format!(
        "input_channels={}\nuse_input_tnet={}\nuse_feature_tnet={}\nencoder_widths={}\nhead_widths={}\n\
         dropout_probs={}\nuse_batch_norm={}\northo_reg_weight={}\ntnet_encoder_widths={}\ntnet_head_widths={}\n",
        c.input_channels,
        c.use_input_tnet,
        c.use_feature_tnet,
        join(&c.encoder_widths),
        join(&c.head_widths),
        join(&c.dropout_probs),
        c.use_batch_norm,
        c.ortho_reg_weight,
        join(&c.tnet.encoder),
        join(&c.tnet.head),
    )
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn parse_config(text: &str) -> std::result::Result<ClassifierConfig, String> {
    let mut c = ClassifierConfig {
        tnet: TNetWidths {
            encoder: Vec::new(),
            head: Vec::new(),
        },
        ..ClassifierConfig::default()
    };
    let mut seen = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad config line {line:?}"))?;
        let bad = || format!("bad value for {k}: {v:?}");
        match k {
            "input_channels" => c.input_channels = v.parse().map_err(|_| bad())?,
            "use_input_tnet" => c.use_input_tnet = v.parse().map_err(|_| bad())?,
            "use_feature_tnet" => c.use_feature_tnet = v.parse().map_err(|_| bad())?,
            "encoder_widths" => c.encoder_widths = parse_list(v).ok_or_else(bad)?,
            "head_widths" => c.head_widths = parse_list(v).ok_or_else(bad)?,
            "dropout_probs" => c.dropout_probs = parse_list(v).ok_or_else(bad)?,
            "use_batch_norm" => c.use_batch_norm = v.parse().map_err(|_| bad())?,
            "ortho_reg_weight" => c.ortho_reg_weight = v.parse().map_err(|_| bad())?,
            "tnet_encoder_widths" => c.tnet.encoder = parse_list(v).ok_or_else(bad)?,
            "tnet_head_widths" => c.tnet.head = parse_list(v).ok_or_else(bad)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        seen += 1;
    }
    if seen != 10 {
        return Err(format!("expected 10 config keys, found {seen}"));
    }
    Ok(c)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a model into the checkpoint byte layout.
pub fn write_checkpoint<W: Write>(model: &TrainedModel, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_str(&mut buf, &config_text(&model.config));
    put_u32(&mut buf, model.params.tensors.len() as u32);
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_f64s(&mut buf, t.values());
    }
    put_u32(&mut buf, model.params.stats.len() as u32);
    for (name, s) in model.params.stat_names.iter().zip(&model.params.stats) {
        put_str(&mut buf, name);
        put_u64(&mut buf, s.mean.len() as u64);
        put_f64s(&mut buf, &s.mean);
        put_f64s(&mut buf, &s.var);
    }
    put_u64(&mut buf, model.training_history.len() as u64);
    put_f64s(&mut buf, &model.training_history);
    w.write_all(&buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflow".to_string())
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<(ClassifierConfig, ParamStore, Vec<f64>), String> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let config = parse_config(&c.string()?)?;
    let n_params = c.u32()? as usize;
    let mut names = Vec::with_capacity(n_params);
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        names.push(c.string()?);
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("length overflow")?;
        let vals = c.f64s(n)?;
        tensors.push(Tensor::new(dims, vals).map_err(|e| e.to_string())?);
    }
    let n_stats = c.u32()? as usize;
    let mut stat_names = Vec::with_capacity(n_stats);
    let mut stats = Vec::with_capacity(n_stats);
    for _ in 0..n_stats {
        stat_names.push(c.string()?);
        let ch = c.len()?;
        let mean = c.f64s(ch)?;
        let var = c.f64s(ch)?;
        stats.push(RunningStats { mean, var });
    }
    let hl = c.len()?;
    let history = c.f64s(hl)?;
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok((
        config,
        ParamStore {
            names,
            tensors,
            stat_names,
            stats,
        },
        history,
    ))
}

/// Reads a checkpoint from any reader; `origin` only labels errors.
pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
    let (config, params, history) = decode(&bytes).map_err(|reason| Error::Format {
        path: origin.to_path_buf(),
        reason,
    })?;
    TrainedModel::from_parts(config, params, history)
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointnet::build_model;

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            input_channels: 4,
            encoder_widths: vec![4, 6, 8],
            head_widths: vec![5, 3, 1],
            dropout_probs: vec![0.25, 0.1],
            tnet: TNetWidths {
                encoder: vec![4, 8],
                head: vec![4],
            },
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut m = build_model(&small(), 77).unwrap();
        m.training_history = vec![0.7, 0.5, 0.25];
        m.params.stats[0].mean[1] = 0.125;
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        assert_eq!(back.training_history, m.training_history);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupted_inputs_are_format_errors() {
        let m = build_model(&small(), 1).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(truncated, Path::new("t")), Err(Error::Format { .. })));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        let err = read_checkpoint(wrong_version.as_slice(), Path::new("v")).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }
}
