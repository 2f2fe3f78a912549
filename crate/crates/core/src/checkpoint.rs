//! Binary checkpoint container: magic "SMUP", a format version, a profile
//! name, a JSON metadata blob, and named float64 arrays stored
//! little-endian behind a header of (name, shape, offset) entries with a
//! CRC32 over the payload. Array order is canonical (sorted by name), so a
//! save -> load -> save round trip is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{MetaTrainerConfig, TrainerState};
use crate::update_rule::{UpdateRuleConfig, UpdateRuleParams};

pub const MAGIC: &[u8; 4] = b"SMUP";
pub const FORMAT_VERSION: u32 = 1;

/// A loaded or to-be-saved checkpoint. `meta_json` is carried as an opaque
/// string so round trips preserve it byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub profile: String,
    pub meta_json: String,
    /// Named tensors; canonicalized to sorted-by-name order on save.
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut arrays: Vec<&(String, Tensor)> = ckpt.arrays.iter().collect();
    arrays.sort_by(|a, b| a.0.cmp(&b.0));
    for pair in arrays.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(bad(format!("duplicate array name {:?}", pair[0].0)));
        }
    }

    let mut payload: Vec<u8> = Vec::new();
    let mut offsets = Vec::with_capacity(arrays.len());
    for (_, t) in &arrays {
        offsets.push(payload.len() as u64);
        for &v in t.data() {
            payload.write_f64::<LittleEndian>(v)?;
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    write_string(&mut w, &ckpt.profile)?;
    w.write_u64::<LittleEndian>(ckpt.meta_json.len() as u64)?;
    w.write_all(ckpt.meta_json.as_bytes())?;
    w.write_u32::<LittleEndian>(arrays.len() as u32)?;
    for ((name, t), offset) in arrays.iter().zip(&offsets) {
        write_string(&mut w, name)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        w.write_u64::<LittleEndian>(*offset)?;
    }
    w.write_u64::<LittleEndian>(payload.len() as u64)?;
    w.write_all(&payload)?;
    w.write_u32::<LittleEndian>(crc)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {:?}", magic)));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", version)));
    }
    let profile = read_string(&mut r)?;
    let meta_len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
    let meta_json = String::from_utf8(meta).map_err(|_| bad("metadata is not utf-8"))?;

    let n_arrays = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let mut headers = Vec::with_capacity(n_arrays);
    let mut expected_offset = 0u64;
    for _ in 0..n_arrays {
        let name = read_string(&mut r)?;
        let rank = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        if rank > 4 {
            return Err(bad(format!("array {:?} has rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize);
        }
        let offset = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if offset != expected_offset {
            return Err(bad(format!("array {:?} has offset {}, expected {}", name, offset, expected_offset)));
        }
        expected_offset += 8 * shape.iter().product::<usize>() as u64;
        headers.push((name, shape));
    }
    for pair in headers.windows(2) {
        if pair[0].0 >= pair[1].0 {
            return Err(bad("array names are not in canonical sorted order"));
        }
    }

    let payload_len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if payload_len != expected_offset {
        return Err(bad(format!("payload length {} does not match headers ({})", payload_len, expected_offset)));
    }
    let mut payload = vec![0u8; payload_len as usize];
    r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
    let crc = r.read_u32::<LittleEndian>().map_err(|_| bad("missing checksum"))?;
    if crc != crc32fast::hash(&payload) {
        return Err(bad("payload checksum mismatch"));
    }

    let mut arrays = Vec::with_capacity(n_arrays);
    let mut cursor = &payload[..];
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cursor.read_f64::<LittleEndian>().map_err(|_| bad("truncated payload"))?);
        }
        arrays.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { profile, meta_json, arrays })
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    if len > 1 << 20 {
        return Err(bad(format!("unreasonable string length {}", len)));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
    String::from_utf8(buf).map_err(|_| bad("string is not utf-8"))
}

// Externally tagged on purpose: internal tagging buffers the content, which
// cannot represent the 128-bit counters inside serialized RNG state.
#[derive(serde::Serialize, serde::Deserialize)]
enum Meta {
    /// Standalone rule parameters.
    #[serde(rename = "rule_params")]
    RuleParams { rule: UpdateRuleConfig },
    /// A full mid-training snapshot; the tensors in the array section
    /// duplicate `state.theta` for consumers that only need the rule.
    #[serde(rename = "train_state")]
    TrainState { cfg: MetaTrainerConfig, state: TrainerState },
}

/// Save rule parameters alone (e.g. the final result of a training run).
pub fn save_rule_params(
    path: &Path,
    profile: &str,
    theta: &UpdateRuleParams,
) -> Result<()> {
    let meta = Meta::RuleParams { rule: theta.cfg };
    save_checkpoint(
        path,
        &Checkpoint {
            profile: profile.to_string(),
            meta_json: serde_json::to_string(&meta)
                .map_err(|e| bad(format!("metadata encoding: {}", e)))?,
            arrays: theta.named().iter().map(|(n, t)| (n.clone(), (*t).clone())).collect(),
        },
    )
}

/// Save a full training snapshot (resumable).
pub fn save_train_state(
    path: &Path,
    profile: &str,
    cfg: &MetaTrainerConfig,
    state: &TrainerState,
) -> Result<()> {
    let arrays = state.theta.named().iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
    let meta = Meta::TrainState { cfg: cfg.clone(), state: state.clone() };
    save_checkpoint(
        path,
        &Checkpoint {
            profile: profile.to_string(),
            meta_json: serde_json::to_string(&meta)
                .map_err(|e| bad(format!("metadata encoding: {}", e)))?,
            arrays,
        },
    )
}

/// Load rule parameters from either checkpoint kind. The array section is
/// the source of truth; names and shapes must match the config exactly.
pub fn load_rule_params(path: &Path) -> Result<(String, UpdateRuleParams)> {
    let ckpt = load_checkpoint(path)?;
    let meta: Meta = serde_json::from_str(&ckpt.meta_json)
        .map_err(|e| bad(format!("metadata decoding: {}", e)))?;
    let rule = match meta {
        Meta::RuleParams { rule } => rule,
        Meta::TrainState { cfg, .. } => cfg.rule,
    };
    let mut theta = UpdateRuleParams::init(&rule, 0)?;
    let names: Vec<String> = theta.named().iter().map(|(n, _)| n.clone()).collect();
    let shapes: Vec<Vec<usize>> =
        theta.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut slots = theta.tensors_mut();
    for ((name, shape), slot) in names.iter().zip(&shapes).zip(slots.iter_mut()) {
        let found = ckpt
            .array(name)
            .ok_or_else(|| bad(format!("checkpoint is missing array {:?}", name)))?;
        if found.shape() != &shape[..] {
            return Err(bad(format!(
                "array {:?} has shape {:?}, config wants {:?}",
                name,
                found.shape(),
                shape
            )));
        }
        **slot = found.clone();
    }
    Ok((ckpt.profile, theta))
}

/// Load a resumable training snapshot.
pub fn load_train_state(path: &Path) -> Result<(String, MetaTrainerConfig, TrainerState)> {
    let ckpt = load_checkpoint(path)?;
    let meta: Meta = serde_json::from_str(&ckpt.meta_json)
        .map_err(|e| bad(format!("metadata decoding: {}", e)))?;
    match meta {
        Meta::TrainState { cfg, state } => Ok((ckpt.profile, cfg, state)),
        Meta::RuleParams { .. } => {
            Err(bad("checkpoint holds rule parameters only, not a training snapshot"))
        }
    }
}
