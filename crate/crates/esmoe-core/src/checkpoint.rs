//! Binary checkpoint format for classifiers.
//!
//! Layout: magic "ESMO", format version (u32 LE), routing mode and norm
//! flags, the block configuration, the class count, then every parameter
//! array in canonical order as (name length, name, rank, dims, little-endian
//! f32 payload). Loading is strict: wrong magic, unsupported version,
//! truncation, malformed arrays, and configuration mismatches each surface
//! as their own error variant, and a round trip reproduces every parameter
//! bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::block::{EsMoeConfig, ExpertBank, RoutingMode};
use crate::error::{Error, Result};
use crate::train::Classifier;

/// Magic bytes of the checkpoint container.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ESMO";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Expected shape of the buffer at a canonical ordinal.
fn buffer_dims(cfg: &EsMoeConfig, classes: usize, ord: usize) -> Vec<usize> {
    let e = cfg.experts;
    let hidden = cfg.gate_hidden();
    if ord < 4 * e {
        let k = cfg.kernels[ord / 4];
        match ord % 4 {
            0 => vec![cfg.c_in, k, k],
            1 => vec![cfg.c_in],
            2 => vec![cfg.c_out, cfg.c_in],
            _ => vec![cfg.c_out],
        }
    } else {
        match ord - 4 * e {
            0 => vec![hidden, cfg.c_in],
            1 => vec![hidden],
            2 => vec![e, hidden],
            3 => vec![e],
            4 => vec![classes, cfg.c_out],
            _ => vec![classes],
        }
    }
}

/// Save a classifier. Overwrites the target file.
pub fn save_checkpoint<P: AsRef<Path>>(path: P, model: &Classifier) -> Result<()> {
    model.validate()?;
    let cfg = &model.cfg;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let mode = match cfg.mode {
        RoutingMode::Training => 0u8,
        RoutingMode::Inference => 1u8,
    };
    out.write_all(&[mode, cfg.rms_norm as u8])?;
    for v in [
        cfg.experts as u32,
        cfg.top_k as u32,
        cfg.c_in as u32,
        cfg.c_out as u32,
        cfg.reduction_ratio as u32,
        model.classes as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&cfg.renorm_epsilon.to_le_bytes())?;
    for &k in &cfg.kernels {
        out.write_all(&(k as u32).to_le_bytes())?;
    }

    let count = model.buffer_count();
    out.write_all(&(count as u32).to_le_bytes())?;
    for ord in 0..count {
        let name = model.buffer_name(ord);
        let dims = buffer_dims(cfg, model.classes, ord);
        let data = model.buffer(ord);
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, context: &'static str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Truncated { context })?;
        Ok(buf)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8> {
        Ok(self.bytes(1, context)?[0])
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        let b = self.bytes(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64> {
        let b = self.bytes(8, context)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(&b);
        Ok(f64::from_le_bytes(arr))
    }
}

/// Load a classifier from a checkpoint file.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Classifier> {
    let mut r = Reader { inner: BufReader::new(File::open(path)?) };
    let magic = r.bytes(4, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { found: version });
    }
    let mode = match r.u8("routing mode")? {
        0 => RoutingMode::Training,
        1 => RoutingMode::Inference,
        other => {
            return Err(Error::MalformedCheckpoint {
                reason: format!("unknown routing mode tag {}", other),
            });
        }
    };
    let rms_norm = match r.u8("norm flag")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::MalformedCheckpoint {
                reason: format!("unknown norm flag {}", other),
            });
        }
    };
    let experts = r.u32("expert count")? as usize;
    let top_k = r.u32("top-k")? as usize;
    let c_in = r.u32("input channels")? as usize;
    let c_out = r.u32("output channels")? as usize;
    let reduction_ratio = r.u32("reduction ratio")? as usize;
    let classes = r.u32("class count")? as usize;
    let renorm_epsilon = r.f64("renormalization epsilon")?;
    let mut kernels = Vec::with_capacity(experts);
    for _ in 0..experts {
        kernels.push(r.u32("kernel size")? as usize);
    }
    let cfg = EsMoeConfig {
        experts,
        top_k,
        kernels,
        c_in,
        c_out,
        reduction_ratio,
        renorm_epsilon,
        mode,
        rms_norm,
    };
    cfg.validate().map_err(|e| Error::MalformedCheckpoint {
        reason: format!("stored configuration is invalid: {}", e),
    })?;
    if classes == 0 {
        return Err(Error::MalformedCheckpoint { reason: "class count is zero".into() });
    }

    let mut model = Classifier {
        cfg: cfg.clone(),
        classes,
        bank: ExpertBank::zeros(&cfg)?,
        head_w: vec![0.0; classes * cfg.c_out],
        head_b: vec![0.0; classes],
    };
    let count = r.u32("array count")? as usize;
    if count != model.buffer_count() {
        return Err(Error::MalformedCheckpoint {
            reason: format!("{} arrays stored, {} expected", count, model.buffer_count()),
        });
    }
    for ord in 0..count {
        let name_len = r.u32("array name length")? as usize;
        if name_len > 256 {
            return Err(Error::MalformedCheckpoint {
                reason: format!("array name length {} is implausible", name_len),
            });
        }
        let name_bytes = r.bytes(name_len, "array name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::MalformedCheckpoint {
            reason: "array name is not UTF-8".into(),
        })?;
        let expected_name = model.buffer_name(ord);
        if name != expected_name {
            return Err(Error::MalformedCheckpoint {
                reason: format!("array {} named {:?}, expected {:?}", ord, name, expected_name),
            });
        }
        let rank = r.u32("array rank")? as usize;
        let expected_dims = buffer_dims(&cfg, classes, ord);
        if rank != expected_dims.len() {
            return Err(Error::MalformedCheckpoint {
                reason: format!("array {:?} has rank {}, expected {}", name, rank, expected_dims.len()),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("array dimension")? as usize);
        }
        if dims != expected_dims {
            return Err(Error::MalformedCheckpoint {
                reason: format!("array {:?} dims {:?}, expected {:?}", name, dims, expected_dims),
            });
        }
        let len: usize = dims.iter().product();
        let raw = r.bytes(len * 4, "array payload")?;
        let buf = model.buffer_mut(ord);
        debug_assert_eq!(buf.len(), len);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            buf[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    let mut trailer = [0u8; 1];
    match r.inner.read(&mut trailer) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::MalformedCheckpoint {
                reason: "trailing bytes after the last array".into(),
            });
        }
        Err(e) => return Err(Error::Io(e)),
    }
    model.validate()?;
    Ok(model)
}

/// Load a checkpoint and require its block configuration (and class count,
/// when given) to match what the caller expects. The stored routing mode is
/// runtime state and is not compared.
pub fn load_checkpoint_expecting<P: AsRef<Path>>(
    path: P,
    expected: &EsMoeConfig,
    expected_classes: Option<usize>,
) -> Result<Classifier> {
    let model = load_checkpoint(path)?;
    let got = &model.cfg;
    let mismatches: Vec<String> = [
        (got.experts != expected.experts)
            .then(|| format!("experts {} vs {}", got.experts, expected.experts)),
        (got.top_k != expected.top_k)
            .then(|| format!("top_k {} vs {}", got.top_k, expected.top_k)),
        (got.kernels != expected.kernels)
            .then(|| format!("kernels {:?} vs {:?}", got.kernels, expected.kernels)),
        (got.c_in != expected.c_in).then(|| format!("c_in {} vs {}", got.c_in, expected.c_in)),
        (got.c_out != expected.c_out)
            .then(|| format!("c_out {} vs {}", got.c_out, expected.c_out)),
        (got.reduction_ratio != expected.reduction_ratio).then(|| {
            format!("reduction_ratio {} vs {}", got.reduction_ratio, expected.reduction_ratio)
        }),
        (got.renorm_epsilon != expected.renorm_epsilon).then(|| {
            format!("renorm_epsilon {} vs {}", got.renorm_epsilon, expected.renorm_epsilon)
        }),
        (got.rms_norm != expected.rms_norm)
            .then(|| format!("rms_norm {} vs {}", got.rms_norm, expected.rms_norm)),
        expected_classes.and_then(|c| {
            (model.classes != c).then(|| format!("classes {} vs {}", model.classes, c))
        }),
    ]
    .into_iter()
    .flatten()
    .collect();
    if !mismatches.is_empty() {
        return Err(Error::ConfigMismatch {
            reason: format!("checkpoint does not match the requested configuration: {}", mismatches.join(", ")),
        });
    }
    Ok(model)
}
