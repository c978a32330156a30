//! Binary checkpoints: model spec, parameters, optimizer moments, and
//! training progress in one deterministic little-endian file.
//!
//! The writer visits parameters in construction order and optimizer entries
//! in sorted-name order, so saving the same state twice yields bit-identical
//! files — the file hash doubles as a fingerprint of the training state.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FusionMode, ModelSpec, SegModel};
use crate::nn::optim::{AdamW, Moments};
use crate::nn::Module;
use crate::rng;

const MAGIC: &[u8; 8] = b"AVSGCKP1";

const FLAG_RESIDUAL: u8 = 1;
const FLAG_PASSTHROUGH: u8 = 2;
const FLAG_FUSION_PLUS: u8 = 4;

/// Everything a training run needs to persist.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    /// Last completed epoch (0 before any training).
    pub epoch: u32,
    /// Best validation score seen so far (NaN-free; -1 before any eval).
    pub best_val_dsc: f64,
    /// SHA-256 of the run configuration, to catch resuming with a different one.
    pub config_hash: [u8; 32],
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub opt_step: u64,
    pub opt_state: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshots the live model and optimizer.
    pub fn capture(
        model: &mut SegModel,
        opt: &AdamW,
        epoch: u32,
        best_val_dsc: f64,
        config_hash: [u8; 32],
    ) -> Checkpoint {
        let mut params = Vec::new();
        model.visit_params(&mut |p| {
            params.push((p.name.clone(), p.shape.clone(), p.value.clone()));
        });
        let opt_state = opt
            .state
            .iter()
            .map(|(name, mo)| (name.clone(), mo.m.clone(), mo.v.clone()))
            .collect();
        Checkpoint {
            spec: model.spec.clone(),
            epoch,
            best_val_dsc,
            config_hash,
            params,
            opt_step: opt.step_count,
            opt_state,
        }
    }

    /// Rebuilds the model and overwrites its parameters with the stored
    /// values. The initializer draws are discarded, so the stream seed is
    /// irrelevant; every parameter must be present with a matching shape.
    pub fn restore_model(&self) -> Result<SegModel> {
        let mut model = SegModel::new(&self.spec, &mut rng::stream(0, "checkpoint.rebuild", 0))?;
        let stored: BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = self
            .params
            .iter()
            .map(|(n, s, v)| (n.as_str(), (s, v)))
            .collect();
        let mut missing = Vec::new();
        let mut seen = 0usize;
        let mut shape_err = None;
        model.visit_params(&mut |p| {
            seen += 1;
            match stored.get(p.name.as_str()) {
                Some((shape, value)) => {
                    if **shape != p.shape {
                        shape_err.get_or_insert_with(|| {
                            format!("parameter {}: stored {:?}, model {:?}", p.name, shape, p.shape)
                        });
                    } else {
                        p.value.copy_from_slice(value);
                    }
                }
                None => missing.push(p.name.clone()),
            }
        });
        if let Some(err) = shape_err {
            return Err(Error::invalid(format!("checkpoint shape mismatch: {err}")));
        }
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            )));
        }
        if seen != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint stores {} parameters, model has {seen}",
                self.params.len()
            )));
        }
        Ok(model)
    }

    /// Loads the stored moments into an optimizer (hyperparameters such as
    /// the learning rate come from the run configuration, not the file).
    pub fn restore_optimizer(&self, opt: &mut AdamW) {
        opt.step_count = self.opt_step;
        opt.state = self
            .opt_state
            .iter()
            .map(|(name, m, v)| (name.clone(), Moments { m: m.clone(), v: v.clone() }))
            .collect();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.best_val_dsc.to_le_bytes());
        for dim in [
            self.spec.in_channels,
            self.spec.classes,
            self.spec.embed_dim,
            self.spec.unet_depth,
            self.spec.base_channels,
            self.spec.c_mid,
            self.spec.adapter_ratio,
        ] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        let mut flags = 0u8;
        if self.spec.adapter_residual {
            flags |= FLAG_RESIDUAL;
        }
        if self.spec.adapter_passthrough {
            flags |= FLAG_PASSTHROUGH;
        }
        if self.spec.fusion_mode == FusionMode::Plus {
            flags |= FLAG_FUSION_PLUS;
        }
        buf.push(flags);

        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, value) in &self.params {
            write_name(&mut buf, name)?;
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            write_f64s(&mut buf, value);
        }

        buf.extend_from_slice(&self.opt_step.to_le_bytes());
        buf.extend_from_slice(&(self.opt_state.len() as u32).to_le_bytes());
        for (name, m, v) in &self.opt_state {
            write_name(&mut buf, name)?;
            write_f64s(&mut buf, m);
            write_f64s(&mut buf, v);
        }

        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader { path, bytes: &bytes, pos: 0 };

        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::bad_file(path, "not a checkpoint (bad magic)"));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let epoch = r.u32()?;
        let best_val_dsc = r.f64()?;
        let dims: Vec<usize> = (0..7).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let flags = r.take(1)?[0];
        let spec = ModelSpec {
            in_channels: dims[0],
            classes: dims[1],
            embed_dim: dims[2],
            unet_depth: dims[3],
            base_channels: dims[4],
            c_mid: dims[5],
            adapter_ratio: dims[6],
            adapter_residual: flags & FLAG_RESIDUAL != 0,
            adapter_passthrough: flags & FLAG_PASSTHROUGH != 0,
            fusion_mode: if flags & FLAG_FUSION_PLUS != 0 {
                FusionMode::Plus
            } else {
                FusionMode::CrossAttention
            },
        };

        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.name()?;
            let ndim = r.take(1)?[0] as usize;
            let shape: Vec<usize> =
                (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let value = r.f64s(numel)?;
            params.push((name, shape, value));
        }

        let opt_step = r.u64()?;
        let n_entries = r.u32()? as usize;
        let mut opt_state = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name = r.name()?;
            let len = r.u64()? as usize;
            let m = r.f64s_exact(len)?;
            // The second moment carries its own length prefix, which must agree.
            let v = r.f64s(len)?;
            opt_state.push((name, m, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::bad_file(path, "trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint {
            spec,
            epoch,
            best_val_dsc,
            config_hash,
            params,
            opt_step,
            opt_state,
        })
    }
}

fn write_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::invalid(format!("parameter name too long: {name}")));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

fn write_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::bad_file(self.path, "truncated checkpoint"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::bad_file(self.path, "parameter name is not valid UTF-8"))
    }

    /// Length-prefixed f64 array that must match the expected element count.
    fn f64s(&mut self, expect: usize) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        if len != expect {
            return Err(Error::bad_file(
                self.path,
                format!("array length {len} does not match shape product {expect}"),
            ));
        }
        self.f64s_exact(len)
    }

    fn f64s_exact(&mut self, len: usize) -> Result<Vec<f64>> {
        let raw = self.take(len * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Hex SHA-256 of a file's bytes; deterministic saves make this a stable
/// fingerprint of the training state.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Hex SHA-256 of a string (used to fingerprint run configurations).
pub fn text_sha256(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}
