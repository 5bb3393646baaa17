//! Checkpoint files.
//!
//! ```text
//! "AVTC"  u32 version  u64 config digest
//! u64 epoch  u64 step  u64 rng seed  u64 rng counter
//! u32 record count, then per record: u32 name length, name, AVT1 tensor
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! Records hold every parameter, its two Adam moments (`name@m1`,
//! `name@m2`) and every running statistic, in table order. All integers are
//! little-endian.

use std::hash::Hasher;
use std::io::Read;
use std::path::Path;

use avtca_core::{ModelState, RngState, Tensor};
use fnv::FnvHasher;

use crate::avt1;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"AVTC";
pub const VERSION: u32 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn records(state: &ModelState<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for p in state.store.params() {
        out.push((p.name.clone(), &p.value));
        out.push((format!("{}@m1", p.name), &p.moment1));
        out.push((format!("{}@m2", p.name), &p.moment2));
    }
    for b in state.store.buffers() {
        out.push((b.name.clone(), &b.value));
    }
    out
}

pub fn to_bytes(state: &ModelState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [state.model.digest(), state.epoch, state.step, state.rng.seed, state.rng.counter] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let recs = records(state);
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in recs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        avt1::write(&mut out, t).expect("writing to a Vec cannot fail");
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save(path: &Path, state: &ModelState<f32>) -> CliResult<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| CliError::output_io(path, e))
}

fn corrupt(msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("corrupt checkpoint: {msg}"))
}

fn take<const N: usize>(r: &mut &[u8]) -> CliResult<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
    Ok(b)
}

/// Overwrites `state` (built from the same config and variant) with the
/// contents of a checkpoint.
pub fn from_bytes(bytes: &[u8], state: &mut ModelState<f32>) -> CliResult<()> {
    if bytes.len() < 8 {
        return Err(corrupt("truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = body;
    if &take::<4>(&mut r)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let u64_at = |r: &mut &[u8]| take::<8>(r).map(u64::from_le_bytes);
    let digest = u64_at(&mut r)?;
    if digest != state.model.digest() {
        return Err(CliError::Digest(format!(
            "checkpoint was written for config digest {digest:016x}, the current config has {:016x}",
            state.model.digest()
        )));
    }
    let (epoch, step) = (u64_at(&mut r)?, u64_at(&mut r)?);
    let rng = RngState { seed: u64_at(&mut r)?, counter: u64_at(&mut r)? };
    let count = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let n = u32::from_le_bytes(take(&mut r)?) as usize;
        if n > r.len() {
            return Err(corrupt("truncated name"));
        }
        let (name, rest) = r.split_at(n);
        r = rest;
        let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("record name is not UTF-8"))?;
        let t = avt1::read(&mut r).map_err(corrupt)?;
        loaded.push((name, t));
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes before the checksum"));
    }
    let expected: Vec<(String, Vec<usize>)> = records(state).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if loaded.len() != expected.len() {
        return Err(corrupt(format!("{} records, the model has {}", loaded.len(), expected.len())));
    }
    for ((name, t), (want, shape)) in loaded.iter().zip(&expected) {
        if name != want || t.shape() != &shape[..] {
            return Err(corrupt(format!("record {name} {:?} where {want} {shape:?} was expected", t.shape())));
        }
    }
    let mut it = loaded.into_iter().map(|(_, t)| t);
    for p in state.store.params_mut() {
        p.value = it.next().unwrap();
        p.moment1 = it.next().unwrap();
        p.moment2 = it.next().unwrap();
    }
    for b in state.store.buffers_mut() {
        b.value = it.next().unwrap();
    }
    state.epoch = epoch;
    state.step = step;
    state.rng = rng;
    Ok(())
}

pub fn load(path: &Path, state: &mut ModelState<f32>) -> CliResult<()> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data_io(path, e))?;
    from_bytes(&bytes, state)
}
