//! Binary checkpoint format: manifest header plus flat named float32 records.
//!
//! Layout (all integers little-endian):
//! `b"SCKP" | version u32 | step u64 | stage u8 | epoch u32 | batch u32 |
//!  config_len u32 | config utf8 | n_records u32 | records...`
//! where a record is `name_len u16 | name utf8 | ndim u8 | dims u32... |
//! payload f32-le...`. Round trips are bit-exact.

use super::{Adam, ParamStore, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint file: {0}")]
    Format(String),
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
}

/// Position within the training schedule at save time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedulePos {
    /// 0 = pretrain, 1 = finetune.
    pub stage: u8,
    pub epoch: u32,
    /// Next batch index within the epoch.
    pub batch: u32,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub schedule: SchedulePos,
    /// Resolved configuration text embedded at save time.
    pub config: String,
    pub records: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    adam: Option<&Adam<f32>>,
    schedule: SchedulePos,
    config: &str,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let step = adam.map_or(0, Adam::step_count);
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&[schedule.stage])?;
    w.write_all(&schedule.epoch.to_le_bytes())?;
    w.write_all(&schedule.batch.to_le_bytes())?;
    let cfg = config.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;

    let n_params = store.len() as u32;
    let n_records = if adam.is_some() {
        n_params * 3
    } else {
        n_params
    };
    w.write_all(&n_records.to_le_bytes())?;
    for (_, name, t) in store.iter() {
        write_record(&mut w, name, t.shape(), t.data())?;
    }
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        for (idx, (_, name, t)) in store.iter().enumerate() {
            write_record(&mut w, &format!("adam.m/{name}"), t.shape(), &m[idx])?;
            write_record(&mut w, &format!("adam.v/{name}"), t.shape(), &v[idx])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_record<W: Write>(
    w: &mut W,
    name: &str,
    shape: &[usize],
    data: &[f32],
) -> Result<(), CheckpointError> {
    let nb = name.as_bytes();
    w.write_all(&(nb.len() as u16).to_le_bytes())?;
    w.write_all(nb)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let step = read_u64(&mut r)?;
    let mut stage = [0u8; 1];
    r.read_exact(&mut stage)?;
    let epoch = read_u32(&mut r)?;
    let batch = read_u32(&mut r)?;
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config = String::from_utf8(cfg)
        .map_err(|e| CheckpointError::Format(format!("config not utf8: {e}")))?;
    let n_records = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(n_records);
    for i in 0..n_records {
        let name_len = read_u16(&mut r)? as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|e| CheckpointError::Format(format!("record {i} name not utf8: {e}")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push((name, shape, data));
    }
    Ok(Checkpoint {
        step,
        schedule: SchedulePos {
            stage: stage[0],
            epoch,
            batch,
        },
        config,
        records,
    })
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.records.iter().find(|(n, _, _)| n == name)
    }

    /// Copies parameter records into `store`, matching by name and shape.
    ///
    /// With `partial`, store parameters missing from the checkpoint are left
    /// at their current values (used when initializing a fresh decoder from a
    /// pretrained encoder). Shape conflicts always error, listing the
    /// differing entries.
    pub fn restore_params(
        &self,
        store: &mut ParamStore<f32>,
        partial: bool,
    ) -> Result<usize, CheckpointError> {
        let mut mismatches = Vec::new();
        let mut restored = 0;
        let ids: Vec<_> = store.iter().map(|(id, name, t)| {
            (id, name.to_string(), t.shape().to_vec())
        }).collect();
        for (id, name, shape) in ids {
            match self.record(&name) {
                Some((_, ck_shape, data)) => {
                    if *ck_shape != shape {
                        mismatches.push(format!("{name}: store {shape:?} vs checkpoint {ck_shape:?}"));
                    } else {
                        store.get_mut(id).data_mut().copy_from_slice(data);
                        restored += 1;
                    }
                }
                None if partial => {}
                None => mismatches.push(format!("{name}: missing from checkpoint")),
            }
        }
        if !mismatches.is_empty() {
            return Err(CheckpointError::Mismatch(mismatches.join("; ")));
        }
        Ok(restored)
    }

    /// Restores optimizer moments saved alongside the parameters.
    pub fn restore_adam(
        &self,
        store: &ParamStore<f32>,
        adam: &mut Adam<f32>,
    ) -> Result<(), CheckpointError> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, name, _) in store.iter() {
            let rm = self
                .record(&format!("adam.m/{name}"))
                .ok_or_else(|| CheckpointError::Mismatch(format!("adam.m/{name} missing")))?;
            let rv = self
                .record(&format!("adam.v/{name}"))
                .ok_or_else(|| CheckpointError::Mismatch(format!("adam.v/{name} missing")))?;
            m.push(rm.2.clone());
            v.push(rv.2.clone());
        }
        adam.restore(self.step, m, v);
        Ok(())
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[allow(dead_code)]
fn _tensor_api<S: crate::scalar::Scalar>(t: &Tensor<S>) -> &[usize] {
    t.shape()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::new(vec![2, 2], vec![1.5, -0.25, 3.14159, 1e-20]));
        store.add("b", Tensor::new(vec![3], vec![f32::MIN_POSITIVE, 0.1, -0.1]));
        let mut adam = Adam::new(&store);
        store.accumulate(vec![
            (crate::autodiff::ParamId(0), vec![0.1; 4]),
            (crate::autodiff::ParamId(1), vec![0.2; 3]),
        ]);
        adam.step(&mut store, 1e-3);
        let sched = SchedulePos {
            stage: 1,
            epoch: 7,
            batch: 3,
        };
        save_checkpoint(&path, &store, Some(&adam), sched, "k = v\n").unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 1);
        assert_eq!(ck.schedule, sched);
        assert_eq!(ck.config, "k = v\n");

        let mut store2 = ParamStore::<f32>::new();
        store2.add("a", Tensor::zeros(vec![2, 2]));
        store2.add("b", Tensor::zeros(vec![3]));
        let mut adam2 = Adam::new(&store2);
        ck.restore_params(&mut store2, false).unwrap();
        ck.restore_adam(&store2, &mut adam2).unwrap();
        for (t1, t2) in store.iter().zip(store2.iter()) {
            for (a, b) in t1.2.data().iter().zip(t2.2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let (m1, v1) = adam.moments();
        let (m2, v2) = adam2.moments();
        for (a, b) in m1.iter().flatten().zip(m2.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in v1.iter().flatten().zip(v2.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn shape_mismatch_lists_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![4]));
        save_checkpoint(&path, &store, None, SchedulePos::default(), "").unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(vec![5]));
        let err = ck.restore_params(&mut other, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('w') && msg.contains('4') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        std::fs::write(&path, b"SCKP\x01\x00").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
