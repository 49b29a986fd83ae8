use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::MpanModel;
use crate::error::{Error, Result};
use crate::ndgrad::{DType, Scalar, Sgd, Tensor};

pub const MAGIC: &[u8; 5] = b"MPAN1";
/// SHA-256 of every preceding byte closes the file.
const DIGEST_LEN: usize = 32;
/// Prefix of optimizer momentum buffers.
pub const OPTIM_PREFIX: &str = "optim.";

/// One named array in its on-disk encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn from_values<T: Scalar>(name: impl Into<String>, shape: &[usize], values: &[T]) -> Self {
        let mut payload = Vec::with_capacity(values.len() * T::DTYPE.size());
        values.iter().for_each(|v| v.write_le(&mut payload));
        Self { name: name.into(), dtype: T::DTYPE, shape: shape.to_vec(), payload }
    }

    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self::from_values(name, t.shape(), &t.data())
    }

    pub fn values<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Compatibility(format!("`{}` is stored as {:?}, expected {:?}", self.name, self.dtype, T::DTYPE)));
        }
        Ok(self.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect())
    }
}

/// A parameter snapshot plus optimizer state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub config_hash: u64,
    pub tensors: Vec<TensorRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Integrity(format!("{what} does not fit in memory")))
    }
}

impl Checkpoint {
    /// Snapshots every model parameter and, if given, the optimizer's
    /// momentum buffers.
    pub fn capture<T: Scalar>(model: &MpanModel<T>, optimizer: Option<&Sgd<T>>, epoch: u64, config_hash: u64) -> Self {
        let mut tensors: Vec<TensorRecord> =
            model.named_parameters().iter().map(|(n, t)| TensorRecord::from_tensor(n.clone(), t)).collect();
        if let Some(opt) = optimizer {
            for ((name, p), buf) in opt.names().iter().zip(opt.params()).zip(&opt.state.momentum_buffers) {
                tensors.push(TensorRecord::from_values(format!("{OPTIM_PREFIX}{name}"), p.shape(), buf));
            }
        }
        Self { epoch, config_hash, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.config_hash.to_le_bytes());
        out.extend((self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend((t.name.len() as u64).to_le_bytes());
            out.extend(t.name.as_bytes());
            out.push(t.dtype.byte());
            out.push(t.shape.len() as u8);
            t.shape.iter().for_each(|&e| out.extend((e as u64).to_le_bytes()));
            out.extend(&t.payload);
        }
        let digest = Sha256::digest(&out);
        out.extend(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "format tag")? != MAGIC {
            return Err(Error::Integrity("not an MPAN1 checkpoint (format tag mismatch)".into()));
        }
        let epoch = r.u64("epoch")?;
        let config_hash = r.u64("config hash")?;
        let count = r.len("tensor count")?;
        let mut tensors: Vec<TensorRecord> = Vec::new();
        for i in 0..count {
            let name_len = r.len("name length")?;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Integrity(format!("tensor {i} has a non-UTF-8 name")))?
                .to_string();
            let what = format!("`{name}`");
            let dtype = DType::from_byte(r.take(1, &what)?[0])
                .ok_or_else(|| Error::Integrity(format!("{what} has an unknown dtype")))?;
            let rank = r.take(1, &what)?[0] as usize;
            let shape = (0..rank).map(|_| r.len(&what)).collect::<Result<Vec<_>>>()?;
            let bytes_len = shape
                .iter()
                .try_fold(dtype.size(), |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Integrity(format!("{what} has an oversized shape {shape:?}")))?;
            let payload = r.take(bytes_len, &what)?.to_vec();
            if tensors.iter().any(|t| t.name == name) {
                return Err(Error::Integrity(format!("duplicate tensor {what}")));
            }
            tensors.push(TensorRecord { name, dtype, shape, payload });
        }
        let body = r.pos;
        let digest = r.take(DIGEST_LEN, "checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!("{} trailing bytes after the checksum", bytes.len() - r.pos)));
        }
        if Sha256::digest(&bytes[..body]).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch: the file is corrupted".into()));
        }
        Ok(Self { epoch, config_hash, tensors })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that every named target exists here with the same shape and
    /// dtype. Missing names are an integrity error listing them all; the
    /// first shape or dtype mismatch is a compatibility error.
    pub fn check<T: Scalar>(&self, targets: &[(String, Tensor<T>)]) -> Result<()> {
        let missing: Vec<&str> = targets.iter().filter(|(n, _)| self.get(n).is_none()).map(|(n, _)| n.as_str()).collect();
        if !missing.is_empty() {
            return Err(Error::Integrity(format!("checkpoint lacks {}", missing.join(", "))));
        }
        for (n, t) in targets {
            let rec = self.get(n).expect("checked above");
            if rec.shape != t.shape() {
                return Err(Error::Compatibility(format!(
                    "`{n}` has shape {:?} in the checkpoint but {:?} in the model",
                    rec.shape,
                    t.shape()
                )));
            }
            if rec.dtype != T::DTYPE {
                return Err(Error::Compatibility(format!("`{n}` is {:?} in the checkpoint, model uses {:?}", rec.dtype, T::DTYPE)));
            }
        }
        Ok(())
    }

    /// Copies stored values into `targets` after validating all of them.
    pub fn restore_into<T: Scalar>(&self, targets: &[(String, Tensor<T>)]) -> Result<()> {
        self.check(targets)?;
        for (n, t) in targets {
            t.set_data(self.get(n).expect("checked").values()?)?;
        }
        Ok(())
    }

    /// Restores the model and, if given, the optimizer's buffers. Nothing is
    /// written unless every record validates.
    pub fn restore<T: Scalar>(&self, model: &MpanModel<T>, optimizer: Option<&mut Sgd<T>>) -> Result<()> {
        let params = model.named_parameters();
        self.check(&params)?;
        let mut buffers = Vec::new();
        if let Some(opt) = &optimizer {
            for (name, p) in opt.names().iter().zip(opt.params()) {
                let key = format!("{OPTIM_PREFIX}{name}");
                let rec = self.get(&key).ok_or_else(|| Error::Integrity(format!("checkpoint lacks {key}")))?;
                if rec.shape != p.shape() {
                    return Err(Error::Compatibility(format!("`{key}` has shape {:?}, expected {:?}", rec.shape, p.shape())));
                }
                buffers.push(rec.values::<T>()?);
            }
        }
        self.restore_into(&params)?;
        if let Some(opt) = optimizer {
            opt.state.momentum_buffers = buffers;
        }
        Ok(())
    }
}
