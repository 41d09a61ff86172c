//! Checkpoint serialization.
//!
//! The interchange checkpoint starts with the magic bytes `CDMT`, a format
//! version, the serialized model config, then named tensors as
//! little-endian 32-bit floats with explicit shapes, sorted by name.
//! Loading validates every shape against the config.
//!
//! Training additionally writes a `CDTS` sidecar holding the full-precision
//! (f64) parameters and optimizer moments plus step/epoch/lr counters, so a
//! resumed run continues the exact trajectory; the f32 checkpoint remains
//! the portable artifact used for inference.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{DenoiserParams, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDMT";
pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 4] = b"CDTS";
const STATE_VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn name(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.inner.write_all(s.as_bytes())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn name(&mut self, limit: usize) -> Result<String> {
        let len = self.u32().map_err(read_err)? as usize;
        if len > limit {
            return Err(Error::Checkpoint(format!("tensor name length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(read_err)?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))
    }
}

fn read_err(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable file: {e}"))
}

fn write_config<W: Write>(w: &mut Writer<W>, cfg: &ModelConfig) -> std::io::Result<()> {
    for v in [
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_model,
        cfg.d_ff,
        cfg.k,
        cfg.l,
        cfg.t_steps,
    ] {
        w.u32(v as u32)?;
    }
    Ok(())
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<ModelConfig> {
    let mut vals = [0u32; 7];
    for v in &mut vals {
        *v = r.u32().map_err(read_err)?;
    }
    let cfg = ModelConfig {
        n_layers: vals[0] as usize,
        n_heads: vals[1] as usize,
        d_model: vals[2] as usize,
        d_ff: vals[3] as usize,
        k: vals[4] as usize,
        l: vals[5] as usize,
        t_steps: vals[6] as usize,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Write the portable f32 checkpoint.
pub fn save(params: &DenoiserParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.inner.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.u32(CHECKPOINT_VERSION).map_err(io)?;
    write_config(&mut w, &params.cfg).map_err(io)?;
    let tensors: Vec<_> = params.tensors().collect();
    w.u32(tensors.len() as u32).map_err(io)?;
    for (name, tensor) in tensors {
        w.name(name).map_err(io)?;
        w.u32(tensor.nrows() as u32).map_err(io)?;
        w.u32(tensor.ncols() as u32).map_err(io)?;
        for v in tensor.iter() {
            w.inner.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.inner.flush().map_err(io)?;
    Ok(())
}

/// Load an f32 checkpoint, widening to f64.
pub fn load(path: &Path) -> Result<DenoiserParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let magic: [u8; 4] = r.bytes().map_err(read_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CDMT checkpoint".into()));
    }
    let version = r.u32().map_err(read_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg = read_config(&mut r)?;
    let n = r.u32().map_err(read_err)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let name = r.name(1 << 16)?;
        let rows = r.u32().map_err(read_err)? as usize;
        let cols = r.u32().map_err(read_err)? as usize;
        if rows.checked_mul(cols).is_none_or(|c| c > (1 << 28)) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has implausible shape {rows}x{cols}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let bytes: [u8; 4] = r.bytes().map_err(read_err)?;
            data.push(f32::from_le_bytes(bytes) as f64);
        }
        let tensor = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    DenoiserParams::from_tensors(cfg, tensors)
}

/// Adam first/second moments plus the update counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(params: &DenoiserParams) -> AdamState {
        let m = params
            .tensors()
            .map(|(n, t)| (n.clone(), Array2::zeros(t.raw_dim())))
            .collect();
        let v = params
            .tensors()
            .map(|(n, t)| (n.clone(), Array2::zeros(t.raw_dim())))
            .collect();
        AdamState { m, v, step: 0 }
    }
}

/// Full-precision training state: parameters, optimizer moments, progress
/// counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub opt: AdamState,
    pub global_step: u64,
    pub epoch: u64,
    pub lr: f64,
}

fn write_f64_tensors<W: Write>(
    w: &mut Writer<W>,
    tensors: &BTreeMap<String, Array2<f64>>,
) -> std::io::Result<()> {
    w.u32(tensors.len() as u32)?;
    for (name, tensor) in tensors {
        w.name(name)?;
        w.u32(tensor.nrows() as u32)?;
        w.u32(tensor.ncols() as u32)?;
        for v in tensor.iter() {
            w.f64(*v)?;
        }
    }
    Ok(())
}

fn read_f64_tensors<R: Read>(r: &mut Reader<R>) -> Result<BTreeMap<String, Array2<f64>>> {
    let n = r.u32().map_err(read_err)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let name = r.name(1 << 16)?;
        let rows = r.u32().map_err(read_err)? as usize;
        let cols = r.u32().map_err(read_err)? as usize;
        if rows.checked_mul(cols).is_none_or(|c| c > (1 << 28)) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has implausible shape {rows}x{cols}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64().map_err(read_err)?);
        }
        let tensor = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        tensors.insert(name, tensor);
    }
    Ok(tensors)
}

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.inner.write_all(STATE_MAGIC).map_err(io)?;
    w.u32(STATE_VERSION).map_err(io)?;
    write_config(&mut w, &state.params.cfg).map_err(io)?;
    w.u64(state.global_step).map_err(io)?;
    w.u64(state.epoch).map_err(io)?;
    w.f64(state.lr).map_err(io)?;
    w.u64(state.opt.step).map_err(io)?;
    let params: BTreeMap<String, Array2<f64>> = state
        .params
        .tensors()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    write_f64_tensors(&mut w, &params).map_err(io)?;
    write_f64_tensors(&mut w, &state.opt.m).map_err(io)?;
    write_f64_tensors(&mut w, &state.opt.v).map_err(io)?;
    w.inner.flush().map_err(io)?;
    Ok(())
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let magic: [u8; 4] = r.bytes().map_err(read_err)?;
    if &magic != STATE_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a CDTS state file".into()));
    }
    let version = r.u32().map_err(read_err)?;
    if version != STATE_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported train-state version {version}"
        )));
    }
    let cfg = read_config(&mut r)?;
    let global_step = r.u64().map_err(read_err)?;
    let epoch = r.u64().map_err(read_err)?;
    let lr = r.f64().map_err(read_err)?;
    let opt_step = r.u64().map_err(read_err)?;
    let params = DenoiserParams::from_tensors(cfg, read_f64_tensors(&mut r)?)?;
    let m = read_f64_tensors(&mut r)?;
    let v = read_f64_tensors(&mut r)?;
    for (name, tensor) in params.tensors() {
        for (label, map) in [("m", &m), ("v", &v)] {
            let moment = map.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing optimizer moment {label} for `{name}`"))
            })?;
            if moment.dim() != tensor.dim() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment {label} for `{name}` has wrong shape"
                )));
            }
        }
    }
    Ok(TrainState {
        params,
        opt: AdamState {
            m,
            v,
            step: opt_step,
        },
        global_step,
        epoch,
        lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(seed: u64) -> DenoiserParams {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            k: 6,
            l: 3,
            t_steps: 4,
        };
        DenoiserParams::init(cfg, seed).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let params = tiny_params(7);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.cdmt");
        let p2 = dir.path().join("b.cdmt");
        save(&params, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "f32 payload must be stable across a round trip"
        );
        assert_eq!(loaded.cfg, params.cfg);
    }

    #[test]
    fn checkpoint_starts_with_magic_and_version() {
        let params = tiny_params(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cdmt");
        save(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"CDMT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn load_rejects_corruption() {
        let params = tiny_params(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cdmt");
        save(&params, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.cdmt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load(&bad).is_err());

        // config mismatch: claim a different d_model
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[16] = 12;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load(&bad).is_err());

        // truncation
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load(&bad).is_err());
    }

    #[test]
    fn train_state_round_trips_exactly() {
        let params = tiny_params(3);
        let mut opt = AdamState::zeros(&params);
        opt.step = 17;
        for t in opt.m.values_mut() {
            t.fill(0.125);
        }
        for t in opt.v.values_mut() {
            t.fill(1.0 / 3.0);
        }
        let state = TrainState {
            params: params.clone(),
            opt,
            global_step: 123,
            epoch: 4,
            lr: 4.5e-4,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.cdts");
        save_train_state(&state, &path).unwrap();
        let loaded = load_train_state(&path).unwrap();
        assert_eq!(loaded.global_step, 123);
        assert_eq!(loaded.epoch, 4);
        assert_eq!(loaded.lr, 4.5e-4);
        assert_eq!(loaded.opt.step, 17);
        for (name, tensor) in params.tensors() {
            assert_eq!(loaded.params.get(name), tensor, "{name}");
            assert!(loaded.opt.m[name].iter().all(|&x| x == 0.125));
            assert!(loaded.opt.v[name].iter().all(|&x| x == 1.0 / 3.0));
        }
    }
}
