//! Flat binary parameter container.
//!
//! Layout: a text header (magic, count, one `name ndim extents... offset`
//! line per parameter, then a `data` line) followed by the raw little-endian
//! f32 payload. Offsets are byte positions inside the payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::layers::{ParamId, ParamSet};
use super::scalar::Scalar;

const MAGIC: &str = "vqstage-checkpoint v1";

pub fn save_params<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "count {}", params.len())?;
    let mut offset = 0usize;
    for (name, tensor) in params.iter() {
        write!(w, "{name} {}", tensor.shape().len())?;
        for d in tensor.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w, " {offset}")?;
        offset += tensor.numel() * 4;
    }
    writeln!(w, "data")?;
    for (_, tensor) in params.iter() {
        for v in tensor.data() {
            w.write_all(&(v.to_f64_c() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a checkpoint into an existing parameter set; names and shapes must
/// match exactly.
pub fn load_params<T: Scalar>(params: &mut ParamSet<T>, path: &Path) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic line {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let count: usize = line
        .trim_end()
        .strip_prefix("count ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad count line {:?}", line.trim_end())))?;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model has {}",
            params.len()
        )));
    }

    struct Entry {
        id: ParamId,
        numel: usize,
        offset: usize,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        r.read_line(&mut line)?;
        let mut it = line.trim_end().split(' ');
        let name = it.next().ok_or_else(|| Error::Checkpoint("missing name".into()))?;
        let ndim: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad ndim for {name}")))?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                it.next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("bad extent for {name}")))?,
            );
        }
        let offset: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad offset for {name}")))?;
        let id = params
            .id_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if params.tensor(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                shape,
                params.tensor(id).shape()
            )));
        }
        entries.push(Entry { id, numel: shape.iter().product(), offset });
    }
    line.clear();
    r.read_line(&mut line)?;
    if line.trim_end() != "data" {
        return Err(Error::Checkpoint(format!("expected data marker, got {:?}", line.trim_end())));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    for e in &entries {
        let need = e.offset + e.numel * 4;
        if payload.len() < need {
            return Err(Error::Checkpoint(format!(
                "payload too short: need {need} bytes, have {}",
                payload.len()
            )));
        }
        let dst = params.tensor_mut(e.id).data_mut();
        for i in 0..e.numel {
            let at = e.offset + i * 4;
            let bits = [payload[at], payload[at + 1], payload[at + 2], payload[at + 3]];
            dst[i] = T::from_f64_c(f32::from_le_bytes(bits) as f64);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::<f32>::new();
        ps.add("a.w", Tensor::randn(vec![3, 4], 0.3, &mut rng));
        ps.add("b", Tensor::randn(vec![7], 1.0, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_params(&ps, &path).unwrap();

        let mut fresh = ParamSet::<f32>::new();
        fresh.add("a.w", Tensor::zeros(vec![3, 4]));
        fresh.add("b", Tensor::zeros(vec![7]));
        load_params(&mut fresh, &path).unwrap();
        assert_eq!(ps.tensor(ParamId(0)), fresh.tensor(ParamId(0)));
        assert_eq!(ps.tensor(ParamId(1)), fresh.tensor(ParamId(1)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::zeros(vec![2, 2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_params(&ps, &path).unwrap();

        let mut other = ParamSet::<f32>::new();
        other.add("w", Tensor::zeros(vec![4]));
        let err = load_params(&mut other, &path).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }
}
