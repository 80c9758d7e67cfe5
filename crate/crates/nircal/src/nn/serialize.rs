//! Binary weight container: a fixed magic, a format version, a JSON shape
//! header, then every weight tensor as little-endian f64 in declaration
//! order. Loading rebuilds the model bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::model::CnnModel;
use super::tensors::Tensors;
use super::CnnSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CNNW";
const FORMAT_VERSION: u32 = 1;

pub fn save_model(model: &CnnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let loc = || path.display().to_string();
    let header = serde_json::to_vec(model.spec()).map_err(|e| Error::json(loc(), e))?;

    let mut buf = Vec::with_capacity(16 + header.len() + model.n_params() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for tensor in model.weights().slices() {
        for v in tensor {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(loc(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(loc(), e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CnnModel> {
    let path = path.as_ref();
    let loc = || path.display().to_string();
    let bad = |msg: String| Error::BadModelFile { msg };
    let bytes = fs::read(path).map_err(|e| Error::io(loc(), e))?;

    if bytes.len() < 16 {
        return Err(bad(format!("{}: file too short for a header", loc())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(format!("{}: magic bytes do not match", loc())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "{}: format version {version} (this build reads {FORMAT_VERSION})",
            loc()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| bad(format!("{}: header length exceeds file size", loc())))?;
    let spec: CnnSpec = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::json(loc(), e))?;
    spec.validate()?;

    let mut tensors = Tensors::zeros(&spec);
    let expected = tensors.n_params() * 8;
    let body = &bytes[body_start..];
    if body.len() != expected {
        return Err(bad(format!(
            "{}: expected {expected} weight bytes for this shape, found {}",
            loc(),
            body.len()
        )));
    }
    let mut offset = 0;
    for tensor in tensors.slices_mut() {
        for v in tensor.iter_mut() {
            *v = f64::from_le_bytes(body[offset..offset + 8].try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(bad(format!("{}: stored weight is not finite", loc())));
            }
            offset += 8;
        }
    }

    // Seed is irrelevant after the stored weights replace the fresh ones;
    // a loaded model is for inference or re-training from this state.
    let mut model = CnnModel::new(spec, 0)?;
    model.replace_weights(tensors);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> CnnSpec {
        CnnSpec {
            input_len: 12,
            kernels1: 2,
            filter_len1: 3,
            kernels2: 2,
            filter_len2: 3,
            dropout_rate: 0.1,
            dense_units: 3,
            noise_std: 0.01,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = CnnModel::new(spec(), 42).unwrap();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();

        assert_eq!(loaded.spec(), model.spec());
        for i in 0..model.n_params() {
            assert_eq!(loaded.param(i), model.param(i), "param {i}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((5, 12), |_| rng.random_range(-1.0..1.0));
        let a = model.forward_infer(x.view()).unwrap();
        let b = loaded.forward_infer(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = CnnModel::new(spec(), 0).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::BadModelFile { .. }));
    }

    #[test]
    fn wrong_format_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = CnnModel::new(spec(), 0).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::BadModelFile { msg } if msg.contains("version")));
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = CnnModel::new(spec(), 0).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::BadModelFile { msg } if msg.contains("weight bytes")));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = CnnModel::new(spec(), 0).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        fs::write(&path, &bytes).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn oversized_header_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = CnnModel::new(spec(), 0).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::BadModelFile { msg } if msg.contains("header length")));
    }

    #[test]
    fn non_finite_stored_weight_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = CnnModel::new(spec(), 0).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first_weight = 16 + header_len;
        bytes[first_weight..first_weight + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::BadModelFile { msg } if msg.contains("finite")));
    }
}
