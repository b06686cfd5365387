//! `KATP` parameter files: 4 magic bytes, `u32` format version, `u64` spec
//! hash, then `theta` as little-endian `f64` in layer order.

use std::fs;
use std::path::Path;

use super::{NetworkParams, NetworkSpec, NeuralError};

pub const PARAMS_MAGIC: &[u8; 4] = b"KATP";
pub const PARAMS_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_params(spec: &NetworkSpec, params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.dim());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec.hash64().to_le_bytes());
    for v in &params.theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a parameter file into `(spec_hash, params)` without a spec check.
pub fn decode_params(bytes: &[u8]) -> Result<(u64, NetworkParams), NeuralError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != PARAMS_MAGIC {
        return Err(NeuralError::Format("missing KATP magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PARAMS_FORMAT_VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(8) {
        return Err(NeuralError::Format("truncated parameter payload".into()));
    }
    let theta = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((hash, NetworkParams::new(theta)))
}

pub fn write_params(path: impl AsRef<Path>, spec: &NetworkSpec, params: &NetworkParams) -> Result<(), NeuralError> {
    fs::write(path, encode_params(spec, params))?;
    Ok(())
}

pub fn read_params_raw(path: impl AsRef<Path>) -> Result<(u64, NetworkParams), NeuralError> {
    decode_params(&fs::read(path)?)
}

/// Reads parameters and checks them against `spec` (hash and length).
pub fn read_params(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<NetworkParams, NeuralError> {
    let (hash, params) = read_params_raw(path)?;
    if hash != spec.hash64() {
        return Err(NeuralError::Format(format!(
            "spec hash {hash:#018x} does not match {:#018x}",
            spec.hash64()
        )));
    }
    let dim = spec.param_count()?;
    if params.dim() != dim {
        return Err(NeuralError::DimensionMismatch {
            expected: dim,
            found: params.dim(),
        });
    }
    if !params.is_finite() {
        return Err(NeuralError::Format("non-finite parameter".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{init_params, Activation, LossKind};
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let spec = NetworkSpec::mlp(&[2, 1], Activation::Identity, None, LossKind::Mse);
        let p = NetworkParams::new(vec![1.0, -0.5, 0.25]);
        let bytes = encode_params(&spec, &p);
        assert_eq!(&bytes[..4], b"KATP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &spec.hash64().to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn file_round_trip_and_spec_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.katp");
        let spec = NetworkSpec::mlp(&[24, 48, 24], Activation::Relu, None, LossKind::Mse);
        let p = init_params(&spec, 9).unwrap();
        write_params(&path, &spec, &p).unwrap();
        assert_eq!(read_params(&path, &spec).unwrap(), p);
        let other = NetworkSpec::mlp(&[24, 9, 9, 24], Activation::Relu, None, LossKind::Mse);
        assert!(matches!(read_params(&path, &other), Err(NeuralError::Format(_))));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_params(b"NOPE").is_err());
        let mut b = encode_params(
            &NetworkSpec::mlp(&[1, 1], Activation::Identity, None, LossKind::Mse),
            &NetworkParams::new(vec![1.0, 2.0]),
        );
        b.pop();
        assert!(decode_params(&b).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_bit_exact(theta in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..64)) {
            let spec = NetworkSpec::mlp(&[3, 2], Activation::Identity, None, LossKind::Mse);
            let p = NetworkParams::new(theta);
            let (h, back) = decode_params(&encode_params(&spec, &p)).unwrap();
            prop_assert_eq!(h, spec.hash64());
            prop_assert_eq!(back.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            p.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
