//! Versioned binary model container.
//!
//! ```text
//! "CVQKDMLP"                      8-byte magic
//! u32 LE                          format version
//! u32 LE                          header length
//! header                          UTF-8 JSON (see `ModelHeader`)
//! p x f64 LE                      parameters, canonical order
//! [u8; 32]                        SHA-256 of everything above
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Activation, Architecture, MlpModel, SHIFT_INIT};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CVQKDMLP";
const ORDERING: &str = "layer-major; weights row-major (out x in) then bias; softplus shift last";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    learnable_shift: bool,
    fixed_shift: f64,
    a: f64,
    b_init_note: String,
    p: usize,
    ordering: String,
}

fn encode(model: &MlpModel) -> Vec<u8> {
    let arch = model.architecture();
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        layer_dims: arch.dims.clone(),
        activations: arch.hidden.clone(),
        learnable_shift: arch.learnable_shift,
        fixed_shift: if arch.learnable_shift { SHIFT_INIT } else { model.shift() },
        a: model.amplification,
        b_init_note: format!("softplus shift b initialized to {SHIFT_INIT}"),
        p: model.n_params(),
        ordering: ORDERING.to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.n_params() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex SHA-256 of the serialized model; identifies a model across files.
pub fn model_checksum(model: &MlpModel) -> String {
    let bytes = encode(model);
    hex(&bytes[bytes.len() - 32..])
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits `bytes` into `(payload, digest)` after verifying magic and digest.
pub(crate) fn verify_container<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 16 + 32 || &bytes[..8] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Integrity(format!("{what} checksum mismatch")));
    }
    Ok(payload)
}

/// Reads `(version, header json, body)` from a verified payload.
pub(crate) fn split_payload(payload: &[u8], expected_version: u32) -> Result<(&[u8], &[u8])> {
    let version = u32::from_le_bytes(payload[8..12].try_into().unwrap());
    if version != expected_version {
        return Err(Error::Version {
            found: version,
            expected: expected_version,
        });
    }
    let len = u32::from_le_bytes(payload[12..16].try_into().unwrap()) as usize;
    if 16 + len > payload.len() {
        return Err(Error::Format("header length exceeds file size".into()));
    }
    Ok((&payload[16..16 + len], &payload[16 + len..]))
}

pub(crate) fn read_f64s(body: &[u8], n: usize) -> Result<Vec<f64>> {
    if body.len() != 8 * n {
        return Err(Error::Format(format!("expected {n} parameters, found {} bytes", body.len())));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_model<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    w.write_all(&encode(model))?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<MlpModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let payload = verify_container(&bytes, MAGIC, "model")?;
    let (header, body) = split_payload(payload, MODEL_FORMAT_VERSION)?;
    let header: ModelHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("model header: {e}")))?;
    let arch = Architecture {
        dims: header.layer_dims,
        hidden: header.activations,
        learnable_shift: header.learnable_shift,
    };
    arch.validate()?;
    if arch.n_params() != header.p {
        return Err(Error::Format(format!(
            "header declares p = {} but the layout has {} parameters",
            header.p,
            arch.n_params()
        )));
    }
    let params = read_f64s(body, header.p)?;
    let mut model = MlpModel::from_params(arch, params, header.a)?;
    if !model.architecture().learnable_shift {
        model.set_fixed_shift(header.fixed_shift);
    }
    Ok(model)
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    read_model(BufReader::new(File::open(path)?))
}

/// Declared parameter count in a model file's header.
pub fn declared_param_count(bytes: &[u8]) -> Result<usize> {
    let payload = verify_container(bytes, MAGIC, "model")?;
    let (header, _) = split_payload(payload, MODEL_FORMAT_VERSION)?;
    let header: ModelHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("model header: {e}")))?;
    Ok(header.p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamKey, Substream};

    fn model() -> MlpModel {
        MlpModel::init(Architecture::estimator(), 10.0, StreamKey::new(11, Substream::Init, 0)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut rng = StreamKey::new(12, Substream::Evaluation, 0).rng();
        for _ in 0..100 {
            let x: [f64; 6] = std::array::from_fn(|_| rand::Rng::random_range(&mut rng, -3.0..3.0));
            assert_eq!(m.forward_raw(&x).to_bits(), back.forward_raw(&x).to_bits());
        }
    }

    #[test]
    fn header_records_p() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        assert_eq!(declared_param_count(&buf).unwrap(), 4450);
    }

    #[test]
    fn corrupted_byte_is_detected() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        for pos in [3, 9, 40, buf.len() / 2, buf.len() - 1] {
            let mut bad = buf.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(read_model(&bad[..]), Err(Error::Integrity(_) | Error::Format(_))), "pos {pos}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        buf[8] = 9;
        let n = buf.len();
        let digest = Sha256::digest(&buf[..n - 32]);
        buf[n - 32..].copy_from_slice(&digest);
        assert!(matches!(read_model(&buf[..]), Err(Error::Version { found: 9, expected: 1 })));
    }

    #[test]
    fn checksum_tracks_parameters() {
        let a = model();
        let mut b = a.clone();
        b.params_mut()[7] += 1e-12;
        assert_eq!(model_checksum(&a), model_checksum(&a.clone()));
        assert_ne!(model_checksum(&a), model_checksum(&b));
    }
}
