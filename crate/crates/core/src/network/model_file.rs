//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HYPN"                magic
//! u32                   format version
//! u32 + UTF-8 bytes     canonical config text ([network] [hyper] [training] [provenance])
//! f64 * n               parameter arrays, layer by layer in declared order,
//!                       then the stored decoders (weights, bias) if any
//! u32                   CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{build_network, Model, Provenance};
use crate::config::{network_sections, parse_ini, parse_network_sections};
use crate::error::{Error, ModelFileError, Result};
use crate::tensor::KernelBank;

pub const MODEL_MAGIC: &[u8; 4] = b"HYPN";
pub const MODEL_VERSION: u32 = 1;

fn config_text(model: &Model) -> String {
    let mut s = network_sections(&model.config);
    let p = &model.provenance;
    s.push_str(&format!(
        "\n[provenance]\npretrained = {}\nfinetuned = {}\nseed = {}\ndecoders = {}\n",
        p.pretrained,
        p.finetuned,
        p.seed,
        model.decoders.is_some()
    ));
    s
}

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let text = config_text(model);
    let mut out = Vec::with_capacity(16 + text.len() + 8 * model.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for layer in &model.layers {
        for arr in layer.params() {
            for v in arr {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for dec in model.decoders.iter().flatten() {
        for v in dec.data.iter().chain(&dec.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

struct Header {
    model: Model,
    has_decoders: bool,
    params_at: usize,
    expected_len: usize,
}

fn parse_header(bytes: &[u8], text_at: usize, text_len: usize) -> Result<Header, ModelFileError> {
    let text = std::str::from_utf8(&bytes[text_at..text_at + text_len])
        .map_err(|_| ModelFileError::Malformed("config block is not UTF-8".into()))?;
    let config = parse_network_sections(text).map_err(|e| ModelFileError::Malformed(e.to_string()))?;
    let sections = parse_ini(text).map_err(|e| ModelFileError::Malformed(e.to_string()))?;
    let prov = sections
        .get("provenance")
        .ok_or_else(|| ModelFileError::Malformed("missing [provenance] section".into()))?;
    let field = |name: &str| -> Result<&str, ModelFileError> {
        prov.iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| ModelFileError::Malformed(format!("missing provenance.{name}")))
    };
    let flag = |name: &str| -> Result<bool, ModelFileError> {
        field(name)?
            .parse()
            .map_err(|_| ModelFileError::Malformed(format!("bad provenance.{name}")))
    };
    let seed: u64 = field("seed")?
        .parse()
        .map_err(|_| ModelFileError::Malformed("bad provenance.seed".into()))?;
    let provenance = Provenance {
        pretrained: flag("pretrained")?,
        finetuned: flag("finetuned")?,
        seed,
    };
    let has_decoders = flag("decoders")?;
    let mut model = build_network(&config, None, seed).map_err(|e| ModelFileError::Malformed(e.to_string()))?;
    model.provenance = provenance;
    let mut n = model.param_count();
    if has_decoders {
        let mut in_c = 1;
        for spec in &config.convs {
            n += in_c * spec.maps * spec.filter * spec.filter + in_c;
            in_c = spec.maps;
        }
    }
    let params_at = text_at + text_len;
    Ok(Header {
        model,
        has_decoders,
        params_at,
        expected_len: params_at + 8 * n + 4,
    })
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model, ModelFileError> {
    if bytes.len() < 12 {
        return Err(ModelFileError::Truncated {
            needed: 12,
            have: bytes.len(),
        });
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let version = read_u32(bytes, 4);
    if version != MODEL_VERSION {
        return Err(ModelFileError::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let text_len = read_u32(bytes, 8) as usize;
    let text_at = 12;
    if bytes.len() < text_at + text_len + 4 {
        return Err(ModelFileError::Truncated {
            needed: text_at + text_len + 4,
            have: bytes.len(),
        });
    }
    let header = parse_header(bytes, text_at, text_len);
    if let Ok(h) = &header {
        if bytes.len() < h.expected_len {
            return Err(ModelFileError::Truncated {
                needed: h.expected_len,
                have: bytes.len(),
            });
        }
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = read_u32(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelFileError::Checksum { stored, computed });
    }
    let Header {
        mut model,
        has_decoders,
        params_at,
        expected_len,
    } = header?;
    if bytes.len() != expected_len {
        return Err(ModelFileError::Malformed(format!(
            "expected {expected_len} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut at = params_at;
    let mut next = || {
        let v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        at += 8;
        v
    };
    for layer in &mut model.layers {
        for arr in layer.params_mut() {
            arr.iter_mut().for_each(|v| *v = next());
        }
    }
    if has_decoders {
        let mut decoders = Vec::with_capacity(model.config.convs.len());
        let mut in_c = 1;
        for spec in &model.config.convs {
            let k = spec.filter;
            let data = (0..in_c * spec.maps * k * k).map(|_| next()).collect();
            let bias = (0..in_c).map(|_| next()).collect();
            decoders.push(
                KernelBank::from_parts(in_c, spec.maps, k, k, data, bias)
                    .map_err(|e| ModelFileError::Malformed(e.to_string()))?,
            );
            in_c = spec.maps;
        }
        model.decoders = Some(decoders);
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    model_from_bytes(&bytes).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cae::CaeLayer;
    use crate::network::{forward_classify, input_dims, NetworkConfig};
    use crate::tensor::Tensor4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_with_decoders() -> Model {
        let cfg = NetworkConfig::reduced();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut in_c = 1;
        let stack: Vec<CaeLayer> = cfg
            .convs
            .iter()
            .map(|s| {
                let l = CaeLayer::new_random(in_c, s.maps, s.filter, s.stride, false, &mut rng).unwrap();
                in_c = s.maps;
                l
            })
            .collect();
        build_network(&cfg, Some(&stack), 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = build_network(&NetworkConfig::paper(), None, 1).unwrap();
        let bytes = model_to_bytes(&m);
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);
        let m = small_with_decoders();
        let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        assert!(back.decoders.is_some());
    }

    #[test]
    fn corrupted_byte_is_checksum_error() {
        let m = small_with_decoders();
        let mut bytes = model_to_bytes(&m);
        let i = bytes.len() - 40;
        bytes[i] ^= 0x10;
        assert!(matches!(model_from_bytes(&bytes), Err(ModelFileError::Checksum { .. })));
        let mut bytes = model_to_bytes(&m);
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(model_from_bytes(&bytes), Err(ModelFileError::Checksum { .. })));
    }

    #[test]
    fn truncation_magic_and_version_are_distinct() {
        let bytes = model_to_bytes(&small_with_decoders());
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 100]),
            Err(ModelFileError::Truncated { .. })
        ));
        assert!(matches!(model_from_bytes(&bytes[..6]), Err(ModelFileError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(ModelFileError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            model_from_bytes(&bad),
            Err(ModelFileError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn five_class_model_loads_and_runs() {
        let mut cfg = NetworkConfig::reduced();
        cfg.classes = 5;
        let m = build_network(&cfg, None, 2).unwrap();
        let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
        let x = Tensor4::zeros(input_dims(&cfg, 3)).unwrap();
        let (probs, _) = forward_classify(&back, &x).unwrap();
        assert_eq!(probs.len(), 3);
        assert!(probs.iter().all(|p| p.len() == 5));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hypn");
        let m = small_with_decoders();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        assert!(matches!(
            load_model(dir.path().join("missing")),
            Err(Error::Io(_))
        ));
    }
}
