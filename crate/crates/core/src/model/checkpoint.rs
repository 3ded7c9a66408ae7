use std::path::Path;

use super::config::ModelConfig;
use super::params::{Layout, ModelParams};
use crate::container::{fnv64, read_file, Reader, Writer};
use crate::error::Result;

const MAGIC: &[u8; 4] = b"ELCT";
const VERSION: u32 = 1;

pub fn model_bytes(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut w = Writer::new(MAGIC, VERSION);
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.context_len] {
        w.u32(v as u32);
    }
    w.u64(c.seed);
    w.u64(params.data.len() as u64);
    w.f32s(&params.data);
    w.finish()
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &model_bytes(params))
}

pub fn parse_model(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let (mut r, version) = Reader::open(bytes, MAGIC, path)?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported model version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        context_len: dims[5],
        seed: r.u64()?,
    };
    config.validate().map_err(|e| r.corrupt(e.to_string()))?;
    let n = r.u64()? as usize;
    let expected = Layout::new(&config).total;
    if n != expected {
        return Err(r.corrupt(format!("{n} parameters stored, config implies {expected}")));
    }
    let data = r.f32s(n)?;
    r.expect_end()?;
    Ok(ModelParams { config, data })
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    parse_model(&read_file(path)?, path)
}

/// Checksum trailing the model's checkpoint file; libraries record it to
/// identify the model they were built from.
pub fn fingerprint(params: &ModelParams) -> u64 {
    let bytes = model_bytes(params);
    fnv64(&bytes[..bytes.len() - 8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn round_trip_bit_exact() {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            context_len: 10,
            seed: 9,
        };
        let p = ModelParams::init(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.elct");
        save_model(&p, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config, p.config);
        assert!(back.data.iter().zip(&p.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(fingerprint(&back), fingerprint(&p));
        let raw = std::fs::read(&path).unwrap();
        let stored = u64::from_le_bytes(raw[raw.len() - 8..].try_into().unwrap());
        assert_eq!(stored, fingerprint(&p));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        assert!(matches!(parse_model(&bytes, &path), Err(Error::Corrupt { .. })));
        assert!(matches!(
            load_model(&dir.path().join("none")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
