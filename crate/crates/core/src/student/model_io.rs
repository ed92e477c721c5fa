//! Model file (`.pesm`): both Students and their training configuration.
//!
//! Little-endian throughout.
//!
//! ```text
//! magic "PESM" | version u32 (=1)
//! layer_j u32 | layer_k u32 | epochs u32 | learning_rate f64
//! loss_distance u32 (0 cosine, 1 l2) | loss_reduction u32 (0 mean, 1 sum)
//! seed u64 | beta1 f64 | beta2 f64 | eps f64 | hidden_units u32 (0 = input dim)
//! 2 x network: d_in u32 | units u32 | d_out u32 | adam_step u64
//!              w1 b1 w2 b2 w3 b3 as f32 arrays (matrices row-major [fan_in][fan_out])
//! crc32 u32 of every preceding byte
//! ```
//!
//! Adam moments are not stored; a loaded network starts with zero moments.

use std::fs;
use std::path::Path;

use super::loss::{LossDistance, LossReduction};
use super::mlp::{Params, StudentNet};
use super::train::{TrainConfig, TrainedModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"PESM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn write_net(w: &mut Writer, net: &StudentNet<f32>) {
    let p = &net.params;
    w.u32(p.d_in as u32);
    w.u32(p.units as u32);
    w.u32(p.d_out as u32);
    w.u64(net.adam.step);
    for (_, block) in p.blocks() {
        w.f32s(block);
    }
}

fn read_net(r: &mut Reader) -> Result<StudentNet<f32>> {
    let d_in = r.u32()? as usize;
    let units = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let step = r.u64()?;
    let mut params = Params::<f32>::zeros(d_in, units, d_out);
    for (_, block) in params.blocks_mut() {
        *block = r.f32s(block.len())?;
    }
    let mut net = StudentNet::from_params(params);
    net.adam.step = step;
    Ok(net)
}

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MODEL_MAGIC);
    w.u32(MODEL_FORMAT_VERSION);
    w.u32(c.layer_pair.0);
    w.u32(c.layer_pair.1);
    w.u32(c.epochs as u32);
    w.f64(c.learning_rate);
    w.u32(match c.loss_distance {
        LossDistance::Cosine => 0,
        LossDistance::L2 => 1,
    });
    w.u32(match c.loss_reduction {
        LossReduction::Mean => 0,
        LossReduction::Sum => 1,
    });
    w.u64(c.seed);
    w.f64(c.adam_betas.0);
    w.f64(c.adam_betas.1);
    w.f64(c.adam_eps);
    w.u32(c.hidden_units.unwrap_or(0) as u32);
    write_net(&mut w, &model.forward);
    write_net(&mut w, &model.backward);
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<TrainedModel> {
    if bytes.len() < 4 || bytes[..4] != MODEL_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: MODEL_MAGIC,
        });
    }
    let mut r = Reader { bytes, pos: 4, path };
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let corrupt = |what: String| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, what),
    };
    if bytes.len() < 12 {
        return Err(r.take(bytes.len()).unwrap_err());
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch, model file is corrupted".into()));
    }
    let mut r = Reader { bytes: body, pos: 8, path };
    let layer_pair = (r.u32()?, r.u32()?);
    let epochs = r.u32()? as usize;
    let learning_rate = r.f64()?;
    let loss_distance = match r.u32()? {
        0 => LossDistance::Cosine,
        1 => LossDistance::L2,
        v => return Err(corrupt(format!("unknown loss distance tag {v}"))),
    };
    let loss_reduction = match r.u32()? {
        0 => LossReduction::Mean,
        1 => LossReduction::Sum,
        v => return Err(corrupt(format!("unknown loss reduction tag {v}"))),
    };
    let seed = r.u64()?;
    let adam_betas = (r.f64()?, r.f64()?);
    let adam_eps = r.f64()?;
    let hidden_units = match r.u32()? {
        0 => None,
        u => Some(u as usize),
    };
    let forward = read_net(&mut r)?;
    let backward = read_net(&mut r)?;
    if r.pos != body.len() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            found: (body.len() - r.pos) as u64,
        });
    }
    if forward.d_in() != backward.d_out() || forward.d_out() != backward.d_in() {
        return Err(corrupt("forward and backward students have incompatible shapes".into()));
    }
    Ok(TrainedModel {
        config: TrainConfig {
            layer_pair,
            epochs,
            learning_rate,
            loss_distance,
            loss_reduction,
            seed,
            adam_betas,
            adam_eps,
            hidden_units,
        },
        forward,
        backward,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> TrainedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        TrainedModel {
            config: TrainConfig {
                seed: 5,
                loss_distance: LossDistance::L2,
                hidden_units: Some(6),
                ..Default::default()
            },
            forward: StudentNet::new(4, 6, 3, &mut rng),
            backward: StudentNet::new(3, 6, 4, &mut rng),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pesm");
        let m = model();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.forward.params, m.forward.params);
        let probe: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 2.0).collect();
        let a = m.forward.forward(&probe).unwrap();
        let b = back.forward.forward(&probe).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_model(&model());
        bytes[..4].copy_from_slice(b"PEFG");
        assert!(matches!(
            decode_model(&bytes, Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn wrong_version_and_corruption() {
        let mut bytes = encode_model(&model());
        bytes[4] = 9;
        assert!(matches!(
            decode_model(&bytes, Path::new("x")),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut bytes = encode_model(&model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode_model(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let bytes = encode_model(&model());
        assert!(decode_model(&bytes[..bytes.len() / 3], Path::new("x")).is_err());
    }

    #[test]
    fn layer_pair_mismatch() {
        let m = model();
        assert!(m.check_layer_pair((8, 12)).is_ok());
        assert!(matches!(
            m.check_layer_pair((4, 8)),
            Err(Error::LayerPairMismatch { model: (8, 12), requested: (4, 8) })
        ));
    }
}
