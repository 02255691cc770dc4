//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "QFECKPT1"
//! version u32      currently 1
//! config  u32 length + JSON bytes
//! epoch   u32
//! seed    u64      run seed; epoch-level RNG streams re-derive from it
//! vocab   u32 count, then per token: u32 length + UTF-8 bytes
//! chars   u32 count, then per char: u32 code point
//! tensors u32 count, then per tensor:
//!         u32 name length + UTF-8, u32 ndim, u64 per dim, f64 per element
//! adam    u8 flag; when 1: u64 step count, then first- and second-moment
//!         blocks (f64s, same sizes and order as the tensors)
//! ```
//!
//! Reloading restores bit-identical parameters, so forward outputs match
//! exactly.

use crate::config::Config;
use crate::data::{CharVocab, Vocabulary};
use crate::error::{QfeError, Result};
use crate::model::Model;
use crate::tensor::AdamState;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"QFECKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub epoch: u32,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub chars: CharVocab,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub adam: Option<AdamSnapshot>,
}

#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocabulary, chars: &CharVocab, epoch: u32, adam: Option<&AdamState>) -> Self {
        let tensors = (0..model.params.len())
            .map(|p| {
                (
                    model.params.name(p).to_string(),
                    model.params.shape(p).to_vec(),
                    model.params.data(p).to_vec(),
                )
            })
            .collect();
        let adam = adam.map(|a| {
            let (m, v) = a.moments();
            AdamSnapshot { t: a.t, m: m.to_vec(), v: v.to_vec() }
        });
        Checkpoint {
            config: model.cfg.clone(),
            epoch,
            seed: model.cfg.seed,
            vocab: vocab.clone(),
            chars: chars.clone(),
            tensors,
            adam,
        }
    }

    /// Rebuild the model (and optimizer state when present).
    pub fn restore(&self) -> Result<(Model, Vocabulary, CharVocab, Option<AdamState>)> {
        let mut vocab = self.vocab.clone();
        vocab.rebuild_index();
        let mut chars = self.chars.clone();
        chars.rebuild_index();
        let mut model = Model::new(&self.config, vocab.len(), chars.len())?;
        if self.tensors.len() != model.params.len() {
            return Err(QfeError::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, shape, data) in &self.tensors {
            let p = model.params.index_of(name).ok_or_else(|| {
                QfeError::Data(format!("checkpoint tensor {name} unknown to this model"))
            })?;
            if model.params.shape(p) != shape.as_slice() {
                return Err(QfeError::Data(format!(
                    "checkpoint tensor {name}: shape {:?} vs model {:?}",
                    shape,
                    model.params.shape(p)
                )));
            }
            *model.params.data_mut(p) = data.clone();
        }
        let adam = match &self.adam {
            Some(snap) => {
                let mut st = AdamState::new(self.config.learning_rate, &model.params.sizes());
                st.t = snap.t;
                st.restore_moments(snap.m.clone(), snap.v.clone());
                Some(st)
            }
            None => None,
        };
        Ok((model, vocab, chars, adam))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        write_bytes(&mut w, &cfg)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.vocab.len() as u32).to_le_bytes())?;
        for t in self.vocab.tokens() {
            write_bytes(&mut w, t.as_bytes())?;
        }
        w.write_all(&(self.chars.len() as u32).to_le_bytes())?;
        for &c in self.chars.chars() {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        match &self.adam {
            None => w.write_all(&[0u8])?,
            Some(snap) => {
                w.write_all(&[1u8])?;
                w.write_all(&snap.t.to_le_bytes())?;
                for block in snap.m.iter().chain(snap.v.iter()) {
                    for &v in block {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(QfeError::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(QfeError::Data(format!("unsupported checkpoint version {version}")));
        }
        let cfg_bytes = read_bytes(&mut r)?;
        let config: Config = serde_json::from_slice(&cfg_bytes)?;
        let epoch = read_u32(&mut r)?;
        let seed = read_u64(&mut r)?;
        let n_vocab = read_u32(&mut r)? as usize;
        let mut tokens = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            tokens.push(String::from_utf8(read_bytes(&mut r)?).map_err(|e| {
                QfeError::Data(format!("checkpoint vocab: invalid UTF-8: {e}"))
            })?);
        }
        let vocab = Vocabulary::from_tokens(tokens);
        let n_chars = read_u32(&mut r)? as usize;
        let mut chars = Vec::with_capacity(n_chars);
        for _ in 0..n_chars {
            let code = read_u32(&mut r)?;
            chars.push(char::from_u32(code).ok_or_else(|| {
                QfeError::Data(format!("checkpoint chars: invalid code point {code}"))
            })?);
        }
        let chars = CharVocab::from_chars(chars);
        let n_tensors = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        let mut sizes = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|e| QfeError::Data(format!("checkpoint tensor name: {e}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(&mut r)?);
            }
            sizes.push(numel);
            tensors.push((name, shape, data));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let adam = if flag[0] == 1 {
            let t = read_u64(&mut r)?;
            let read_blocks = |r: &mut dyn Read| -> Result<Vec<Vec<f64>>> {
                sizes
                    .iter()
                    .map(|&n| (0..n).map(|_| read_f64(r)).collect::<Result<Vec<f64>>>())
                    .collect()
            };
            let m = read_blocks(&mut r)?;
            let v = read_blocks(&mut r)?;
            Some(AdamSnapshot { t, m, v })
        } else {
            None
        };
        Ok(Checkpoint { config, epoch, seed, vocab, chars, tensors, adam })
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read + ?Sized>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CharVocab, Vocabulary};

    fn tiny() -> (Model, Vocabulary, CharVocab) {
        let vocab = Vocabulary::build(["alpha", "beta", "gamma"].into_iter(), None);
        let chars = CharVocab::build(["alphabetgm"].into_iter());
        let cfg = Config { d_c: 2, word_dim: 3, char_dim: 2, char_channels: 2, seed: 3, ..Config::desk() };
        let model = Model::new(&cfg, vocab.len(), chars.len()).unwrap();
        (model, vocab, chars)
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let (model, vocab, chars) = tiny();
        let mut adam = AdamState::new(0.001, &model.params.sizes());
        adam.t = 7;
        let cp = Checkpoint::from_model(&model, &vocab, &chars, 4, Some(&adam));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        cp.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 4);
        let (m2, _, _, adam2) = loaded.restore().unwrap();
        for p in 0..model.params.len() {
            let a = model.params.data(p);
            let b = m2.params.data(p);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {}", model.params.name(p));
            }
        }
        assert_eq!(adam2.unwrap().t, 7);
        // Same checkpoint saved twice is byte-identical.
        let path2 = dir.path().join("m2.ckpt");
        cp.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
