//! JSON checkpoint container; the layout is described in `docs/checkpoint.md`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::{LstmConfig, LstmLm};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const FORMAT: &str = "lmaug-lstm";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: LstmConfig,
    vocab_sha256: String,
    vocab: Vec<String>,
    tensors: Vec<Tensor>,
}

pub fn save_checkpoint<W: Write>(w: W, lm: &LstmLm, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != lm.config().vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            lm.config().vocab_size
        )));
    }
    let tensors = lm
        .tensors()
        .iter()
        .map(|t| Tensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: lm.params()[t.range()].to_vec(),
        })
        .collect();
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        config: lm.config().clone(),
        vocab_sha256: vocab.fingerprint(),
        vocab: vocab.words().to_vec(),
        tensors,
    };
    serde_json::to_writer(w, &c)?;
    Ok(())
}

/// Loads a model and the vocabulary it was trained with.
pub fn load_checkpoint<R: Read>(r: R) -> Result<(LstmLm, Vocabulary)> {
    let c: Container = serde_json::from_reader(r)?;
    if c.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", c.format)));
    }
    if c.version > VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
    }
    let vocab = Vocabulary::from_stored(c.vocab)?;
    if vocab.fingerprint() != c.vocab_sha256 {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    let template = LstmLm::from_params(c.config.clone(), vec![0.0; expected_len(&c.config)?])?;
    let mut params = vec![0.0; template.n_params()];
    if c.tensors.len() != template.tensors().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            template.tensors().len(),
            c.tensors.len()
        )));
    }
    for info in template.tensors() {
        let t = c
            .tensors
            .iter()
            .find(|t| t.name == info.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", info.name)))?;
        if t.shape != info.shape || t.data.len() != info.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                info.name, t.shape, info.shape
            )));
        }
        params[info.range()].copy_from_slice(&t.data);
    }
    Ok((LstmLm::from_params(c.config, params)?, vocab))
}

fn expected_len(cfg: &LstmConfig) -> Result<usize> {
    cfg.validate()?;
    let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
    let mut n = v * e + (v - 1) * (h + 1);
    for l in 0..cfg.layers {
        let inp = if l == 0 { e } else { h };
        n += 4 * h * (inp + h) + 4 * h;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let vocab = Vocabulary::from_words(["a", "b", "c"]);
        let mut cfg = LstmConfig::new(vocab.len());
        cfg.embed_dim = 4;
        cfg.hidden_dim = 3;
        let lm = LstmLm::new(cfg, &mut Rng::seed_from_u64(5)).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &lm, &vocab).unwrap();
        let (back, v2) = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.params(), lm.params());
        assert_eq!(back.config(), lm.config());
        assert_eq!(v2, vocab);
    }

    #[test]
    fn rejects_tampered_vocab_and_shapes() {
        let vocab = Vocabulary::from_words(["a", "b"]);
        let mut cfg = LstmConfig::new(vocab.len());
        cfg.embed_dim = 2;
        cfg.hidden_dim = 2;
        let lm = LstmLm::new(cfg, &mut Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &lm, &vocab).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad_vocab = text.replacen("\"a\"", "\"z\"", 1);
        assert!(matches!(load_checkpoint(bad_vocab.as_bytes()), Err(Error::Checkpoint(_))));
        let bad_shape = text.replacen("\"shape\":[5,2]", "\"shape\":[2,5]", 1);
        assert!(load_checkpoint(bad_shape.as_bytes()).is_err());
        let bad_format = text.replacen(FORMAT, "other", 1);
        assert!(load_checkpoint(bad_format.as_bytes()).is_err());
    }
}
