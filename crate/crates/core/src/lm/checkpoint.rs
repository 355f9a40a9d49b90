//! Checkpoint container.
//!
//! Layout of a `.plmw` file:
//!
//! ```text
//! bytes 0..5    magic "plmw1"
//! bytes 5..9    header length H, u32 little-endian
//! bytes 9..9+H  JSON header {format, config, step, tensors, codec, meta}
//! rest          parameters as f32 little-endian, in `tensors` order
//! ```
//!
//! Each tensor entry is `{name, shape, offset}` with the offset counted in
//! floats from the start of the data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layout::{Layout, TensorSpec};
use super::model::{Transformer, INIT_STD};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textcodec::{Codec, Special};

pub const MAGIC: &[u8; 5] = b"plmw1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub params: Vec<f32>,
    /// The codec the model was trained with, if recorded.
    pub codec: Option<Codec>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    step: usize,
    tensors: Vec<TensorSpec>,
    #[serde(default)]
    codec: Option<Codec>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &Transformer<f32>, step: usize, codec: Option<Codec>) -> Checkpoint {
        Checkpoint {
            config: model.cfg.clone(),
            step,
            params: model.params.clone(),
            codec,
            meta: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<Transformer<f32>> {
        Transformer::from_params(&self.config, self.params.clone())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout().spec(name).map(|s| &self.params[s.range()])
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let total = self.layout().total;
        if self.params.len() != total {
            return Err(Error::Checkpoint(format!(
                "config needs {total} parameters, found {}",
                self.params.len()
            )));
        }
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("parameter {i} is not finite")));
        }
        if let Some(codec) = &self.codec {
            if codec.vocab().len() != self.config.vocab_size {
                return Err(Error::Checkpoint(format!(
                    "codec has {} tokens but the model has {}",
                    codec.vocab().len(),
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            format: "plmw1".into(),
            config: self.config.clone(),
            step: self.step,
            tensors: self.layout().specs,
            codec: self.codec.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(9 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(Error::Checkpoint("missing plmw1 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes
            .get(9..9 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let expected = Layout::new(&header.config).specs;
        if header.tensors != expected {
            return Err(Error::Checkpoint(
                "tensor table does not match the embedded config".into(),
            ));
        }
        let data = &bytes[9 + hlen..];
        if data.len() % 4 != 0 {
            return Err(Error::Checkpoint("data section is not a whole number of floats".into()));
        }
        let params = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ckpt = Checkpoint {
            config: header.config,
            step: header.step,
            params,
            codec: header.codec,
            meta: header.meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Grows the vocabulary by the given specials. New embedding rows (which are
/// also the output rows, the projection being tied) start at the mean of the
/// existing rows plus gaussian noise; every other parameter is copied.
pub fn extend_vocab(ckpt: &Checkpoint, codec: &Codec, new: &[Special], seed: u64) -> Result<(Checkpoint, Codec)> {
    if codec.vocab().len() != ckpt.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "codec has {} tokens but the model has {}",
            codec.vocab().len(),
            ckpt.config.vocab_size
        )));
    }
    let mut vocab = codec.vocab().clone();
    for &s in new {
        vocab.add_special(s)?;
    }
    if new.is_empty() {
        return Ok((ckpt.clone(), codec.clone()));
    }
    let new_codec = codec.with_specials(new);
    let old_v = ckpt.config.vocab_size;
    let new_v = new_codec.vocab().len();
    let d = ckpt.config.d_model;
    let config = ModelConfig {
        vocab_size: new_v,
        ..ckpt.config.clone()
    };

    let old_layout = ckpt.layout();
    let new_layout = Layout::new(&config);
    let mut params = vec![0f32; new_layout.total];
    for (o, n) in old_layout.specs.iter().zip(&new_layout.specs) {
        params[n.offset..n.offset + o.len()].copy_from_slice(&ckpt.params[o.range()]);
    }

    let wte = &ckpt.params[old_layout.wte..old_layout.wte + old_v * d];
    let mut mean = vec![0f64; d];
    for row in wte.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= old_v as f64;
    }
    let mut rng = Rng::derive(seed, 0xe0b);
    for r in old_v..new_v {
        let row = &mut params[new_layout.wte + r * d..new_layout.wte + (r + 1) * d];
        for (p, m) in row.iter_mut().zip(&mean) {
            *p = (m + rng.normal() * INIT_STD) as f32;
        }
    }

    let out = Checkpoint {
        config,
        step: ckpt.step,
        params,
        codec: Some(new_codec.clone()),
        meta: ckpt.meta.clone(),
    };
    out.validate()?;
    Ok((out, new_codec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::lm::tensor::log_softmax_f64;
    use crate::textcodec::CodecMode;

    fn setup() -> (Checkpoint, Codec) {
        let docs = vec![Document {
            id: "a".into(),
            prompt: "ab".into(),
            paragraphs: vec!["abc cab".into(), "bca".into()],
            lang: Default::default(),
        }];
        let codec = Codec::train(&docs, CodecMode::Char, 0, &[]).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            context_len: 8,
            vocab_size: codec.vocab().len(),
            dropout: 0.0,
            seed: 5,
        };
        let model = Transformer::<f32>::init(&cfg).unwrap();
        (Checkpoint::new(&model, 3, Some(codec.clone())), codec)
    }

    #[test]
    fn round_trip() {
        let (ckpt, _) = setup();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"plmw1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.step, 3);
        assert_eq!(back.config, ckpt.config);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let (mut ckpt, _) = setup();
        ckpt.params[0] = f32::NAN;
        assert!(ckpt.to_bytes().is_err());
    }

    #[test]
    fn extend_adds_one_row_near_mean() {
        let (ckpt, codec) = setup();
        let (ext, new_codec) = extend_vocab(&ckpt, &codec, &[Special::Eop], 9).unwrap();
        let (v, d) = (ckpt.config.vocab_size, ckpt.config.d_model);
        assert_eq!(ext.config.vocab_size, v + 1);
        assert_eq!(new_codec.vocab().special(Special::Eop), Some(v as u32));

        let old = ckpt.tensor("wte").unwrap();
        let new = ext.tensor("wte").unwrap();
        assert_eq!(&new[..v * d], old);
        for i in 0..d {
            let mean: f32 = (0..v).map(|r| old[r * d + i]).sum::<f32>() / v as f32;
            // 6 sigma
            assert!((new[v * d + i] - mean).abs() < 0.12);
        }
        for s in ckpt.layout().specs.iter().skip(1) {
            assert_eq!(ckpt.tensor(&s.name), ext.tensor(&s.name), "{}", s.name);
        }
    }

    #[test]
    fn extend_changes_old_logits_only_through_new_row() {
        let (ckpt, codec) = setup();
        let (ext, _) = extend_vocab(&ckpt, &codec, &[Special::Eop], 1).unwrap();
        let ids = [1, 2, 3];
        let a = ckpt.model().unwrap().logits(&ids).unwrap();
        let b = ext.model().unwrap().logits(&ids).unwrap();
        let v = ckpt.config.vocab_size;
        for t in 0..ids.len() {
            assert_eq!(a[t * v..(t + 1) * v], b[t * (v + 1)..t * (v + 1) + v]);
            // renormalizing the old entries recovers the old distribution
            let la = log_softmax_f64(&a[t * v..(t + 1) * v]);
            let lb = log_softmax_f64(&b[t * (v + 1)..t * (v + 1) + v]);
            for (x, y) in la.iter().zip(&lb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn extend_rejects_duplicates_and_accepts_nothing() {
        let (ckpt, codec) = setup();
        assert!(extend_vocab(&ckpt, &codec, &[Special::Eos], 0).is_err());
        let (same, _) = extend_vocab(&ckpt, &codec, &[], 0).unwrap();
        assert_eq!(same.params, ckpt.params);
        assert_eq!(same.config, ckpt.config);
    }
}
