//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RCRN" | version: u32 | entry count: u32
//! entry: name length: u16 | name (UTF-8) | rank: u8 | extents: u64 × rank | scalars: f32 × Π extents
//! ```
//!
//! The first entry is named `config`: a rank-1 tensor whose scalars are the
//! bytes of a UTF-8 `key=value` text, one byte per scalar.

use std::fs;
use std::path::Path;

use crate::cells::Atom;
use crate::data::Vocab;
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::numerics::{ParamSet, Real, Tensor};
use crate::scan::OutputGateMode;

pub const MAGIC: &[u8; 4] = b"RCRN";
pub const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "config";

/// Raw checkpoint contents: the config text and every tensor in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Format(format!("checkpoint config lacks {key}")))
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint config {key}={raw:?} is invalid")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = self.config_text();
        let config = Tensor::from_fn([text.len().max(1)], |i| text.as_bytes().get(i).copied().unwrap_or(b'\n') as f32);
        let mut out = Vec::with_capacity(12 + self.tensors.iter().map(|(_, t)| t.len() * 4 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len() + 1).map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        write_entry(&mut out, CONFIG_ENTRY, &config)?;
        for (name, t) in &self.tensors {
            write_entry(&mut out, name, t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(Error::Format("checkpoint has no config entry".into()));
        }
        let (name, config) = r.entry()?;
        if name != CONFIG_ENTRY || config.rank() != 1 {
            return Err(Error::Format(format!("first entry is {name:?}, expected {CONFIG_ENTRY:?}")));
        }
        let text = config
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Format("config entry holds a non-byte scalar".into()))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("config entry is not UTF-8".into()))?;
        let config = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("config line {l:?} lacks '='")))
            })
            .collect::<Result<_>>()?;
        let tensors = (1..count).map(|_| r.entry()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Captures `model` and its parameters (rounded to single precision),
    /// plus the vocabulary and label names needed to read new text.
    pub fn from_model<T: Real>(model: &Classifier, params: &ParamSet<T>, vocab: Option<&Vocab>, labels: &[String]) -> Self {
        let c = &model.config;
        let e = &c.encoder;
        let mut config = vec![
            ("encoder_kind", e.kind.to_string()),
            ("atom", e.atom.to_string()),
            ("hidden_dim", e.hidden_dim.to_string()),
            ("output_gate_mode", e.output_gate_mode.to_string()),
            ("seed", e.seed.to_string()),
            ("embed_dim", e.input_dim.to_string()),
            ("vocab_size", c.vocab_size.to_string()),
            ("head_hidden", c.head_hidden.to_string()),
            ("class_count", c.class_count.to_string()),
            ("embed_trainable", c.embed_trainable.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect::<Vec<_>>();
        if let Some(v) = vocab {
            config.push(("vocab".into(), v.tokens()[2..].join(" ")));
        }
        if !labels.is_empty() {
            config.push(("labels".into(), labels.join("\t")));
        }
        let tensors = params.iter().map(|(_, p)| (p.name.clone(), p.value.cast::<f32>())).collect();
        Checkpoint { config, tensors }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut encoder = EncoderConfig::new(self.parse::<EncoderKind>("encoder_kind")?, self.parse("embed_dim")?, self.parse("hidden_dim")?);
        encoder.atom = self.parse::<Atom>("atom")?;
        encoder.output_gate_mode = self.parse::<OutputGateMode>("output_gate_mode")?;
        encoder.seed = self.parse("seed")?;
        Ok(ModelConfig {
            encoder,
            vocab_size: self.parse("vocab_size")?,
            head_hidden: self.parse("head_hidden")?,
            class_count: self.parse("class_count")?,
            embed_trainable: self.parse("embed_trainable")?,
        })
    }

    /// Rebuilds the classifier and fills every parameter from the file.
    /// Missing, extra or misshapen tensors are format errors.
    pub fn to_model<T: Real>(&self) -> Result<(Classifier, ParamSet<T>)> {
        let config = self.model_config()?;
        let (model, mut params) = Classifier::init::<T>(config, None).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if self.tensors.len() != params.len() {
            return Err(Error::Format(format!("checkpoint holds {} tensors, model has {}", self.tensors.len(), params.len())));
        }
        for (name, t) in &self.tensors {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
            params
                .set(id, t.cast::<T>())
                .map_err(|_| Error::Format(format!("tensor {name:?} has shape {:?}", t.shape())))?;
        }
        Ok((model, params))
    }

    pub fn vocab(&self) -> Result<Option<Vocab>> {
        let Some(v) = self.get("vocab") else {
            return Ok(None);
        };
        let mut tokens = Vocab::new().tokens().to_vec();
        tokens.extend(v.split(' ').filter(|t| !t.is_empty()).map(str::to_string));
        Vocab::from_tokens(tokens).map(Some)
    }

    pub fn labels(&self) -> Vec<String> {
        self.get("labels").map(|l| l.split('\t').map(str::to_string).collect()).unwrap_or_default()
    }
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, model: &Classifier, params: &ParamSet<T>, vocab: Option<&Vocab>, labels: &[String]) -> Result<()> {
    Checkpoint::from_model(model, params, vocab, labels).save(path)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Classifier, ParamSet<T>)> {
    Checkpoint::load(path)?.to_model()
}

/// Bytes taken by one entry.
pub fn entry_size(name: &str, shape: &[usize]) -> usize {
    2 + name.len() + 1 + 8 * shape.len() + 4 * shape.iter().product::<usize>()
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name:.32}…")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("{name}: rank {} too large", t.rank())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
            shape.push(usize::try_from(e).map_err(|_| Error::Format(format!("{name}: extent {e} too large")))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
        let data = self
            .take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Checkpoint {
        Checkpoint {
            config: vec![("k".into(), "v".into())],
            tensors: vec![
                ("a".into(), Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap()),
                ("bias".into(), Tensor::new([4], vec![-0.5, 0.25, f32::MIN_POSITIVE, 1e30]).unwrap()),
            ],
        }
    }

    #[test]
    fn byte_count_of_two_tensor_fixture() {
        let bytes = fixture().to_bytes().unwrap();
        let header = 4 + 4 + 4;
        let config = entry_size("config", &[4]); // "k=v\n"
        assert_eq!(bytes.len(), header + config + entry_size("a", &[2, 3]) + entry_size("bias", &[4]));
        assert_eq!(bytes.len(), 12 + 33 + 44 + 31);
        assert_eq!(&bytes[..4], b"RCRN");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 3, 0, 0, 0]);
    }

    #[test]
    fn roundtrip() {
        let c = fixture();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = fixture().to_bytes().unwrap();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
