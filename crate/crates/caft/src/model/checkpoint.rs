//! Checkpoint file: magic "CAFT", u32 LE format version, a length-prefixed
//! UTF-8 `key=value` config block, then every parameter in registry order as
//! name (length-prefixed UTF-8), rank u32 LE, dims u32 LE, f64 LE values.
//! Round-trips are bit-exact.

use super::{Mode, Model, ModelConfig, ModelError, Params, Result};
use crate::corpus::TaskKind;
use crate::tensor::Tensor;
use std::fs;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CAFT";
const VERSION: u32 = 1;

fn config_to_text(cfg: &ModelConfig) -> String {
    format!(
        "frame_dim={}\nhidden_dim={}\nencoder_layers={}\nattention_heads={}\nvocab_size={}\nnum_classes={}\ncontext_dim={}\nmode={}\ntask={}\npositional_encoding={}\ndetach_target={}\ntrain_with_target_embedding={}\n",
        cfg.frame_dim,
        cfg.hidden_dim,
        cfg.encoder_layers,
        cfg.attention_heads,
        cfg.vocab_size,
        cfg.num_classes,
        cfg.context_dim,
        cfg.mode,
        cfg.task,
        cfg.positional_encoding,
        cfg.detach_target,
        cfg.train_with_target_embedding
    )
}

fn config_from_text(text: &str, path: &Path) -> Result<ModelConfig> {
    let bad = |detail: String| ModelError::Malformed { path: path.to_path_buf(), detail };
    let mut pairs = std::collections::HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("config line without '=': {:?}", line)))?;
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(format!("duplicate config key {:?}", k)));
        }
    }
    let mut take = |key: &str| pairs.remove(key).ok_or_else(|| bad(format!("missing config key {:?}", key)));
    let parse_usize = |key: &str, v: String| v.parse::<usize>().map_err(|_| bad(format!("bad value for {}: {:?}", key, v)));
    let parse_bool = |key: &str, v: String| v.parse::<bool>().map_err(|_| bad(format!("bad value for {}: {:?}", key, v)));

    let cfg = ModelConfig {
        frame_dim: parse_usize("frame_dim", take("frame_dim")?)?,
        hidden_dim: parse_usize("hidden_dim", take("hidden_dim")?)?,
        encoder_layers: parse_usize("encoder_layers", take("encoder_layers")?)?,
        attention_heads: parse_usize("attention_heads", take("attention_heads")?)?,
        vocab_size: parse_usize("vocab_size", take("vocab_size")?)?,
        num_classes: parse_usize("num_classes", take("num_classes")?)?,
        context_dim: parse_usize("context_dim", take("context_dim")?)?,
        mode: take("mode")?.parse::<Mode>().map_err(|e| bad(e))?,
        task: take("task")?.parse::<TaskKind>().map_err(|e| bad(e))?,
        positional_encoding: parse_bool("positional_encoding", take("positional_encoding")?)?,
        detach_target: parse_bool("detach_target", take("detach_target")?)?,
        train_with_target_embedding: parse_bool("train_with_target_embedding", take("train_with_target_embedding")?)?,
    };
    if let Some(key) = pairs.keys().next() {
        return Err(bad(format!("unknown config key {:?}", key)));
    }
    Ok(cfg)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = config_to_text(model.cfg());
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    for (name, tensor) in model.params().iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Truncated { path: self.path.to_path_buf() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn utf8(&mut self, len: usize) -> Result<String> {
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ModelError::Malformed {
            path: self.path.to_path_buf(),
            detail: "invalid UTF-8 in checkpoint".into(),
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };

    if r.take(4)? != MAGIC {
        return Err(ModelError::BadMagic { path: path.to_path_buf() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::BadVersion { path: path.to_path_buf(), found: version });
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = r.utf8(cfg_len)?;
    let cfg = config_from_text(&cfg_text, path)?;

    let expected = Params::zeros(&cfg)?;
    let mut tensors = Vec::with_capacity(expected.len());
    for (want_name, want_tensor) in expected.iter() {
        let name_len = r.u32()? as usize;
        let name = r.utf8(name_len)?;
        if name != want_name {
            return Err(ModelError::Malformed {
                path: path.to_path_buf(),
                detail: format!("parameter {:?} where registry expects {:?}", name, want_name),
            });
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != want_tensor.shape() {
            return Err(ModelError::Malformed {
                path: path.to_path_buf(),
                detail: format!("parameter {} has shape {:?}, registry expects {:?}", name, shape, want_tensor.shape()),
            });
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor::new(shape, data).map_err(ModelError::Tensor)?);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes after last parameter", bytes.len() - r.pos),
        });
    }

    let mut params = Params::zeros(&cfg)?;
    params.set_all(&tensors)?;
    Model::new(cfg, params)
}
