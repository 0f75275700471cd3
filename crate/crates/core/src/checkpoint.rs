//! Binary checkpoint container for model and tokenizer weights.
//!
//! Layout (little-endian): magic `RADR`, `u32` version, `u32` byte length of
//! a UTF-8 block of `key=value` lines, `u32` tensor count, then per tensor a
//! `u32` name length and name bytes, `u32` rank, `u64` dims, and `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::{Anchor, Extent, RingSchedule};
use crate::model::{Model, ModelConfig, Params, StepIndexing};
use crate::tokenizer::VqTokenizer;

pub const MAGIC: &[u8; 4] = b"RADR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.config.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.config.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| bad(format!("missing config key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?.parse().map_err(|_| bad(format!("bad value for {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let mut block = String::new();
        for (k, v) in &self.config {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(bad(format!("config entry {k:?} cannot be encoded")));
            }
            block.push_str(k);
            block.push('=');
            block.push_str(v);
            block.push('\n');
        }
        w.write_u32::<LittleEndian>(block.len() as u32)?;
        w.write_all(block.as_bytes())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(bad(format!("tensor {} shape does not match its data", t.name)));
            }
            w.write_u32::<LittleEndian>(t.name.len() as u32)?;
            w.write_all(t.name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &x in &t.data {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut block = vec![0u8; len];
        r.read_exact(&mut block)?;
        let block = String::from_utf8(block).map_err(|_| bad("config block is not UTF-8"))?;
        let mut config = Vec::new();
        for line in block.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Adds model configuration and every parameter tensor.
    pub fn put_model(&mut self, model: &Model<f32>) {
        let c = &model.cfg;
        self.set("model.vocab_size", c.vocab_size);
        self.set("model.num_classes", c.num_classes);
        self.set("model.dim", c.dim);
        self.set("model.num_layers", c.num_layers);
        self.set("model.num_heads", c.num_heads);
        self.set("model.mlp_ratio", c.mlp_ratio);
        self.set("model.max_grid", format!("{} {}", c.max_grid.0, c.max_grid.1));
        self.set("model.max_steps", c.max_steps);
        self.set("model.dropout", c.dropout);
        let idx = match c.step_indexing {
            StepIndexing::Ordinal => "ordinal",
            StepIndexing::Schedule => "schedule",
        };
        self.set("model.step_indexing", idx);
        for (spec, data) in Params::<f32>::spec(c).into_iter().zip(model.params.tensors()) {
            self.tensors.push(Tensor { name: format!("model.{}", spec.name), shape: spec.shape, data: data.clone() });
        }
    }

    pub fn has_model(&self) -> bool {
        self.get("model.vocab_size").is_some()
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let grid = self.require("model.max_grid")?;
        let mut it = grid.split_whitespace().map(|s| s.parse::<usize>());
        let max_grid = match (it.next(), it.next()) {
            (Some(Ok(h)), Some(Ok(w))) => (h, w),
            _ => return Err(bad("bad model.max_grid")),
        };
        let cfg = ModelConfig {
            vocab_size: self.parse("model.vocab_size")?,
            num_classes: self.parse("model.num_classes")?,
            dim: self.parse("model.dim")?,
            num_layers: self.parse("model.num_layers")?,
            num_heads: self.parse("model.num_heads")?,
            mlp_ratio: self.parse("model.mlp_ratio")?,
            max_grid,
            max_steps: self.parse("model.max_steps")?,
            dropout: self.parse("model.dropout")?,
            step_indexing: match self.require("model.step_indexing")? {
                "ordinal" => StepIndexing::Ordinal,
                "schedule" => StepIndexing::Schedule,
                other => return Err(bad(format!("unknown step indexing {other:?}"))),
            },
        };
        cfg.validate()?;
        let mut params = Params::<f32>::zeros(&cfg);
        for (spec, dst) in Params::<f32>::spec(&cfg).into_iter().zip(params.tensors_mut()) {
            let name = format!("model.{}", spec.name);
            let t = self.tensor(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape != spec.shape {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape, spec.shape)));
            }
            dst.copy_from_slice(&t.data);
        }
        Model::from_params(cfg, params)
    }

    pub fn put_schedule(&mut self, s: &RingSchedule) {
        self.set("schedule.grid", format!("{} {}", s.grid_height(), s.grid_width()));
        self.set("schedule.anchor", s.anchor());
        let ex: Vec<String> = s.extents().iter().map(|e| e.to_string()).collect();
        self.set("schedule.extents", ex.join(";"));
    }

    pub fn schedule(&self) -> Result<Option<RingSchedule>> {
        let Some(grid) = self.get("schedule.grid") else { return Ok(None) };
        let dims: Vec<usize> =
            grid.split_whitespace().map(|s| s.parse().map_err(|_| bad("bad schedule.grid"))).collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(bad("bad schedule.grid"));
        }
        let anchor: Anchor = self.require("schedule.anchor")?.parse()?;
        let mut extents = Vec::new();
        for part in self.require("schedule.extents")?.split(';') {
            let v: Vec<usize> = part
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| bad(format!("bad extent {part:?}"))))
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(bad(format!("bad extent {part:?}")));
            }
            extents.push(Extent::new(v[0], v[1], v[2], v[3])?);
        }
        RingSchedule::from_extents(dims[0], dims[1], anchor, extents).map(Some)
    }

    pub fn put_tokenizer(&mut self, t: &VqTokenizer) {
        self.set("tokenizer.vocab_size", t.vocab_size);
        self.set("tokenizer.latent_dim", t.latent_dim);
        self.set("tokenizer.patch_size", t.patch_size);
        self.set("tokenizer.channels", t.channels);
        let (v, d, p) = (t.vocab_size, t.latent_dim, t.patch_dim());
        for (name, shape, data) in [
            ("tokenizer.codebook", vec![v, d], &t.codebook),
            ("tokenizer.enc_w", vec![p, d], &t.enc_w),
            ("tokenizer.enc_b", vec![d], &t.enc_b),
            ("tokenizer.dec_w", vec![d, p], &t.dec_w),
            ("tokenizer.dec_b", vec![p], &t.dec_b),
        ] {
            self.tensors.push(Tensor { name: name.into(), shape, data: data.clone() });
        }
    }

    pub fn tokenizer(&self) -> Result<Option<VqTokenizer>> {
        if self.get("tokenizer.vocab_size").is_none() {
            return Ok(None);
        }
        let get = |name: &str| -> Result<Vec<f32>> {
            self.tensor(name).map(|t| t.data.clone()).ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let t = VqTokenizer {
            vocab_size: self.parse("tokenizer.vocab_size")?,
            latent_dim: self.parse("tokenizer.latent_dim")?,
            patch_size: self.parse("tokenizer.patch_size")?,
            channels: self.parse("tokenizer.channels")?,
            codebook: get("tokenizer.codebook")?,
            enc_w: get("tokenizer.enc_w")?,
            enc_b: get("tokenizer.enc_b")?,
            dec_w: get("tokenizer.dec_w")?,
            dec_b: get("tokenizer.dec_b")?,
        };
        t.validate()?;
        Ok(Some(t))
    }
}
