//! Checkpoints: a flat binary of named parameters plus a text manifest.
//!
//! Binary layout, repeated per parameter in store order:
//! `u32 name length`, name bytes (UTF-8), `u32 rank`, `rank × u32` extents,
//! then `f32` values. All integers and floats are little-endian.
//!
//! The manifest holds `key = value` lines describing the architecture and
//! seeds, enough to rebuild the model before loading its weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::inn::Clamp;
use crate::models::{Autoencoder, ModelSpec};
use crate::tensor::{Real, Tensor};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Serialises every parameter of `store` in order.
pub fn encode_params<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.count() * 4 + store.len() * 64);
    for (_, p) in store.iter() {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        let shape = p.value().shape();
        out.extend((shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend((e as u32).to_le_bytes());
        }
        for v in p.value().data() {
            out.extend(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a parameter binary into `(name, tensor)` pairs in file order.
pub fn decode_params<T: Real>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32("name length")?;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| {
            r.pos = start;
            r.err("parameter name is not UTF-8")
        })?;
        let name = name.to_owned();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Copies named tensors into `store`, which must hold exactly the same
/// names with the same shapes.
pub fn assign_params<T: Real>(store: &mut ParamStore<T>, params: Vec<(String, Tensor<T>)>) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Contract(format!("checkpoint parameter {name:?} not in model")))?;
        let expected = store.get(id).value().shape().to_vec();
        if expected != value.shape() {
            return Err(Error::Shape {
                op: "checkpoint",
                lhs: expected,
                rhs: value.shape().to_vec(),
            });
        }
        store.set_value(id, value)?;
    }
    Ok(())
}

pub fn manifest_text(spec: &ModelSpec, param_count: usize) -> String {
    let clamp = match spec.clamp {
        Clamp::Soft(c) => c.to_string(),
        Clamp::Off => "off".into(),
    };
    let mut s = String::new();
    s += &format!("dataset = {}\n", spec.dataset);
    s += &format!("model = {}\n", spec.kind);
    s += &format!("bottleneck = {}\n", spec.k);
    s += &format!("clamp = {clamp}\n");
    s += &format!("seed = {}\n", spec.seed);
    s += &format!("param_count = {param_count}\n");
    if spec.kind.is_inn() {
        let arch = spec.inn_architecture();
        s += &format!("conv_couplings = {}\n", arch.conv_couplings);
        s += &format!("conv_hidden = {}\n", arch.conv_hidden);
        s += &format!("fc_hidden = {}\n", arch.fc_hidden);
        s += &format!("init_seed = {}\n", arch.init_seed);
        s += &format!("permutation_seed = {}\n", arch.permutation_seed);
    }
    s
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed.split_once('=').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("expected `key = value`, got {trimmed:?}"),
            })?;
            map.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        offset += line.len() as u64;
    }
    Ok(map)
}

pub fn parse_clamp(s: &str) -> Result<Clamp> {
    if s == "off" {
        return Ok(Clamp::Off);
    }
    match s.parse::<f64>() {
        Ok(c) if c > 0.0 && c.is_finite() => Ok(Clamp::Soft(c)),
        _ => Err(Error::Config(format!("clamp must be a positive number or `off`, got {s:?}"))),
    }
}

pub fn spec_from_manifest(map: &BTreeMap<String, String>) -> Result<ModelSpec> {
    let get = |key: &str| {
        map.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("manifest is missing `{key}`")))
    };
    let num = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Config(format!("manifest `{key}` is not an integer")))
    };
    Ok(ModelSpec {
        dataset: get("dataset")?.parse()?,
        kind: get("model")?.parse()?,
        k: num("bottleneck")? as usize,
        clamp: parse_clamp(get("clamp")?)?,
        seed: num("seed")?,
    })
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save<T: Real>(dir: &Path, spec: &ModelSpec, model: &Autoencoder<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir.join(PARAMS_FILE), &encode_params(model.params()))?;
    write(dir.join(MANIFEST_FILE), manifest_text(spec, model.param_count()).as_bytes())
}

/// Rebuilds the model named by the manifest and loads its weights.
pub fn load<T: Real>(dir: &Path) -> Result<(ModelSpec, Autoencoder<T>)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let spec = spec_from_manifest(&parse_key_values(&text, &mpath)?)?;
    let mut model = spec.build::<T>()?;
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    assign_params(model.params_mut(), decode_params(&bytes, &ppath)?)?;
    Ok((spec, model))
}
