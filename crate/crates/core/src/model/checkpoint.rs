//! Versioned checkpoint: a text header (config echo and parameter table)
//! followed by the little-endian parameter values in table order.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{ModelConfig, MvpModel};
use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "MVPCKPT 1";

pub fn write_checkpoint<T: Real, W: Write>(model: &MvpModel<T>, mut out: W) -> Result<()> {
    let mut header = format!("{CHECKPOINT_MAGIC}\ndtype {}\n", T::NAME);
    let pairs = model.config().to_pairs();
    header += &format!("config {}\n", pairs.len());
    for (k, v) in pairs {
        header += &format!("{k} = {v}\n");
    }
    header += &format!("params {}\n", model.params().len());
    for (_, name, t) in model.params().iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header += &format!("{name} {}\n", dims.join(" "));
    }
    header += "\n";
    let mut bytes = header.into_bytes();
    for (_, _, t) in model.params().iter() {
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(Error::MalformedHeader("checkpoint header truncated".into()));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

fn counted<R: BufRead>(r: &mut R, tag: &str) -> Result<usize> {
    let l = line(r)?;
    l.strip_prefix(tag)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("expected `{tag} <count>`, got {l:?}")))
}

pub fn read_checkpoint<T: Real, R: BufRead>(mut r: R) -> Result<MvpModel<T>> {
    let magic = line(&mut r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader(format!("bad checkpoint magic {magic:?}")));
    }
    let dtype = line(&mut r)?;
    if dtype != format!("dtype {}", T::NAME) {
        return Err(Error::MalformedHeader(format!("checkpoint {dtype:?}, reader expects {}", T::NAME)));
    }
    let mut config = ModelConfig::default();
    for _ in 0..counted(&mut r, "config")? {
        let l = line(&mut r)?;
        let (k, v) = l.split_once(" = ").ok_or_else(|| Error::MalformedHeader(format!("config line {l:?}")))?;
        if !config.set(k, v)? {
            return Err(Error::MalformedHeader(format!("unknown config key {k:?}")));
        }
    }
    let n = counted(&mut r, "params")?;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let l = line(&mut r)?;
        let mut it = l.split(' ');
        let name = it.next().unwrap_or_default().to_string();
        let shape = it
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::MalformedHeader(format!("parameter line {l:?}")))?;
        table.push((name, shape));
    }
    if !line(&mut r)?.is_empty() {
        return Err(Error::MalformedHeader("missing blank line after parameter table".into()));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let expected: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>() * T::BYTES;
    if body.len() != expected {
        return Err(Error::SizeMismatch { expected, found: body.len() });
    }
    let mut store = ParamStore::new();
    let mut chunks = body.chunks_exact(T::BYTES);
    for (name, shape) in table {
        let count = shape.iter().product();
        let data: Vec<T> = chunks.by_ref().take(count).map(T::read_le).collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    MvpModel::from_params(config, store)
}

pub fn save_checkpoint<T: Real>(model: &MvpModel<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<MvpModel<T>> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    read_checkpoint(std::io::BufReader::new(f))
}
