use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::{Param, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "RTCKPT";
const VERSION: u32 = 1;

/// Named parameter arrays plus the hyper-parameters needed to rebuild the
/// module that owns them.
///
/// On disk: a text header (`RTCKPT 1`, `module`, `joints`, `meta` lines, one
/// `tensor <name> <offset> <d0,d1,..>` line per array, then `data <count>`)
/// followed by `count` little-endian `f64` values in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub module: String,
    pub joints: usize,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<'a>(
        module: &str,
        joints: usize,
        params: impl IntoIterator<Item = &'a Param>,
    ) -> Self {
        Self {
            module: module.to_string(),
            joints,
            meta: BTreeMap::new(),
            tensors: params
                .into_iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_parse(key)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_parse(key)
    }

    pub fn with_meta_list(self, key: &str, values: &[usize]) -> Self {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.with_meta(key, s.join(","))
    }

    pub fn meta_list(&self, key: &str) -> Result<Vec<usize>> {
        let s = self.meta_str(key)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!(
                    "{} checkpoint: bad `{key}` list {s:?}",
                    self.module
                ))
            })
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("{} checkpoint lacks `{key}`", self.module)))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.meta_str(key)?;
        s.parse().map_err(|_| {
            Error::Config(format!(
                "{} checkpoint: bad `{key}` value {s:?}",
                self.module
            ))
        })
    }

    /// Copies stored values into `params`, matching by name and shape.
    pub fn load_into<'a>(
        &self,
        module: &str,
        params: impl IntoIterator<Item = &'a mut Param>,
    ) -> Result<()> {
        if self.module != module {
            return Err(Error::Config(format!(
                "expected a {module} checkpoint, found {}",
                self.module
            )));
        }
        let by_name: BTreeMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut used = 0;
        for p in params {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
            used += 1;
        }
        if used != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model uses {used}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut header = format!(
            "{MAGIC} {VERSION}\nmodule {}\njoints {}\n",
            self.module, self.joints
        );
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {offset} {}\n", dims.join(",")));
            offset += t.numel();
        }
        header.push_str(&format!("data {offset}\n"));
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(offset * 8);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read, origin: &str) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut lineno = 0;
        let mut next_line = |r: &mut BufReader<_>| -> Result<(usize, String)> {
            let mut s = String::new();
            r.read_line(&mut s)?;
            lineno += 1;
            if s.is_empty() {
                return Err(Error::parse(origin, lineno, "unexpected end of header"));
            }
            Ok((lineno, s.trim_end_matches('\n').to_string()))
        };

        let (n, magic) = next_line(&mut r)?;
        if magic != format!("{MAGIC} {VERSION}") {
            return Err(Error::parse(
                origin,
                n,
                format!("expected `{MAGIC} {VERSION}`, found {magic:?}"),
            ));
        }
        let (n, line) = next_line(&mut r)?;
        let module = line
            .strip_prefix("module ")
            .ok_or_else(|| Error::parse(origin, n, "expected `module <name>`"))?
            .to_string();
        let (n, line) = next_line(&mut r)?;
        let joints = line
            .strip_prefix("joints ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(origin, n, "expected `joints <count>`"))?;

        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        let total = loop {
            let (n, line) = next_line(&mut r)?;
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match key {
                "meta" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::parse(origin, n, "expected `meta <key> <value>`"))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let bad =
                        || Error::parse(origin, n, "expected `tensor <name> <offset> <shape>`");
                    if f.len() != 3 {
                        return Err(bad());
                    }
                    let offset: usize = f[1].parse().map_err(|_| bad())?;
                    let shape: Vec<usize> = if f[2].is_empty() {
                        Vec::new()
                    } else {
                        f[2].split(',')
                            .map(|d| d.parse())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad())?
                    };
                    manifest.push((n, f[0].to_string(), offset, shape));
                }
                "data" => {
                    break rest
                        .parse::<usize>()
                        .map_err(|_| Error::parse(origin, n, "expected `data <count>`"))?;
                }
                _ => {
                    return Err(Error::parse(
                        origin,
                        n,
                        format!("unknown header line {line:?}"),
                    ))
                }
            }
        };

        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != total * 8 {
            return Err(Error::parse(
                origin,
                lineno,
                format!(
                    "data block holds {} bytes, header promises {}",
                    bytes.len(),
                    total * 8
                ),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(manifest.len());
        for (n, name, offset, shape) in manifest {
            let len: usize = shape.iter().product();
            if offset + len > total {
                return Err(Error::parse(
                    origin,
                    n,
                    format!("tensor {name} runs past the data block"),
                ));
            }
            tensors.push((
                name,
                Tensor::new(&shape, values[offset..offset + len].to_vec())?,
            ));
        }
        Ok(Self {
            module,
            joints,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::read_from(fs::File::open(path)?, &path.display().to_string())
    }
}
