use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};

/// Named parameter tensors. Iteration order is the lexicographic name
/// order, which fixes the byte layout of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

const MANIFEST: &str = "manifest.txt";

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {}", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// FNV-1a over names and the exact f64 bit patterns of the selected tensors.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.map.iter().filter(|(n, _)| select(n)) {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Rounds every value through f32, the precision checkpoints store.
    pub fn quantize(&mut self) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Writes one TNSR file per parameter plus `manifest.txt` with
    /// `name file dims` lines.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = Vec::new();
        for (name, t) in &self.map {
            let file = format!("{}.tnsr", name);
            write_tnsr(t, dir.join(&file))?;
            let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "{} {} {}", name, file, dims.join("x"))?;
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| {
            Error::Precondition(format!("no checkpoint manifest in {}: {}", dir.display(), e))
        })?;
        let mut params = Params::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, file, dims] = parts[..] else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `name file dims`, got {:?}", line),
                });
            };
            let dims: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("bad dims: {}", e),
                })?;
            let t = read_tnsr(dir.join(file))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Format(format!(
                    "{}: manifest dims {:?} but file holds {:?}",
                    name,
                    dims,
                    t.dims()
                )));
            }
            params.insert(name, t);
        }
        Ok(params)
    }
}
