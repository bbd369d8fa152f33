use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, Scalar, Tape, Tensor, Var};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named, ordered parameters. Non-trainable entries (running statistics)
/// are bound to the tape as constants.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

/// The tape variables of a store for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Parameter(format!(
                "{}: shape {:?} replaced by {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Registers every entry on `tape`. Trainable entries become gradient
    /// leaves unless `frozen` is set.
    pub fn bind(&self, tape: &Tape<T>, frozen: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable && !frozen))
            .collect();
        Bound { vars }
    }

    /// Same layout, values cast to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// True when both stores hold identical names, flags and bits.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.trainable == b.trainable && a.value == b.value
            })
    }
}

/// A parameter store plus free-form metadata, persisted as `manifest.txt`
/// and `params.eqt` inside a directory.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut m = BufWriter::new(File::create(dir.join("manifest.txt"))?);
        for (k, v) in &self.meta {
            writeln!(m, "meta {k}={v}")?;
        }
        for e in &self.params.entries {
            let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            let kind = if e.trainable { "param" } else { "buffer" };
            writeln!(m, "{kind} {} {}", e.name, shape.join("x"))?;
        }
        m.flush()?;
        let tensors: Vec<Tensor<T>> = self.params.entries.iter().map(|e| e.value.clone()).collect();
        let mut p = BufWriter::new(File::create(dir.join("params.eqt"))?);
        write_tensors(&mut p, &tensors)?;
        p.flush()?;
        Ok(())
    }

    /// Loads a checkpoint, casting stored values to `T`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = BufReader::new(File::open(dir.join("manifest.txt"))?);
        let mut meta = BTreeMap::new();
        let mut layout = Vec::new();
        for line in manifest.lines() {
            let line = line?;
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(kv)) => {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                (Some(kind @ ("param" | "buffer")), Some(rest)) => {
                    let (name, shape) = rest
                        .rsplit_once(' ')
                        .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
                    let shape = shape
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Format(format!("{line:?}: {e}")))?;
                    layout.push((name.to_string(), shape, kind == "param"));
                }
                _ if line.trim().is_empty() => {}
                _ => return Err(Error::Format(format!("bad manifest line {line:?}"))),
            }
        }
        let mut reader = BufReader::new(File::open(dir.join("params.eqt"))?);
        let tensors = read_tensors(&mut reader)?;
        if tensors.len() != layout.len() {
            return Err(Error::Format(format!(
                "manifest lists {} tensors, file holds {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut params = ParamStore::new();
        for ((name, shape, trainable), t) in layout.into_iter().zip(tensors) {
            let t: Tensor<T> = t.into_tensor();
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{name}: manifest shape {shape:?}, stored {:?}",
                    t.shape()
                )));
            }
            params.push(name, t, trainable);
        }
        Ok(Self { meta, params })
    }
}
