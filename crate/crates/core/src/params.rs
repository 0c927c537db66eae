//! Named parameter sets and their on-disk checkpoint layout.
//!
//! A checkpoint is a directory holding one S2VT file per parameter and an
//! `index.txt` whose lines read `<name> <file>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

pub const INDEX_FILE: &str = "index.txt";

/// Insertion-ordered map of parameter name to value.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.lookup.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.lookup.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    /// Weight drawn uniformly from ±sqrt(1 / fan_in).
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| lit(rng.gen_range(-bound..bound))).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, keeping names and order.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Usage(format!("expected {} tensors, got {}", self.values.len(), values.len())));
        }
        for (name, (old, new)) in self.names.iter().zip(self.values.iter().zip(&values)) {
            if old.shape() != new.shape() {
                return Err(Error::Usage(format!("{name}: shape {:?} vs {:?}", new.shape(), old.shape())));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    pub fn bind_with(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        let vars = self
            .iter()
            .map(|(n, v)| (n.to_string(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Leaf gradients in store order; parameters the output did not reach
    /// get zeros.
    pub fn gradients(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.iter()
            .map(|(n, v)| {
                bound
                    .vars
                    .get(n)
                    .and_then(|&var| tape.grad(var))
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for (name, value) in self.iter() {
            let file = format!("{name}.s2vt");
            io::write(&dir.join(&file), value)?;
            writeln!(index, "{name} {file}").unwrap();
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, index).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = ParamStore::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, file) = line
                .split_once(' ')
                .ok_or_else(|| Error::Data(format!("{}:{}: expected `<name> <file>`", path.display(), lineno + 1)))?;
            store.insert(name, io::read(&dir.join(file.trim()))?);
        }
        Ok(store)
    }
}

/// Parameter name to tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}
