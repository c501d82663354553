//! Named parameter storage, graph binding, and the checkpoint archive.
//!
//! Archive layout (all integers little-endian):
//! `b"BTSA"`, `u32` version, `u64` metadata length, metadata (UTF-8 JSON),
//! `u64` entry count, then per entry a `u32` name length, the name, and one
//! BTSR tensor record. Entries are stored in name order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"BTSA";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Parameters keyed by hierarchical dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter in `specs` order.
    pub fn init<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std)
                        .map_err(|e| Error::invalid(format!("init std {std}: {e}")))?;
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            if store
                .tensors
                .insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::invalid(format!("duplicate parameter {}", spec.name)));
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn write_archive<W: Write>(&self, meta: &serde_json::Value, mut w: W) -> Result<()> {
        let meta = serde_json::to_vec(meta)?;
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_btsr(&mut w)?;
        }
        Ok(())
    }

    pub fn read_archive<R: Read>(mut r: R) -> Result<(serde_json::Value, Self)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::format("tensor archive", format!("bad magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != ARCHIVE_VERSION {
            return Err(Error::format("tensor archive", format!("unsupported version {version}")));
        }
        r.read_exact(&mut b8)?;
        let mut meta = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut meta)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut store = Self::new();
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::format("tensor archive", e.to_string()))?;
            let t = Tensor::read_btsr(&mut r)?;
            store.tensors.insert(name, t);
        }
        Ok((meta, store))
    }
}

/// Binds stored parameters onto one graph, each at most once.
pub struct Session<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
    trainable: bool,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    /// Parameters enter the graph as constants; nothing is differentiated.
    pub fn frozen(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(graph, store)
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Use `var` in place of the stored parameter `name`.
    pub fn bind(&self, name: &str, var: Var<'g>) -> Result<()> {
        let stored = self.store.get(name)?;
        if stored.shape() != var.shape().as_slice() {
            return Err(Error::shape("bind", stored.shape(), &var.shape()));
        }
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(())
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn archive_round_trip() {
        let specs = vec![
            ParamSpec::new("a.w", &[2, 3], Init::Normal(0.5)),
            ParamSpec::new("a.b", &[3], Init::Zeros),
            ParamSpec::new("ln.gamma", &[3], Init::Ones),
        ];
        let store = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let meta = serde_json::json!({"epoch": 3});
        let mut buf = Vec::new();
        store.write_archive(&meta, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"BTSA");
        let (meta2, store2) = ParamStore::read_archive(&buf[..]).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(store, store2);
    }

    #[test]
    fn session_binds_once_and_collects_grads() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let g = Graph::new();
        let s = Session::new(&g, &store);
        let a = s.param("w").unwrap();
        let b = s.param("w").unwrap();
        assert_eq!(a.id(), b.id());
        let y = a.mul(b).unwrap().sum().unwrap();
        g.backward(y).unwrap();
        assert_eq!(s.grads()["w"].data(), &[2.0, 4.0]);
        assert!(s.param("missing").is_err());
    }

    #[test]
    fn frozen_session_has_no_grads() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0]));
        let g = Graph::new();
        let s = Session::frozen(&g, &store);
        let w = s.param("w").unwrap();
        assert!(!w.requires_grad());
    }
}
