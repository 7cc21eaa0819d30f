//! Named parameter collections, initialization, and the checkpoint container.
//!
//! # Checkpoint layout (version 1)
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes   "CPTPARAM"
//! version    u32       1
//! meta_len   u32       length of the metadata block
//! meta       bytes     UTF-8 JSON (model description, may be "{}")
//! seed       u64       initialization seed
//! count      u32       number of parameters
//! repeated `count` times, in ascending name order:
//!   name_len u32
//!   name     bytes     UTF-8
//!   flags    u8        bit 0 = trainable
//!   rank     u32
//!   dims     u64 × rank
//!   payload  f64 × product(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{Node, Tape};

/// The project-wide seeded generator.
pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

const MAGIC: &[u8; 8] = b"CPTPARAM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
    seed: u64,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        ParamSet {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Moves every entry of `other` in under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: ParamSet) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(format!("{prefix}.{name}"), p.value, p.trainable)?;
        }
        Ok(())
    }

    /// Moves every entry of `other` in unchanged.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.value, p.trainable)?;
        }
        Ok(())
    }

    /// Copy of the entries under `prefix.`, with the prefix stripped.
    pub fn namespace(&self, prefix: &str) -> ParamSet {
        let head = format!("{prefix}.");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&head).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        ParamSet {
            entries,
            seed: self.seed,
        }
    }

    /// Binds every parameter onto `tape`: trainable ones as gradient leaves,
    /// the rest (e.g. running statistics) as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bindings {
        let nodes = self
            .entries
            .iter()
            .map(|(name, p)| {
                let node = if p.trainable {
                    tape.param(&p.value)
                } else {
                    tape.constant_ref(&p.value)
                };
                (name.clone(), node)
            })
            .collect();
        Bindings { nodes }
    }

    pub fn write_to(&self, meta: &str, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_len(&mut w, meta.len())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        write_len(&mut w, self.entries.len())?;
        for (name, p) in &self.entries {
            write_len(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[u8::from(p.trainable)])?;
            write_len(&mut w, p.value.rank())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a container, returning the parameters and the metadata string.
    pub fn read_from(mut r: impl Read) -> Result<(ParamSet, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a parameter checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta = String::from_utf8(read_bytes(&mut r, meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let seed = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new(seed);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let mut flags = [0u8; 1];
            r.read_exact(&mut flags)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let value = Array::new(shape, data).map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            set.insert(name, value, flags[0] & 1 == 1)?;
        }
        Ok((set, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(meta, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamSet, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        ParamSet::read_from(bytes.as_slice())
    }
}

fn write_len(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} overflows u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Uniform(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Array {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Array::from_parts(shape.to_vec(), data)
}

/// Parameter name → tape node for one computation record.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    nodes: BTreeMap<String, Node>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Node> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Reads gradients for the trainable parameters of `params` after a
    /// backward pass on `tape`.
    pub fn gradients(&self, tape: &Tape<'_>, params: &ParamSet) -> Gradients {
        let map = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .filter_map(|(name, _)| self.nodes.get(name).map(|&n| (name.to_string(), tape.grad(n))))
            .collect();
        Gradients { map }
    }
}

impl FromIterator<(String, Node)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Node)>>(iter: I) -> Self {
        Bindings {
            nodes: iter.into_iter().collect(),
        }
    }
}

/// Gradient arrays keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let map = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| (name.to_string(), Array::zeros(p.value.shape())))
            .collect();
        Gradients { map }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `self += scale · other`, adding entries missing from `self`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(dst) => dst.add_scaled(g, scale)?,
                None => {
                    self.map.insert(name.clone(), g.map(|v| v * scale));
                }
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.map.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    /// Flattened values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.map.values().flat_map(|g| g.data().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamSet::new(1);
        p.insert("w", Array::zeros(&[2]), true).unwrap();
        assert!(p.insert("w", Array::zeros(&[2]), true).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = seeded_rng(3);
        let w = glorot_uniform(&[30, 20], 30, 20, &mut rng);
        let a = (6.0f64 / 50.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < a));
        assert!(w.max_abs() > a * 0.9);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(ParamSet::read_from(&b"NOTACKPT...."[..]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_is_bit_exact(
            seed in any::<u64>(),
            values in prop::collection::vec(-1e300f64..1e300, 1..40),
            trainable in any::<bool>(),
        ) {
            let mut p = ParamSet::new(seed);
            let n = values.len();
            p.insert("a.w", Array::vector(values.clone()).unwrap(), trainable).unwrap();
            p.insert("b", Array::new(vec![1, n], values).unwrap(), !trainable).unwrap();
            let mut buf = Vec::new();
            p.write_to("{\"k\":1}", &mut buf).unwrap();
            let (back, meta) = ParamSet::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(meta, "{\"k\":1}");
            for ((na, pa), (nb, pb)) in p.iter().zip(back.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(pa.trainable, pb.trainable);
                prop_assert_eq!(pa.value.shape(), pb.value.shape());
                let bits_a: Vec<u64> = pa.value.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = pb.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(back.seed(), seed);
        }
    }
}
