use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

/// Plain dense array with an explicit shape; the unit of parameter storage
/// and checkpoint IO.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        NdArray { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named parameter tensors. Order is insertion order
/// and is part of the determinism contract (optimizer sweeps and checkpoint
/// layout follow it).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, NdArray)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: NdArray) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.to_string(), self.entries.len());
            self.entries.push((name.to_string(), value));
        }
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NdArray)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Order-sensitive FNV-1a digest of all parameter bytes; used by
    /// determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, v) in &self.entries {
            eat(name.as_bytes());
            for x in &v.data {
                eat(&x.to_le_bytes());
            }
        }
        h
    }
}

/// Writes named tensors as `<base>.bin` (raw little-endian f64) plus
/// `<base>.idx` (text lines: `name<TAB>dims<TAB>offset<TAB>count`).
pub fn save_named_tensors(base: &Path, tensors: &[(&str, &NdArray)]) -> io::Result<()> {
    let mut bin: Vec<u8> = Vec::new();
    let mut idx = String::new();
    for (name, t) in tensors {
        let offset = bin.len();
        for v in &t.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        idx.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            name,
            dims.join("x"),
            offset,
            t.data.len()
        ));
    }
    let mut f = fs::File::create(base.with_extension("bin"))?;
    f.write_all(&bin)?;
    fs::write(base.with_extension("idx"), idx)?;
    Ok(())
}

/// Loads tensors written by [`save_named_tensors`], preserving file order.
pub fn load_named_tensors(base: &Path) -> io::Result<Vec<(String, NdArray)>> {
    let mut bin = Vec::new();
    fs::File::open(base.with_extension("bin"))?.read_to_end(&mut bin)?;
    let idx = fs::read_to_string(base.with_extension("idx"))?;
    let mut out = Vec::new();
    for line in idx.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad index line: {line}"),
            ));
        }
        let name = parts[0].to_string();
        let shape: Vec<usize> = if parts[1].is_empty() {
            vec![]
        } else {
            parts[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?
        };
        let offset: usize = parts[2]
            .parse()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let count: usize = parts[3]
            .parse()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let end = offset + count * 8;
        if end > bin.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "tensor range exceeds binary payload",
            ));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bin[offset + i * 8..offset + (i + 1) * 8]);
            data.push(f64::from_le_bytes(b));
        }
        if shape.iter().product::<usize>() != count {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("shape/count mismatch for {name}"),
            ));
        }
        out.push((name, NdArray { shape, data }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("tapegrad_ckpt_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let base = dir.join("params");
        let a = NdArray::new(vec![2, 3], vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 3.7, -0.0]);
        let b = NdArray::new(vec![4], vec![0.3, 0.7, 1e-300, 42.0]);
        save_named_tensors(&base, &[("layer.w", &a), ("layer.b", &b)]).unwrap();
        let loaded = load_named_tensors(&base).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "layer.w");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn paramset_updates_in_place() {
        let mut p = ParamSet::new();
        p.insert("w", NdArray::zeros(&[2]));
        p.insert("b", NdArray::zeros(&[1]));
        p.insert("w", NdArray::filled(&[2], 1.0));
        assert_eq!(p.len(), 2);
        assert_eq!(p.get("w").unwrap().data, vec![1.0, 1.0]);
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["w", "b"]);
    }
}
