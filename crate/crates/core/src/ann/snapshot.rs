//! Binary snapshot of an [`HnswIndex`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "MMHNSW\0\0" | version u32 | dim u32 | n u64
//! m u32 | ef_construction u32 | ef_search u32 | level_mult f64 | seed u64 | exact_threshold u64
//! entry u32 | max_level u32 | build_distance_evals u64
//! n × (table_id u32, row_index u32)
//! n × dim × f32
//! n × (layers u8, layers × (len u32, len × u32))
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{HnswIndex, HnswParams};
use crate::error::{Error, Result};
use crate::tables::EntityRef;

const MAGIC: &[u8; 8] = b"MMHNSW\0\0";
pub const VERSION: u32 = 1;

pub fn write_index<W: Write>(index: &HnswIndex, mut out: W) -> std::io::Result<()> {
    let p = &index.params;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(index.dim as u32).to_le_bytes())?;
    out.write_all(&(index.refs.len() as u64).to_le_bytes())?;
    out.write_all(&(p.m as u32).to_le_bytes())?;
    out.write_all(&(p.ef_construction as u32).to_le_bytes())?;
    out.write_all(&(p.ef_search as u32).to_le_bytes())?;
    out.write_all(&p.level_multiplier().to_le_bytes())?;
    out.write_all(&p.seed.to_le_bytes())?;
    out.write_all(&(p.exact_threshold as u64).to_le_bytes())?;
    out.write_all(&index.entry.to_le_bytes())?;
    out.write_all(&(index.max_level as u32).to_le_bytes())?;
    out.write_all(&index.build_distance_evals.to_le_bytes())?;
    for e in &index.refs {
        out.write_all(&e.table_id.to_le_bytes())?;
        out.write_all(&e.row_index.to_le_bytes())?;
    }
    for x in &index.data {
        out.write_all(&x.to_le_bytes())?;
    }
    for layers in &index.links {
        out.write_all(&[layers.len() as u8])?;
        for list in layers {
            out.write_all(&(list.len() as u32).to_le_bytes())?;
            for id in list {
                out.write_all(&id.to_le_bytes())?;
            }
        }
    }
    out.flush()
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Snapshot(format!("truncated snapshot: {e}")))?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_index<R: Read>(input: R) -> Result<HnswIndex> {
    let mut r = Reader { inner: input };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let n = r.u64()? as usize;
    let params = HnswParams {
        m: r.u32()? as usize,
        ef_construction: r.u32()? as usize,
        ef_search: r.u32()? as usize,
        level_lambda: Some(r.f64()?),
        seed: r.u64()?,
        exact_threshold: r.u64()? as usize,
    };
    params.validate()?;
    let entry = r.u32()?;
    let max_level = r.u32()? as usize;
    let build_distance_evals = r.u64()?;
    if dim == 0 || n == 0 || entry as usize >= n {
        return Err(Error::Snapshot("inconsistent header".into()));
    }
    let mut refs = Vec::with_capacity(n);
    for _ in 0..n {
        refs.push(EntityRef::new(r.u32()?, r.u32()?));
    }
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        data.push(r.f32()?);
    }
    let mut links = Vec::with_capacity(n);
    for _ in 0..n {
        let layers = r.u8()? as usize;
        if layers == 0 || layers > max_level + 1 {
            return Err(Error::Snapshot("bad layer count".into()));
        }
        let mut node = Vec::with_capacity(layers);
        for _ in 0..layers {
            let len = r.u32()? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let id = r.u32()?;
                if id as usize >= n {
                    return Err(Error::Snapshot(format!("link to missing node {id}")));
                }
                list.push(id);
            }
            node.push(list);
        }
        links.push(node);
    }
    Ok(HnswIndex {
        params,
        dim,
        refs,
        data,
        links,
        entry,
        max_level,
        build_distance_evals,
    })
}

pub fn save(index: &HnswIndex, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_index(index, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HnswIndex> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_index(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::build_index;

    #[test]
    fn round_trip_preserves_search() {
        let vectors: Vec<Vec<f32>> = (0..120)
            .map(|i| {
                let a = i as f32 * 0.05;
                vec![a.cos(), a.sin(), (a * 0.3).cos()]
            })
            .map(|v| crate::embed::EmbeddingVector::normalized(v).unwrap().into_inner())
            .collect();
        let items: Vec<_> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (EntityRef::new(2, i as u32), v.as_slice()))
            .collect();
        let index = build_index(&items, &HnswParams::default()).unwrap();
        let mut bytes = Vec::new();
        write_index(&index, &mut bytes).unwrap();
        let back = read_index(bytes.as_slice()).unwrap();
        assert_eq!(back.links, index.links);
        assert_eq!(back.refs, index.refs);
        for v in &vectors[..20] {
            assert_eq!(back.search(v, 3, 16).unwrap(), index.search(v, 3, 16).unwrap());
        }
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(read_index(corrupt.as_slice()).is_err());
        assert!(read_index(&bytes[..bytes.len() - 3]).is_err());
    }
}
