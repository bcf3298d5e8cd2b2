//! Binary snapshot files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "RALMIDX\0"
//! format       u32
//! rows |Z|     u64
//! dim d        u64
//! clusters C   u64      (0 for exhaustive)
//! nprobe       u64      (0 for exhaustive)
//! version len  u32, then UTF-8 parameter version
//! embeddings   |Z|·d f64
//! centroids    C·d f64
//! assignment   |Z| u32 (IVF only)
//! doc ids      |Z| × (u32 length, UTF-8 bytes)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::snapshot::{IndexSnapshot, SearchStructure};
use crate::diffcore::Tensor;
use crate::retriever::ParamVersion;
use crate::{Error, Result, Scalar};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"RALMIDX\0";
pub const SNAPSHOT_FORMAT: u32 = 1;

fn put_f64s<W: Write, T: Scalar>(w: &mut W, data: &[T]) -> Result<()> {
    for v in data {
        w.write_all(&v.f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated snapshot: {e}")))?;
    Ok(buf)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4, _>(r)?))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8, _>(r)?))
}

fn get_f64s<R: Read, T: Scalar>(r: &mut R, n: usize) -> Result<Vec<T>> {
    (0..n)
        .map(|_| Ok(T::c(f64::from_le_bytes(read_exact::<8, _>(r)?))))
        .collect()
}

fn get_string<R: Read>(r: &mut R) -> Result<String> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated snapshot: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("bad UTF-8 in snapshot: {e}")))
}

pub fn write_snapshot<T: Scalar, W: Write>(snapshot: &IndexSnapshot<T>, w: &mut W) -> Result<()> {
    let (clusters, nprobe) = match snapshot.structure() {
        SearchStructure::Exhaustive => (0u64, 0u64),
        SearchStructure::Ivf {
            centroids, nprobe, ..
        } => (centroids.rows() as u64, *nprobe as u64),
    };
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_FORMAT.to_le_bytes())?;
    w.write_all(&(snapshot.len() as u64).to_le_bytes())?;
    w.write_all(&(snapshot.dim() as u64).to_le_bytes())?;
    w.write_all(&clusters.to_le_bytes())?;
    w.write_all(&nprobe.to_le_bytes())?;
    let version = snapshot.version().to_string();
    w.write_all(&(version.len() as u32).to_le_bytes())?;
    w.write_all(version.as_bytes())?;
    put_f64s(w, snapshot.embeddings().data())?;
    if let SearchStructure::Ivf {
        centroids,
        assignment,
        ..
    } = snapshot.structure()
    {
        put_f64s(w, centroids.data())?;
        for &a in assignment {
            w.write_all(&(a as u32).to_le_bytes())?;
        }
    }
    for id in snapshot.doc_ids() {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<T: Scalar, R: Read>(r: &mut R) -> Result<IndexSnapshot<T>> {
    if &read_exact::<8, _>(r)? != SNAPSHOT_MAGIC {
        return Err(Error::Format("not an index snapshot (bad magic)".into()));
    }
    let format = get_u32(r)?;
    if format != SNAPSHOT_FORMAT {
        return Err(Error::Format(format!(
            "unsupported snapshot format {format}"
        )));
    }
    let n = get_u64(r)? as usize;
    let d = get_u64(r)? as usize;
    let clusters = get_u64(r)? as usize;
    let nprobe = get_u64(r)? as usize;
    let version: ParamVersion = get_string(r)?.parse()?;
    let embeddings = Tensor::matrix(n, d, get_f64s(r, n * d)?)?;
    let structure = if clusters == 0 {
        SearchStructure::Exhaustive
    } else {
        let centroids = Tensor::matrix(clusters, d, get_f64s(r, clusters * d)?)?;
        let assignment: Vec<usize> = (0..n)
            .map(|_| get_u32(r).map(|a| a as usize))
            .collect::<Result<_>>()?;
        let mut lists = vec![Vec::new(); clusters];
        for (row, &c) in assignment.iter().enumerate() {
            lists
                .get_mut(c)
                .ok_or_else(|| Error::Format(format!("row {row} assigned to missing list {c}")))?
                .push(row);
        }
        SearchStructure::Ivf {
            centroids,
            lists,
            assignment,
            nprobe,
        }
    };
    let doc_ids = (0..n).map(|_| get_string(r)).collect::<Result<Vec<_>>>()?;
    Ok(IndexSnapshot::from_parts(
        embeddings, doc_ids, version, structure,
    ))
}

pub fn save_snapshot<T: Scalar>(snapshot: &IndexSnapshot<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_snapshot(snapshot, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_snapshot<T: Scalar>(path: impl AsRef<Path>) -> Result<IndexSnapshot<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_snapshot(&mut f)
}
