//! Binary dataset cache.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "ASMA"
//! version u16      currently 1
//! C,T,V,N u32 each
//! N records:
//!   label   i32    (-1 when unlabelled)
//!   values  C*T*V f32, C-major, T next, V fastest
//! ```

use std::path::Path;
use std::sync::Arc;

use ndarray::Array3;

use super::{DataError, SkeletonGraph, SkeletonSequence};
use crate::util::atomic_write;
use crate::Real;

const MAGIC: &[u8; 4] = b"ASMA";
const VERSION: u16 = 1;

pub fn write_cache(path: &Path, seqs: &[SkeletonSequence]) -> Result<(), DataError> {
    if seqs.is_empty() {
        return Err(DataError::InvalidSequence("nothing to cache".into()));
    }
    let (c, t, v) = seqs[0].data.dim();
    for s in seqs {
        if s.data.dim() != (c, t, v) {
            return Err(DataError::InvalidSequence(
                "all cached sequences must share one shape".into(),
            ));
        }
    }
    let mut buf = Vec::with_capacity(18 + seqs.len() * (4 + c * t * v * 4));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [c, t, v, seqs.len()] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for s in seqs {
        let label: i32 = s.label.map_or(-1, |l| l as i32);
        buf.extend_from_slice(&label.to_le_bytes());
        for x in s.data.iter() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    atomic_write(path, &buf)?;
    Ok(())
}

pub fn read_cache(path: &Path, graph: &Arc<SkeletonGraph>) -> Result<Vec<SkeletonSequence>, DataError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DataError::BadCache("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(DataError::BadCache(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
    }
    let [c, t, v, n] = dims;
    if v != graph.num_joints {
        return Err(DataError::BadCache(format!(
            "cache has V={v} but the graph has {} joints",
            graph.num_joints
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let label = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut values = Vec::with_capacity(c * t * v);
        for _ in 0..c * t * v {
            values.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as Real);
        }
        let data = Array3::from_shape_vec((c, t, v), values)
            .map_err(|e| DataError::BadCache(e.to_string()))?;
        let label = if label < 0 { None } else { Some(label as usize) };
        out.push(SkeletonSequence::new(data, graph.clone(), label)?);
    }
    if r.pos != bytes.len() {
        return Err(DataError::BadCache("trailing bytes".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::BadCache("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
