//! Read-only item-embedding table.
//!
//! File layout (little-endian): 8-byte magic `HTCNEMB1`, `u32` version,
//! `u64` item count N, `u32` dimension d, N×d `f32` rows, then N `u64` item
//! IDs giving the ID of each row. Opening a file memory-maps it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use memmap2::Mmap;
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::real::Real;

pub const EMB_MAGIC: &[u8; 8] = b"HTCNEMB1";
pub const EMB_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8 + 4;

enum Storage {
    Owned(Vec<f32>),
    Mapped(Mmap),
}

pub struct EmbeddingTable {
    storage: Storage,
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    dim: usize,
}

impl std::fmt::Debug for EmbeddingTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingTable").field("items", &self.ids.len()).field("dim", &self.dim).finish()
    }
}

fn build_index(ids: &[u64]) -> Result<HashMap<u64, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (row, &id) in ids.iter().enumerate() {
        if index.insert(id, row).is_some() {
            return Err(Error::data(format!("duplicate item ID {id} in embedding table")));
        }
    }
    Ok(index)
}

impl EmbeddingTable {
    /// Table from rows `data[i]` for item `ids[i]`.
    pub fn from_rows(ids: Vec<u64>, data: &Array2<f32>) -> Result<Self> {
        if ids.len() != data.nrows() {
            return Err(Error::Shape(format!("{} IDs for {} rows", ids.len(), data.nrows())));
        }
        let index = build_index(&ids)?;
        let dim = data.ncols();
        Ok(EmbeddingTable { storage: Storage::Owned(data.iter().copied().collect()), ids, index, dim })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        // SAFETY: the table is treated as immutable for the process lifetime;
        // files are replaced atomically by `write`, never modified in place.
        let map = unsafe { Mmap::map(&file)? };
        let bytes: &[u8] = &map;
        if bytes.len() < HEADER || &bytes[..8] != EMB_MAGIC {
            return Err(Error::Format(format!("{} is not an embedding table", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != EMB_VERSION {
            return Err(Error::Format(format!("unsupported embedding table version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
        let data_end = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER))
            .ok_or_else(|| Error::Format("embedding table size overflows".into()))?;
        if bytes.len() != data_end + 8 * n {
            return Err(Error::Format(format!("embedding table {} is truncated or padded", path.display())));
        }
        let ids: Vec<u64> = bytes[data_end..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let index = build_index(&ids)?;
        Ok(EmbeddingTable { storage: Storage::Mapped(map), ids, index, dim })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(EMB_MAGIC)?;
            w.write_all(&EMB_VERSION.to_le_bytes())?;
            w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
            w.write_all(&(self.dim as u32).to_le_bytes())?;
            for row in 0..self.ids.len() {
                for v in self.row_values(row) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            for id in &self.ids {
                w.write_all(&id.to_le_bytes())?;
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Item IDs in row order.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    fn row_values(&self, row: usize) -> impl Iterator<Item = f32> + '_ {
        let d = self.dim;
        let (owned, mapped) = match &self.storage {
            Storage::Owned(v) => (Some(&v[row * d..(row + 1) * d]), None),
            Storage::Mapped(m) => (None, Some(&m[HEADER + row * d * 4..HEADER + (row + 1) * d * 4])),
        };
        owned
            .into_iter()
            .flatten()
            .copied()
            .chain(mapped.into_iter().flat_map(|b| b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))))
    }

    pub fn get(&self, id: u64) -> Result<Array1<f32>> {
        let row = self.row_of(id).ok_or(Error::MissingItem(id))?;
        Ok(Array1::from_iter(self.row_values(row)))
    }

    /// Rows for `ids` in order; any unknown ID is an error.
    pub fn lookup(&self, ids: &[u64]) -> Result<Array2<f32>> {
        self.lookup_as(ids)
    }

    pub fn lookup_as<T: Real>(&self, ids: &[u64]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((ids.len(), self.dim));
        for (i, &id) in ids.iter().enumerate() {
            let row = self.row_of(id).ok_or(Error::MissingItem(id))?;
            for (o, v) in out.row_mut(i).iter_mut().zip(self.row_values(row)) {
                *o = T::of(v as f64);
            }
        }
        Ok(out)
    }

    /// Whole table in row order.
    pub fn matrix<T: Real>(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.len(), self.dim));
        for (row, mut r) in out.rows_mut().into_iter().enumerate() {
            for (o, v) in r.iter_mut().zip(self.row_values(row)) {
                *o = T::of(v as f64);
            }
        }
        out
    }
}

/// Dense in-memory view of a table in the model's precision, indexed by ID.
#[derive(Debug, Clone)]
pub struct ItemMatrix<T: Real> {
    pub ids: Vec<u64>,
    pub rows: Array2<T>,
    index: HashMap<u64, usize>,
}

impl<T: Real> ItemMatrix<T> {
    pub fn from_table(table: &EmbeddingTable) -> Self {
        ItemMatrix { ids: table.ids().to_vec(), rows: table.matrix(), index: table.index.clone() }
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: u64) -> Option<ndarray::ArrayView1<'_, T>> {
        self.row_of(id).map(|r| self.rows.row(r))
    }

    pub fn lookup(&self, ids: &[u64]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((ids.len(), self.dim()));
        for (i, &id) in ids.iter().enumerate() {
            let r = self.row_of(id).ok_or(Error::MissingItem(id))?;
            out.row_mut(i).assign(&self.rows.row(r));
        }
        Ok(out)
    }
}
