use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::Key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ColumnId(pub u32);

impl std::fmt::Display for ColumnId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "col{}", self.0)
    }
}

/// The logical contents of one attribute: a dense array of keys that is never
/// modified once loaded. Indexes refine copies of it.
#[derive(Debug, Clone)]
pub struct Column {
    id: ColumnId,
    keys: Arc<[Key]>,
}

impl Column {
    pub fn new(id: ColumnId, keys: impl Into<Arc<[Key]>>) -> Self {
        Self {
            id,
            keys: keys.into(),
        }
    }

    pub fn id(&self) -> ColumnId {
        self.id
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Loads a column stored as consecutive little-endian `i64` values.
    pub fn load(id: ColumnId, path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::MalformedColumnFile(bytes.len() as u64));
        }
        let keys: Vec<Key> = bytes
            .chunks_exact(8)
            .map(|c| Key::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self::new(id, keys))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for k in self.keys.iter() {
            out.write_all(&k.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }
}
