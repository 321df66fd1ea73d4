//! JSON files that pair a precomputed table with the key it was built for.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Serialize, Deserialize)]
struct CacheFile<K, V> {
    key: K,
    table: V,
}

/// The cached table when the file exists and its key equals `key`.
pub fn load<K, V>(path: &Path, key: &K) -> Result<Option<V>>
where
    K: PartialEq + DeserializeOwned,
    V: DeserializeOwned,
{
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let file: CacheFile<K, V> = match serde_json::from_str(&text) {
        Ok(f) => f,
        Err(_) => return Ok(None),
    };
    Ok((file.key == *key).then_some(file.table))
}

pub fn store<K: Serialize, V: Serialize>(path: &Path, key: &K, table: &V) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = CacheFile { key, table };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}
