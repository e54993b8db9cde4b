//! Pairing images across directories by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// PNG files of a directory keyed by stem. Extensions match case-insensitively.
pub fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::Unmatched {
                name: format!("{} (also {})", path.display(), prev.display()),
                dir: dir.to_path_buf(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSample {
    pub id: String,
    pub primary: PathBuf,
    /// One path per secondary directory, in the order given.
    pub others: Vec<PathBuf>,
}

/// Matches every image of `primary` with the same-stem image in each of `others`.
///
/// Any stem present in one directory but missing from another is an error
/// naming the missing file.
pub fn align_dirs(primary: &Path, others: &[PathBuf]) -> Result<Vec<AlignedSample>> {
    let base = list_pngs(primary)?;
    if base.is_empty() {
        return Err(Error::Empty(format!(
            "no pairs found: no PNG images in {}",
            primary.display()
        )));
    }
    let listings = others
        .iter()
        .map(|d| list_pngs(d))
        .collect::<Result<Vec<_>>>()?;
    for (dir, listing) in others.iter().zip(&listings) {
        if let Some(id) = listing.keys().find(|k| !base.contains_key(*k)) {
            return Err(Error::Unmatched {
                name: format!("{id}.png"),
                dir: primary.to_path_buf(),
            });
        }
        if let Some(id) = base.keys().find(|k| !listing.contains_key(*k)) {
            return Err(Error::Unmatched {
                name: format!("{id}.png"),
                dir: dir.clone(),
            });
        }
    }
    Ok(base
        .into_iter()
        .map(|(id, path)| {
            let others = listings.iter().map(|l| l[&id].clone()).collect();
            AlignedSample {
                id,
                primary: path,
                others,
            }
        })
        .collect())
}
