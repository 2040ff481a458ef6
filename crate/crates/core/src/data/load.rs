use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::{BoxRecord, Dataset, LabelRecord, Sample, Split, BOXES_MANIFEST, LABELS_MANIFEST};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::load_gray;

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::data(path, Some(i + 1), e.to_string()))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Loads a dataset directory.
///
/// With a `labels.jsonl` manifest (and optionally `boxes.jsonl`) the manifest
/// order is kept. Otherwise the directory is read as an image folder:
/// `<split>/<class>/*.png` or `<class>/*.png` (all training data), sorted by
/// path, with non-PNG files skipped and counted. Class ids follow the sorted
/// class names.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::data(dir, None, "dataset directory does not exist"));
    }
    let (entries, skipped) = if dir.join(LABELS_MANIFEST).exists() {
        (manifest_entries(dir)?, 0)
    } else {
        folder_entries(dir)?
    };
    let class_names: Vec<String> = entries
        .iter()
        .map(|e| e.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ids: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let full = dir.join(&e.path);
        if !full.is_file() {
            return Err(Error::data(&full, None, "image listed in manifest is missing"));
        }
        let image = load_gray(&full)?;
        if let Some((line, b)) = e.boxes.iter().find(|(_, b)| !b.fits(image.width(), image.height())) {
            return Err(Error::data(
                dir.join(BOXES_MANIFEST),
                Some(*line),
                format!(
                    "box {:?} exceeds the {}x{} image {}",
                    <[i64; 4]>::from(*b),
                    image.width(),
                    image.height(),
                    e.path.display()
                ),
            ));
        }
        samples.push(Sample {
            split: Split::of_path(&e.path),
            path: e.path.clone(),
            image,
            label: ids[e.label.as_str()],
            boxes: e.boxes.iter().map(|(_, b)| *b).collect(),
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} file(s) with unsupported extensions under {}", dir.display());
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        class_names,
        samples,
        skipped,
    })
}

struct Entry {
    path: PathBuf,
    label: String,
    /// Each box with the manifest line it came from.
    boxes: Vec<(usize, BBox)>,
}

fn manifest_entries(dir: &Path) -> Result<Vec<Entry>> {
    let labels_path = dir.join(LABELS_MANIFEST);
    let labels: Vec<(usize, LabelRecord)> = read_lines(&labels_path)?;
    let mut index = BTreeMap::new();
    let mut entries = Vec::with_capacity(labels.len());
    for (line, rec) in labels {
        if index.insert(rec.path.clone(), entries.len()).is_some() {
            return Err(Error::data(&labels_path, Some(line), format!("duplicate path {}", rec.path)));
        }
        entries.push(Entry {
            path: PathBuf::from(&rec.path),
            label: rec.label.into_name(),
            boxes: Vec::new(),
        });
    }
    let boxes_path = dir.join(BOXES_MANIFEST);
    if boxes_path.exists() {
        for (line, rec) in read_lines::<BoxRecord>(&boxes_path)? {
            let Some(&i) = index.get(&rec.path) else {
                return Err(Error::data(&boxes_path, Some(line), format!("{} is not in {LABELS_MANIFEST}", rec.path)));
            };
            let label = rec.label.into_name();
            if entries[i].label != label {
                return Err(Error::data(
                    &boxes_path,
                    Some(line),
                    format!("label {label} disagrees with {LABELS_MANIFEST} ({})", entries[i].label),
                ));
            }
            entries[i].boxes.extend(rec.boxes.into_iter().map(|b| (line, b)));
        }
    }
    Ok(entries)
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn class_folder(class: &Path, rel_prefix: PathBuf, entries: &mut Vec<Entry>) -> Result<usize> {
    let label = class.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let mut skipped = 0;
    for f in sorted_children(class)? {
        if !f.is_file() {
            continue;
        }
        if !is_png(&f) {
            skipped += 1;
            continue;
        }
        entries.push(Entry {
            path: rel_prefix.join(f.file_name().expect("file has a name")),
            label: label.clone(),
            boxes: Vec::new(),
        });
    }
    Ok(skipped)
}

fn folder_entries(dir: &Path) -> Result<(Vec<Entry>, usize)> {
    let mut entries = Vec::new();
    let mut skipped = 0;
    for top in sorted_children(dir)? {
        if !top.is_dir() {
            skipped += usize::from(top.is_file());
            continue;
        }
        let name = top.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if Split::ALL.iter().any(|s| s.as_str() == name) {
            for class in sorted_children(&top)? {
                if class.is_dir() {
                    let rel = PathBuf::from(&name).join(class.file_name().expect("dir has a name"));
                    skipped += class_folder(&class, rel, &mut entries)?;
                }
            }
        } else {
            skipped += class_folder(&top, PathBuf::from(&name), &mut entries)?;
        }
    }
    if entries.is_empty() {
        return Err(Error::data(dir, None, format!("no {LABELS_MANIFEST} and no class folders with PNG images")));
    }
    Ok((entries, skipped))
}
