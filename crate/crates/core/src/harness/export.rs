use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenarios::{Dataset, DatasetSequence};

#[derive(Serialize)]
struct ManifestEntry {
    dataset_id: usize,
    split: &'static str,
    file: String,
    count: usize,
    image_shape: [usize; 3],
    labels: Vec<usize>,
    domains: Vec<usize>,
}

#[derive(Serialize)]
struct Manifest {
    scenario: &'static str,
    dtype: &'static str,
    layout: &'static str,
    entries: Vec<ManifestEntry>,
}

/// Writes each split as raw little-endian `f32` images plus a
/// `manifest.json` describing ids, labels, domains and splits.
pub fn export_sequence(seq: &DatasetSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for u in &seq.updates {
        for (split, data) in [("train", &u.train), ("test", &u.test)] {
            let file = format!("update{}_{split}.f32", u.dataset_id);
            write_raw(data, &dir.join(&file))?;
            let side = ((data.image_len / 3) as f64).sqrt() as usize;
            entries.push(ManifestEntry {
                dataset_id: u.dataset_id,
                split,
                file,
                count: data.len(),
                image_shape: [side, side, 3],
                labels: data.labels.clone(),
                domains: data.domains.clone(),
            });
        }
    }
    let manifest = Manifest {
        scenario: seq.scenario.as_str(),
        dtype: "f32le",
        layout: "nhwc",
        entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn write_raw(data: &Dataset, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = data.images.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
