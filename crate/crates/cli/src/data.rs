//! Tile datasets on disk: `.eocube` tiles, optional `.eomask` masks and a
//! JSON-lines manifest with paths relative to the manifest's directory.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use geofm::formats::{read_cube, read_mask, write_cube, write_mask, RawCube, RawMask};
use geofm::heads::finetune::{Label, Sample, Task};
use geofm::pipeline::{read_manifest, tile_label, write_manifest, ManifestEntry, Mask, CLOUDY_FRACTION};
use geofm::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

pub fn read_entries(manifest: &Path) -> Result<(PathBuf, Vec<ManifestEntry>)> {
    let f = File::open(manifest).with_context(|| format!("opening manifest {}", manifest.display()))?;
    let entries = read_manifest(BufReader::new(f))?;
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((root, entries))
}

pub fn load_cube(path: &Path) -> Result<Tensor> {
    let raw = read_cube(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Tensor::new(raw.shape.to_vec(), raw.data.iter().map(|&v| v as f64).collect())?)
}

pub fn load_tiles(manifest: &Path) -> Result<Vec<Tensor>> {
    let (root, entries) = read_entries(manifest)?;
    entries.iter().map(|e| load_cube(&root.join(&e.tile))).collect()
}

/// Tiles with the labels `task` trains on.
pub fn load_samples(manifest: &Path, task: Task) -> Result<Vec<Sample>> {
    let (root, entries) = read_entries(manifest)?;
    if entries.is_empty() {
        bail!("manifest {} lists no tiles", manifest.display());
    }
    entries
        .iter()
        .map(|e| {
            let cube = load_cube(&root.join(&e.tile))?;
            let mask = match &e.mask {
                Some(m) => Some(Mask::from_raw(read_mask(&root.join(m)).with_context(|| format!("reading {m}"))?)?),
                None => None,
            };
            let label = match (task, &mask) {
                (Task::CloudClassification, _) => match (e.label, &mask) {
                    (Some(l), _) => Label::Class(l),
                    (None, Some(m)) => Label::Class(tile_label(m, CLOUDY_FRACTION)?),
                    (None, None) => bail!("tile {} has neither a label nor a mask", e.tile),
                },
                (Task::Biomass, Some(m)) => Label::Values(Arc::new(m.data.iter().map(|&v| v as f64).collect())),
                (_, Some(m)) => Label::Mask(Arc::new(m.data.clone())),
                (_, None) => bail!("tile {} has no mask for {task}", e.tile),
            };
            Ok(Sample { cube, label })
        })
        .collect()
}

pub fn to_raw(t: &Tensor) -> Result<RawCube> {
    let [c, tt, h, w] = t.shape()[..] else {
        bail!("expected a [C,T,H,W] tile, got {:?}", t.shape());
    };
    Ok(RawCube {
        shape: [c, tt, h, w],
        wavelengths: None,
        data: t.data().iter().map(|&v| v as f32).collect(),
    })
}

pub fn to_raw_mask(h: usize, w: usize, data: &[i64]) -> Result<RawMask> {
    Ok(Mask::new(h, w, data.to_vec())?.to_raw()?)
}

/// One tile to write into a dataset directory.
pub struct TileOut<'a> {
    pub cube: &'a Tensor,
    pub mask: Option<&'a [i64]>,
    pub label: Option<i64>,
    pub product_id: String,
}

/// Writes `tiles/NNNN.eocube`, `masks/NNNN.eomask` and the manifest under
/// `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, tiles: &[TileOut]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("tiles"))?;
    let mut entries = Vec::with_capacity(tiles.len());
    for (i, t) in tiles.iter().enumerate() {
        let tile = format!("tiles/{i:04}.eocube");
        write_cube(&dir.join(&tile), &to_raw(t.cube)?)?;
        let (h, w) = (t.cube.shape()[2], t.cube.shape()[3]);
        let (mask, cloud_ratio) = match t.mask {
            Some(m) => {
                std::fs::create_dir_all(dir.join("masks"))?;
                let name = format!("masks/{i:04}.eomask");
                write_mask(&dir.join(&name), &to_raw_mask(h, w, m)?)?;
                (Some(name), Mask::new(h, w, m.to_vec())?.positive_fraction()?)
            }
            None => (None, 0.0),
        };
        entries.push(ManifestEntry {
            tile,
            mask,
            label: t.label,
            cloud_ratio,
            product_id: t.product_id.clone(),
        });
    }
    let path = dir.join(MANIFEST);
    write_manifest(&entries, BufWriter::new(File::create(&path)?))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cube = Tensor::new(vec![1, 1, 2, 2], vec![0.5, 0.25, 0.0, 1.0]).unwrap();
        let manifest = write_dataset(
            dir.path(),
            &[TileOut { cube: &cube, mask: Some(&[1, 1, 1, 0]), label: None, product_id: "p".into() }],
        )
        .unwrap();
        let s = load_samples(&manifest, Task::Flood).unwrap();
        assert_eq!(s[0].cube, cube);
        assert_eq!(s[0].label, Label::Mask(Arc::new(vec![1, 1, 1, 0])));
        let c = load_samples(&manifest, Task::CloudClassification).unwrap();
        assert_eq!(c[0].label, Label::Class(1));
        let (_, entries) = read_entries(&manifest).unwrap();
        assert_eq!(entries[0].cloud_ratio, 0.75);
    }
}
