//! On-disk dataset layout: `<root>/<class-id>/<image files>` with an
//! optional `index.csv` (`path,label`, paths relative to `<root>`).

use std::fs;
use std::path::{Path, PathBuf};

use super::cifar::load_cifar100_binary;
use super::pnm::{load_pnm, save_pgm};
use super::preprocess::PreprocessChain;
use super::transform::to_grayscale;
use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INDEX: &str = "index.csv";

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// `(relative path, label)` pairs for every image under `root`.
fn listing(root: &Path) -> Result<Vec<(String, usize)>> {
    let index = root.join(INDEX);
    if index.is_file() {
        let mut reader = csv::Reader::from_path(&index)?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let (Some(path), Some(label)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::Dataset(format!("{}: expected path,label rows", index.display())));
            };
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("{}: bad label {label:?}", index.display())))?;
            rows.push((path.trim().to_string(), label));
        }
        return Ok(rows);
    }

    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    // numeric directory names are labels; anything else is numbered in sorted order
    let numeric: Option<Vec<usize>> = names.iter().map(|n| n.parse().ok()).collect();
    let mut rows = Vec::new();
    for (i, dir) in class_dirs.iter().enumerate() {
        let label = numeric.as_ref().map_or(i, |n| n[i]);
        for file in sorted_entries(dir)? {
            if file.is_file() && is_image(&file) {
                rows.push((relative(root, &file), label));
            }
        }
    }
    Ok(rows)
}

fn finish(raw: Tensor, chain: Option<&PreprocessChain>) -> Result<Tensor> {
    match chain {
        Some(chain) => chain.apply(&raw),
        None if raw.shape()[2] == 3 => to_grayscale(&raw),
        None => Ok(raw),
    }
}

/// Loads every labelled image under `root`, applying `chain` when given.
///
/// A directory holding CIFAR-100 `*.bin` files (and no class folders) is
/// read as CIFAR records labelled by their fine class.
pub fn load_dataset_dir(root: impl AsRef<Path>, chain: Option<&PreprocessChain>) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let bins: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    let rows = listing(root)?;
    let mut samples = Vec::new();
    if rows.is_empty() && !bins.is_empty() {
        for bin in &bins {
            let name = bin.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for (i, rec) in load_cifar100_binary(bin)?.into_iter().enumerate() {
                let image = finish(rec.rgb_image(), chain)?;
                samples.push(Sample::new(image, rec.fine_label as usize, format!("{name}#{i}")));
            }
        }
    } else {
        for (path, label) in rows {
            let image = finish(load_pnm(root.join(&path))?, chain)?;
            samples.push(Sample::new(image, label, path));
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    Ok(samples)
}

/// Writes samples as `<root>/<label>/<nnnnn>.pgm` plus an `index.csv`.
pub fn write_dataset_dir(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let index = root.join(INDEX);
    let mut writer = csv::Writer::from_path(&index)?;
    writer.write_record(["path", "label"])?;
    for (i, s) in samples.iter().enumerate() {
        let dir = root.join(s.label.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = format!("{}/{i:05}.pgm", s.label);
        save_pgm(root.join(&rel), &s.image)?;
        writer.write_record([rel, s.label.to_string()])?;
    }
    writer.flush().map_err(|e| Error::io(&index, e))?;
    Ok(())
}
