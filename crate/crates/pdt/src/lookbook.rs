//! On-disk paired datasets.
//!
//! Layout: `root/<product_id>/product.png` is the target photo and
//! `root/<product_id>/model_<k>.png` are the source photos. A
//! `root/manifest.tsv` with lines `product_id<TAB>product|model<TAB>path`
//! (paths relative to `root`) replaces directory scanning when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::warn;

use pdt_core::data::{PairedDataset, Product};
use pdt_core::synthetic::SyntheticProduct;

use crate::images::{load_image, save_rgb_png};

pub const MANIFEST: &str = "manifest.tsv";
pub const ATTRIBUTES: &str = "attributes.tsv";

/// Image paths of one product before decoding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProductGroup {
    pub target: Option<PathBuf>,
    pub sources: Vec<PathBuf>,
}

/// Image paths per product id, from the manifest if present, otherwise
/// from the directory layout.
pub fn scan(root: &Path) -> Result<BTreeMap<String, ProductGroup>> {
    let manifest = root.join(MANIFEST);
    if manifest.is_file() {
        return read_manifest(root, &manifest);
    }
    let mut groups = BTreeMap::new();
    let entries = fs::read_dir(root).with_context(|| format!("cannot read dataset root {}", root.display()))?;
    for entry in entries {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().into_owned();
        let dir = entry.path();
        let mut group = ProductGroup::default();
        let product = dir.join("product.png");
        if product.is_file() {
            group.target = Some(product);
        }
        let mut models: Vec<(u64, PathBuf)> = Vec::new();
        for f in fs::read_dir(&dir)? {
            let f = f?;
            let name = f.file_name().to_string_lossy().into_owned();
            if let Some(k) = name.strip_prefix("model_").and_then(|r| r.strip_suffix(".png")) {
                match k.parse() {
                    Ok(k) => models.push((k, f.path())),
                    Err(_) => warn!("ignoring {}: model index is not a number", f.path().display()),
                }
            }
        }
        models.sort();
        group.sources = models.into_iter().map(|(_, p)| p).collect();
        groups.insert(id, group);
    }
    Ok(groups)
}

fn read_manifest(root: &Path, manifest: &Path) -> Result<BTreeMap<String, ProductGroup>> {
    let text = fs::read_to_string(manifest).with_context(|| format!("cannot read {}", manifest.display()))?;
    let mut groups: BTreeMap<String, ProductGroup> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, role, path] = fields[..] else {
            bail!("{}:{}: expected 3 tab-separated fields, got {}", manifest.display(), n + 1, fields.len());
        };
        let group = groups.entry(id.to_string()).or_default();
        let path = root.join(path);
        match role {
            "product" => {
                if group.target.replace(path).is_some() {
                    bail!("{}:{}: product {id} has two product images", manifest.display(), n + 1);
                }
            }
            "model" => group.sources.push(path),
            other => bail!("{}:{}: unknown role {other:?}", manifest.display(), n + 1),
        }
    }
    Ok(groups)
}

/// Decode and preprocess every product. Products without source images are
/// skipped with a warning; a missing product image is an error.
pub fn load_lookbook(root: &Path) -> Result<PairedDataset> {
    let mut products = Vec::new();
    for (id, group) in scan(root)? {
        if group.sources.is_empty() {
            warn!("skipping product {id}: no model images");
            continue;
        }
        let Some(target) = &group.target else {
            bail!("product {id} has no product image");
        };
        products.push(Product {
            target: load_image(target)?,
            sources: group.sources.iter().map(|p| load_image(p)).collect::<Result<_>>()?,
            id,
        });
    }
    Ok(PairedDataset::new(products)?)
}

/// Write synthetic products in the directory layout, plus an
/// `attributes.tsv` with `product_id, color, pattern, silhouette`.
pub fn write_synthetic(root: &Path, products: &[SyntheticProduct]) -> Result<()> {
    fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
    let side = pdt_core::networks::IMAGE_SIDE as u32;
    let mut attributes = String::from("product_id\tcolor\tpattern\tsilhouette\n");
    for p in products {
        let dir = root.join(&p.id);
        fs::create_dir_all(&dir)?;
        save_rgb_png(p.target.rgb.clone(), side, &dir.join("product.png"))?;
        for (k, s) in p.sources.iter().enumerate() {
            save_rgb_png(s.rgb.clone(), side, &dir.join(format!("model_{k}.png")))?;
        }
        attributes.push_str(&format!("{}\t{}\t{:?}\t{:?}\n", p.id, p.color, p.pattern, p.silhouette));
    }
    fs::write(root.join(ATTRIBUTES), attributes)?;
    Ok(())
}

/// Palette index per product id from `attributes.tsv`, if the dataset has one.
pub fn read_colors(root: &Path) -> Result<Option<BTreeMap<String, usize>>> {
    let path = root.join(ATTRIBUTES);
    if !path.is_file() {
        return Ok(None);
    }
    let mut out = BTreeMap::new();
    for line in fs::read_to_string(&path)?.lines().skip(1) {
        let mut f = line.split('\t');
        if let (Some(id), Some(c)) = (f.next(), f.next()) {
            out.insert(id.to_string(), c.parse().with_context(|| format!("bad color in {}", path.display()))?);
        }
    }
    Ok(Some(out))
}
