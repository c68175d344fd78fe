//! On-disk layout of training images, sky masks and visibility maps.

use std::path::{Path, PathBuf};

use sunsplat_core::extract::sky_mask_from_disparity;
use sunsplat_core::scene::Scene;
use sunsplat_core::train::TrainingImage;
use sunsplat_core::{Error, ImagePlane, Result};

pub const SCENE_FILE: &str = "scene.gare";

pub fn image_file(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("image_{i:03}.{ext}"))
}

pub fn visibility_file(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("visibility_{i:03}.{ext}"))
}

/// PFM when present, otherwise PNG.
fn read_either(pfm: PathBuf, png: PathBuf) -> Result<ImagePlane> {
    if pfm.exists() {
        ImagePlane::read_pfm(pfm)
    } else if png.exists() {
        ImagePlane::read_png(png)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing {} (or .png)", pfm.display()),
        )))
    }
}

/// Sky mask from `sky_NNN.png`, else from the disparity map written by `synth`.
fn sky_mask(dir: &Path, i: usize) -> Result<ImagePlane> {
    let png = dir.join(format!("sky_{i:03}.png"));
    if png.exists() {
        return Ok(ImagePlane::read_png(png)?.channel(0).map(|v| if v > 0.5 { 1.0 } else { 0.0 }));
    }
    for name in [format!("disparity_{i:03}.pfm"), format!("truth_{i:03}_disparity.pfm")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(sky_mask_from_disparity(&ImagePlane::read_pfm(p)?));
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no sky mask or disparity map for image {i} in {}", dir.display()),
    )))
}

/// One training image per scene embedding, in index order.
pub fn load_training_images(scene: &Scene, dir: &Path) -> Result<Vec<TrainingImage>> {
    let mut out = Vec::with_capacity(scene.embeddings.len());
    for (i, emb) in scene.embeddings.iter().enumerate() {
        let image = read_either(image_file(dir, i, "pfm"), image_file(dir, i, "png"))?;
        let sky_mask = sky_mask(dir, i)?;
        if !image.same_size(&sky_mask) {
            return Err(Error::Shape(format!("image {i} and its sky mask differ in size")));
        }
        out.push(TrainingImage {
            image,
            sky_mask,
            sunny: emb.sunny,
        });
    }
    Ok(out)
}

pub fn write_visibility(dir: &Path, maps: &[ImagePlane]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, v) in maps.iter().enumerate() {
        v.write_pfm(visibility_file(dir, i, "pfm"))?;
        v.write_png(visibility_file(dir, i, "png"))?;
    }
    Ok(())
}

pub fn load_visibility(dir: &Path, count: usize) -> Result<Vec<ImagePlane>> {
    (0..count)
        .map(|i| read_either(visibility_file(dir, i, "pfm"), visibility_file(dir, i, "png")).map(|v| v.channel(0)))
        .collect()
}

/// Directory holding a container's side outputs.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
