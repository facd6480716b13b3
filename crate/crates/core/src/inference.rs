//! Full or partial text removal with a trained generator, at the input's
//! original resolution.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::{info, warn};

use crate::datagen::{self, read_manifest, save_png};
use crate::error::{Error, Result};
use crate::geometry::{Mask, RegionSet};
use crate::model::Generator;
use crate::pipeline::{denormalize, inference_input, unpad_restore_planar};

#[derive(Clone, Debug, PartialEq)]
pub struct RemovalRequest {
    pub image: RgbImage,
    pub regions: RegionSet,
    /// Indices into `regions`; `None` selects every region.
    pub selected: Option<Vec<usize>>,
    /// Copy the input verbatim outside the selected mask.
    pub composite: bool,
}

impl RemovalRequest {
    pub fn new(image: RgbImage, regions: RegionSet) -> Self {
        RemovalRequest {
            image,
            regions,
            selected: None,
            composite: true,
        }
    }

    pub fn select(mut self, indices: Vec<usize>) -> Self {
        self.selected = Some(indices);
        self
    }

    pub fn raw(mut self) -> Self {
        self.composite = false;
        self
    }

    /// Regions to remove, after validating the request.
    pub fn selected_regions(&self) -> Result<RegionSet> {
        if self.regions.image_size() != self.image.dimensions() {
            return Err(Error::shape(
                format!("regions for a {:?} image", self.image.dimensions()),
                format!("regions for {:?}", self.regions.image_size()),
            ));
        }
        match &self.selected {
            Some(idx) => self.regions.select(idx),
            None => Ok(self.regions.clone()),
        }
    }
}

/// Anything that can fill the selected regions of an image.
pub trait TextRemover {
    /// Full-resolution prediction of the text-free image for the given
    /// regions, before compositing.
    fn predict(&self, image: &RgbImage, regions: &RegionSet) -> Result<RgbImage>;
}

impl TextRemover for Generator<f32> {
    fn predict(&self, image: &RgbImage, regions: &RegionSet) -> Result<RgbImage> {
        let size = self.spec().input_size as u32;
        let (x, t) = inference_input(image, regions, size)?;
        let out = self.forward(&x)?;
        let data = unpad_restore_planar(out.data(), 3, size, &t)?;
        let (w, h) = image.dimensions();
        let plane = (w * h) as usize;
        Ok(RgbImage::from_fn(w, h, |px, py| {
            let i = (py * w + px) as usize;
            Rgb([0, 1, 2].map(|c| denormalize(data[c * plane + i])))
        }))
    }
}

/// Returns the input unchanged; a baseline for evaluation.
pub struct Identity;

impl TextRemover for Identity {
    fn predict(&self, image: &RgbImage, _regions: &RegionSet) -> Result<RgbImage> {
        Ok(image.clone())
    }
}

/// Output pixels inside `mask` from `generated`, elsewhere from `input`.
pub fn composite(input: &RgbImage, generated: &RgbImage, mask: &Mask) -> RgbImage {
    RgbImage::from_fn(input.width(), input.height(), |x, y| {
        if mask.get(x, y) {
            *generated.get_pixel(x, y)
        } else {
            *input.get_pixel(x, y)
        }
    })
}

pub fn remove_text(request: &RemovalRequest, remover: &impl TextRemover) -> Result<RgbImage> {
    let selected = request.selected_regions()?;
    if request.composite && selected.is_empty() {
        return Ok(request.image.clone());
    }
    let generated = remover.predict(&request.image, &selected)?;
    if !request.composite {
        return Ok(generated);
    }
    Ok(composite(&request.image, &generated, &selected.rasterize()))
}

/// `input | mask | output` side by side.
pub fn gallery_panel(input: &RgbImage, mask: &Mask, output: &RgbImage) -> RgbImage {
    let (w, h) = input.dimensions();
    let mut panel = RgbImage::new(3 * w, h);
    image::imageops::replace(&mut panel, input, 0, 0);
    let m = RgbImage::from_fn(w, h, |x, y| if mask.get(x, y) { Rgb([255; 3]) } else { Rgb([0; 3]) });
    image::imageops::replace(&mut panel, &m, w as i64, 0);
    image::imageops::replace(&mut panel, output, 2 * w as i64, 0);
    panel
}

pub fn output_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_removed.png"))
}

pub fn gallery_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_gallery.png"))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchSummary {
    pub succeeded: Vec<String>,
    pub failed: Vec<(String, String)>,
}

fn remove_one(corpus_dir: &Path, id: &str, remover: &impl TextRemover, out_dir: &Path, composite: bool) -> Result<()> {
    let image = datagen::read_rgb(&datagen::text_path(corpus_dir, id))?;
    let (w, h) = image.dimensions();
    let regions = crate::geometry::read_regions(&datagen::regions_path(corpus_dir, id), w, h)?;
    let mask = regions.rasterize();
    let mut req = RemovalRequest::new(image, regions);
    req.composite = composite;
    let out = remove_text(&req, remover)?;
    save_png(&out, &output_path(out_dir, id))?;
    save_png(&gallery_panel(&req.image, &mask, &out), &gallery_path(out_dir, id))
}

/// Removes all regions from every image listed in a corpus manifest,
/// writing `{id}_removed.png` and `{id}_gallery.png` per sample. Failures
/// are logged and collected; the run continues.
pub fn batch_remove(corpus_dir: &Path, remover: &impl TextRemover, out_dir: &Path, composite: bool) -> Result<BatchSummary> {
    let manifest = read_manifest(corpus_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = BatchSummary::default();
    for id in &manifest.ids {
        match remove_one(corpus_dir, id, remover, out_dir, composite) {
            Ok(()) => {
                info!("{id}: done");
                summary.succeeded.push(id.clone());
            }
            Err(e) => {
                warn!("{id}: {e}");
                summary.failed.push((id.clone(), e.to_string()));
            }
        }
    }
    Ok(summary)
}
