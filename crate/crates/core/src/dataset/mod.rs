//! Dataset layout, loading and the synthetic fixture.
//!
//! A dataset root holds `<split>/images/<class>/<id>.<ext>` and
//! `<split>/masks/<class>/<id>.png`. The class label is the directory name
//! with `-` and `_` read as spaces.

mod fixture;

pub use fixture::{make_synthetic_fixture, FixtureConfig, FIXTURE_CLASS_NAMES};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage, Luma, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Group;

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
/// Minimum component area, as a fraction of the image, counted as an object.
pub const MIN_OBJECT_FRACTION: f64 = 0.001;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("unpaired files: {}", orphans.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Integrity { orphans: Vec<PathBuf> },
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("{}: {msg}", path.display())]
    Invalid { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

/// Directory name to textual class label.
pub fn class_label(dir_name: &str) -> String {
    dir_name
        .replace(['-', '_'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDescriptor {
    pub image_id: String,
    pub class_name: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub split: Split,
    pub samples: Vec<SampleDescriptor>,
}

impl DatasetIndex {
    pub fn classes(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.class_name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamouflagedSample {
    pub image_id: String,
    pub t_ref: String,
    pub photo: RgbImage,
    /// `height × width`, `true` for foreground.
    pub gt_mask: Array2<bool>,
    pub group: Group,
}

impl CamouflagedSample {
    pub fn height(&self) -> usize {
        self.gt_mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.gt_mask.ncols()
    }
}

fn list_dir(path: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(io_err(path))? {
        out.push(entry.map_err(io_err(path))?.path());
    }
    out.sort();
    Ok(out)
}

fn has_extension(path: &Path, allowed: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| allowed.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Files per class directory, keyed by `(class dir, stem)`.
fn collect(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<(String, String), PathBuf>, DatasetError> {
    let mut out = BTreeMap::new();
    for class_dir in list_dir(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let class = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        for file in list_dir(&class_dir)? {
            if file.is_file() && has_extension(&file, extensions) {
                if out.insert((class.clone(), stem(&file)), file.clone()).is_some() {
                    return Err(DatasetError::Invalid {
                        path: file,
                        msg: "several files share this stem".into(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Indexes one split. Every image needs a mask with the same stem in the
/// same class directory and vice versa.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIndex, DatasetError> {
    let base = root.join(split.as_str());
    let images = collect(&base.join("images"), &IMAGE_EXTENSIONS)?;
    let masks = collect(&base.join("masks"), &["png"])?;

    let mut orphans: Vec<PathBuf> = images
        .iter()
        .filter(|(k, _)| !masks.contains_key(*k))
        .chain(masks.iter().filter(|(k, _)| !images.contains_key(*k)))
        .map(|(_, p)| p.clone())
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(DatasetError::Integrity { orphans });
    }

    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(images.len());
    for ((class_dir, id), image_path) in images {
        let class_name = class_label(&class_dir);
        if class_name.is_empty() {
            return Err(DatasetError::Invalid {
                path: image_path,
                msg: "class directory gives an empty label".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        let mask_path = masks[&(class_dir, id.clone())].clone();
        samples.push(SampleDescriptor {
            image_id: id,
            class_name,
            image_path,
            mask_path,
        });
    }
    Ok(DatasetIndex { split, samples })
}

fn open_image(path: &Path) -> Result<DynamicImage, DatasetError> {
    image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a single-channel 8- or 16-bit mask and binarizes it at 128
/// (8-bit scale).
pub fn read_mask(path: &Path) -> Result<Array2<bool>, DatasetError> {
    let gray = match open_image(path)? {
        DynamicImage::ImageLuma8(g) => g,
        g @ DynamicImage::ImageLuma16(_) => g.to_luma8(),
        other => {
            return Err(DatasetError::Invalid {
                path: path.to_path_buf(),
                msg: format!("mask must be single-channel, found {:?}", other.color()),
            })
        }
    };
    Ok(binarize(&gray))
}

pub fn binarize(gray: &GrayImage) -> Array2<bool> {
    let (w, h) = gray.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(r, c)| gray.get_pixel(c as u32, r as u32).0[0] >= 128)
}

pub fn mask_to_image(mask: &Array2<bool>) -> GrayImage {
    GrayImage::from_fn(mask.ncols() as u32, mask.nrows() as u32, |x, y| {
        Luma([if mask[(y as usize, x as usize)] { 255 } else { 0 }])
    })
}

/// Areas of the 8-connected foreground components, in scan order.
pub fn component_areas(mask: &Array2<bool>) -> Vec<usize> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        let (r0, c0) = (start / w, start % w);
        if !mask[(r0, c0)] || seen[(r0, c0)] {
            continue;
        }
        seen[(r0, c0)] = true;
        stack.push((r0, c0));
        let mut area = 0;
        while let Some((r, c)) = stack.pop() {
            area += 1;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let p = (rr as usize, cc as usize);
                    if mask[p] && !seen[p] {
                        seen[p] = true;
                        stack.push(p);
                    }
                }
            }
        }
        areas.push(area);
    }
    areas
}

/// `MultiObj` when at least two components cover 0.1% of the image each.
pub fn object_group(mask: &Array2<bool>) -> Group {
    let floor = MIN_OBJECT_FRACTION * mask.len() as f64;
    let objects = component_areas(mask).into_iter().filter(|&a| a as f64 >= floor).count();
    if objects >= 2 {
        Group::MultiObj
    } else {
        Group::SingleObj
    }
}

pub fn load_sample(desc: &SampleDescriptor) -> Result<CamouflagedSample, DatasetError> {
    let photo = open_image(&desc.image_path)?.to_rgb8();
    let gt_mask = read_mask(&desc.mask_path)?;
    if (photo.height() as usize, photo.width() as usize) != gt_mask.dim() {
        return Err(DatasetError::Invalid {
            path: desc.mask_path.clone(),
            msg: format!(
                "mask is {}x{} but the photo is {}x{}",
                gt_mask.ncols(),
                gt_mask.nrows(),
                photo.width(),
                photo.height()
            ),
        });
    }
    let group = object_group(&gt_mask);
    Ok(CamouflagedSample {
        image_id: desc.image_id.clone(),
        t_ref: desc.class_name.clone(),
        photo,
        gt_mask,
        group,
    })
}
