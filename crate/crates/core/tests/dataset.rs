use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use mlkg::dataset::{
    load_dataset, load_sample, make_synthetic_fixture, read_mask, DatasetError, FixtureConfig, Split,
    FIXTURE_CLASS_NAMES,
};
use mlkg::metrics::Group;
use walkdir::WalkDir;

fn write_pair(root: &Path, class: &str, id: &str, mask: Option<&GrayImage>) {
    let img_dir = root.join("train/images").join(class);
    let mask_dir = root.join("train/masks").join(class);
    fs::create_dir_all(&img_dir).unwrap();
    fs::create_dir_all(&mask_dir).unwrap();
    RgbImage::from_pixel(8, 8, Rgb([10, 20, 30]))
        .save(img_dir.join(format!("{id}.png")))
        .unwrap();
    if let Some(m) = mask {
        m.save(mask_dir.join(format!("{id}.png"))).unwrap();
    }
}

fn square_mask() -> GrayImage {
    GrayImage::from_fn(8, 8, |x, y| Luma([if (2..6).contains(&x) && (2..6).contains(&y) { 255 } else { 0 }]))
}

#[test]
fn missing_mask_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "stone-crab", "a", Some(&square_mask()));
    write_pair(dir.path(), "stone-crab", "b", None);
    match load_dataset(dir.path(), Split::Train) {
        Err(DatasetError::Integrity { orphans }) => {
            assert_eq!(orphans.len(), 1);
            assert!(orphans[0].ends_with("b.png"), "{orphans:?}");
        }
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn class_directory_becomes_label() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "hermit_crab", "hc-1", Some(&square_mask()));
    let index = load_dataset(dir.path(), Split::Train).unwrap();
    assert_eq!(index.samples.len(), 1);
    assert_eq!(index.samples[0].class_name, "hermit crab");
    let sample = load_sample(&index.samples[0]).unwrap();
    assert_eq!(sample.t_ref, "hermit crab");
    assert_eq!(sample.gt_mask.iter().filter(|&&m| m).count(), 16);
    assert_eq!(sample.group, Group::SingleObj);
}

#[test]
fn colour_masks_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    RgbImage::from_pixel(4, 4, Rgb([255, 0, 0])).save(&path).unwrap();
    assert!(matches!(read_mask(&path), Err(DatasetError::Invalid { .. })));
}

#[test]
fn sixteen_bit_masks_binarize_on_the_eight_bit_scale() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    let img = image::ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(3, 1, |x, _| Luma([[0, 32000, 65535][x as usize]]));
    img.save(&path).unwrap();
    let m = read_mask(&path).unwrap();
    assert_eq!(m.iter().copied().collect::<Vec<_>>(), vec![false, false, true]);
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn fixture_is_deterministic_and_loadable() {
    let cfg = FixtureConfig {
        n_classes: 2,
        n_per_class: 3,
        size: 64,
        seed: 7,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_synthetic_fixture(a.path(), &cfg).unwrap();
    make_synthetic_fixture(b.path(), &cfg).unwrap();
    let ta = tree_bytes(a.path());
    assert_eq!(ta.len(), 2 * 2 * 3 * 2);
    assert_eq!(ta, tree_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    make_synthetic_fixture(c.path(), &FixtureConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));

    for split in [Split::Train, Split::Test] {
        let index = load_dataset(a.path(), split).unwrap();
        assert_eq!(index.samples.len(), 6);
        let mut labels: Vec<String> = FIXTURE_CLASS_NAMES[..2].iter().map(|s| s.replace('-', " ")).collect();
        labels.sort();
        assert_eq!(index.classes().into_iter().map(String::from).collect::<Vec<_>>(), labels);
        for desc in &index.samples {
            let s = load_sample(desc).unwrap();
            assert_eq!((s.height(), s.width()), (64, 64));
            let expected = if desc.image_id.ends_with("002") { Group::MultiObj } else { Group::SingleObj };
            assert_eq!(s.group, expected, "{}", desc.image_id);
        }
    }
}

#[test]
fn fixture_rejects_tiny_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FixtureConfig {
        n_classes: 1,
        n_per_class: 1,
        size: 16,
        seed: 0,
    };
    assert!(matches!(make_synthetic_fixture(dir.path(), &cfg), Err(DatasetError::Invalid { .. })));
}
