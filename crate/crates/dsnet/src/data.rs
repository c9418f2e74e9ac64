//! Dataset plumbing: paired image/mask folders, the synthetic fixture
//! generator, and the flip / rescale / crop augmentation pipeline.
//!
//! Layout on disk: `<root>/images/<name>.png` (RGB) paired with
//! `<root>/masks/<name>.png` (single-channel class indices, 255 = ignore).

use crate::error::{DsnetError, Result};
use crate::tensor::bilinear_weights;
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const IGNORE_LABEL: u32 = 255;

/// One sample: a normalized (3, H, W) image and its (H, W) class-id mask.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub name: String,
    pub image: Array3<f64>,
    pub mask: Array2<u32>,
}

impl SegSample {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.dim().1, self.image.dim().2)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Load every image/mask pair under `root`, in lexicographic name order.
/// Unpaired files and mask values outside `0..num_classes` (other than the
/// ignore label) are errors.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<Dataset> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| {
            DsnetError::Data(format!("cannot read {}: {e}", dir.display()))
        })?;
        for entry in entries {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                names.push(
                    path.file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_string(),
                );
            }
        }
        names.sort();
        Ok(names)
    };
    let image_names = list(&images_dir)?;
    let mask_names = list(&masks_dir)?;
    for name in &image_names {
        if !mask_names.contains(name) {
            return Err(DsnetError::Data(format!("image `{name}` has no paired mask")));
        }
    }
    for name in &mask_names {
        if !image_names.contains(name) {
            return Err(DsnetError::Data(format!("mask `{name}` has no paired image")));
        }
    }

    let mut samples = Vec::with_capacity(image_names.len());
    for name in image_names {
        let image = load_image(&images_dir.join(format!("{name}.png")))?;
        let mask = load_mask(&masks_dir.join(format!("{name}.png")))?;
        if image.dim().1 != mask.dim().0 || image.dim().2 != mask.dim().1 {
            return Err(DsnetError::Data(format!(
                "sample `{name}`: image {}x{} does not match mask {}x{}",
                image.dim().1,
                image.dim().2,
                mask.dim().0,
                mask.dim().1
            )));
        }
        for &v in mask.iter() {
            if v != IGNORE_LABEL && v as usize >= num_classes {
                return Err(DsnetError::Data(format!(
                    "sample `{name}`: mask value {v} outside 0..{num_classes} (255 = ignore)"
                )));
            }
        }
        samples.push(SegSample { name, image, mask });
    }
    Ok(Dataset {
        samples,
        num_classes,
    })
}

pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| DsnetError::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn load_mask(path: &Path) -> Result<Array2<u32>> {
    let img = image::open(path)
        .map_err(|e| DsnetError::Data(format!("cannot read mask {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u32>::zeros((h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = pixel.0[0] as u32;
    }
    Ok(out)
}

pub fn save_mask(mask: &Array2<u32>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in mask.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([v.min(255) as u8]));
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic fixture generator
// ---------------------------------------------------------------------------

/// Distinct flat color per class id.
fn class_color(class: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [40, 40, 48],
        [220, 60, 60],
        [60, 200, 80],
        [70, 90, 230],
        [230, 200, 50],
        [200, 70, 210],
        [60, 210, 210],
        [240, 140, 40],
    ];
    PALETTE[class % PALETTE.len()]
}

/// Write `n` synthetic samples under `root`: colored axis-aligned rectangles
/// over a background class, masks exact by construction, a 2-pixel ignore
/// band on every border and a 1-pixel void ring along class boundaries (the
/// usual benchmark convention). Rectangle corners snap to an 8-pixel grid so
/// the ideal decision boundary is representable by a stride-8 upsampled head.
pub fn make_synthetic(root: &Path, n: usize, hw: usize, classes: usize, seed: u64) -> Result<()> {
    if classes < 2 {
        return Err(DsnetError::Validation("synthetic data needs >= 2 classes".into()));
    }
    if hw < 24 {
        return Err(DsnetError::Validation("synthetic size must be >= 24".into()));
    }
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    use rand::SeedableRng;

    let grid = 8usize;
    let cells = hw / grid;
    for idx in 0..n {
        let mut mask = Array2::<u32>::zeros((hw, hw));
        let mut img = RgbImage::new(hw as u32, hw as u32);
        let bg = class_color(0);
        for y in 0..hw {
            for x in 0..hw {
                img.put_pixel(x as u32, y as u32, image::Rgb(bg));
            }
        }
        let n_shapes = rng.gen_range(2..=3usize);
        for s in 0..n_shapes {
            let class = 1 + (idx + s) % (classes - 1);
            // corners in grid cells, at least one cell wide, inside borders
            let c0y = rng.gen_range(0..cells - 1);
            let c0x = rng.gen_range(0..cells - 1);
            let c1y = rng.gen_range(c0y + 1..=(cells - 1).min(c0y + cells / 2 + 1));
            let c1x = rng.gen_range(c0x + 1..=(cells - 1).min(c0x + cells / 2 + 1));
            let color = class_color(class);
            for y in c0y * grid..c1y * grid {
                for x in c0x * grid..c1x * grid {
                    mask[(y, x)] = class as u32;
                    img.put_pixel(x as u32, y as u32, image::Rgb(color));
                }
            }
        }
        // void ring along class boundaries
        let drawn = mask.clone();
        for y in 0..hw {
            for x in 0..hw {
                let here = drawn[(y, x)];
                let differs = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny >= 0
                        && nx >= 0
                        && (ny as usize) < hw
                        && (nx as usize) < hw
                        && drawn[(ny as usize, nx as usize)] != here
                });
                if differs {
                    mask[(y, x)] = IGNORE_LABEL;
                }
            }
        }
        // ignore band around the border
        for y in 0..hw {
            for x in 0..hw {
                if y < 2 || x < 2 || y >= hw - 2 || x >= hw - 2 {
                    mask[(y, x)] = IGNORE_LABEL;
                }
            }
        }
        let name = format!("sample_{idx:04}");
        img.save(root.join("images").join(format!("{name}.png")))?;
        save_mask(&mask, &root.join("masks").join(format!("{name}.png")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Bilinear resample of a (3, H, W) image to (3, out_h, out_w).
pub fn resize_image_bilinear(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let wh = bilinear_weights(h, out_h);
    let ww = bilinear_weights(w, out_w);
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (i, &(r0, r1, tr)) in wh.iter().enumerate() {
            for (j, &(c0, c1, tc)) in ww.iter().enumerate() {
                let top = (1.0 - tc) * image[(ch, r0, c0)] + tc * image[(ch, r0, c1)];
                let bot = (1.0 - tc) * image[(ch, r1, c0)] + tc * image[(ch, r1, c1)];
                out[(ch, i, j)] = (1.0 - tr) * top + tr * bot;
            }
        }
    }
    out
}

/// Nearest-neighbour resample of a mask; never interpolates labels.
pub fn resize_mask_nearest(mask: &Array2<u32>, out_h: usize, out_w: usize) -> Array2<u32> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let si = (i * h / out_h).min(h - 1);
        let sj = (j * w / out_w).min(w - 1);
        mask[(si, sj)]
    })
}

/// The deterministic core of [`augment`]: flip, scale by `scale`, pad to at
/// least the crop size (image with zeros, mask with the ignore label,
/// content at the top-left), then crop at the given offsets.
pub fn apply_augment(
    sample: &SegSample,
    flip: bool,
    scale: f64,
    crop: (usize, usize),
    off: (usize, usize),
) -> SegSample {
    let (h, w) = sample.hw();
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if flip {
        let mut flipped = image.clone();
        let mut flipped_mask = mask.clone();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    flipped[(ch, y, x)] = image[(ch, y, w - 1 - x)];
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                flipped_mask[(y, x)] = mask[(y, w - 1 - x)];
            }
        }
        image = flipped;
        mask = flipped_mask;
    }

    let new_h = ((h as f64 * scale) as usize).max(1);
    let new_w = ((w as f64 * scale) as usize).max(1);
    if (new_h, new_w) != (h, w) {
        image = resize_image_bilinear(&image, new_h, new_w);
        mask = resize_mask_nearest(&mask, new_h, new_w);
    }

    let canvas_h = new_h.max(crop.0);
    let canvas_w = new_w.max(crop.1);
    let mut canvas_img = Array3::<f64>::zeros((3, canvas_h, canvas_w));
    let mut canvas_mask = Array2::<u32>::from_elem((canvas_h, canvas_w), IGNORE_LABEL);
    for ch in 0..3 {
        for y in 0..new_h {
            for x in 0..new_w {
                canvas_img[(ch, y, x)] = image[(ch, y, x)];
            }
        }
    }
    for y in 0..new_h {
        for x in 0..new_w {
            canvas_mask[(y, x)] = mask[(y, x)];
        }
    }

    let (oy, ox) = off;
    let mut out_img = Array3::<f64>::zeros((3, crop.0, crop.1));
    let mut out_mask = Array2::<u32>::zeros((crop.0, crop.1));
    for ch in 0..3 {
        for y in 0..crop.0 {
            for x in 0..crop.1 {
                out_img[(ch, y, x)] = canvas_img[(ch, oy + y, ox + x)];
            }
        }
    }
    for y in 0..crop.0 {
        for x in 0..crop.1 {
            out_mask[(y, x)] = canvas_mask[(oy + y, ox + x)];
        }
    }
    SegSample {
        name: sample.name.clone(),
        image: out_img,
        mask: out_mask,
    }
}

/// Random horizontal flip (p = 1/2), uniform rescale in `scale_range`
/// (bilinear image, nearest mask), and a random crop of `crop`, padding
/// with zeros / ignore when the rescaled sample is smaller.
pub fn augment(
    sample: &SegSample,
    crop: (usize, usize),
    scale_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> SegSample {
    let flip = rng.gen_bool(0.5);
    let scale = if scale_range.0 == scale_range.1 {
        scale_range.0
    } else {
        rng.gen_range(scale_range.0..scale_range.1)
    };
    let (h, w) = sample.hw();
    let new_h = ((h as f64 * scale) as usize).max(1);
    let new_w = ((w as f64 * scale) as usize).max(1);
    let canvas_h = new_h.max(crop.0);
    let canvas_w = new_w.max(crop.1);
    let oy = if canvas_h > crop.0 {
        rng.gen_range(0..=canvas_h - crop.0)
    } else {
        0
    };
    let ox = if canvas_w > crop.1 {
        rng.gen_range(0..=canvas_w - crop.1)
    } else {
        0
    };
    apply_augment(sample, flip, scale, crop, (oy, ox))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    fn sample(hw: usize) -> SegSample {
        let image = Array3::from_shape_fn((3, hw, hw), |(c, y, x)| {
            ((c + 1) * (y * hw + x)) as f64 / (3 * hw * hw) as f64
        });
        let mask = Array2::from_shape_fn((hw, hw), |(y, x)| ((y / 8 + x / 8) % 4) as u32);
        SegSample {
            name: "t".into(),
            image,
            mask,
        }
    }

    #[test]
    fn identity_augment_is_identity() {
        let s = sample(64);
        let out = apply_augment(&s, false, 1.0, (64, 64), (0, 0));
        assert_eq!(out.image, s.image);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn downscale_pads_with_ignore() {
        // scale 0.4 of 512 -> 204 pixels of content, remainder ignored
        let s = sample(512);
        let out = apply_augment(&s, false, 0.4, (512, 512), (0, 0));
        assert_eq!(out.mask.dim(), (512, 512));
        assert!(out.mask[(203, 203)] != IGNORE_LABEL);
        assert_eq!(out.mask[(204, 204)], IGNORE_LABEL);
        assert_eq!(out.mask[(0, 204)], IGNORE_LABEL);
        assert_eq!(out.image[(0, 204, 204)], 0.0);
        // oracle re-implementation of the content extent
        let expect = (512.0f64 * 0.4) as usize;
        assert_eq!(expect, 204);
    }

    #[test]
    fn same_seed_gives_identical_augment() {
        let s = sample(64);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = augment(&s, (48, 48), (0.4, 1.6), &mut r1);
        let b = augment(&s, (48, 48), (0.4, 1.6), &mut r2);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn augment_never_invents_labels() {
        let s = sample(64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let before: HashSet<u32> = s.mask.iter().copied().collect();
        for _ in 0..20 {
            let out = augment(&s, (32, 32), (0.4, 1.6), &mut rng);
            let after: HashSet<u32> = out.mask.iter().copied().collect();
            for v in after {
                assert!(v == IGNORE_LABEL || before.contains(&v), "invented label {v}");
            }
        }
    }

    #[test]
    fn synthetic_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic(dir.path(), 4, 64, 4, 12).unwrap();
        let ds = load_dataset(dir.path(), 4).unwrap();
        assert_eq!(ds.len(), 4);
        for s in &ds.samples {
            assert_eq!(s.hw(), (64, 64));
            let classes: HashSet<u32> =
                s.mask.iter().copied().filter(|&v| v != IGNORE_LABEL).collect();
            assert!(classes.len() >= 2, "mask should use >= 2 classes");
            // border band is ignored
            assert_eq!(s.mask[(0, 10)], IGNORE_LABEL);
            assert_eq!(s.mask[(63, 10)], IGNORE_LABEL);
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_synthetic(d1.path(), 2, 64, 4, 77).unwrap();
        make_synthetic(d2.path(), 2, 64, 4, 77).unwrap();
        let a = load_dataset(d1.path(), 4).unwrap();
        let b = load_dataset(d2.path(), 4).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn loader_rejects_unpaired_and_bad_masks() {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic(dir.path(), 2, 64, 4, 3).unwrap();
        std::fs::remove_file(dir.path().join("masks/sample_0001.png")).unwrap();
        let err = load_dataset(dir.path(), 4).unwrap_err();
        assert!(err.to_string().contains("sample_0001"), "{err}");

        // mask value out of range for the declared class count
        let dir2 = tempfile::tempdir().unwrap();
        make_synthetic(dir2.path(), 1, 64, 4, 3).unwrap();
        let err = load_dataset(dir2.path(), 2).unwrap_err();
        assert!(matches!(err, DsnetError::Data(_)), "{err}");
    }
}
