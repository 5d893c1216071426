//! Labeled image sets: IDX file ingestion and a deterministic synthetic
//! generator of class-distinct shapes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Poisoned,
}

/// Images in [0,1] with class labels and a per-sample provenance flag.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub images: Tensor, // [n, c, h, w]
    pub labels: Vec<u32>,
    pub provenance: Vec<Provenance>,
    pub classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<u32>, classes: usize) -> Result<Self> {
        let n = match images.shape() {
            [n, _, _, _] => *n,
            other => {
                return Err(Error::Data(format!("images must be [n,c,h,w], got {other:?}")))
            }
        };
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(LabeledImageSet { images, labels, provenance: vec![Provenance::Clean; n], classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample (channels, height, width).
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn sample_len(&self) -> usize {
        let (c, h, w) = self.dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let m = self.sample_len();
        &self.images.data()[i * m..(i + 1) * m]
    }

    pub fn poisoned_count(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Poisoned).count()
    }

    /// Gather the given sample indices into a new set.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let m = self.sample_len();
        let (c, h, w) = self.dims();
        let mut data = Vec::with_capacity(indices.len() * m);
        let mut labels = Vec::with_capacity(indices.len());
        let mut provenance = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
            provenance.push(self.provenance[i]);
        }
        LabeledImageSet {
            images: Tensor::new(vec![indices.len(), c, h, w], data),
            labels,
            provenance,
            classes: self.classes,
        }
    }

    /// Seeded split into (rest, holdout) where holdout gets
    /// ceil(fraction * n) samples. Both halves keep the original order
    /// of their members.
    pub fn split_holdout(&self, fraction: f32, rng: &mut Rng) -> (Self, Self) {
        let n = self.len();
        // relative slack so f32 fractions like 0.05 of 100 stay at 5, not 6
        let want = fraction as f64 * n as f64 * (1.0 - 1e-6);
        let take = (want.ceil().max(0.0) as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let mut hold: Vec<usize> = idx[..take].to_vec();
        let mut rest: Vec<usize> = idx[take..].to_vec();
        hold.sort_unstable();
        rest.sort_unstable();
        (self.subset(&rest), self.subset(&hold))
    }

    /// Batch of images as a [batch, c, h, w] tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u32>) {
        let sub = self.subset(indices);
        (sub.images, sub.labels)
    }
}

fn read_u32_be(buf: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .ok_or_else(|| {
            Error::Ingest(format!("{}: truncated at offset {offset}, wanted 4 bytes", path.display()))
        })?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Parse the IDX pair (idx3-ubyte images, idx1-ubyte labels), normalizing
/// pixel bytes to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let img_buf = fs::read(images_path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", images_path.display())))?;
    let magic = read_u32_be(&img_buf, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingest(format!(
            "{}: bad magic {magic:#010x} at offset 0, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&img_buf, 4, images_path)? as usize;
    let h = read_u32_be(&img_buf, 8, images_path)? as usize;
    let w = read_u32_be(&img_buf, 12, images_path)? as usize;
    let want = n * h * w;
    let payload = img_buf.get(16..16 + want).ok_or_else(|| {
        Error::Ingest(format!(
            "{}: truncated at offset {}, wanted {want} pixel bytes",
            images_path.display(),
            img_buf.len()
        ))
    })?;

    let lbl_buf = fs::read(labels_path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", labels_path.display())))?;
    let magic = read_u32_be(&lbl_buf, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Ingest(format!(
            "{}: bad magic {magic:#010x} at offset 0, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_labels = read_u32_be(&lbl_buf, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::Ingest(format!(
            "count mismatch: {} declares {n} images, {} declares {n_labels} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    let label_bytes = lbl_buf.get(8..8 + n).ok_or_else(|| {
        Error::Ingest(format!(
            "{}: truncated at offset {}, wanted {n} label bytes",
            labels_path.display(),
            lbl_buf.len()
        ))
    })?;

    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = label_bytes.iter().map(|&b| b as u32).collect();
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1).max(2);
    LabeledImageSet::new(Tensor::new(vec![n, 1, h, w], data), labels, classes)
}

/// Deterministic class-balanced generator of grayscale shape images.
///
/// Ten shape families (bars, squares, crosses, rings, diagonals, discs,
/// diamonds) with small positional/size jitter and pixel noise. Class k
/// always draws shape k, so any reasonable classifier separates them.
pub fn synth_shapes(n: usize, classes: usize, h: usize, w: usize, seed: u64) -> Result<LabeledImageSet> {
    if !(2..=10).contains(&classes) {
        return Err(Error::Data(format!("synth_shapes: classes must be in [2,10], got {classes}")));
    }
    if h < 8 || w < 8 {
        return Err(Error::Data(format!("synth_shapes: images must be at least 8x8, got {h}x{w}")));
    }
    let mut rng = Rng::split(seed, 0x5941_7448);
    let mut data = vec![0.0f32; n * h * w];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % classes) as u32;
        labels.push(class);
        let img = &mut data[i * h * w..(i + 1) * h * w];
        draw_shape(img, h, w, class as usize, &mut rng);
    }
    LabeledImageSet::new(Tensor::new(vec![n, 1, h, w], data), labels, classes)
}

fn draw_shape(img: &mut [f32], h: usize, w: usize, class: usize, rng: &mut Rng) {
    // dim background noise plus sparse bright speckles, so every pixel
    // position (corners included) is occasionally active on clean images
    for px in img.iter_mut() {
        *px = if rng.next_f32() < 0.01 { rng.uniform(0.5, 1.0) } else { rng.uniform(0.0, 0.12) };
    }
    // one bright distractor blob (1x1 to 3x3) per image at a uniform
    // position; label-uncorrelated, so classifiers cannot key on isolated
    // bright patches anywhere in the frame
    let bs = 1 + rng.below(3);
    let by = rng.below(h - bs + 1);
    let bx = rng.below(w - bs + 1);
    for dy in 0..bs {
        for dx in 0..bs {
            img[(by + dy) * w + bx + dx] = rng.uniform(0.5, 1.0);
        }
    }
    let jitter = (h.min(w) / 8) as i64;
    let cy = (h as i64 / 2) + rng.below((2 * jitter + 1) as usize) as i64 - jitter;
    let cx = (w as i64 / 2) + rng.below((2 * jitter + 1) as usize) as i64 - jitter;
    let r = (h.min(w) as i64 / 4) + rng.below(3) as i64 - 1;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (dy, dx) = (y - cy, x - cx);
            let inside = match class {
                0 => dy.abs() <= 1 && dx.abs() <= r + 1,
                1 => dx.abs() <= 1 && dy.abs() <= r + 1,
                2 => dy.abs() < r && dx.abs() < r,
                3 => (dy.abs() <= 1 && dx.abs() <= r) || (dx.abs() <= 1 && dy.abs() <= r),
                4 => {
                    let d = ((dy * dy + dx * dx) as f64).sqrt();
                    (d - r as f64).abs() <= 0.9
                }
                5 => (dy - dx).abs() <= 1 && dy.abs() <= r && dx.abs() <= r,
                6 => ((dy - dx).abs() <= 1 || (dy + dx).abs() <= 1) && dy.abs() <= r && dx.abs() <= r,
                7 => {
                    let m = dy.abs().max(dx.abs());
                    m == r || m == r - 1
                }
                8 => dy * dy + dx * dx <= (r - 1) * (r - 1) + 1,
                9 => dy.abs() + dx.abs() <= r,
                _ => unreachable!(),
            };
            if inside {
                img[(y * w as i64 + x) as usize] = rng.uniform(0.7, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, imgs: &[u8], n: u32, h: u32, w: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs.idx3");
        let lp = dir.join("lbls.idx1");
        let mut f = fs::File::create(&ip).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(&h.to_be_bytes()).unwrap();
        f.write_all(&w.to_be_bytes()).unwrap();
        f.write_all(imgs).unwrap();
        let mut f = fs::File::create(&lp).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&n.to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0, 128, 255, 64], 1, 2, 2, &[1]);
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.dims(), (1, 2, 2));
        assert_eq!(set.image(0)[2], 1.0); // byte 255 -> exactly 1.0
        assert_eq!(set.labels, vec![1]);
    }

    #[test]
    fn idx_wrong_magic_cites_expected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("bad.idx3");
        fs::write(&ip, 42u32.to_be_bytes()).unwrap();
        let lp = dir.path().join("l.idx1");
        fs::write(&lp, IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");
    }

    #[test]
    fn idx_empty_set_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[], 0, 28, 28, &[]);
        let set = load_idx(&ip, &lp).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn idx_truncation_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[7, 7], 1, 2, 2, &[0]); // 2 of 4 pixels
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(err.contains("offset"), "{err}");
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[0; 8], 2, 2, 2, &[0]);
        // labels file declares 2 but holds 1; rewrite it declaring 3
        let mut f = fs::File::create(&lp).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&3u32.to_be_bytes()).unwrap();
        f.write_all(&[0, 0, 0]).unwrap();
        drop(f);
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("count mismatch"), "{err}");
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_shapes(60, 4, 16, 16, 99).unwrap();
        let b = synth_shapes(60, 4, 16, 16, 99).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synth_is_class_balanced() {
        let set = synth_shapes(400, 4, 16, 16, 1).unwrap();
        for class in 0..4u32 {
            assert_eq!(set.labels.iter().filter(|&&l| l == class).count(), 100);
        }
    }

    #[test]
    fn synth_pixels_in_unit_range() {
        let set = synth_shapes(120, 10, 16, 16, 2).unwrap();
        assert!(set.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synth_rejects_class_counts_outside_contract() {
        assert!(synth_shapes(10, 1, 16, 16, 0).is_err());
        assert!(synth_shapes(10, 11, 16, 16, 0).is_err());
    }

    #[test]
    fn holdout_split_is_disjoint_and_complete() {
        let set = synth_shapes(100, 4, 16, 16, 5).unwrap();
        let mut rng = Rng::new(7);
        let (rest, hold) = set.split_holdout(0.05, &mut rng);
        assert_eq!(hold.len(), 5);
        assert_eq!(rest.len(), 95);
    }
}
