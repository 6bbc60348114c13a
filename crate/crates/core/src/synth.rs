//! Synthetic planted-glyph radiographs with known ground truth.
//!
//! Every leaf of the taxonomy is bound to one glyph. With leaf ordinal `o`
//! (position among [`Taxonomy::leaves`]) and generator seed `s`, the glyph is
//! `GLYPHS[(o + s) mod 12]`, drawn bright when `((o + s) / 12)` is even and
//! dark otherwise, so up to 24 leaves get distinct glyphs.
//!
//! Image `i` is normal (no glyphs, empty labels) when `i mod 6 == 5`.
//! Otherwise each leaf is drawn independently with probability
//! [`LEAF_PROBABILITY`], redrawing until at least one leaf is present. Glyphs
//! occupy distinct cells of a square grid, so they never overlap, and each
//! glyph's box lies inside the image. Internal nodes are never drawn; they
//! become positive only through label propagation.
//!
//! Each image uses its own ChaCha8 stream `(seed, index)`, so images can be
//! generated in any order or in parallel with identical results.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_manifest, ImageRecord, Projection};
use crate::error::{Error, Result};
use crate::imaging::{Photometric, RawImage};
use crate::labels::LabelSet;
use crate::taxonomy::{NodeId, Taxonomy};

pub const LEAF_PROBABILITY: f64 = 0.25;
pub const NORMAL_PERIOD: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlyphKind {
    Blob,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Ring,
    Dots,
    DiagonalStripes,
    Cross,
    AntiDiagonalStripes,
    Wedge,
    Frame,
    Bar,
}

pub const GLYPHS: [GlyphKind; 12] = [
    GlyphKind::Blob,
    GlyphKind::HorizontalStripes,
    GlyphKind::VerticalStripes,
    GlyphKind::Checker,
    GlyphKind::Ring,
    GlyphKind::Dots,
    GlyphKind::DiagonalStripes,
    GlyphKind::Cross,
    GlyphKind::AntiDiagonalStripes,
    GlyphKind::Wedge,
    GlyphKind::Frame,
    GlyphKind::Bar,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Glyph {
    pub kind: GlyphKind,
    pub dark: bool,
}

impl Glyph {
    /// Pattern intensity in [0, 1] at offset (dx, dy) inside an s x s box.
    fn pattern(&self, dx: usize, dy: usize, s: usize) -> f64 {
        let sf = s as f64;
        let cx = dx as f64 + 0.5 - sf / 2.0;
        let cy = dy as f64 + 0.5 - sf / 2.0;
        let r = (cx * cx + cy * cy).sqrt();
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        match self.kind {
            GlyphKind::Blob => {
                let sigma = sf / 5.0;
                (-(r * r) / (2.0 * sigma * sigma)).exp()
            }
            GlyphKind::HorizontalStripes => on((dy / 4) % 2 == 0),
            GlyphKind::VerticalStripes => on((dx / 4) % 2 == 0),
            GlyphKind::Checker => on((dx / 6 + dy / 6) % 2 == 0),
            GlyphKind::Ring => on((r - 0.35 * sf).abs() < (sf / 12.0).max(1.0)),
            GlyphKind::Dots => {
                let ox = (dx % 9) as f64 - 4.0;
                let oy = (dy % 9) as f64 - 4.0;
                on(ox * ox + oy * oy <= 4.0)
            }
            GlyphKind::DiagonalStripes => on(((dx + dy) / 5) % 2 == 0),
            GlyphKind::Cross => {
                let half = (sf / 10.0).max(1.0);
                on(cx.abs() < half || cy.abs() < half)
            }
            GlyphKind::AntiDiagonalStripes => on(((dx + s - dy) / 5) % 2 == 0),
            GlyphKind::Wedge => {
                let u = (dx as f64 + 0.5) / sf;
                let v = (dy as f64 + 0.5) / sf;
                on(v >= (2.0 * u - 1.0).abs())
            }
            GlyphKind::Frame => {
                let t = (s / 8).max(1);
                on(dx < t || dy < t || dx >= s - t || dy >= s - t)
            }
            GlyphKind::Bar => on(cy.abs() < sf / 6.0),
        }
    }
}

/// Glyph box for one planted finding; pixel coordinates, top-left origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphBox {
    pub image_id: String,
    pub node_id: NodeId,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl GlyphBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub record: ImageRecord,
    pub image: RawImage,
    pub boxes: Vec<GlyphBox>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<ImageRecord>,
    pub images: Vec<RawImage>,
    pub boxes: Vec<GlyphBox>,
}

#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    leaves: Vec<NodeId>,
    glyphs: Vec<Glyph>,
    image_size: usize,
    seed: u64,
    grid: usize,
}

impl SyntheticGenerator {
    pub fn new(taxonomy: &Taxonomy, image_size: usize, seed: u64) -> Result<Self> {
        let leaves: Vec<NodeId> = taxonomy
            .leaves()
            .into_iter()
            .map(|i| taxonomy.id_of(i).clone())
            .collect();
        if leaves.is_empty() {
            return Err(Error::invalid("taxonomy has no leaves to bind glyphs to"));
        }
        let grid = ((leaves.len() as f64).sqrt().ceil() as usize).max(3);
        if image_size < 3 * grid {
            return Err(Error::invalid(format!(
                "image size {image_size} is too small for a {grid}x{grid} glyph grid"
            )));
        }
        let glyphs = (0..leaves.len())
            .map(|o| glyph_for(o, seed))
            .collect();
        Ok(SyntheticGenerator {
            leaves,
            glyphs,
            image_size,
            seed,
            grid,
        })
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn glyph(&self, leaf: &NodeId) -> Option<Glyph> {
        self.leaves
            .iter()
            .position(|l| l == leaf)
            .map(|i| self.glyphs[i])
    }

    pub fn image_id(index: usize) -> String {
        format!("syn-{index:06}")
    }

    pub fn sample(&self, index: usize) -> SyntheticSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let size = self.image_size;

        let mut present: Vec<usize> = Vec::new();
        if index % NORMAL_PERIOD != NORMAL_PERIOD - 1 {
            while present.is_empty() {
                present = (0..self.leaves.len())
                    .filter(|_| rng.random_bool(LEAF_PROBABILITY))
                    .collect();
            }
        }

        let base: f64 = rng.random_range(100.0..130.0);
        let gradient: f64 = rng.random_range(0.0..25.0);
        let noise = Normal::new(0.0, 8.0).expect("valid normal");
        let mut field: Vec<f64> = (0..size * size)
            .map(|k| {
                let y = (k / size) as f64 / size as f64;
                base + gradient * y + noise.sample(&mut rng)
            })
            .collect();

        let image_id = Self::image_id(index);
        let cell = size / self.grid;
        let cells = sample(&mut rng, self.grid * self.grid, present.len().max(1));
        let mut boxes = Vec::with_capacity(present.len());
        let mut labels = LabelSet::new();
        for (slot, &leaf) in present.iter().enumerate() {
            let c = cells.index(slot);
            let (cx, cy) = ((c % self.grid) * cell, (c / self.grid) * cell);
            let lo = ((cell as f64 * 0.55) as usize).max(3);
            let hi = ((cell as f64 * 0.9) as usize).max(lo);
            let s = rng.random_range(lo..=hi);
            let x = cx + rng.random_range(0..=cell - s);
            let y = cy + rng.random_range(0..=cell - s);
            let glyph = self.glyphs[leaf];
            // same contrast either way; the background leaves room below
            let magnitude: f64 = rng.random_range(70.0..100.0);
            let amplitude = if glyph.dark { -magnitude } else { magnitude };
            for dy in 0..s {
                for dx in 0..s {
                    let p = glyph.pattern(dx, dy, s);
                    if p > 0.0 {
                        field[(y + dy) * size + x + dx] += amplitude * p;
                    }
                }
            }
            boxes.push(GlyphBox {
                image_id: image_id.clone(),
                node_id: self.leaves[leaf].clone(),
                x,
                y,
                w: s,
                h: s,
            });
            labels.insert(self.leaves[leaf].clone());
        }

        let photometric = if rng.random_bool(0.25) {
            Photometric::Monochrome1
        } else {
            Photometric::Monochrome2
        };
        let pixels: Vec<u16> = field
            .iter()
            .map(|v| {
                let p = v.round().clamp(0.0, 255.0) as u16;
                match photometric {
                    Photometric::Monochrome1 => 255 - p,
                    Photometric::Monochrome2 => p,
                }
            })
            .collect();
        let image = RawImage::new(size, size, 8, photometric, pixels).expect("8-bit pixels");

        let record = ImageRecord {
            image_id: image_id.clone(),
            patient_id: format!("pat-{:05}", index / 2),
            path: PathBuf::from(format!("images/{image_id}.png")),
            projection: Projection::Pa,
            photometric,
            labels,
            split: None,
        };
        SyntheticSample {
            record,
            image,
            boxes,
        }
    }
}

fn glyph_for(ordinal: usize, seed: u64) -> Glyph {
    let k = GLYPHS.len() as u64;
    let c = (ordinal as u64).wrapping_add(seed % (2 * k)) % (2 * k);
    Glyph {
        kind: GLYPHS[(c % k) as usize],
        dark: c >= k,
    }
}

/// Generates `n_images` samples in memory.
pub fn generate_synthetic(
    taxonomy: &Taxonomy,
    n_images: usize,
    image_size: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_images == 0 {
        return Err(Error::invalid("n_images must be at least 1"));
    }
    let generator = SyntheticGenerator::new(taxonomy, image_size, seed)?;
    let samples: Vec<SyntheticSample> = (0..n_images)
        .into_par_iter()
        .map(|i| generator.sample(i))
        .collect();
    let mut out = SyntheticDataset {
        records: Vec::with_capacity(n_images),
        images: Vec::with_capacity(n_images),
        boxes: Vec::new(),
    };
    for s in samples {
        out.records.push(s.record);
        out.images.push(s.image);
        out.boxes.extend(s.boxes);
    }
    Ok(out)
}

/// Writes `images/<id>.png`, `manifest.csv` and `boxes.csv` under `dir`,
/// generating images in parallel chunks. Returns the records with absolute
/// image paths.
pub fn write_synthetic(
    dir: impl AsRef<Path>,
    taxonomy: &Taxonomy,
    n_images: usize,
    image_size: usize,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<GlyphBox>)> {
    if n_images == 0 {
        return Err(Error::invalid("n_images must be at least 1"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let generator = SyntheticGenerator::new(taxonomy, image_size, seed)?;
    let written: Vec<(ImageRecord, Vec<GlyphBox>)> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut s = generator.sample(i);
            s.record.path = dir.join(&s.record.path);
            s.image.save_png(&s.record.path)?;
            Ok((s.record, s.boxes))
        })
        .collect::<Result<_>>()?;
    let (records, boxes): (Vec<_>, Vec<_>) = written.into_iter().unzip();
    let boxes: Vec<GlyphBox> = boxes.into_iter().flatten().collect();
    save_manifest(dir.join("manifest.csv"), &records)?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join("boxes.csv"))?);
    write_boxes(f, &boxes)?;
    Ok((records, boxes))
}

/// `image_id,node_id,x,y,w,h`
pub fn write_boxes<W: Write>(writer: W, boxes: &[GlyphBox]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for b in boxes {
        w.serialize(b)?;
    }
    if boxes.is_empty() {
        w.write_record(["image_id", "node_id", "x", "y", "w", "h"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<GlyphBox>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|b| b.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::parse_taxonomy;

    fn toy() -> Taxonomy {
        parse_taxonomy(include_str!("../../../data/toy.tax")).unwrap()
    }

    #[test]
    fn single_leaf_single_image() {
        let t = parse_taxonomy("[findings]\nroot | r\n  leaf | leaf\n").unwrap();
        let d = generate_synthetic(&t, 1, 64, 0).unwrap();
        assert_eq!(d.records.len(), 1);
        let leaf = NodeId::new("leaf").unwrap();
        assert_eq!(d.records[0].labels, [leaf.clone()].into_iter().collect());
        assert_eq!(d.boxes.len(), 1);
        assert_eq!(d.boxes[0].node_id, leaf);
    }

    #[test]
    fn every_leaf_is_well_represented() {
        let t = toy();
        assert_eq!(t.leaves().len(), 8);
        let gen = SyntheticGenerator::new(&t, 32, 11).unwrap();
        let mut counts = vec![0usize; 8];
        for i in 0..1000 {
            let s = gen.sample(i);
            for (k, leaf) in gen.leaves().iter().enumerate() {
                if s.record.labels.contains(leaf) {
                    counts[k] += 1;
                }
            }
        }
        assert!(counts.iter().all(|c| *c >= 50), "{counts:?}");
    }

    #[test]
    fn same_seed_same_output() {
        let t = toy();
        let a = generate_synthetic(&t, 12, 96, 5).unwrap();
        let b = generate_synthetic(&t, 12, 96, 5).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.records, b.records);
        assert_eq!(a.boxes, b.boxes);
        let c = generate_synthetic(&t, 12, 96, 6).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn boxes_inside_and_labels_match() {
        let t = toy();
        let d = generate_synthetic(&t, 60, 299, 2).unwrap();
        for (rec, img) in d.records.iter().zip(&d.images) {
            let boxes: Vec<_> = d.boxes.iter().filter(|b| b.image_id == rec.image_id).collect();
            let drawn: LabelSet = boxes.iter().map(|b| b.node_id.clone()).collect();
            assert_eq!(drawn, rec.labels);
            assert_eq!(boxes.len(), rec.labels.len());
            for b in boxes {
                assert!(b.x + b.w <= img.width() && b.y + b.h <= img.height());
            }
        }
        let normals = d.records.iter().filter(|r| r.labels.is_empty()).count();
        assert_eq!(normals, 10);
    }

    #[test]
    fn glyph_binding_is_distinct_and_seeded() {
        let gen = SyntheticGenerator::new(&toy(), 64, 0).unwrap();
        let glyphs: Vec<Glyph> = gen.leaves().iter().map(|l| gen.glyph(l).unwrap()).collect();
        for i in 0..glyphs.len() {
            for j in i + 1..glyphs.len() {
                assert_ne!(glyphs[i], glyphs[j]);
            }
        }
        assert_eq!(glyphs[0], Glyph { kind: GlyphKind::Blob, dark: false });
        assert_eq!(glyph_for(0, 13), Glyph { kind: GlyphKind::HorizontalStripes, dark: true });
    }

    #[test]
    fn no_leaves_is_an_error() {
        let t = parse_taxonomy("[special]\nnormal | normal\n").unwrap();
        assert!(SyntheticGenerator::new(&t, 64, 0).is_err());
    }

    #[test]
    fn writes_manifest_images_and_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let t = toy();
        let (records, boxes) = write_synthetic(dir.path(), &t, 5, 48, 1).unwrap();
        assert_eq!(records.len(), 5);
        assert!(dir.path().join("images/syn-000000.png").exists());
        let back = crate::dataset::load_manifest_file(dir.path().join("manifest.csv"), &t).unwrap();
        assert_eq!(back, records);
        assert_eq!(read_boxes(dir.path().join("boxes.csv")).unwrap(), boxes);
        let header = std::fs::read_to_string(dir.path().join("boxes.csv")).unwrap();
        assert!(header.starts_with("image_id,node_id,x,y,w,h\n"));
    }
}
