//! Procedural head phantoms (pseudo-MR / pseudo-CT pairs), slice datasets,
//! and their on-disk layout.
//!
//! A phantom is an elliptical head: a bone ring (bright in CT, dark in MR)
//! around textured soft tissue with a fluid-filled ventricle. MR and CT share
//! the geometry and texture; training pairs additionally move the CT by a
//! random rigid misalignment.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::artifacts;
use crate::error::{Error, IoContext, Result};
use crate::grid::{self, ImageGrid, Modality, CT_MAX, CT_MIN};
use crate::mask::{CoarseMask, MaskSource};
use crate::rng::{derive_seed, stream_rng};

/// Declared range of phantom MR intensities.
pub const MR_RANGE: (f64, f64) = (0.0, 1000.0);
pub const CT_RANGE: (f64, f64) = (CT_MIN, CT_MAX);
pub const DEFAULT_SIZE: usize = 32;
const MARGIN: f64 = 4.0;

/// Rigid offset applied to the CT of a training pair: pixels and radians.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Misalignment {
    pub dx: f64,
    pub dy: f64,
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: (usize, usize),
    /// Head centre `(row, col)`.
    pub center: (f64, f64),
    /// Semi-axes `(rows, cols)` before rotation.
    pub axes: (f64, f64),
    pub rotation: f64,
    pub skull_thickness: f64,
    pub texture_scale: f64,
    pub misalignment: Misalignment,
    pub seed: u64,
}

impl PhantomSpec {
    /// A centred head filling most of a `size x size` canvas.
    pub fn centered(size: usize, seed: u64) -> Self {
        let s = size as f64;
        Self {
            size: (size, size),
            center: ((s - 1.0) / 2.0, (s - 1.0) / 2.0),
            axes: (0.34 * s, 0.28 * s),
            rotation: 0.0,
            skull_thickness: (s / 16.0).max(1.0),
            texture_scale: s / 4.0,
            misalignment: Misalignment::default(),
            seed,
        }
    }

    /// Half-extent `(rows, cols)` of the rotated ellipse.
    fn extent(&self, rotation: f64) -> (f64, f64) {
        let (a, b) = self.axes;
        let (s, c) = rotation.sin_cos();
        (((a * c).powi(2) + (b * s).powi(2)).sqrt(), ((a * s).powi(2) + (b * c).powi(2)).sqrt())
    }

    fn fits(&self, m: &Misalignment) -> bool {
        let (h, w) = (self.size.0 as f64, self.size.1 as f64);
        let (ey, ex) = self.extent(self.rotation + m.rotation);
        let (cy, cx) = (self.center.0 + m.dy, self.center.1 + m.dx);
        cy - ey >= MARGIN
            && cx - ex >= MARGIN
            && cy + ey <= h - 1.0 - MARGIN
            && cx + ex <= w - 1.0 - MARGIN
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SpecOutOfBounds(m));
        if self.axes.0 <= 0.0 || self.axes.1 <= 0.0 {
            return fail(format!("axes {:?} must be positive", self.axes));
        }
        if self.skull_thickness < 1.0 || self.skull_thickness >= self.axes.0.min(self.axes.1) {
            return fail(format!("skull thickness {} outside [1, min axis)", self.skull_thickness));
        }
        if !self.fits(&Misalignment::default()) {
            return fail("ellipse leaves the 4-pixel margin".into());
        }
        if !self.fits(&self.misalignment) {
            return fail("misaligned ellipse leaves the 4-pixel margin".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Bone,
    Soft,
    Fluid,
}

/// Smooth texture in head coordinates, values in `[0, 1]`.
struct Texture {
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn new(seed: u64, scale: f64) -> Self {
        let mut rng = stream_rng(seed, "texture", 0);
        let waves = (0..4)
            .map(|_| {
                let angle = rng.gen_range(0.0..PI);
                let freq = 2.0 * PI / (scale * rng.gen_range(0.7..1.3));
                let phase = rng.gen_range(0.0..2.0 * PI);
                (freq * angle.cos(), freq * angle.sin(), phase)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|(ku, kv, p)| (ku * u + kv * v + p).sin()).sum();
        0.5 + 0.5 * s / self.waves.len() as f64
    }
}

struct Geometry<'a> {
    spec: &'a PhantomSpec,
    center: (f64, f64),
    rotation: f64,
}

impl Geometry<'_> {
    /// Head-frame coordinates of pixel `(i, j)`.
    fn local(&self, i: usize, j: usize) -> (f64, f64) {
        let (dy, dx) = (i as f64 - self.center.0, j as f64 - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        (c * dy + s * dx, -s * dy + c * dx)
    }

    fn classify(&self, u: f64, v: f64) -> Tissue {
        let (a, b) = self.spec.axes;
        let t = self.spec.skull_thickness;
        let inside = |a: f64, b: f64, u: f64, v: f64| (u / a).powi(2) + (v / b).powi(2) <= 1.0;
        if !inside(a, b, u, v) {
            Tissue::Air
        } else if !inside(a - t, b - t, u, v) {
            Tissue::Bone
        } else if inside(0.30 * a, 0.22 * b, u + 0.1 * a, v) {
            Tissue::Fluid
        } else {
            Tissue::Soft
        }
    }
}

fn ct_value(t: Tissue, tex: f64) -> f64 {
    match t {
        Tissue::Air => -1000.0,
        Tissue::Bone => 1000.0 + 500.0 * tex,
        Tissue::Soft => 20.0 + 40.0 * tex,
        Tissue::Fluid => 5.0,
    }
}

fn mr_value(t: Tissue, tex: f64) -> f64 {
    match t {
        Tissue::Air => 0.0,
        Tissue::Bone => 160.0 + 40.0 * tex,
        Tissue::Soft => 500.0 + 350.0 * tex,
        Tissue::Fluid => 260.0,
    }
}

/// Renders the MR (reference geometry), the CT (misaligned geometry) and the
/// head support of the reference geometry.
pub fn make_phantom_pair(spec: &PhantomSpec) -> Result<(ImageGrid, ImageGrid, CoarseMask)> {
    spec.validate()?;
    let texture = Texture::new(spec.seed, spec.texture_scale);
    let reference = Geometry {
        spec,
        center: spec.center,
        rotation: spec.rotation,
    };
    let m = spec.misalignment;
    let moved = Geometry {
        spec,
        center: (spec.center.0 + m.dy, spec.center.1 + m.dx),
        rotation: spec.rotation + m.rotation,
    };
    let render = |g: &Geometry, value: fn(Tissue, f64) -> f64| {
        Array2::from_shape_fn(spec.size, |(i, j)| {
            let (u, v) = g.local(i, j);
            value(g.classify(u, v), texture.at(u, v))
        })
    };
    let mut mr = render(&reference, mr_value);
    let ct = render(&moved, ct_value);
    // Mild acquisition noise on MR, kept inside the declared range.
    let mut rng = stream_rng(spec.seed, "mr-noise", 0);
    let noise = Normal::new(0.0, 4.0).expect("valid std");
    mr.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(MR_RANGE.0, MR_RANGE.1));
    let support = Array2::from_shape_fn(spec.size, |(i, j)| {
        let (u, v) = reference.local(i, j);
        reference.classify(u, v) != Tissue::Air
    });
    Ok((
        ImageGrid::new(mr, Modality::PhantomMr, MR_RANGE)?,
        ImageGrid::new(ct, Modality::PhantomCt, CT_RANGE)?,
        CoarseMask::new(support, MaskSource::Manual),
    ))
}

/// Ordered slices. `mr[i]` and `ct[i]` correspond when `paired`; either
/// stream may be empty for single-modality volumes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SliceDataset {
    pub mr: Vec<ImageGrid>,
    pub ct: Vec<ImageGrid>,
    pub masks: Option<Vec<CoarseMask>>,
    pub paired: bool,
}

impl SliceDataset {
    pub fn len(&self) -> usize {
        self.mr.len().max(self.ct.len())
    }

    pub fn is_empty(&self) -> bool {
        self.mr.is_empty() && self.ct.is_empty()
    }

    /// Independent per-epoch permutations of the MR and CT streams. Paired
    /// indices carry no correspondence.
    pub fn unpaired_order(&self, seed: u64, epoch: usize) -> (Vec<usize>, Vec<usize>) {
        let perm = |n: usize, stream: &str| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream_rng(seed, stream, epoch as u64));
            idx
        };
        (perm(self.mr.len(), "order-mr"), perm(self.ct.len(), "order-ct"))
    }

    /// Copy with every slice passed through [`grid::normalize`].
    pub fn normalized(&self) -> Result<Self> {
        let norm = |v: &[ImageGrid]| v.iter().map(grid::normalize).collect::<Result<Vec<_>>>();
        Ok(Self {
            mr: norm(&self.mr)?,
            ct: norm(&self.ct)?,
            masks: self.masks.clone(),
            paired: self.paired,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetParams {
    pub n: usize,
    pub size: usize,
    pub misalign_sigma: f64,
    pub seed: u64,
}

impl DatasetParams {
    pub fn n_test(&self) -> usize {
        (self.n / 10).max(1)
    }
}

/// Random head geometry for slice `index`.
fn random_spec(size: usize, seed: u64, index: u64, misalign_sigma: f64) -> PhantomSpec {
    let s = size as f64;
    let mut rng = stream_rng(seed, "phantom-geometry", index);
    let mut spec = PhantomSpec {
        size: (size, size),
        center: (
            (s - 1.0) / 2.0 + rng.gen_range(-0.5..0.5) * s / 32.0,
            (s - 1.0) / 2.0 + rng.gen_range(-0.5..0.5) * s / 32.0,
        ),
        axes: (rng.gen_range(0.24..0.28) * s, rng.gen_range(0.20..0.24) * s),
        rotation: rng.gen_range(-0.3..0.3),
        skull_thickness: rng.gen_range(1.5..2.5) * s / 32.0,
        texture_scale: rng.gen_range(0.2..0.35) * s,
        misalignment: Misalignment::default(),
        seed: derive_seed(seed, "phantom-texture", index),
    };
    if misalign_sigma > 0.0 {
        let n = Normal::new(0.0, misalign_sigma).expect("positive sigma");
        let mut m = Misalignment {
            dx: n.sample(&mut rng),
            dy: n.sample(&mut rng),
            rotation: n.sample(&mut rng) * 0.03,
        };
        // Shrink the offset until the moved head keeps its margin.
        for _ in 0..30 {
            if spec.fits(&m) {
                break;
            }
            m.dx *= 0.8;
            m.dy *= 0.8;
            m.rotation *= 0.8;
        }
        if !spec.fits(&m) {
            m = Misalignment::default();
        }
        spec.misalignment = m;
    }
    spec
}

/// Unpaired training set (misaligned CT, streams shuffled per epoch by the
/// consumer) and an exactly paired, aligned test set.
pub fn make_dataset(n: usize, misalign_sigma: f64, seed: u64) -> Result<(SliceDataset, SliceDataset)> {
    make_dataset_with(&DatasetParams {
        n,
        size: DEFAULT_SIZE,
        misalign_sigma,
        seed,
    })
}

pub fn make_dataset_with(p: &DatasetParams) -> Result<(SliceDataset, SliceDataset)> {
    if p.n < 2 {
        return Err(Error::Config(format!("dataset needs n >= 2, got {}", p.n)));
    }
    let n_test = p.n_test();
    let n_train = p.n - n_test;
    let mut train = SliceDataset {
        masks: Some(Vec::new()),
        paired: false,
        ..Default::default()
    };
    let mut test = SliceDataset {
        masks: Some(Vec::new()),
        paired: true,
        ..Default::default()
    };
    for i in 0..p.n {
        let is_test = i >= n_train;
        let sigma = if is_test { 0.0 } else { p.misalign_sigma };
        let spec = random_spec(p.size, p.seed, i as u64, sigma);
        let (mr, ct, mask) = make_phantom_pair(&spec)?;
        let set = if is_test { &mut test } else { &mut train };
        set.mr.push(mr);
        set.ct.push(ct);
        set.masks.as_mut().expect("set above").push(mask);
    }
    Ok((train, test))
}

/// Intersection over union of two binary supports.
pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn slice_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// Writes `{train,test}/{mr,ct,mask}/NNNN.png` and `meta.txt`.
pub fn save_dataset(dir: &Path, train: &SliceDataset, test: &SliceDataset, meta: &[(&str, String)]) -> Result<()> {
    for (split, set) in [("train", train), ("test", test)] {
        let base = dir.join(split);
        for (i, g) in set.mr.iter().enumerate() {
            artifacts::save_png16(&base.join("mr").join(slice_name(i)), &g.pixels, g.value_range)?;
        }
        for (i, g) in set.ct.iter().enumerate() {
            artifacts::save_png16(&base.join("ct").join(slice_name(i)), &g.pixels, g.value_range)?;
        }
        if let Some(masks) = &set.masks {
            for (i, m) in masks.iter().enumerate() {
                artifacts::save_mask_png(&base.join("mask").join(slice_name(i)), &m.pixels)?;
            }
        }
    }
    let mut text = String::new();
    let range = |r: (f64, f64)| format!("{},{}", r.0, r.1);
    let first = |s: &SliceDataset, ct: bool| {
        let v = if ct { &s.ct } else { &s.mr };
        v.first().map(|g| (g.modality, g.value_range))
    };
    if let Some((m, r)) = first(train, false).or(first(test, false)) {
        text.push_str(&format!("mr_modality = {}\nmr_range = {}\n", m.as_str(), range(r)));
    }
    if let Some((m, r)) = first(train, true).or(first(test, true)) {
        text.push_str(&format!("ct_modality = {}\nct_range = {}\n", m.as_str(), range(r)));
    }
    text.push_str(&format!("n_train = {}\nn_test = {}\n", train.len(), test.len()));
    for (k, v) in meta {
        text.push_str(&format!("{k} = {v}\n"));
    }
    artifacts::write_atomic(&dir.join("meta.txt"), text.as_bytes())
}

/// Parsed `key = value` sidecar.
pub struct Meta(Vec<(String, String)>);

impl Meta {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Ok(Self(
            text.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        ))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn range(&self, key: &str) -> Result<(f64, f64)> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("meta lacks {key}")))?;
        let (a, b) = v
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("{key}: expected lo,hi")))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("{key}: {v:?}")));
        Ok((parse(a)?, parse(b)?))
    }
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a directory written by [`save_dataset`]; slices keep their raw units.
pub fn load_dataset(dir: &Path) -> Result<(SliceDataset, SliceDataset)> {
    let meta = Meta::read(&dir.join("meta.txt"))?;
    let mr_mod: Modality = meta.get("mr_modality").unwrap_or("PHANTOM_MR").parse()?;
    let ct_mod: Modality = meta.get("ct_modality").unwrap_or("PHANTOM_CT").parse()?;
    let mr_range = meta.range("mr_range")?;
    let ct_range = meta.range("ct_range")?;
    let load_split = |split: &str, paired: bool| -> Result<SliceDataset> {
        let base = dir.join(split);
        let load = |sub: &str, m: Modality, r: (f64, f64)| -> Result<Vec<ImageGrid>> {
            sorted_pngs(&base.join(sub))?
                .iter()
                .map(|p| ImageGrid::new(artifacts::load_png16(p, r)?, m, r))
                .collect()
        };
        let masks: Vec<CoarseMask> = sorted_pngs(&base.join("mask"))?
            .iter()
            .map(|p| Ok(CoarseMask::new(artifacts::load_mask_png(p)?, MaskSource::Manual)))
            .collect::<Result<_>>()?;
        Ok(SliceDataset {
            mr: load("mr", mr_mod, mr_range)?,
            ct: load("ct", ct_mod, ct_range)?,
            masks: (!masks.is_empty()).then_some(masks),
            paired,
        })
    };
    Ok((load_split("train", false)?, load_split("test", true)?))
}

/// Slice size used for real volumes.
pub const VOLUME_SLICE_SIZE: (usize, usize) = (224, 224);

/// Loads a volume stored as a directory of 16-bit PNG slices plus `meta.txt`
/// (`modality`, `range = lo,hi`, `orientation = sagittal|axial`). Axial
/// stacks are resliced into sagittal planes. Slices are normalized with the
/// volume-wide range (fixed window for CT) and resized/padded to 224x224.
pub fn load_volume_slices(path: &Path, modality: Modality) -> Result<SliceDataset> {
    let unreadable = |reason: &str| Error::UnreadableVolume {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let files = sorted_pngs(path).map_err(|_| unreadable("not a directory"))?;
    if files.is_empty() {
        return Err(unreadable("no PNG slices"));
    }
    let meta = Meta::read(&path.join("meta.txt")).map_err(|_| unreadable("missing meta.txt"))?;
    let declared: Modality = meta.get("modality").unwrap_or(modality.as_str()).parse()?;
    if declared.is_ct() != modality.is_ct() {
        return Err(Error::UnsupportedModality(format!(
            "volume holds {} but {} was requested",
            declared.as_str(),
            modality.as_str()
        )));
    }
    let range = meta.range("range").map_err(|_| unreadable("meta.txt lacks range"))?;
    let stack: Vec<Array2<f64>> = files
        .iter()
        .map(|p| artifacts::load_png16(p, range))
        .collect::<Result<_>>()?;
    let dims = stack[0].dim();
    if stack.iter().any(|s| s.dim() != dims) {
        return Err(unreadable("slices differ in size"));
    }
    let planes = match meta.get("orientation").unwrap_or("sagittal") {
        "sagittal" => stack,
        // Axial slice z holds (y, x); the sagittal plane at x holds (z, y).
        "axial" => (0..dims.1)
            .map(|x| Array2::from_shape_fn((stack.len(), dims.0), |(z, y)| stack[z][[y, x]]))
            .collect(),
        other => return Err(unreadable(&format!("unknown orientation {other:?}"))),
    };
    let (lo, hi) = if modality.is_ct() {
        (CT_MIN, CT_MAX)
    } else {
        planes.iter().flat_map(|p| p.iter()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        })
    };
    if lo == hi {
        return Err(Error::DegenerateRange(lo));
    }
    let slices = planes
        .into_iter()
        .map(|p| {
            let n = p.mapv(|v| ((v.clamp(lo, hi) - lo) / (hi - lo)) * 2.0 - 1.0);
            grid::resize_pad(&ImageGrid::normalized(n, modality), VOLUME_SLICE_SIZE)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mr, ct) = if modality.is_ct() {
        (Vec::new(), slices)
    } else {
        (slices, Vec::new())
    };
    Ok(SliceDataset {
        mr,
        ct,
        masks: None,
        paired: false,
    })
}
