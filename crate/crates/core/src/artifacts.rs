//! Run-directory persistence: atomic writes, the loss trace CSV and PNG slices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, IoContext, Result};
use crate::losses::LossBundle;

pub const PARTIAL_SUFFIX: &str = ".partial";

/// Path with `.partial` appended to the file name.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(PARTIAL_SUFFIX);
    path.with_file_name(name)
}

/// Writes to `<path>.partial` then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = partial_path(path);
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

/// Renames `<dir>.partial` to `dir`, replacing any previous complete directory.
pub fn finish_dir(dir: &Path) -> Result<()> {
    let tmp = partial_path(dir);
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::rename(&tmp, dir).at(dir)
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,adv_g,adv_d,cycle,mask,shape,total";

/// Per-step loss trace; lives at `<run>/losses.csv.partial` until the run completes.
pub struct LossTrace {
    path: PathBuf,
    file: fs::File,
}

impl LossTrace {
    /// Opens the trace for appending, dropping rows after `keep_through_step`
    /// (rows written after the checkpoint being resumed from).
    pub fn open(run_dir: &Path, keep_through_step: u64) -> Result<Self> {
        let done = run_dir.join("losses.csv");
        let path = partial_path(&done);
        if done.exists() && !path.exists() {
            fs::rename(&done, &path).at(&path)?;
        }
        let mut kept = String::from(LOSS_CSV_HEADER);
        kept.push('\n');
        if path.exists() {
            let text = fs::read_to_string(&path).at(&path)?;
            for line in text.lines().skip(1) {
                let step: u64 = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config(format!("malformed loss row {line:?}")))?;
                if step <= keep_through_step {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(&path, kept).at(&path)?;
        let file = fs::OpenOptions::new().append(true).open(&path).at(&path)?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, step: u64, epoch: usize, b: &LossBundle) -> Result<()> {
        writeln!(
            self.file,
            "{step},{epoch},{:e},{:e},{:e},{:e},{:e},{:e}",
            b.adv_g, b.adv_d, b.cycle, b.mask, b.shape, b.total
        )
        .at(&self.path)
    }

    /// Renames the trace to its final name.
    pub fn finish(self) -> Result<PathBuf> {
        let done = self.path.with_file_name("losses.csv");
        drop(self.file);
        fs::rename(&self.path, &done).at(&done)?;
        Ok(done)
    }
}

/// One parsed loss-trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub epoch: usize,
    pub bundle: LossBundle,
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRow>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("malformed loss row {line:?}"));
            if f.len() != 8 {
                return Err(bad());
            }
            let v = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(LossRow {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                bundle: LossBundle {
                    adv_g: v(2)?,
                    adv_d: v(3)?,
                    cycle: v(4)?,
                    mask: v(5)?,
                    shape: v(6)?,
                    total: v(7)?,
                },
            })
        })
        .collect()
}

/// Stores `values` as a 16-bit grayscale PNG, mapping `range` linearly onto `[0, 65535]`.
pub fn save_png16(path: &Path, values: &Array2<f64>, range: (f64, f64)) -> Result<()> {
    let (h, w) = values.dim();
    let (lo, hi) = range;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = values[[y as usize, x as usize]];
        let q = ((v - lo) / (hi - lo) * 65535.0).round().clamp(0.0, 65535.0);
        Luma([q as u16])
    });
    save_buffer(path, |p| buf.save(p))
}

pub fn load_png16(path: &Path, range: (f64, f64)) -> Result<Array2<f64>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let (lo, hi) = range;
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        lo + img.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0 * (hi - lo)
    }))
}

/// Binary mask as 8-bit PNG with values 0/255.
pub fn save_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    save_buffer(path, |p| buf.save(p))
}

pub fn load_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] >= 128
    }))
}

/// 8-bit grayscale rendering of `values` clamped to `range`.
pub fn save_png8(path: &Path, values: &Array2<f64>, range: (f64, f64)) -> Result<()> {
    let (h, w) = values.dim();
    let (lo, hi) = range;
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (values[[y as usize, x as usize]] - lo) / (hi - lo);
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save_buffer(path, |p| buf.save(p))
}

/// Color rendering of a non-negative map through a black-red-yellow-white ramp.
pub fn save_heatmap_png(path: &Path, values: &Array2<f64>, vmax: f64) -> Result<()> {
    let (h, w) = values.dim();
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let t = (values[[y as usize, x as usize]] / vmax).clamp(0.0, 1.0) * 3.0;
            let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([ch(t), ch(t - 1.0), ch(t - 2.0)])
        });
    save_buffer(path, |p| buf.save(p))
}

fn save_buffer(
    path: &Path,
    save: impl FnOnce(&Path) -> image::ImageResult<()>,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    // `image` picks the encoder from the extension, so the temp name keeps `.png`.
    let tmp = path.with_extension("partial.png");
    save(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png16_second_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let v = Array2::from_shape_fn((5, 7), |(i, j)| (i as f64 * 0.37 - j as f64 * 0.11).sin());
        save_png16(&p, &v, (-1.0, 1.0)).unwrap();
        let once = load_png16(&p, (-1.0, 1.0)).unwrap();
        assert!(once.iter().zip(v.iter()).all(|(a, b)| (a - b).abs() <= 1.0 / 65535.0));
        save_png16(&p, &once, (-1.0, 1.0)).unwrap();
        assert_eq!(load_png16(&p, (-1.0, 1.0)).unwrap(), once);
    }

    #[test]
    fn atomic_write_leaves_no_partial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"hello").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "hello");
        assert!(!partial_path(&p).exists());
    }

    #[test]
    fn loss_trace_truncates_on_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let b = LossBundle::default();
        let mut t = LossTrace::open(dir.path(), 0).unwrap();
        for s in 1..=5 {
            t.append(s, 1, &b).unwrap();
        }
        drop(t);
        let mut t = LossTrace::open(dir.path(), 3).unwrap();
        t.append(4, 2, &b).unwrap();
        let done = t.finish().unwrap();
        let rows = read_loss_trace(&done).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(rows[3].epoch, 2);
    }
}
