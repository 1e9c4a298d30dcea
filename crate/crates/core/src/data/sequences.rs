//! Frame-sequence directories: `<name>/img/*.png` in lexical order plus a
//! `groundtruth.txt` with one `x1,y1,x2,y2` box per frame (commas, tabs or
//! spaces separate the numbers).
//!
//! ```text
//! 12,30,40,95
//! 13,30,41,95
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{PatchSpec, Region, TEXTURE_LEVELS};
use crate::autograd::Tensor;
use crate::geometry::BBox;
use crate::image::{load, load_mask};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Frames and boxes of one split of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub gt: Vec<BBox>,
    pub split: Split,
}

/// `(train, val)` frame counts: 800 / 100 for long sequences, otherwise
/// proportional 8:1.
pub fn split_lengths(n: usize) -> (usize, usize) {
    if n >= 900 {
        (800, 100)
    } else {
        let train = ((n as f64) * 8.0 / 9.0).round() as usize;
        (train, n - train)
    }
}

pub fn read_groundtruth(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad =
                |what: String| Error::Data(format!("{} line {}: {what}", path.display(), i + 1));
            let v: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
                .collect::<Result<_>>()?;
            let [x1, y1, x2, y2] = <[f64; 4]>::try_from(v.as_slice())
                .map_err(|_| bad(format!("expected 4 numbers, got {}", v.len())))?;
            BBox::from_corners(x1, y1, x2, y2).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

pub fn write_groundtruth(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        let [x1, y1, x2, y2] = b.corners();
        writeln!(text, "{x1},{y1},{x2},{y2}").expect("writing to a string");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Frames and boxes of one sequence directory, validated against each other.
fn read_sequence(dir: &Path) -> Result<(String, Vec<PathBuf>, Vec<BBox>)> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frames = list_pngs(&dir.join("img"))?;
    let gt = read_groundtruth(&dir.join("groundtruth.txt"))?;
    if gt.len() < frames.len() {
        let missing = &frames[gt.len()];
        return Err(Error::Data(format!(
            "{name}: no ground-truth line for frame {}",
            missing.display()
        )));
    }
    if gt.len() > frames.len() {
        return Err(Error::Data(format!(
            "{name}: {} ground-truth lines for {} frames",
            gt.len(),
            frames.len()
        )));
    }
    Ok((name, frames, gt))
}

/// Reads every sequence under `dir` and splits it into train and val records.
pub fn ingest_sequences(dir: &Path) -> Result<Vec<SequenceRecord>> {
    let mut out = Vec::new();
    for seq in list_dirs(dir)? {
        let (name, frames, gt) = read_sequence(&seq)?;
        let (train, val) = split_lengths(frames.len());
        for (split, range) in [(Split::Train, 0..train), (Split::Val, train..train + val)] {
            if !range.is_empty() {
                out.push(SequenceRecord {
                    name: name.clone(),
                    frames: frames[range.clone()].to_vec(),
                    gt: gt[range].to_vec(),
                    split,
                });
            }
        }
    }
    Ok(out)
}

/// An evaluation sequence with its frames loaded and, when the directory
/// reserves one, its patch.
#[derive(Clone, Debug)]
pub struct TestSequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub gt: Vec<BBox>,
    pub patch: Option<PatchSpec>,
}

fn load_patch(dir: &Path, frames: &[Tensor]) -> Result<Option<PatchSpec>> {
    let region_path = dir.join("patch").join("region.json");
    if !region_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&region_path).map_err(|e| Error::io(&region_path, e))?;
    let region: Region = serde_json::from_str(&text)?;
    let (_, h, w) = frames[0].dims3()?;
    let mask_paths = list_pngs(&dir.join("patch").join("mask"))?;
    if mask_paths.len() != frames.len() {
        return Err(Error::Data(format!(
            "{}: {} patch masks for {} frames",
            dir.display(),
            mask_paths.len(),
            frames.len()
        )));
    }
    let masks = mask_paths
        .iter()
        .map(|p| {
            let (m, mw, mh) = load_mask(p)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Shape(format!(
                    "{}: mask is {mw}x{mh}, frames are {w}x{h}",
                    p.display()
                )));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let init_path = dir.join("patch").join("init.png");
    let texture = if init_path.exists() {
        load(&init_path)?
    } else {
        let f = &frames[0];
        Tensor::from_fn(&[3, region.height, region.width], |i| {
            let (c, rest) = (i / region.area(), i % region.area());
            f.at3(
                c,
                region.y + rest / region.width,
                region.x + rest % region.width,
            )
        })
    };
    let texture = texture.map(|v| (v * TEXTURE_LEVELS).round() / TEXTURE_LEVELS);
    let first_clean = masks.first().is_some_and(|m| m.iter().all(|&v| !v));
    Ok(Some(PatchSpec::new(
        region,
        (h, w),
        masks,
        first_clean,
        texture,
    )?))
}

/// Loads every sequence under `dir` in full, tagged as test data.
pub fn load_test_sequences(dir: &Path) -> Result<Vec<TestSequence>> {
    let mut out = Vec::new();
    for seq in list_dirs(dir)? {
        let (name, paths, gt) = read_sequence(&seq)?;
        if paths.len() < 2 {
            return Err(Error::Data(format!(
                "{name}: test sequences need at least two frames"
            )));
        }
        let frames = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
        let patch = load_patch(&seq, &frames)?;
        out.push(TestSequence {
            name,
            frames,
            gt,
            patch,
        });
    }
    Ok(out)
}
