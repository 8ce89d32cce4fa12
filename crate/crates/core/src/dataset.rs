//! Turns HU volumes and per-slice labels into model-ready training samples.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::model::{PositionLabel, TrainSample};
use crate::froc::parse_ground_truth;
use crate::phantom::{parse_positions, PhantomVolume};
use crate::volume::{extract_slab, load_volume, resample_z, resize_xy, HuVolume};
use crate::windowing::ViewSet;

/// Which slices of a volume become samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSelection {
    /// Central slices of lesions.
    Key,
    /// Every slice with at least one box.
    Lesion,
    All,
}

impl std::str::FromStr for SliceSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" => Ok(Self::Key),
            "lesion" => Ok(Self::Lesion),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("slice selection must be key, lesion or all, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for SliceSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Key => "key",
            Self::Lesion => "lesion",
            Self::All => "all",
        })
    }
}

/// A labelled slice ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct LabelledSlice<T> {
    pub id: String,
    pub sample: TrainSample<T>,
}

/// One `[1, n_ctx, H, W]` tensor per window, centred on slice `z`.
pub fn render_slab<T: Real>(vol: &HuVolume, z: usize, views: &ViewSet, n_ctx: usize) -> Result<Vec<Tensor<T>>> {
    let slab = extract_slab(vol, z, n_ctx)?;
    let (h, w) = (slab.height(), slab.width());
    Ok(views
        .windows()
        .iter()
        .map(|win| {
            let mut data = Vec::with_capacity(n_ctx * h * w);
            for s in &slab.slices {
                data.extend(s.data.iter().map(|&v| T::c(win.map(v))));
            }
            Tensor::new(vec![1, n_ctx, h, w], data).expect("slab shape")
        })
        .collect())
}

/// Resamples to `z_mm` slices and resizes so the long side is `size`
/// pixels. Returns the new volume, the in-plane scale and a map from each
/// original slice to its nearest resampled slice.
pub fn normalise_volume(vol: &HuVolume, z_mm: f64, size: usize) -> Result<(HuVolume, f64, Vec<usize>)> {
    let [nz, h, w] = vol.dims();
    let sp = vol.spacing_mm();
    let resampled = if (sp[0] - z_mm).abs() < 1e-9 { vol.clone() } else { resample_z(vol, z_mm)? };
    let [rz, _, _] = resampled.dims();
    let zmap = (0..nz).map(|z| (((z as f64 * sp[0]) / z_mm).round() as usize).min(rz - 1)).collect();
    if h.max(w) == size {
        return Ok((resampled, 1.0, zmap));
    }
    let mut voxels = Vec::new();
    let mut dims = [rz, 0, 0];
    let mut scale = 1.0;
    for z in 0..rz {
        let r = resize_xy(&resampled.slice(z), size)?;
        dims[1] = r.image.height;
        dims[2] = r.image.width;
        scale = r.scale;
        voxels.extend(r.image.data.iter().map(|&v| v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16));
    }
    let spacing = [z_mm, sp[1] / scale, sp[2] / scale];
    Ok((HuVolume::new(dims, spacing, voxels)?, scale, zmap))
}

/// A volume with per-slice labels, from the phantom or from a data directory.
#[derive(Debug, Clone)]
pub struct LabelledVolume {
    pub id: String,
    pub volume: HuVolume,
    /// Lesion boxes per slice.
    pub boxes: Vec<Vec<BBox>>,
    pub positions: Vec<PositionLabel>,
    /// Central slices of lesions.
    pub keys: Vec<usize>,
    /// In-plane scale applied since the volume was read from disk.
    pub scale: f64,
}

impl LabelledVolume {
    pub fn slice_id(&self, z: usize) -> String {
        format!("{}_z{:02}", self.id, z)
    }

    pub fn select(&self, which: SliceSelection) -> Vec<usize> {
        match which {
            SliceSelection::Key => self.keys.clone(),
            SliceSelection::Lesion => (0..self.boxes.len()).filter(|&z| !self.boxes[z].is_empty()).collect(),
            SliceSelection::All => (0..self.boxes.len()).collect(),
        }
    }

    /// Resamples and resizes (see [`normalise_volume`]), carrying boxes,
    /// positions and key slices along. Each new slice takes the labels of
    /// the nearest original slice.
    pub fn normalised(&self, z_mm: f64, size: usize) -> Result<Self> {
        let (volume, scale, zmap) = normalise_volume(&self.volume, z_mm, size)?;
        let nz = volume.dims()[0];
        let src_z = self.volume.spacing_mm()[0];
        let nearest = |z: usize| (((z as f64 * z_mm) / src_z).round() as usize).min(self.boxes.len() - 1);
        let boxes = (0..nz).map(|z| self.boxes[nearest(z)].iter().map(|b| b.scaled(scale)).collect()).collect();
        let positions = (0..nz).map(|z| self.positions[nearest(z)]).collect();
        let mut keys: Vec<usize> = self.keys.iter().map(|&z| zmap[z]).collect();
        keys.dedup();
        Ok(Self { id: self.id.clone(), volume, boxes, positions, keys, scale: self.scale * scale })
    }
}

impl From<&PhantomVolume> for LabelledVolume {
    fn from(pv: &PhantomVolume) -> Self {
        Self {
            id: pv.id.clone(),
            volume: pv.volume.clone(),
            boxes: pv.boxes.clone(),
            positions: pv.positions.clone(),
            keys: pv.key_slices(),
            scale: 1.0,
        }
    }
}

/// Renders the selected slices of every volume.
pub fn labelled_samples<T: Real>(
    volumes: &[LabelledVolume],
    which: SliceSelection,
    views: &ViewSet,
    n_ctx: usize,
) -> Result<Vec<LabelledSlice<T>>> {
    let mut out = Vec::new();
    for lv in volumes {
        for z in lv.select(which) {
            out.push(LabelledSlice {
                id: lv.slice_id(z),
                sample: TrainSample {
                    views: render_slab(&lv.volume, z, views, n_ctx)?,
                    boxes: lv.boxes[z].clone(),
                    position: lv.positions[z],
                },
            });
        }
    }
    Ok(out)
}

/// Samples for generated phantom volumes.
pub fn phantom_samples<T: Real>(
    volumes: &[PhantomVolume],
    which: SliceSelection,
    views: &ViewSet,
    n_ctx: usize,
) -> Result<Vec<LabelledSlice<T>>> {
    let lv: Vec<LabelledVolume> = volumes.iter().map(LabelledVolume::from).collect();
    labelled_samples(&lv, which, views, n_ctx)
}

/// Reads a data directory: `*.huvol` volumes, `gt.txt` boxes, and optional
/// `positions.txt` and `keys.txt`. Volumes are ordered by id. Without
/// `keys.txt` every slice with a box is a key slice; without
/// `positions.txt` each slice gets its normalised index and the zone thirds.
pub fn load_directory(dir: &Path) -> Result<Vec<LabelledVolume>> {
    let read = |name: &str| -> Result<Option<String>> {
        match std::fs::read_to_string(dir.join(name)) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    };
    let gt_text = read("gt.txt")?.ok_or_else(|| Error::MissingFile(dir.join("gt.txt")))?;
    let gt = parse_ground_truth(&gt_text)?;
    let positions = read("positions.txt")?.map(|t| parse_positions(&t)).transpose()?;
    let keys = read("keys.txt")?;
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|_| Error::MissingFile(dir.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "huvol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("volumes in data directory"));
    }
    let key_map = match &keys {
        Some(t) => Some(group_ids(t.lines().map(str::trim).filter(|l| !l.is_empty()))?),
        None => None,
    };
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let volume = load_volume(&path)?;
        let nz = volume.dims()[0];
        let slice_id = |z: usize| format!("{id}_z{z:02}");
        let boxes: Vec<Vec<BBox>> = (0..nz).map(|z| gt.get(&slice_id(z)).cloned().unwrap_or_default()).collect();
        let positions = (0..nz)
            .map(|z| match &positions {
                Some(p) => p.get(&slice_id(z)).copied().ok_or_else(|| Error::Parse(format!("no position label for {}", slice_id(z)))),
                None => PositionLabel::from_continuous(if nz > 1 { z as f64 / (nz - 1) as f64 } else { 0.0 }),
            })
            .collect::<Result<_>>()?;
        let keys = match &key_map {
            Some(m) => m.get(&id).cloned().unwrap_or_default().into_iter().filter(|&z| z < nz).collect(),
            None => (0..nz).filter(|&z| !boxes[z].is_empty()).collect(),
        };
        out.push(LabelledVolume { id, volume, boxes, positions, keys, scale: 1.0 });
    }
    Ok(out)
}

/// Splits an image id of the form `<volume>_z<NN>` into volume and slice.
pub fn split_slice_id(id: &str) -> Result<(&str, usize)> {
    let (vol, z) = id.rsplit_once("_z").ok_or_else(|| Error::Parse(format!("image id {id:?} lacks a _z<slice> suffix")))?;
    let z = z.parse().map_err(|_| Error::Parse(format!("image id {id:?} has a bad slice index")))?;
    Ok((vol, z))
}

/// Groups image ids by volume, keeping slice order.
pub fn group_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for id in ids {
        let (v, z) = split_slice_id(id)?;
        out.entry(v.to_string()).or_default().push(z);
    }
    for zs in out.values_mut() {
        zs.sort_unstable();
        zs.dedup();
    }
    Ok(out)
}
