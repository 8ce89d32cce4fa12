//! Synthetic CT volumes with planted lesions whose visibility depends on the
//! display window, plus zone-dependent look-alike blobs.
//!
//! Each volume runs head to feet through three zones (chest, abdomen,
//! pelvis). Lesions are ellipsoids whose HU offset from the surrounding
//! tissue depends on the zone:
//! - chest: dark cavities inside the lung, visible in the lung window;
//! - abdomen: hyperdense spots in soft tissue, visible in the soft window;
//! - pelvis: hypodense spots in soft tissue, visible in the soft window.
//!
//! Abdomen and pelvis also carry mimics with the opposite sign, so a
//! hyperdense spot is a lesion in the abdomen and a distractor in the pelvis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::model::{BodyZone, PositionLabel};
use crate::volume::{save_volume, HuVolume};
use crate::windowing::{default_views, wide_window, WindowSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub n_volumes: usize,
    pub slices: usize,
    pub size: usize,
    pub z_spacing_mm: f64,
    pub pixel_mm: f64,
    /// Chest/abdomen and abdomen/pelvis boundaries on the normalised z axis.
    pub zone_bounds: [f64; 2],
    pub hu_air: f64,
    pub hu_soft: f64,
    pub hu_lung: f64,
    pub hu_liver: f64,
    pub hu_bone: f64,
    pub noise_sd: f64,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub mimics_min: usize,
    pub mimics_max: usize,
    /// In-plane radius range (pixels) at the lesion's central slice.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Ellipsoid semi-axis along z, in slices.
    pub z_semi_axis: f64,
    /// HU offsets of chest, abdomen and pelvis lesions; mimics use the
    /// negated abdomen and pelvis offsets.
    pub lesion_delta: [f64; 3],
    /// Clear band (pixels) of uniform tissue around every blob.
    pub margin: f64,
    pub max_retries: usize,
    /// Required contrast in the lesion's own window.
    pub min_window_contrast: f64,
    /// Allowed contrast in the wide single window.
    pub max_wide_contrast: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_volumes: 80,
            slices: 15,
            size: 64,
            z_spacing_mm: 2.0,
            pixel_mm: 1.0,
            zone_bounds: [1.0 / 3.0, 2.0 / 3.0],
            hu_air: -1000.0,
            hu_soft: 40.0,
            hu_lung: -850.0,
            hu_liver: 100.0,
            hu_bone: 700.0,
            noise_sd: 20.0,
            lesions_min: 2,
            lesions_max: 3,
            mimics_min: 2,
            mimics_max: 4,
            radius_min: 4.0,
            radius_max: 6.0,
            z_semi_axis: 1.5,
            lesion_delta: [-450.0, 150.0, -150.0],
            margin: 3.0,
            max_retries: 1000,
            min_window_contrast: 0.2,
            max_wide_contrast: 0.05,
        }
    }
}

fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn pair(key: &str, v: &str) -> Result<[f64; 2]> {
    let xs: Vec<f64> = v.split(',').map(|s| num(key, s)).collect::<Result<_>>()?;
    xs.try_into().map_err(|_| Error::Config(format!("{key}: expected two values")))
}

fn triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let xs: Vec<f64> = v.split(',').map(|s| num(key, s)).collect::<Result<_>>()?;
    xs.try_into().map_err(|_| Error::Config(format!("{key}: expected three values")))
}

impl PhantomSpec {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("phantom spec line {}: expected key = value", n + 1)))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_volumes" => self.n_volumes = num(key, v)?,
            "slices" => self.slices = num(key, v)?,
            "size" => self.size = num(key, v)?,
            "z_spacing_mm" => self.z_spacing_mm = num(key, v)?,
            "pixel_mm" => self.pixel_mm = num(key, v)?,
            "zone_bounds" => self.zone_bounds = pair(key, v)?,
            "hu_air" => self.hu_air = num(key, v)?,
            "hu_soft" => self.hu_soft = num(key, v)?,
            "hu_lung" => self.hu_lung = num(key, v)?,
            "hu_liver" => self.hu_liver = num(key, v)?,
            "hu_bone" => self.hu_bone = num(key, v)?,
            "noise_sd" => self.noise_sd = num(key, v)?,
            "lesions_min" => self.lesions_min = num(key, v)?,
            "lesions_max" => self.lesions_max = num(key, v)?,
            "mimics_min" => self.mimics_min = num(key, v)?,
            "mimics_max" => self.mimics_max = num(key, v)?,
            "radius_min" => self.radius_min = num(key, v)?,
            "radius_max" => self.radius_max = num(key, v)?,
            "z_semi_axis" => self.z_semi_axis = num(key, v)?,
            "lesion_delta" => self.lesion_delta = triple(key, v)?,
            "margin" => self.margin = num(key, v)?,
            "max_retries" => self.max_retries = num(key, v)?,
            "min_window_contrast" => self.min_window_contrast = num(key, v)?,
            "max_wide_contrast" => self.max_wide_contrast = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown phantom key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let b = self.zone_bounds;
        let d = self.lesion_delta;
        let mut s = String::new();
        let _ = writeln!(s, "n_volumes = {}", self.n_volumes);
        let _ = writeln!(s, "slices = {}", self.slices);
        let _ = writeln!(s, "size = {}", self.size);
        let _ = writeln!(s, "z_spacing_mm = {}", self.z_spacing_mm);
        let _ = writeln!(s, "pixel_mm = {}", self.pixel_mm);
        let _ = writeln!(s, "zone_bounds = {},{}", b[0], b[1]);
        let _ = writeln!(s, "hu_air = {}", self.hu_air);
        let _ = writeln!(s, "hu_soft = {}", self.hu_soft);
        let _ = writeln!(s, "hu_lung = {}", self.hu_lung);
        let _ = writeln!(s, "hu_liver = {}", self.hu_liver);
        let _ = writeln!(s, "hu_bone = {}", self.hu_bone);
        let _ = writeln!(s, "noise_sd = {}", self.noise_sd);
        let _ = writeln!(s, "lesions_min = {}", self.lesions_min);
        let _ = writeln!(s, "lesions_max = {}", self.lesions_max);
        let _ = writeln!(s, "mimics_min = {}", self.mimics_min);
        let _ = writeln!(s, "mimics_max = {}", self.mimics_max);
        let _ = writeln!(s, "radius_min = {}", self.radius_min);
        let _ = writeln!(s, "radius_max = {}", self.radius_max);
        let _ = writeln!(s, "z_semi_axis = {}", self.z_semi_axis);
        let _ = writeln!(s, "lesion_delta = {},{},{}", d[0], d[1], d[2]);
        let _ = writeln!(s, "margin = {}", self.margin);
        let _ = writeln!(s, "max_retries = {}", self.max_retries);
        let _ = writeln!(s, "min_window_contrast = {}", self.min_window_contrast);
        let _ = writeln!(s, "max_wide_contrast = {}", self.max_wide_contrast);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom spec: {m}")));
        if self.slices < 6 || self.size < 32 {
            return bad("need at least 6 slices and 32 pixels");
        }
        let [b0, b1] = self.zone_bounds;
        if !(0.0 < b0 && b0 < b1 && b1 < 1.0) {
            return bad("zone bounds must satisfy 0 < b0 < b1 < 1");
        }
        if self.lesions_min > self.lesions_max || self.mimics_min > self.mimics_max {
            return bad("count ranges must have min <= max");
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max) {
            return bad("radius range must be positive and ordered");
        }
        if !(self.z_semi_axis > 0.0) || !(self.noise_sd >= 0.0) || !(self.margin >= 1.0) {
            return bad("z_semi_axis and noise_sd must be positive, margin at least 1");
        }
        if !(self.z_spacing_mm > 0.0 && self.pixel_mm > 0.0) {
            return bad("spacings must be positive");
        }
        if self.n_volumes == 0 {
            return bad("n_volumes must be positive");
        }
        Ok(())
    }

    /// Normalised position of slice `z`.
    pub fn position(&self, z: usize) -> f64 {
        z as f64 / (self.slices - 1) as f64
    }

    pub fn zone_of_slice(&self, z: usize) -> BodyZone {
        BodyZone::from_continuous(self.position(z), self.zone_bounds)
    }

    /// Window in which lesions of `zone` are meant to stand out.
    pub fn designated_window(zone: BodyZone) -> WindowSpec {
        let views = default_views();
        match zone {
            BodyZone::Chest => views.windows()[1],
            BodyZone::Abdomen | BodyZone::Pelvis => views.windows()[0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Soft,
    Lung,
    Liver,
    Bone,
}

/// Per-volume anatomy jitter, in pixels.
#[derive(Debug, Clone, Copy)]
struct Anatomy {
    cx: f64,
    cy: f64,
    body_a: f64,
    body_b: f64,
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    let (dx, dy) = ((x - cx) / a, (y - cy) / b);
    dx * dx + dy * dy <= 1.0
}

impl Anatomy {
    fn tissue(&self, zone: BodyZone, x: f64, y: f64) -> Tissue {
        let (cx, cy, a, b) = (self.cx, self.cy, self.body_a, self.body_b);
        if !in_ellipse(x, y, cx, cy, a, b) {
            return Tissue::Air;
        }
        let spine = (cx, cy + 0.6 * b, 0.16 * a);
        if in_ellipse(x, y, spine.0, spine.1, spine.2, spine.2) {
            return Tissue::Bone;
        }
        match zone {
            BodyZone::Chest => {
                let (la, lb) = (0.40 * a, 0.66 * b);
                for side in [-1.0, 1.0] {
                    if in_ellipse(x, y, cx + side * 0.45 * a, cy - 0.08 * b, la, lb) {
                        return Tissue::Lung;
                    }
                }
                Tissue::Soft
            }
            BodyZone::Abdomen => {
                if in_ellipse(x, y, cx - 0.3 * a, cy - 0.1 * b, 0.5 * a, 0.6 * b) {
                    Tissue::Liver
                } else {
                    Tissue::Soft
                }
            }
            BodyZone::Pelvis => {
                for side in [-1.0, 1.0] {
                    if in_ellipse(x, y, cx + side * 0.62 * a, cy + 0.1 * b, 0.2 * a, 0.28 * b) {
                        return Tissue::Bone;
                    }
                }
                Tissue::Soft
            }
        }
    }
}

/// A planted ellipsoid, lesion or mimic.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub zone: BodyZone,
    /// Central slice.
    pub z: usize,
    /// In-plane centre, pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub z_semi_axis: f64,
    pub hu_delta: f64,
    /// HU of the surrounding tissue.
    pub background_hu: f64,
}

impl Blob {
    /// In-plane radius at slice `z`, if the ellipsoid reaches it.
    pub fn radius_at(&self, z: usize) -> Option<f64> {
        let t = (z as f64 - self.z as f64) / self.z_semi_axis;
        (t.abs() < 1.0).then(|| self.radius * (1.0 - t * t).sqrt())
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        match self.radius_at(z) {
            Some(r) => {
                let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
                dx * dx + dy * dy <= r * r
            }
            None => false,
        }
    }

    /// Pixels covered at slice `z`, as `(y, x)`.
    pub fn pixels(&self, z: usize, size: usize) -> Vec<(usize, usize)> {
        let Some(r) = self.radius_at(z) else { return Vec::new() };
        let lo = |c: f64| (c - r - 1.0).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + r + 1.0).ceil() as usize).min(size);
        let mut out = Vec::new();
        for y in lo(self.cy)..hi(self.cy) {
            for x in lo(self.cx)..hi(self.cx) {
                if self.contains(z, y, x) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    /// Tight box around the covered pixels at slice `z`.
    pub fn bbox(&self, z: usize, size: usize) -> Option<BBox> {
        let px = self.pixels(z, size);
        let (y0, y1) = (px.iter().map(|p| p.0).min()?, px.iter().map(|p| p.0).max()?);
        let (x0, x1) = (px.iter().map(|p| p.1).min()?, px.iter().map(|p| p.1).max()?);
        BBox::new(x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0).ok()
    }
}

#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub id: String,
    pub volume: HuVolume,
    pub lesions: Vec<Blob>,
    pub mimics: Vec<Blob>,
    /// Lesion boxes per slice.
    pub boxes: Vec<Vec<BBox>>,
    pub positions: Vec<PositionLabel>,
}

impl PhantomVolume {
    pub fn slice_id(&self, z: usize) -> String {
        format!("{}_z{:02}", self.id, z)
    }

    /// Central slices of the lesions, ascending, without repeats.
    pub fn key_slices(&self) -> Vec<usize> {
        let mut zs: Vec<usize> = self.lesions.iter().map(|l| l.z).collect();
        zs.sort_unstable();
        zs.dedup();
        zs
    }
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub volumes: Vec<PhantomVolume>,
}

fn zone_slices(spec: &PhantomSpec, zone: BodyZone) -> Vec<usize> {
    (0..spec.slices).filter(|&z| spec.zone_of_slice(z) == zone).collect()
}

fn tissue_hu(spec: &PhantomSpec, t: Tissue) -> f64 {
    match t {
        Tissue::Air => spec.hu_air,
        Tissue::Soft => spec.hu_soft,
        Tissue::Lung => spec.hu_lung,
        Tissue::Liver => spec.hu_liver,
        Tissue::Bone => spec.hu_bone,
    }
}

fn host_tissues(zone: BodyZone) -> &'static [Tissue] {
    match zone {
        BodyZone::Chest => &[Tissue::Lung],
        BodyZone::Abdomen => &[Tissue::Soft, Tissue::Liver],
        BodyZone::Pelvis => &[Tissue::Soft],
    }
}

/// Places one blob in `zone`, clear of `placed`, on a single host tissue.
fn place(
    spec: &PhantomSpec,
    anatomy: &Anatomy,
    zone: BodyZone,
    hu_delta: f64,
    placed: &[Blob],
    rng: &mut ChaCha8Rng,
) -> Option<Blob> {
    let zs = zone_slices(spec, zone);
    let reach = spec.z_semi_axis.ceil() as usize - 1;
    let centres: Vec<usize> = zs
        .iter()
        .copied()
        .filter(|&z| z >= zs[0] + reach && z + reach <= *zs.last().unwrap())
        .collect();
    if centres.is_empty() {
        return None;
    }
    let n = spec.size as f64;
    for _ in 0..spec.max_retries {
        let z = centres[rng.gen_range(0..centres.len())];
        let radius = rng.gen_range(spec.radius_min..=spec.radius_max);
        let cx = rng.gen_range(0.0..n);
        let cy = rng.gen_range(0.0..n);
        let outer = radius + spec.margin;
        let clear = placed.iter().all(|b| {
            let d = ((b.cx - cx).powi(2) + (b.cy - cy).powi(2)).sqrt();
            d > outer + b.radius + spec.margin || (b.z as i64 - z as i64).unsigned_abs() as f64 >= spec.z_semi_axis * 2.0
        });
        if !clear || cx - outer < 0.0 || cy - outer < 0.0 || cx + outer > n || cy + outer > n {
            continue;
        }
        let host = anatomy.tissue(zone, cx, cy);
        if !host_tissues(zone).contains(&host) {
            continue;
        }
        let steps = (outer * 2.0).ceil() as i64;
        let uniform = (-steps..=steps).all(|iy| {
            (-steps..=steps).all(|ix| {
                let (dx, dy) = (ix as f64 * 0.5, iy as f64 * 0.5);
                dx * dx + dy * dy > outer * outer || anatomy.tissue(zone, cx + dx, cy + dy) == host
            })
        });
        if uniform {
            return Some(Blob {
                zone,
                z,
                cx,
                cy,
                radius,
                z_semi_axis: spec.z_semi_axis,
                hu_delta,
                background_hu: tissue_hu(spec, host),
            });
        }
    }
    None
}

/// Whole-volume redraws before a crowded layout is reported as an error.
const LAYOUT_ATTEMPTS: usize = 20;

/// Draws lesion and mimic counts and places them; `None` if any blob
/// cannot be placed.
fn layout(spec: &PhantomSpec, anatomy: &Anatomy, rng: &mut ChaCha8Rng) -> Option<(Vec<Blob>, Vec<Blob>)> {
    let mut lesions: Vec<Blob> = Vec::new();
    for _ in 0..rng.gen_range(spec.lesions_min..=spec.lesions_max) {
        let zone = BodyZone::ALL[rng.gen_range(0..3)];
        lesions.push(place(spec, anatomy, zone, spec.lesion_delta[zone.index()], &lesions, rng)?);
    }
    let mut mimics: Vec<Blob> = Vec::new();
    for _ in 0..rng.gen_range(spec.mimics_min..=spec.mimics_max) {
        let zone = [BodyZone::Abdomen, BodyZone::Pelvis][rng.gen_range(0..2)];
        let occupied: Vec<Blob> = lesions.iter().chain(&mimics).cloned().collect();
        mimics.push(place(spec, anatomy, zone, -spec.lesion_delta[zone.index()], &occupied, rng)?);
    }
    Some((lesions, mimics))
}

/// Builds volume `index`; its generator is seeded with `seed + index`.
pub fn generate_volume(spec: &PhantomSpec, seed: u64, index: usize) -> Result<PhantomVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    let n = spec.size as f64;
    let anatomy = Anatomy {
        cx: n / 2.0 + rng.gen_range(-1.5..1.5),
        cy: n / 2.0 + rng.gen_range(-1.5..1.5),
        body_a: n * rng.gen_range(0.44..0.47),
        body_b: n * rng.gen_range(0.36..0.40),
    };
    let (lesions, mimics) = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| layout(spec, &anatomy, &mut rng))
        .ok_or(Error::Placement(index))?;

    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let size = spec.size;
    let mut voxels = Vec::with_capacity(spec.slices * size * size);
    for z in 0..spec.slices {
        let zone = spec.zone_of_slice(z);
        for y in 0..size {
            for x in 0..size {
                let t = anatomy.tissue(zone, x as f64 + 0.5, y as f64 + 0.5);
                let mut hu = tissue_hu(spec, t);
                for b in lesions.iter().chain(&mimics) {
                    if b.contains(z, y, x) {
                        hu += b.hu_delta;
                    }
                }
                if spec.noise_sd > 0.0 {
                    hu += noise.sample(&mut rng);
                }
                voxels.push(hu.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
            }
        }
    }
    let volume = HuVolume::new([spec.slices, size, size], [spec.z_spacing_mm, spec.pixel_mm, spec.pixel_mm], voxels)?;
    let boxes = (0..spec.slices).map(|z| lesions.iter().filter_map(|l| l.bbox(z, size)).collect()).collect();
    let positions = (0..spec.slices)
        .map(|z| PositionLabel::new(spec.zone_of_slice(z), spec.position(z)))
        .collect::<Result<_>>()?;
    Ok(PhantomVolume { id: format!("vol{index:03}"), volume, lesions, mimics, boxes, positions })
}

pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<PhantomDataset> {
    spec.validate()?;
    let volumes = (0..spec.n_volumes).map(|i| generate_volume(spec, seed, i)).collect::<Result<_>>()?;
    Ok(PhantomDataset { spec: spec.clone(), seed, volumes })
}

/// Mean windowed value inside the blob minus the mean over its clear band,
/// at the central slice, in absolute value.
pub fn blob_contrast(vol: &HuVolume, blob: &Blob, margin: f64, window: &WindowSpec) -> f64 {
    let [_, h, w] = vol.dims();
    let (mut inside, mut ni, mut ring, mut nr) = (0.0, 0usize, 0.0, 0usize);
    let r_in = blob.radius + 1.0;
    let r_out = blob.radius + margin;
    for y in 0..h {
        for x in 0..w {
            let v = window.map(vol.at(blob.z, y, x) as f64);
            let (dx, dy) = (x as f64 + 0.5 - blob.cx, y as f64 + 0.5 - blob.cy);
            let d = (dx * dx + dy * dy).sqrt();
            if blob.contains(blob.z, y, x) {
                inside += v;
                ni += 1;
            } else if d > r_in && d <= r_out {
                ring += v;
                nr += 1;
            }
        }
    }
    if ni == 0 || nr == 0 {
        return 0.0;
    }
    (inside / ni as f64 - ring / nr as f64).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastReport {
    pub zone: BodyZone,
    pub designated: f64,
    pub wide: f64,
    /// Contrast in each of the default views.
    pub per_view: [f64; 3],
}

impl ContrastReport {
    pub fn passes(&self, spec: &PhantomSpec) -> bool {
        self.designated > spec.min_window_contrast && self.wide < spec.max_wide_contrast
    }
}

pub fn contrast_reports(spec: &PhantomSpec, pv: &PhantomVolume) -> Vec<ContrastReport> {
    let views = default_views();
    let wide = wide_window();
    pv.lesions
        .iter()
        .map(|l| {
            let per_view = [0, 1, 2].map(|i| blob_contrast(&pv.volume, l, spec.margin, &views.windows()[i]));
            ContrastReport {
                zone: l.zone,
                designated: blob_contrast(&pv.volume, l, spec.margin, &PhantomSpec::designated_window(l.zone)),
                wide: blob_contrast(&pv.volume, l, spec.margin, &wide),
                per_view,
            }
        })
        .collect()
}

/// Writes `volNNN.huvol`, `gt.txt` (every slice), `keys.txt` (lesion-centre
/// slices), `positions.txt` and the effective spec.
pub fn write_dataset(ds: &PhantomDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (mut gt, mut keys, mut pos) = (String::new(), String::new(), String::new());
    for pv in &ds.volumes {
        save_volume(&pv.volume, dir.join(format!("{}.huvol", pv.id)))?;
        for (z, boxes) in pv.boxes.iter().enumerate() {
            let id = pv.slice_id(z);
            if boxes.is_empty() {
                let _ = writeln!(gt, "{id}");
            }
            for b in boxes {
                let _ = writeln!(gt, "{id} {} {} {} {}", b.x1, b.y1, b.x2, b.y2);
            }
            let p = pv.positions[z];
            let _ = writeln!(pos, "{id} {} {}", p.zone.index(), p.p);
        }
        for z in pv.key_slices() {
            let _ = writeln!(keys, "{}", pv.slice_id(z));
        }
    }
    std::fs::write(dir.join("gt.txt"), gt)?;
    std::fs::write(dir.join("keys.txt"), keys)?;
    std::fs::write(dir.join("positions.txt"), pos)?;
    std::fs::write(dir.join("phantom.cfg"), format!("# seed = {}\n{}", ds.seed, ds.spec.to_text()))?;
    Ok(())
}

/// Parses `image_id class p` lines.
pub fn parse_positions(text: &str) -> Result<BTreeMap<String, PositionLabel>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.is_empty() || t[0].starts_with('#') {
            continue;
        }
        if t.len() != 3 {
            return Err(Error::Parse(format!("positions line {}: expected `image_id class p`", n + 1)));
        }
        let class: usize = t[1].parse().map_err(|_| Error::Parse(format!("positions line {}: bad class", n + 1)))?;
        let p: f64 = t[2].parse().map_err(|_| Error::Parse(format!("positions line {}: bad position", n + 1)))?;
        out.insert(t[0].to_string(), PositionLabel::from_index(class, p)?);
    }
    Ok(out)
}
