//! CT volumes: the `HUVOL` on-disk format, z resampling, in-plane resizing
//! and extraction of 3D-context slabs.
//!
//! File layout (bit-exact):
//!
//! ```text
//! HUVOL 1
//! dims <z> <y> <x>
//! spacing <z> <y> <x>
//! <blank line>
//! <z*y*x little-endian i16, z-major, row-major within a slice>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "HUVOL 1";

/// Clinically meaningful HU range; values outside are legal but flagged.
pub const CLINICAL_HU_RANGE: (i16, i16) = (-1024, 3071);

/// Scan direction along z. Only the axial head-to-feet convention is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatientAxis {
    #[default]
    HeadToFeet,
}

/// A dense 2D image of reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Image { height: self.height, width: self.width, data }
    }
}

/// A 3D Hounsfield-unit grid indexed (z, y, x) with physical spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct HuVolume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<i16>,
    pub patient_axis: PatientAxis,
}

impl HuVolume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<i16>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("every dimension must be >= 1, got {dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::NonPositiveSpacing(spacing_mm));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::SizeMismatch { expected: 2 * n, found: 2 * voxels.len() });
        }
        Ok(Self { dims, spacing_mm, voxels, patient_axis: PatientAxis::HeadToFeet })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> i16 {
        let [_, ny, nx] = self.dims;
        self.voxels[(z * ny + y) * nx + x]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn slice_raw(&self, z: usize) -> &[i16] {
        let n = self.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Slice `z` as a real-valued HU image.
    pub fn slice(&self, z: usize) -> Image {
        Image {
            height: self.dims[1],
            width: self.dims[2],
            data: self.slice_raw(z).iter().map(|&v| v as f64).collect(),
        }
    }

    /// Warnings for voxels outside the clinically meaningful HU range.
    pub fn validate(&self) -> Vec<String> {
        let (lo, hi) = CLINICAL_HU_RANGE;
        let outside = self.voxels.iter().filter(|&&v| v < lo || v > hi).count();
        if outside == 0 {
            Vec::new()
        } else {
            vec![format!("{outside} voxels outside clinical HU range [{lo}, {hi}]")]
        }
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<HuVolume> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let (dims, spacing, offset) = parse_header(&bytes)?;
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::NonPositiveSpacing(spacing));
    }
    let expected = dims.iter().product::<usize>() * 2;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(Error::SizeMismatch { expected, found: payload.len() });
    }
    let voxels = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    HuVolume::new(dims, spacing, voxels)
}

fn parse_header(bytes: &[u8]) -> Result<([usize; 3], [f64; 3], usize)> {
    let mut lines = Vec::with_capacity(4);
    let mut start = 0;
    while lines.len() < 4 {
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("truncated header".into()))?
            + start;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
        lines.push(line);
        start = end + 1;
    }
    if lines[0] != MAGIC {
        return Err(Error::MalformedHeader(format!("bad magic {:?}", lines[0])));
    }
    if !lines[3].is_empty() {
        return Err(Error::MalformedHeader("missing blank line after header".into()));
    }
    let dims = parse_triple::<usize>(lines[1], "dims")?;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::MalformedHeader(format!("zero dimension in {dims:?}")));
    }
    let spacing = parse_triple::<f64>(lines[2], "spacing")?;
    Ok((dims, spacing, start))
}

fn parse_triple<T: std::str::FromStr>(line: &str, key: &str) -> Result<[T; 3]> {
    let mut parts = line.split(' ');
    if parts.next() != Some(key) {
        return Err(Error::MalformedHeader(format!("expected `{key}` line, got {line:?}")));
    }
    let vals: Vec<T> = parts
        .map(|p| p.parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedHeader(format!("unparsable `{key}` line {line:?}")))?;
    let arr: [T; 3] = vals
        .try_into()
        .map_err(|_| Error::MalformedHeader(format!("`{key}` needs three values")))?;
    Ok(arr)
}

pub fn save_volume(vol: &HuVolume, path: impl AsRef<Path>) -> Result<()> {
    let [z, y, x] = vol.dims;
    let [sz, sy, sx] = vol.spacing_mm;
    let mut buf = format!("{MAGIC}\ndims {z} {y} {x}\nspacing {sz} {sy} {sx}\n\n").into_bytes();
    buf.reserve(vol.voxels.len() * 2);
    for v in &vol.voxels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Round half away from zero into the i16 range.
fn round_hu(v: f64) -> i16 {
    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Linearly resample along z so that slices are `target_z_mm` apart.
///
/// Output slices sit at `j * target_z_mm` for every such position inside
/// `[0, (nz - 1) * spacing_z]`.
pub fn resample_z(vol: &HuVolume, target_z_mm: f64) -> Result<HuVolume> {
    if !(target_z_mm > 0.0) || !target_z_mm.is_finite() {
        return Err(Error::InvalidArgument(format!("target z spacing must be positive, got {target_z_mm}")));
    }
    let [nz, ny, nx] = vol.dims;
    let sz = vol.spacing_mm[0];
    let extent = (nz - 1) as f64 * sz;
    let n_out = (extent / target_z_mm + 1e-9).floor() as usize + 1;
    let plane = ny * nx;
    let mut out = Vec::with_capacity(n_out * plane);
    for j in 0..n_out {
        let pos = j as f64 * target_z_mm / sz;
        let i0 = (pos.floor() as usize).min(nz.saturating_sub(2));
        let frac = if nz == 1 { 0.0 } else { pos - i0 as f64 };
        let lo = vol.slice_raw(i0);
        if frac == 0.0 {
            out.extend_from_slice(lo);
            continue;
        }
        let hi = vol.slice_raw(i0 + 1);
        out.extend(
            lo.iter()
                .zip(hi)
                .map(|(&a, &b)| round_hu((1.0 - frac) * a as f64 + frac * b as f64)),
        );
    }
    HuVolume::new([n_out, ny, nx], [target_z_mm, vol.spacing_mm[1], vol.spacing_mm[2]], out)
}

/// Result of [`resize_xy`]: the resized image and the factor mapping
/// original pixel coordinates to resized ones.
#[derive(Debug, Clone)]
pub struct Resized {
    pub image: Image,
    pub scale: f64,
}

/// Bilinear resize (corner-aligned) so that the long side equals `target_long_side`.
pub fn resize_xy(image: &Image, target_long_side: usize) -> Result<Resized> {
    if image.is_empty() {
        return Err(Error::Empty("image"));
    }
    if target_long_side == 0 {
        return Err(Error::InvalidArgument("target long side must be >= 1".into()));
    }
    let long = image.height.max(image.width);
    let scale = target_long_side as f64 / long as f64;
    let side = |n: usize| {
        if n == long {
            target_long_side
        } else {
            ((n as f64 * scale).round() as usize).max(1)
        }
    };
    let (oh, ow) = (side(image.height), side(image.width));
    if (oh, ow) == (image.height, image.width) {
        return Ok(Resized { image: image.clone(), scale });
    }
    let map = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        if out_n == 1 || in_n == 1 {
            return (0, 0, 0.0);
        }
        let src = o as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
        let i0 = (src.floor() as usize).min(in_n - 2);
        (i0, i0 + 1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..ow).map(|x| map(x, ow, image.width)).collect();
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = map(y, oh, image.height);
        for &(x0, x1, fx) in &cols {
            let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
            let bot = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(Resized { image: Image { height: oh, width: ow, data }, scale })
}

/// `n_ctx` consecutive slices centred on one source slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<Image>,
    pub center_index: usize,
    pub z_spacing_mm: f64,
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height
    }

    pub fn width(&self) -> usize {
        self.slices[0].width
    }
}

/// Source slice indices used by a slab; out-of-range neighbours clamp to the boundary.
pub fn slab_indices(nz: usize, center_index: usize, n_ctx: usize) -> Vec<usize> {
    let half = (n_ctx / 2) as isize;
    (-half..=half)
        .map(|d| (center_index as isize + d).clamp(0, nz as isize - 1) as usize)
        .collect()
}

pub fn extract_slab(vol: &HuVolume, center_index: usize, n_ctx: usize) -> Result<SliceStack> {
    if n_ctx % 2 == 0 {
        return Err(Error::InvalidArgument(format!("n_ctx must be odd, got {n_ctx}")));
    }
    let nz = vol.dims[0];
    if center_index >= nz {
        return Err(Error::InvalidArgument(format!("center {center_index} outside 0..{nz}")));
    }
    let slices = slab_indices(nz, center_index, n_ctx)
        .into_iter()
        .map(|z| vol.slice(z))
        .collect();
    Ok(SliceStack { slices, center_index, z_spacing_mm: vol.spacing_mm[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: [usize; 3], spacing: [f64; 3]) -> HuVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        let vox = (0..n).map(|_| rng.gen::<i16>()).collect();
        HuVolume::new(dims, spacing, vox).unwrap()
    }

    #[test]
    fn minimal_file_loads() {
        let dir = tempdir();
        let p = dir.join("v.huvol");
        let mut bytes = b"HUVOL 1\ndims 2 2 2\nspacing 2 1 1\n\n".to_vec();
        bytes.extend((0..8i16).flat_map(|v| v.to_le_bytes()));
        fs::write(&p, bytes).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.voxels().len(), 8);
        assert_eq!(v.spacing_mm(), [2.0, 1.0, 1.0]);
        assert_eq!(v.at(1, 1, 1), 7);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempdir();
        assert!(matches!(load_volume(dir.join("nope")), Err(Error::MissingFile(_))));

        let p = dir.join("short.huvol");
        let mut bytes = b"HUVOL 1\ndims 2 2 2\nspacing 2 1 1\n\n".to_vec();
        bytes.extend([0u8; 15]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::SizeMismatch { expected: 16, found: 15 })));

        let p = dir.join("bad.huvol");
        fs::write(&p, b"HUVOL 2\ndims 1 1 1\nspacing 1 1 1\n\n\0\0").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::MalformedHeader(_))));

        let p = dir.join("spacing.huvol");
        fs::write(&p, b"HUVOL 1\ndims 1 1 1\nspacing 0 1 1\n\n\0\0").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonPositiveSpacing(_))));
    }

    #[test]
    fn save_payload_length_and_zero_roundtrip() {
        let dir = tempdir();
        let p = dir.join("z.huvol");
        let v = HuVolume::new([1, 1, 1], [1.0, 1.0, 1.0], vec![0]).unwrap();
        save_volume(&v, &p).unwrap();
        let header_len = b"HUVOL 1\ndims 1 1 1\nspacing 1 1 1\n\n".len();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, header_len + 2);
        assert_eq!(load_volume(&p).unwrap().at(0, 0, 0), 0);

        let v = random_volume(42, [3, 4, 5], [2.5, 0.7, 0.7]);
        let p = dir.join("r.huvol");
        save_volume(&v, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let pos = bytes.windows(2).position(|w| w == b"\n\n").unwrap() + 2;
        assert_eq!(bytes.len() - pos, 2 * 3 * 4 * 5);
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn resample_identity_and_midpoint() {
        let v = random_volume(1, [4, 3, 3], [2.0, 1.0, 1.0]);
        assert_eq!(resample_z(&v, 2.0).unwrap().voxels(), v.voxels());

        let mut vox = vec![0i16; 4];
        vox.extend([100i16; 4]);
        let v = HuVolume::new([2, 2, 2], [4.0, 1.0, 1.0], vox).unwrap();
        let r = resample_z(&v, 2.0).unwrap();
        assert_eq!(r.dims(), [3, 2, 2]);
        assert!(r.slice_raw(1).iter().all(|&x| x == 50));
        assert_eq!(r.spacing_mm()[0], 2.0);
        assert!(resample_z(&v, 0.0).is_err());
    }

    #[test]
    fn resample_matches_scalar_interpolation() {
        let v = random_volume(5, [5, 3, 4], [3.0, 1.0, 1.0]);
        let r = resample_z(&v, 2.0).unwrap();
        // extent 12 mm -> 7 slices at 0, 2, ..., 12
        assert_eq!(r.dims()[0], 7);
        for j in 0..7 {
            let z = j as f64 * 2.0;
            for y in 0..3 {
                for x in 0..4 {
                    let f = z / 3.0;
                    let i = (f.floor() as usize).min(3);
                    let t = f - i as f64;
                    let a = v.at(i, y, x) as f64;
                    let b = v.at(i + 1, y, x) as f64;
                    let want = (a + t * (b - a)).round() as i16;
                    assert_eq!(r.at(j, y, x), want, "j={j} y={y} x={x}");
                }
            }
        }
    }

    #[test]
    fn resize_cases() {
        let img = Image::filled(800, 800, 3.0);
        let r = resize_xy(&img, 800).unwrap();
        assert_eq!(r.scale, 1.0);
        assert_eq!(r.image, img);

        let img = Image::filled(200, 400, 1.0);
        let r = resize_xy(&img, 800).unwrap();
        assert_eq!((r.image.height, r.image.width), (400, 800));
        assert_eq!(r.scale, 2.0);

        let img = Image::filled(37, 91, -12.5);
        let r = resize_xy(&img, 800).unwrap();
        assert_eq!(r.image.width, 800);
        assert_eq!(r.image.height, 325);
        assert!(r.image.data.iter().all(|&v| (v + 12.5).abs() < 1e-9));

        assert!(resize_xy(&Image { height: 0, width: 0, data: vec![] }, 8).is_err());
    }

    #[test]
    fn slab_indices_clamp() {
        let v = random_volume(2, [5, 2, 2], [2.0, 1.0, 1.0]);
        let s = extract_slab(&v, 2, 3).unwrap();
        assert_eq!(s.slices, vec![v.slice(1), v.slice(2), v.slice(3)]);
        assert_eq!(slab_indices(5, 0, 3), vec![0, 0, 1]);
        assert_eq!(slab_indices(20, 10, 9), (6..=14).collect::<Vec<_>>());
        assert!(extract_slab(&v, 2, 4).is_err());
        assert!(extract_slab(&v, 5, 3).is_err());
    }

    fn tempdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!(
            "mvpnet-vol-{}-{}",
            std::process::id(),
            rand::random::<u64>()
        ));
        fs::create_dir_all(&d).unwrap();
        d
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn slab_always_has_n_ctx(nz in 1usize..30, c in 0usize..30, half in 0usize..6) {
                let c = c % nz;
                prop_assert_eq!(slab_indices(nz, c, 2 * half + 1).len(), 2 * half + 1);
            }

            #[test]
            fn resample_stays_within_bracket(seed in 0u64..1000, sz in 0.5f64..6.0, t in 0.5f64..6.0) {
                let v = random_volume(seed, [4, 2, 3], [sz, 1.0, 1.0]);
                let r = resample_z(&v, t).unwrap();
                for j in 0..r.dims()[0] {
                    let pos = j as f64 * t / sz;
                    let i = (pos.floor() as usize).min(2);
                    for k in 0..6 {
                        let a = v.slice_raw(i)[k] as f64;
                        let b = v.slice_raw(i + 1)[k] as f64;
                        let o = r.slice_raw(j)[k] as f64;
                        prop_assert!(o >= a.min(b) - 0.5 && o <= a.max(b) + 0.5);
                    }
                }
            }

            #[test]
            fn resize_constant_is_constant(h in 1usize..40, w in 1usize..40, t in 1usize..64, c in -2000.0f64..2000.0) {
                let r = resize_xy(&Image::filled(h, w, c), t).unwrap();
                prop_assert_eq!(r.image.height.max(r.image.width), t);
                prop_assert!(r.image.data.iter().all(|&v| (v - c).abs() < 1e-9));
            }
        }
    }
}
