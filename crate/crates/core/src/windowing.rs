//! Window level/width rendering of HU images into [0, 1] views.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{Image, SliceStack};

/// A display window given as (level, width) in HU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    level: f64,
    width: f64,
}

impl WindowSpec {
    pub fn new(level: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !width.is_finite() || !level.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "window width must be positive and finite, got level {level} width {width}"
            )));
        }
        Ok(Self { level, width })
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Lowest HU that maps above 0.
    pub fn lower(&self) -> f64 {
        self.level - self.width / 2.0
    }

    pub fn upper(&self) -> f64 {
        self.level + self.width / 2.0
    }

    #[inline]
    pub fn map(&self, hu: f64) -> f64 {
        ((hu - self.lower()) / self.width).clamp(0.0, 1.0)
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.width)
    }
}

impl FromStr for WindowSpec {
    type Err = Error;

    /// Parses `level:width`.
    fn from_str(s: &str) -> Result<Self> {
        let (l, w) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("window {s:?} is not level:width")))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number in window {s:?}")));
        WindowSpec::new(parse(l)?, parse(w)?)
    }
}

/// Ordered windows; position i defines pathway/channel group i.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    windows: Vec<WindowSpec>,
}

impl ViewSet {
    pub fn new(windows: Vec<WindowSpec>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Empty("view set"));
        }
        Ok(Self { windows })
    }

    pub fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Parses a comma-separated `level:width` list.
    pub fn parse_list(s: &str) -> Result<Self> {
        let windows = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(windows)
    }
}

impl fmt::Display for ViewSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.windows.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// The three clustered windows: soft tissue, lung, and the bone/brain/mediastinum union.
pub fn default_views() -> ViewSet {
    ViewSet {
        windows: vec![
            WindowSpec { level: 50.0, width: 449.0 },
            WindowSpec { level: -505.0, width: 1980.0 },
            WindowSpec { level: 446.0, width: 1960.0 },
        ],
    }
}

/// The single full-range window used by the single-view baseline (HU -1024..3072).
pub fn wide_window() -> WindowSpec {
    WindowSpec { level: 1024.0, width: 4096.0 }
}

pub fn single_view() -> ViewSet {
    ViewSet { windows: vec![wide_window()] }
}

/// An image with every pixel in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub pixels: Image,
}

pub fn apply_window(img: &Image, w: &WindowSpec) -> RenderedView {
    let data = img.data.iter().map(|&p| w.map(p)).collect();
    RenderedView { pixels: Image { height: img.height, width: img.width, data } }
}

/// One rendered slab per window; each slab keeps the source slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewInput {
    pub views: Vec<Vec<RenderedView>>,
}

impl MultiViewInput {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_ctx(&self) -> usize {
        self.views.first().map_or(0, Vec::len)
    }
}

pub fn render_views(slab: &SliceStack, views: &ViewSet) -> MultiViewInput {
    let views = views
        .windows()
        .iter()
        .map(|w| slab.slices.iter().map(|s| apply_window(s, w)).collect())
        .collect();
    MultiViewInput { views }
}

pub const FLOAT_IMAGE_MAGIC: &str = "FLOATIMG 1";

/// Planes of equal size as a float image: `FLOATIMG 1`, `dims c y x`, a
/// blank line, then little-endian f32 values, plane-major.
pub fn encode_float_image(planes: &[Image]) -> Result<Vec<u8>> {
    let first = planes.first().ok_or(Error::Empty("float image planes"))?;
    if planes.iter().any(|p| (p.height, p.width) != (first.height, first.width)) {
        return Err(Error::ShapeMismatch("float image planes differ in size".into()));
    }
    let mut out = format!("{FLOAT_IMAGE_MAGIC}\ndims {} {} {}\n\n", planes.len(), first.height, first.width).into_bytes();
    for p in planes {
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_float_image(bytes: &[u8]) -> Result<Vec<Image>> {
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::MalformedHeader("float image header has no terminating blank line".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::MalformedHeader("non-UTF-8 header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(FLOAT_IMAGE_MAGIC) {
        return Err(Error::MalformedHeader(format!("expected {FLOAT_IMAGE_MAGIC:?}")));
    }
    let dims: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("dims "))
        .map(|l| l.split_whitespace().filter_map(|t| t.parse().ok()).collect())
        .unwrap_or_default();
    let [c, h, w]: [usize; 3] = dims.try_into().map_err(|_| Error::MalformedHeader("expected `dims c y x`".into()))?;
    let payload = &bytes[header_end + 2..];
    let expected = c * h * w * 4;
    if payload.len() != expected {
        return Err(Error::SizeMismatch { expected, found: payload.len() });
    }
    let values: Vec<f64> = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    values.chunks(h * w).map(|d| Image::new(h, w, d.to_vec())).collect()
}
