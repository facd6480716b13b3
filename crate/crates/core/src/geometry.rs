//! Text regions, binary masks and the region file format.
//!
//! Every region is stored as a closed polygon in image pixel coordinates, so
//! axis-aligned boxes, quadrilaterals and curved outlines share one
//! rasterization path. A pixel belongs to a region when its center
//! `(x + 0.5, y + 0.5)` lies inside the polygon or on its boundary.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    AxisAligned,
    Quad,
    Curve,
}

/// A simple (non-self-intersecting) polygon outlining one text instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRegion {
    vertices: Vec<Point>,
    kind: RegionKind,
}

impl TextRegion {
    /// Validates the outline and classifies it. Four vertices forming an
    /// axis-aligned rectangle become `AxisAligned`, any other four-vertex
    /// outline is a `Quad`, everything else is a `Curve`.
    pub fn new(vertices: Vec<Point>) -> Result<Self, String> {
        validate_polygon(&vertices)?;
        let kind = if vertices.len() == 4 {
            if is_axis_aligned_rect(&vertices) {
                RegionKind::AxisAligned
            } else {
                RegionKind::Quad
            }
        } else {
            RegionKind::Curve
        };
        Ok(TextRegion { vertices, kind })
    }

    /// Box spanning `[x0, x1] × [y0, y1]`, stored as its four corners in
    /// clockwise order (in image coordinates, y pointing down).
    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, String> {
        Self::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn kind(&self) -> RegionKind {
        self.kind
    }

    /// `(min_x, min_y, max_x, max_y)` of the outline.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
        )
    }

    fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        TextRegion {
            vertices: self.vertices.iter().copied().map(f).collect(),
            kind: self.kind,
        }
    }
}

/// The annotated regions of one image. Indices into the list are stable and
/// are what partial removal selects by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    regions: Vec<TextRegion>,
    width: u32,
    height: u32,
}

impl RegionSet {
    pub fn new(regions: Vec<TextRegion>, width: u32, height: u32) -> Self {
        RegionSet {
            regions,
            width,
            height,
        }
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::new(Vec::new(), width, height)
    }

    /// Builds a set from raw outlines, rejecting the first invalid one by index.
    pub fn from_polygons(polygons: Vec<Vec<Point>>, width: u32, height: u32) -> Result<Self> {
        let regions = polygons
            .into_iter()
            .enumerate()
            .map(|(index, vertices)| {
                TextRegion::new(vertices).map_err(|reason| Error::InvalidRegion { index, reason })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(regions, width, height))
    }

    pub fn regions(&self) -> &[TextRegion] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn push(&mut self, region: TextRegion) {
        self.regions.push(region);
    }

    /// Regions at `indices`, in the order given.
    pub fn select(&self, indices: &[usize]) -> Result<RegionSet> {
        let mut seen = vec![false; self.regions.len()];
        let mut regions = Vec::with_capacity(indices.len());
        for &index in indices {
            if index >= self.regions.len() {
                return Err(Error::IndexOutOfRange {
                    index,
                    len: self.regions.len(),
                });
            }
            if std::mem::replace(&mut seen[index], true) {
                return Err(Error::DuplicateIndex(index));
            }
            regions.push(self.regions[index].clone());
        }
        Ok(RegionSet::new(regions, self.width, self.height))
    }

    /// Maps every vertex `(x, y)` to `(x·scale + left, y·scale + top)` and
    /// relabels the set with `new_size`.
    pub fn transform(&self, scale: f64, pad: (f64, f64), new_size: (u32, u32)) -> RegionSet {
        assert!(scale > 0.0, "scale must be positive, got {scale}");
        let (left, top) = pad;
        RegionSet {
            regions: self
                .regions
                .iter()
                .map(|r| r.map(|p| Point::new(p.x * scale + left, p.y * scale + top)))
                .collect(),
            width: new_size.0,
            height: new_size.1,
        }
    }

    /// Exact inverse of [`RegionSet::transform`] with the same arguments.
    pub fn inverse_transform(
        &self,
        scale: f64,
        pad: (f64, f64),
        original_size: (u32, u32),
    ) -> RegionSet {
        assert!(scale > 0.0, "scale must be positive, got {scale}");
        let (left, top) = pad;
        RegionSet {
            regions: self
                .regions
                .iter()
                .map(|r| r.map(|p| Point::new((p.x - left) / scale, (p.y - top) / scale)))
                .collect(),
            width: original_size.0,
            height: original_size.1,
        }
    }

    /// Union of all regions as a binary mask of the set's image size.
    pub fn rasterize(&self) -> Mask {
        let mut mask = Mask::zeros(self.width, self.height);
        for region in &self.regions {
            fill_polygon(region.vertices(), &mut mask);
        }
        mask
    }
}

/// Binary `height × width` grid, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32) {
        self.data[y as usize * self.width as usize + x as usize] = 1;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(a, b)| a & b != 0)
    }

    /// Black/white rendering, 255 where the mask is set.
    pub fn to_luma(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }
}

/// Scanline fill of one simple polygon into `mask` (pixel-center sampling,
/// boundary inclusive).
fn fill_polygon(vertices: &[Point], mask: &mut Mask) {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let (min_y, max_y) = vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    let row_lo = ((min_y - 0.5).ceil() as i64).max(0);
    let row_hi = ((max_y - 0.5).floor() as i64).min(h - 1);
    let n = vertices.len();
    let mut crossings = Vec::with_capacity(n);

    let fill_span = |mask: &mut Mask, row: i64, x0: f64, x1: f64| {
        let lo = ((x0 - 0.5).ceil() as i64).max(0);
        let hi = ((x1 - 0.5).floor() as i64).min(w - 1);
        for col in lo..=hi {
            mask.set(col as u32, row as u32);
        }
    };

    for row in row_lo..=row_hi {
        let cy = row as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            if (a.y <= cy) != (b.y <= cy) {
                crossings.push(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            fill_span(mask, row, pair[0], pair[1]);
        }

        // Boundary points the half-open crossing rule can miss: horizontal
        // edges lying on the scanline and vertices touching it.
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            if cy < a.y.min(b.y) || cy > a.y.max(b.y) {
                continue;
            }
            if a.y == b.y {
                fill_span(mask, row, a.x.min(b.x), a.x.max(b.x));
            } else {
                let x = if cy == a.y {
                    a.x
                } else if cy == b.y {
                    b.x
                } else {
                    a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y)
                };
                fill_span(mask, row, x, x);
            }
        }
    }
}

fn is_axis_aligned_rect(v: &[Point]) -> bool {
    if v.len() != 4 {
        return false;
    }
    let horizontal = |a: Point, b: Point| a.y == b.y && a.x != b.x;
    let vertical = |a: Point, b: Point| a.x == b.x && a.y != b.y;
    let edges_h = (0..4).map(|i| horizontal(v[i], v[(i + 1) % 4]));
    let edges_v = (0..4).map(|i| vertical(v[i], v[(i + 1) % 4]));
    let pattern: Vec<(bool, bool)> = edges_h.zip(edges_v).collect();
    let alternating_from = |first_horizontal: bool| {
        pattern
            .iter()
            .enumerate()
            .all(|(i, &(h, vv))| if (i % 2 == 0) == first_horizontal { h } else { vv })
    };
    alternating_from(true) || alternating_from(false)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    cross(a, b, p) == 0.0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching counts.
fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(p1, q1, q2) || on_segment(p2, q1, q2) || on_segment(q1, p1, p2) || on_segment(q2, p1, p2)
}

pub(crate) fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (a, b) = (v[i], v[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

fn validate_polygon(v: &[Point]) -> Result<(), String> {
    let n = v.len();
    if n < 3 {
        return Err(format!("polygon needs at least 3 vertices, got {n}"));
    }
    if let Some(p) = v.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(format!("non-finite vertex ({}, {})", p.x, p.y));
    }
    for i in 0..n {
        if v[i] == v[(i + 1) % n] {
            return Err(format!("repeated vertex at position {i}"));
        }
    }
    for i in 0..n {
        let (a1, a2) = (v[i], v[(i + 1) % n]);
        for j in i + 1..n {
            let (b1, b2) = (v[j], v[(j + 1) % n]);
            let adjacent_after = j == i + 1;
            let adjacent_before = (j + 1) % n == i;
            if adjacent_after || adjacent_before {
                // Adjacent edges share exactly one endpoint; anything more is
                // a fold-back along a common line.
                let (shared, other_a, other_b) = if adjacent_after {
                    (a2, a1, b2)
                } else {
                    (a1, a2, b1)
                };
                if cross(shared, other_a, other_b) == 0.0 {
                    let dot = (other_a.x - shared.x) * (other_b.x - shared.x)
                        + (other_a.y - shared.y) * (other_b.y - shared.y);
                    if dot > 0.0 {
                        return Err(format!("edges {i} and {j} overlap"));
                    }
                }
                continue;
            }
            if segments_intersect(a1, a2, b1, b2) {
                return Err(format!("edges {i} and {j} intersect"));
            }
        }
    }
    if signed_area(v) == 0.0 {
        return Err("polygon has zero area".into());
    }
    Ok(())
}

/// Parses the region file format: one region per line as
/// `x1,y1,x2,y2,...,xn,yn`; blank lines and `#` comment lines are ignored.
pub fn parse_regions(text: &str, source: &Path, width: u32, height: u32) -> Result<RegionSet> {
    let mut set = RegionSet::empty(width, height);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: source.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let values = parse_int_list(line).map_err(parse_err)?;
        if values.len() % 2 != 0 {
            return Err(parse_err(format!(
                "expected an even number of coordinates, got {}",
                values.len()
            )));
        }
        let vertices = values
            .chunks_exact(2)
            .map(|c| Point::new(c[0] as f64, c[1] as f64))
            .collect();
        let region = TextRegion::new(vertices)
            .map_err(|reason| parse_err(format!("region {}: {reason}", set.len())))?;
        set.push(region);
    }
    Ok(set)
}

pub(crate) fn parse_int_list(line: &str) -> Result<Vec<i64>, String> {
    line.split(',')
        .map(|field| {
            let field = field.trim();
            field
                .parse::<i64>()
                .map_err(|_| format!("`{field}` is not an integer"))
        })
        .collect()
}

/// Reads a region file from disk.
pub fn read_regions(path: &Path, width: u32, height: u32) -> Result<RegionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_regions(&text, path, width, height)
}

/// Writes one line per region. Vertices are rounded to the nearest integer.
pub fn format_regions(set: &RegionSet) -> String {
    let mut out = String::new();
    for region in set.regions() {
        let mut first = true;
        for p in region.vertices() {
            for v in [p.x, p.y] {
                if !first {
                    out.push(',');
                }
                first = false;
                write!(out, "{}", v.round() as i64).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(coords: &[(f64, f64)]) -> Vec<Point> {
        coords.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    // Independent check: crossing number plus explicit on-segment test.
    fn contains(poly: &[Point], p: Point) -> bool {
        let n = poly.len();
        if (0..n).any(|i| on_segment(p, poly[i], poly[(i + 1) % n])) {
            return true;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (poly[i], poly[j]);
            if (a.y > p.y) != (b.y > p.y) {
                // sign of cross product decides which side of the edge the ray starts on
                let side = (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
                if (side > 0.0) == (b.y > a.y) {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    #[test]
    fn full_cover_and_empty() {
        let full = RegionSet::from_polygons(
            vec![pts(&[(0.0, 0.0), (16.0, 0.0), (16.0, 16.0), (0.0, 16.0)])],
            16,
            16,
        )
        .unwrap();
        assert_eq!(full.rasterize().count(), 256);
        assert_eq!(RegionSet::empty(16, 16).rasterize().count(), 0);
    }

    #[test]
    fn right_triangle_matches_brute_force() {
        let tri = pts(&[(0.0, 0.0), (16.0, 0.0), (0.0, 16.0)]);
        let set = RegionSet::from_polygons(vec![tri.clone()], 16, 16).unwrap();
        let mask = set.rasterize();
        for y in 0..16 {
            for x in 0..16 {
                let c = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(mask.get(x, y), contains(&tri, c), "pixel ({x},{y})");
            }
        }
        // centers on the hypotenuse x + y = 16 count as inside
        assert!(mask.get(7, 7));
        assert_eq!(mask.count(), 136);
    }

    #[test]
    fn boundary_pixel_centers_are_inside() {
        // box edges pass exactly through pixel centers
        let set = RegionSet::from_polygons(
            vec![pts(&[(1.5, 1.5), (3.5, 1.5), (3.5, 3.5), (1.5, 3.5)])],
            6,
            6,
        )
        .unwrap();
        let mask = set.rasterize();
        assert_eq!(mask.count(), 9);
        assert!(mask.get(1, 1) && mask.get(3, 3));
    }

    #[test]
    fn kind_classification() {
        let r = TextRegion::axis_aligned(0.0, 0.0, 4.0, 2.0).unwrap();
        assert_eq!(r.kind(), RegionKind::AxisAligned);
        let q = TextRegion::new(pts(&[(0.0, 0.0), (4.0, 1.0), (4.0, 3.0), (0.0, 2.0)])).unwrap();
        assert_eq!(q.kind(), RegionKind::Quad);
        let c = TextRegion::new(pts(&[(0.0, 0.0), (4.0, 0.0), (5.0, 2.0), (2.0, 4.0), (-1.0, 2.0)]))
            .unwrap();
        assert_eq!(c.kind(), RegionKind::Curve);
    }

    #[test]
    fn rejects_invalid_polygons() {
        assert!(TextRegion::new(pts(&[(0.0, 0.0), (1.0, 1.0)])).is_err());
        // bow tie
        let bowtie = pts(&[(0.0, 0.0), (4.0, 4.0), (4.0, 0.0), (0.0, 4.0)]);
        let err = RegionSet::from_polygons(
            vec![pts(&[(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)]), bowtie],
            8,
            8,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidRegion { index: 1, .. }), "{err}");
        // collinear triangle
        assert!(TextRegion::new(pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)])).is_err());
        assert!(TextRegion::new(pts(&[(0.0, 0.0), (f64::NAN, 0.0), (2.0, 2.0)])).is_err());
        // vertex touching a non-adjacent edge
        let touch = pts(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (2.0, 0.0), (0.0, 4.0)]);
        assert!(TextRegion::new(touch).is_err());
    }

    fn three_boxes() -> RegionSet {
        RegionSet::from_polygons(
            vec![
                pts(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]),
                pts(&[(6.0, 1.0), (10.0, 3.0), (6.0, 5.0)]),
                pts(&[(2.0, 8.0), (12.0, 8.0), (12.0, 11.0), (2.0, 11.0)]),
            ],
            16,
            16,
        )
        .unwrap()
    }

    #[test]
    fn select_semantics() {
        let set = three_boxes();
        assert_eq!(set.select(&[0, 1, 2]).unwrap(), set);
        let none = set.select(&[]).unwrap();
        assert!(none.is_empty());
        assert_eq!(none.image_size(), (16, 16));

        let one = set.select(&[1]).unwrap();
        let alone = RegionSet::new(vec![set.regions()[1].clone()], 16, 16);
        assert_eq!(one.rasterize(), alone.rasterize());

        assert!(matches!(set.select(&[3]), Err(Error::IndexOutOfRange { index: 3, len: 3 })));
        assert!(matches!(set.select(&[0, 2, 0]), Err(Error::DuplicateIndex(0))));
        assert_eq!(set.select(&[2, 0]).unwrap().regions()[0], set.regions()[2]);
    }

    #[test]
    fn union_is_elementwise_max() {
        let set = three_boxes();
        let parts = (0..3)
            .map(|i| set.select(&[i]).unwrap().rasterize())
            .reduce(|a, b| a.union(&b))
            .unwrap();
        assert_eq!(parts, set.rasterize());
    }

    #[test]
    fn transform_vertex_mapping() {
        let set = RegionSet::from_polygons(
            vec![pts(&[(100.0, 50.0), (200.0, 50.0), (200.0, 90.0), (100.0, 90.0)])],
            640,
            480,
        )
        .unwrap();
        let same = set.transform(1.0, (0.0, 0.0), (640, 480));
        assert_eq!(same, set);

        let scaled = set.transform(0.4, (0.0, 32.0), (256, 256));
        let p = scaled.regions()[0].vertices()[0];
        assert!((p.x - 40.0).abs() < 1e-12 && (p.y - 52.0).abs() < 1e-12);
        assert_eq!(scaled.image_size(), (256, 256));

        let back = scaled.inverse_transform(0.4, (0.0, 32.0), (640, 480));
        for (a, b) in back.regions()[0].vertices().iter().zip(set.regions()[0].vertices()) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
        assert_eq!(back.image_size(), (640, 480));
    }

    #[test]
    fn region_file_round_trip_and_errors() {
        let text = "# header\n0,0,4,0,4,4,0,4\n\n 6, 1,10,3,6,5\n";
        let set = parse_regions(text, Path::new("r.txt"), 16, 16).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.regions()[0].kind(), RegionKind::AxisAligned);
        let again = parse_regions(&format_regions(&set), Path::new("r.txt"), 16, 16).unwrap();
        assert_eq!(again, set);

        let err = parse_regions("0,0,4,0,4,4\n1,2,3\n", Path::new("r.txt"), 16, 16).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let err = parse_regions("0,0,x,0,4,4\n", Path::new("r.txt"), 16, 16).unwrap_err();
        assert!(err.to_string().contains("r.txt:1"));
        let err = parse_regions("0,0,4,4,4,0,0,4\n", Path::new("r.txt"), 16, 16).unwrap_err();
        assert!(err.to_string().contains("intersect"), "{err}");
    }
}
