//! From fuzzy extent/boundary maps to field polygons: refined thresholding,
//! thinning, connected components, polygon tracing, simplification,
//! matching and threshold search.

use std::collections::HashMap;

use geo::{Area, BooleanOps, BoundingRect, Intersects};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::metrics::{binary_counts, hausdorff, msd, Point};
use crate::tensor::DenseTensor;

/// A binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return dim_err(format!("{} values for a {height}x{width} mask", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// `map > t` for a rank-2 map.
    pub fn from_threshold(map: &DenseTensor, t: f64) -> Result<Self> {
        let (h, w) = dims2(map)?;
        Self::new(h, w, map.mask_gt(t))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_or_false(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width && self.get(r as usize, c as usize)
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_fn(&[self.height, self.width], |i| f64::from(u8::from(self.get(i[0], i[1]))))
    }
}

fn dims2(x: &DenseTensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w)),
        ref s => dim_err(format!("expected an H x W map, got {s:?}")),
    }
}

/// Extent and boundary thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub t_b: f64,
    pub t_e: f64,
}

impl ThresholdPair {
    pub fn new(t_b: f64, t_e: f64) -> Result<Self> {
        for (name, t) in [("t_b", t_b), ("t_e", t_e)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Range(format!("{name} = {t} is not inside (0, 1)")));
            }
        }
        Ok(Self { t_b, t_e })
    }
}

impl Default for ThresholdPair {
    fn default() -> Self {
        Self { t_b: 0.2, t_e: 0.4 }
    }
}

/// Guo-Hall thinning to an 8-connected skeleton. Pixels outside the raster
/// count as background.
pub fn thin(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut del = Vec::new();
            for r in 0..m.height {
                for c in 0..m.width {
                    if m.get(r, c) && guo_hall_removable(&m, r as isize, c as isize, pass) {
                        del.push(r * m.width + c);
                    }
                }
            }
            changed |= !del.is_empty();
            for i in del {
                m.data[i] = false;
            }
        }
        if !changed {
            return m;
        }
    }
}

fn guo_hall_removable(m: &Mask, r: isize, c: isize, pass: usize) -> bool {
    let p = |dr: isize, dc: isize| m.get_or_false(r + dr, c + dc);
    let (p2, p3, p4, p5) = (p(-1, 0), p(-1, 1), p(0, 1), p(1, 1));
    let (p6, p7, p8, p9) = (p(1, 0), p(1, -1), p(0, -1), p(-1, -1));
    let b = u8::from;
    let crossings = b(!p2 && (p3 || p4)) + b(!p4 && (p5 || p6)) + b(!p6 && (p7 || p8)) + b(!p8 && (p9 || p2));
    let n1 = b(p9 || p2) + b(p3 || p4) + b(p5 || p6) + b(p7 || p8);
    let n2 = b(p2 || p3) + b(p4 || p5) + b(p6 || p7) + b(p8 || p9);
    let n = n1.min(n2);
    let corner = if pass == 0 { (p6 || p7 || !p9) && p8 } else { (p2 || p3 || !p5) && p4 };
    crossings == 1 && (2..=3).contains(&n) && !corner
}

/// One pass of dilation with the 3x3 cross.
pub fn dilate_cross(mask: &Mask) -> Mask {
    let mut out = mask.clone();
    for r in 0..mask.height as isize {
        for c in 0..mask.width as isize {
            if [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dr, dc)| mask.get_or_false(r + dr, c + dc))
            {
                out.set(r as usize, c as usize, true);
            }
        }
    }
    out
}

/// Boundary mask used by [`refined_threshold`]: threshold, thin, dilate.
pub fn boundary_mask(b: &DenseTensor, t_b: f64) -> Result<Mask> {
    Ok(dilate_cross(&thin(&Mask::from_threshold(b, t_b)?)))
}

/// `(e * (1 - boundary)) > t_e` with the boundary mask thinned and dilated.
pub fn refined_threshold(e: &DenseTensor, b: &DenseTensor, t: ThresholdPair) -> Result<Mask> {
    if e.shape() != b.shape() {
        return dim_err(format!("extent {:?} and boundary {:?} differ", e.shape(), b.shape()));
    }
    let bm = boundary_mask(b, t.t_b)?;
    refine_with(e, &bm, t.t_e)
}

fn refine_with(e: &DenseTensor, boundary: &Mask, t_e: f64) -> Result<Mask> {
    let (h, w) = dims2(e)?;
    let data = e
        .data()
        .iter()
        .zip(&boundary.data)
        .map(|(&v, &bd)| !bd && v > t_e)
        .collect();
    Mask::new(h, w, data)
}

/// 4-connected component labels (0 = background, components numbered from
/// 1 in raster order of their first pixel) and the component count.
pub fn label_components(mask: &Mask) -> (Vec<usize>, usize) {
    let mut labels = vec![0; mask.data.len()];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..mask.data.len() {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / mask.width, i % mask.width);
            let mut visit = |j: usize| {
                if mask.data[j] && labels[j] == 0 {
                    labels[j] = n;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - mask.width);
            }
            if r + 1 < mask.height {
                visit(i + mask.width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < mask.width {
                visit(i + 1);
            }
        }
    }
    (labels, n)
}

/// Grid geometry of a raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub width: usize,
    pub height: usize,
    /// `x = g0 + col g1 + row g2`, `y = g3 + col g4 + row g5`.
    pub geotransform: [f64; 6],
    pub crs: String,
}

impl RasterMeta {
    pub fn new(width: usize, height: usize, geotransform: [f64; 6], crs: impl Into<String>) -> Result<Self> {
        let m = Self {
            width,
            height,
            geotransform,
            crs: crs.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Unit pixels, origin at the top-left corner, rows increasing downward.
    pub fn unit(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            geotransform: [0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            crs: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geotransform;
        if g[1] == 0.0 || g[5] == 0.0 || g.iter().any(|v| !v.is_finite()) || g[1] * g[5] - g[2] * g[4] == 0.0 {
            return Err(Error::Config(format!("degenerate geotransform {g:?}")));
        }
        Ok(())
    }

    /// World coordinates of the pixel corner `(col, row)`.
    pub fn to_world(&self, col: f64, row: f64) -> Point {
        let g = &self.geotransform;
        [g[0] + col * g[1] + row * g[2], g[3] + col * g[4] + row * g[5]]
    }

    /// Area of one pixel in world units.
    pub fn pixel_area(&self) -> f64 {
        let g = &self.geotransform;
        (g[1] * g[5] - g[2] * g[4]).abs()
    }
}

/// A field outline in world coordinates. Rings are closed implicitly (the
/// first vertex is not repeated); the exterior runs counter-clockwise and
/// holes clockwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldPolygon {
    pub exterior: Vec<Point>,
    pub holes: Vec<Vec<Point>>,
    pub area_m2: f64,
    pub component_id: usize,
}

pub type PolygonSet = Vec<FieldPolygon>;

/// Twice the signed area (positive counter-clockwise).
pub fn signed_area2(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum()
}

fn polygon_area(exterior: &[Point], holes: &[Vec<Point>]) -> f64 {
    0.5 * (signed_area2(exterior).abs() - holes.iter().map(|h| signed_area2(h).abs()).sum::<f64>())
}

impl FieldPolygon {
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>, component_id: usize) -> Self {
        let area_m2 = polygon_area(&exterior, &holes);
        Self {
            exterior,
            holes,
            area_m2,
            component_id,
        }
    }

    pub fn rings(&self) -> impl Iterator<Item = &Vec<Point>> {
        std::iter::once(&self.exterior).chain(&self.holes)
    }

    /// Every vertex of every ring.
    pub fn vertices(&self) -> Vec<Point> {
        self.rings().flatten().copied().collect()
    }

    /// Even-odd point containment over all rings.
    pub fn contains(&self, p: Point) -> bool {
        self.rings().filter(|r| ring_crosses(r, p)).count() % 2 == 1
    }

    pub fn to_geo(&self) -> geo::Polygon<f64> {
        let ls = |r: &Vec<Point>| geo::LineString::from(r.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>());
        geo::Polygon::new(ls(&self.exterior), self.holes.iter().map(ls).collect())
    }
}

/// Crossing-number test: does a ray from `p` toward +x cross `ring` an odd
/// number of times?
fn ring_crosses(ring: &[Point], p: Point) -> bool {
    let n = ring.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

type Vertex = (i64, i64);

/// Boundary edge between a foreground pixel and background, oriented so the
/// pixel lies to its right in image coordinates (rows growing downward).
#[derive(Clone, Copy)]
struct Edge {
    from: Vertex,
    to: Vertex,
    pixel: usize,
}

fn boundary_edges(mask: &Mask) -> Vec<Edge> {
    let mut edges = Vec::new();
    for r in 0..mask.height {
        for c in 0..mask.width {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let (x, y) = (c as i64, r as i64);
            let pixel = r * mask.width + c;
            let mut push = |from, to| edges.push(Edge { from, to, pixel });
            if !mask.get_or_false(ri - 1, ci) {
                push((x, y), (x + 1, y));
            }
            if !mask.get_or_false(ri, ci + 1) {
                push((x + 1, y), (x + 1, y + 1));
            }
            if !mask.get_or_false(ri + 1, ci) {
                push((x + 1, y + 1), (x, y + 1));
            }
            if !mask.get_or_false(ri, ci - 1) {
                push((x, y + 1), (x, y));
            }
        }
    }
    edges
}

/// Cross product sign of the turn from `d1` to `d2` in image coordinates;
/// positive is a right (clockwise on screen) turn.
fn turn(d1: Vertex, d2: Vertex) -> i64 {
    d1.0 * d2.1 - d1.1 * d2.0
}

fn dir(e: &Edge) -> Vertex {
    (e.to.0 - e.from.0, e.to.1 - e.from.1)
}

/// A traced ring in pixel-corner coordinates with one adjacent foreground
/// pixel.
struct PixelRing {
    vertices: Vec<Vertex>,
    pixel: usize,
}

/// Links boundary edges into closed loops. Where two loops touch at a
/// corner the walk turns right, keeping diagonal pixels apart, and loops
/// that revisit a vertex are split there so every ring is simple.
fn trace_rings(mask: &Mask) -> Vec<PixelRing> {
    let edges = boundary_edges(mask);
    let mut out_of: HashMap<Vertex, Vec<usize>> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        out_of.entry(e.from).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    let mut rings = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut walk = vec![start];
        used[start] = true;
        let mut cur = start;
        loop {
            let e = &edges[cur];
            let candidates = &out_of[&e.to];
            let next = candidates
                .iter()
                .copied()
                .filter(|&j| !used[j] || j == start)
                .max_by_key(|&j| turn(dir(e), dir(&edges[j])))
                .expect("boundary edges form closed loops");
            if next == start {
                break;
            }
            used[next] = true;
            walk.push(next);
            cur = next;
        }
        split_loops(&edges, &walk, &mut rings);
    }
    rings
}

fn split_loops(edges: &[Edge], walk: &[usize], rings: &mut Vec<PixelRing>) {
    let mut stack: Vec<usize> = Vec::new();
    let mut pos: HashMap<Vertex, usize> = HashMap::new();
    for &ei in walk {
        let v = edges[ei].from;
        if let Some(&p) = pos.get(&v) {
            let loop_edges: Vec<usize> = stack.drain(p..).collect();
            for &le in &loop_edges {
                pos.remove(&edges[le].from);
            }
            rings.push(to_ring(edges, &loop_edges));
        }
        pos.insert(v, stack.len());
        stack.push(ei);
    }
    if !stack.is_empty() {
        rings.push(to_ring(edges, &stack));
    }
}

fn to_ring(edges: &[Edge], ids: &[usize]) -> PixelRing {
    let mut vertices: Vec<Vertex> = ids.iter().map(|&i| edges[i].from).collect();
    remove_collinear(&mut vertices);
    PixelRing {
        vertices,
        pixel: edges[ids[0]].pixel,
    }
}

fn remove_collinear(v: &mut Vec<Vertex>) {
    let n = v.len();
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            let (a, b, c) = (v[(i + n - 1) % n], v[i], v[(i + 1) % n]);
            turn((b.0 - a.0, b.1 - a.1), (c.0 - b.0, c.1 - b.1)) != 0
        })
        .collect();
    let mut k = keep.iter();
    v.retain(|_| *k.next().expect("one flag per vertex"));
}

/// One polygon per 4-connected foreground component, traced along pixel
/// edges. Vertices go through the geotransform.
pub fn components_to_polygons(mask: &Mask, meta: &RasterMeta) -> Result<PolygonSet> {
    meta.validate()?;
    if mask.height != meta.height || mask.width != meta.width {
        return dim_err(format!(
            "mask {}x{} does not match raster {}x{}",
            mask.height, mask.width, meta.height, meta.width
        ));
    }
    let (labels, _) = label_components(mask);
    let mut exteriors: Vec<(usize, Vec<Vertex>)> = Vec::new();
    let mut holes: Vec<(usize, Vec<Vertex>)> = Vec::new();
    for ring in trace_rings(mask) {
        let label = labels[ring.pixel];
        // In image coordinates outer boundaries run clockwise on screen,
        // which is a positive shoelace sum with y pointing down.
        let area2: i64 = (0..ring.vertices.len())
            .map(|i| {
                let (a, b) = (ring.vertices[i], ring.vertices[(i + 1) % ring.vertices.len()]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        if area2 > 0 {
            exteriors.push((label, ring.vertices));
        } else {
            holes.push((label, ring.vertices));
        }
    }
    exteriors.sort_by_key(|(l, v)| (*l, v[0].1, v[0].0));
    let to_world = |v: &[Vertex]| -> Vec<Point> { v.iter().map(|&(x, y)| meta.to_world(x as f64, y as f64)).collect() };
    let mut polys: Vec<FieldPolygon> = exteriors
        .iter()
        .map(|(l, v)| FieldPolygon::new(orient(to_world(v), true), Vec::new(), *l))
        .collect();
    for (label, hv) in holes {
        let hw = orient(to_world(&hv), false);
        // A component normally has a single exterior; otherwise the hole goes
        // to the smallest one.
        let owner = polys
            .iter()
            .enumerate()
            .filter(|(_, p)| p.component_id == label)
            .min_by(|a, b| a.1.area_m2.total_cmp(&b.1.area_m2))
            .map(|(i, _)| i);
        let owner = match owner {
            Some(i) => i,
            None => continue,
        };
        polys[owner].holes.push(hw);
    }
    for p in &mut polys {
        p.holes.sort_by(|a, b| a[0][1].total_cmp(&b[0][1]).then(a[0][0].total_cmp(&b[0][0])));
        p.area_m2 = polygon_area(&p.exterior, &p.holes);
    }
    Ok(polys)
}

fn orient(mut ring: Vec<Point>, ccw: bool) -> Vec<Point> {
    if (signed_area2(&ring) > 0.0) != ccw {
        ring.reverse();
    }
    ring
}

/// Marks every pixel whose centre lies inside some polygon.
pub fn rasterize(polys: &[FieldPolygon], meta: &RasterMeta) -> Mask {
    let mut m = Mask::empty(meta.height, meta.width);
    for p in polys {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in &p.exterior {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        for r in 0..meta.height {
            for c in 0..meta.width {
                let q = meta.to_world(c as f64 + 0.5, r as f64 + 0.5);
                if q[0] < lo[0] || q[0] > hi[0] || q[1] < lo[1] || q[1] > hi[1] {
                    continue;
                }
                if p.contains(q) {
                    m.set(r, c, true);
                }
            }
        }
    }
    m
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

fn douglas_peucker(pts: &[Point], tol: f64, keep: &mut [bool]) {
    if pts.len() < 3 {
        return;
    }
    let (a, b) = (pts[0], pts[pts.len() - 1]);
    let (idx, dmax) = pts[1..pts.len() - 1]
        .iter()
        .enumerate()
        .map(|(i, &p)| (i + 1, seg_dist(p, a, b)))
        .fold((0, -1.0), |m, x| if x.1 > m.1 { x } else { m });
    if dmax >= tol {
        keep[idx] = true;
        douglas_peucker(&pts[..=idx], tol, &mut keep[..=idx]);
        douglas_peucker(&pts[idx..], tol, &mut keep[idx..]);
    }
}

/// Douglas-Peucker on a closed ring, anchored at the first vertex and the
/// vertex farthest from it.
pub fn simplify_ring(ring: &[Point], tol: f64) -> Vec<Point> {
    let n = ring.len();
    if n < 4 {
        return ring.to_vec();
    }
    let far = (1..n)
        .max_by(|&i, &j| {
            let d = |k: usize| (ring[k][0] - ring[0][0]).hypot(ring[k][1] - ring[0][1]);
            d(i).total_cmp(&d(j)).then(j.cmp(&i))
        })
        .expect("ring has vertices");
    let mut closed = ring.to_vec();
    closed.push(ring[0]);
    let mut keep = vec![false; n + 1];
    keep[0] = true;
    keep[far] = true;
    keep[n] = true;
    douglas_peucker(&closed[..=far], tol, &mut keep[..=far]);
    douglas_peucker(&closed[far..], tol, &mut keep[far..]);
    (0..n).filter(|&i| keep[i]).map(|i| ring[i]).collect()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True when segments `ab` and `cd` share any point other than a common
/// endpoint.
fn segments_conflict(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (d1, d2, d3, d4) = (cross(c, d, a), cross(c, d, b), cross(a, b, c), cross(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Point, q: Point, r: Point| {
        cross(p, q, r) == 0.0
            && r[0] >= p[0].min(q[0])
            && r[0] <= p[0].max(q[0])
            && r[1] >= p[1].min(q[1])
            && r[1] <= p[1].max(q[1])
    };
    let shared = |p: Point| p == c || p == d;
    (on(c, d, a) && !shared(a)) || (on(c, d, b) && !shared(b)) || (on(a, b, c) && !(c == a || c == b)) || (on(a, b, d) && !(d == a || d == b))
}

/// No two edges of the polygon's rings cross or overlap. Rings may touch at
/// shared vertices.
pub fn is_valid_polygon(p: &FieldPolygon) -> bool {
    let segs: Vec<(Point, Point)> = p
        .rings()
        .flat_map(|r| (0..r.len()).map(move |i| (r[i], r[(i + 1) % r.len()])))
        .collect();
    if p.rings().any(|r| r.len() < 3) {
        return false;
    }
    for i in 0..segs.len() {
        for j in i + 1..segs.len() {
            if segments_conflict(segs[i].0, segs[i].1, segs[j].0, segs[j].1) {
                return false;
            }
        }
    }
    true
}

/// Simplification attempts before falling back to the input rings.
const SIMPLIFY_RETRIES: usize = 8;

/// Simplifies every ring, then removes polygons smaller than `min_area_m2`.
/// A simplified polygon that becomes invalid is retried with half the
/// tolerance; holes collapsing below three vertices are dropped, and so is
/// a polygon whose exterior collapses.
pub fn simplify_filter(ps: &[FieldPolygon], tolerance_m: f64, min_area_m2: f64) -> Result<PolygonSet> {
    if !(tolerance_m >= 0.0) || !(min_area_m2 >= 0.0) {
        return Err(Error::Config(format!(
            "tolerance {tolerance_m} and minimum area {min_area_m2} must be non-negative"
        )));
    }
    let mut out = Vec::new();
    for p in ps {
        let mut tol = tolerance_m;
        let mut result = None;
        for attempt in 0..=SIMPLIFY_RETRIES {
            if attempt == SIMPLIFY_RETRIES {
                tol = 0.0;
            }
            let ext = simplify_ring(&p.exterior, tol);
            if ext.len() < 3 {
                break;
            }
            let holes = p
                .holes
                .iter()
                .map(|h| simplify_ring(h, tol))
                .filter(|h| h.len() >= 3)
                .collect();
            let cand = FieldPolygon::new(ext, holes, p.component_id);
            if is_valid_polygon(&cand) {
                result = Some(cand);
                break;
            }
            tol *= 0.5;
        }
        if let Some(q) = result {
            if q.area_m2 >= min_area_m2 {
                out.push(q);
            }
        }
    }
    Ok(out)
}

/// Area-overlap intersection over union of two polygons.
pub fn polygon_iou(a: &FieldPolygon, b: &FieldPolygon) -> f64 {
    let (ga, gb) = (a.to_geo(), b.to_geo());
    if !ga.bounding_rect().zip(gb.bounding_rect()).is_some_and(|(ra, rb)| ra.intersects(&rb)) {
        return 0.0;
    }
    let inter = ga.intersection(&gb).unsigned_area();
    let union = ga.unsigned_area() + gb.unsigned_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonMatch {
    pub pred_id: usize,
    pub truth_id: usize,
    pub iou: f64,
    pub hausdorff: f64,
    pub msd: f64,
}

/// Scores every pair by IoU, drops pairs under `iou_min`, then keeps pairs
/// greedily in descending IoU so each polygon is matched at most once.
pub fn match_polygons(pred: &[FieldPolygon], truth: &[FieldPolygon], iou_min: f64) -> Result<Vec<PolygonMatch>> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let iou = polygon_iou(p, t);
            if iou >= iou_min && iou > 0.0 {
                pairs.push((i, j, iou));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let (mut pu, mut tu) = (vec![false; pred.len()], vec![false; truth.len()]);
    let mut out = Vec::new();
    for (i, j, iou) in pairs {
        if pu[i] || tu[j] {
            continue;
        }
        pu[i] = true;
        tu[j] = true;
        let (pv, tv) = (pred[i].vertices(), truth[j].vertices());
        out.push(PolygonMatch {
            pred_id: i,
            truth_id: j,
            iou,
            hausdorff: hausdorff(&pv, &tv)?,
            msd: msd(&pv, &tv)?,
        });
    }
    Ok(out)
}

/// The default search grid: both thresholds over `k / n` for `k` in
/// `1..n`, i.e. steps of `1 / n` strictly inside (0, 1).
pub fn threshold_grid(n: usize) -> Result<Vec<ThresholdPair>> {
    if n < 2 {
        return Err(Error::Config(format!("a grid with {n} divisions has no interior points")));
    }
    let vals: Vec<f64> = (1..n).map(|k| k as f64 / n as f64).collect();
    Ok(vals
        .iter()
        .flat_map(|&b| vals.iter().map(move |&e| ThresholdPair { t_b: b, t_e: e }))
        .collect())
}

/// A grid point and its objectives `(1 - IoU, FDR, FOR, |dN| / max(1, N))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub thresholds: ThresholdPair,
    pub objectives: [f64; 4],
    pub components: usize,
}

impl Candidate {
    pub fn norm(&self) -> f64 {
        self.objectives.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    /// Every candidate, sorted by `(t_b, t_e)`.
    pub candidates: Vec<Candidate>,
    /// The non-dominated candidates, sorted by `(t_b, t_e)`.
    pub pareto: Vec<Candidate>,
    /// Front member closest to the origin; ties go to the smallest
    /// `(t_b, t_e)`.
    pub best: ThresholdPair,
}

/// `a` is at least as good everywhere and strictly better somewhere.
pub fn dominates(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

pub fn pareto_front(cands: &[Candidate]) -> Vec<Candidate> {
    cands
        .iter()
        .filter(|c| !cands.iter().any(|o| dominates(&o.objectives, &c.objectives)))
        .cloned()
        .collect()
}

pub fn evaluate_candidate(
    e: &DenseTensor,
    boundary: &Mask,
    t: ThresholdPair,
    truth: &Mask,
    truth_count: usize,
) -> Result<Candidate> {
    let m = refine_with(e, boundary, t.t_e)?;
    let (tp, fp, fne, tn) = binary_counts(&m.data, &truth.data)?;
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let iou = if tp + fp + fne == 0 { 1.0 } else { ratio(tp, tp + fp + fne) };
    let (_, n) = label_components(&m);
    Ok(Candidate {
        thresholds: t,
        objectives: [
            1.0 - iou,
            ratio(fp, tp + fp),
            ratio(fne, fne + tn),
            n.abs_diff(truth_count) as f64 / truth_count.max(1) as f64,
        ],
        components: n,
    })
}

/// Evaluates every grid point and picks the front member nearest the origin.
pub fn tune_thresholds(
    e: &DenseTensor,
    b: &DenseTensor,
    truth: &Mask,
    truth_count: usize,
    grid: &[ThresholdPair],
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let (h, w) = dims2(e)?;
    if b.shape() != e.shape() || truth.height != h || truth.width != w {
        return dim_err("extent, boundary and truth must share one grid");
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.t_b.total_cmp(&b.t_b).then(a.t_e.total_cmp(&b.t_e)));
    grid.dedup();
    let mut cache: Option<(f64, Mask)> = None;
    let mut candidates = Vec::with_capacity(grid.len());
    for t in grid {
        if cache.as_ref().is_none_or(|(tb, _)| *tb != t.t_b) {
            cache = Some((t.t_b, boundary_mask(b, t.t_b)?));
        }
        let bm = &cache.as_ref().expect("filled above").1;
        candidates.push(evaluate_candidate(e, bm, t, truth, truth_count)?);
    }
    let pareto = pareto_front(&candidates);
    let best = pareto
        .iter()
        .min_by(|a, b| a.norm().total_cmp(&b.norm()))
        .expect("a finite front is never empty")
        .thresholds;
    Ok(TuneResult {
        candidates,
        pareto,
        best,
    })
}
