//! Discrete geometric substrate: the lattices Z^d, regular trees and a
//! one-dimensional quadrature strip.
//!
//! Each model represents an infinite homogeneous space through a finite
//! window of sites. Operations that need room around a set (penumbrae,
//! balls, propagation margins) check that room exists and fail with
//! [`Error::WindowEscape`] instead of truncating silently.
//!
//! Lattices carry the sup-norm metric, so balls and penumbrae of boxes are
//! boxes. The tree carries its graph metric; the strip carries `|x - y|` on
//! the mesh points `x_j = j h`.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};
use crate::fit::vanishing_trend;
use crate::quadrature;

const MODULE: &str = "space";
const SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    Lattice,
    RegularTree,
    Strip,
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceKind::Lattice => "lattice",
            SpaceKind::RegularTree => "tree",
            SpaceKind::Strip => "strip",
        })
    }
}

/// Parameters of a space model; also the `[space]` config section.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceSpec {
    pub kind: SpaceKind,
    /// Lattice dimension (1 for the strip, unused for trees).
    pub dim: usize,
    /// Lattice half-width in sites, or tree depth. For the strip it is
    /// derived from `length` and `mesh`.
    pub window: usize,
    /// Strip total length (length units).
    pub length: f64,
    /// Strip mesh width; 1 for lattices and trees.
    pub mesh: f64,
    /// Tree branching (vertex degree).
    pub degree: usize,
    /// Rank of the bundle carried by the space.
    pub fiber: usize,
}

impl SpaceSpec {
    pub fn lattice(dim: usize, window: usize) -> Self {
        SpaceSpec { kind: SpaceKind::Lattice, dim, window, length: 0.0, mesh: 1.0, degree: 0, fiber: 1 }
    }

    pub fn tree(degree: usize, depth: usize) -> Self {
        SpaceSpec { kind: SpaceKind::RegularTree, dim: 0, window: depth, length: 0.0, mesh: 1.0, degree, fiber: 1 }
    }

    pub fn strip(length: f64, mesh: f64) -> Self {
        let window = if mesh > 0.0 { (0.5 * length / mesh).round() as usize } else { 0 };
        SpaceSpec { kind: SpaceKind::Strip, dim: 1, window, length, mesh, degree: 0, fiber: 1 }
    }

    pub fn with_fiber(mut self, fiber: usize) -> Self {
        self.fiber = fiber;
        self
    }

    /// Plain-text config section, e.g. `[space] kind=lattice d=2 window=256 fiber=1`.
    pub fn to_config(&self) -> String {
        match self.kind {
            SpaceKind::Lattice => format!(
                "[space] kind=lattice d={} window={} fiber={}",
                self.dim, self.window, self.fiber
            ),
            SpaceKind::RegularTree => format!(
                "[space] kind=tree degree={} depth={} fiber={}",
                self.degree, self.window, self.fiber
            ),
            SpaceKind::Strip => format!(
                "[space] kind=strip length={} mesh={} fiber={}",
                self.length, self.mesh, self.fiber
            ),
        }
    }

    /// Parses key/value pairs of a `[space]` section. Unknown keys are an
    /// error; missing keys take the defaults shown by [`SpaceSpec::to_config`].
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| *k == key).map(|(_, v)| *v);
        for (k, _) in &pairs {
            if !["kind", "d", "dim", "window", "fiber", "degree", "depth", "length", "mesh"].contains(k) {
                return Err(Error::invalid(MODULE, format!("unknown key `{k}` in [space]")));
            }
        }
        let num = |key: &str, default: f64| -> Result<f64> {
            match get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(MODULE, format!("`{key}` must be numeric, got `{v}`"))),
            }
        };
        let int = |key: &str, default: usize| -> Result<usize> {
            match get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(MODULE, format!("`{key}` must be a non-negative integer, got `{v}`"))),
            }
        };
        let fiber = int("fiber", 1)?;
        let spec = match get("kind").unwrap_or("lattice") {
            "lattice" => {
                let dim = match get("d") {
                    Some(_) => int("d", 1)?,
                    None => int("dim", 1)?,
                };
                SpaceSpec::lattice(dim, int("window", 64)?)
            }
            "tree" | "regular-tree" => SpaceSpec::tree(int("degree", 3)?, int("depth", int("window", 8)?)?),
            "strip" => SpaceSpec::strip(num("length", 20.0)?, num("mesh", 0.1)?),
            other => return Err(Error::invalid(MODULE, format!("unknown space kind `{other}`"))),
        };
        Ok(spec.with_fiber(fiber))
    }
}

/// Sorted set of site indices of a [`SpaceModel`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SiteSet(Vec<usize>);

impl SiteSet {
    pub fn new(mut sites: Vec<usize>) -> Self {
        sites.sort_unstable();
        sites.dedup();
        SiteSet(sites)
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        SiteSet(mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect())
    }

    pub fn to_mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &s in &self.0 {
            m[s] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, site: usize) -> bool {
        self.0.binary_search(&site).is_ok()
    }

    pub fn is_subset(&self, other: &SiteSet) -> bool {
        let mut j = 0;
        for &s in &self.0 {
            while j < other.0.len() && other.0[j] < s {
                j += 1;
            }
            if j == other.0.len() || other.0[j] != s {
                return false;
            }
        }
        true
    }

    pub fn union(&self, other: &SiteSet) -> SiteSet {
        let mut v = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() || j < other.0.len() {
            let take_left = j == other.0.len() || (i < self.0.len() && self.0[i] <= other.0[j]);
            if take_left {
                if j < other.0.len() && other.0[j] == self.0[i] {
                    j += 1;
                }
                v.push(self.0[i]);
                i += 1;
            } else {
                v.push(other.0[j]);
                j += 1;
            }
        }
        SiteSet(v)
    }

    pub fn difference(&self, other: &SiteSet) -> SiteSet {
        SiteSet(self.0.iter().copied().filter(|s| !other.contains(*s)).collect())
    }

    pub fn intersection(&self, other: &SiteSet) -> SiteSet {
        SiteSet(self.0.iter().copied().filter(|s| other.contains(*s)).collect())
    }

    pub fn is_disjoint(&self, other: &SiteSet) -> bool {
        self.0.iter().all(|s| !other.contains(*s))
    }
}

impl FromIterator<usize> for SiteSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        SiteSet::new(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug)]
struct TreeLayout {
    degree: usize,
    depth: usize,
    parent: Vec<u32>,
    level: Vec<u32>,
    first_child: Vec<u32>,
    child_count: Vec<u32>,
}

impl TreeLayout {
    fn build(degree: usize, depth: usize) -> Self {
        let mut parent = vec![u32::MAX];
        let mut level = vec![0u32];
        let mut first_child = Vec::new();
        let mut child_count = Vec::new();
        let mut frontier = vec![0usize];
        for d in 0..depth {
            let mut next = Vec::new();
            for &node in &frontier {
                let k = if d == 0 { degree } else { degree - 1 };
                first_child.push(0);
                child_count.push(0);
                debug_assert_eq!(first_child.len(), node + 1);
                first_child[node] = parent.len() as u32;
                child_count[node] = k as u32;
                for _ in 0..k {
                    next.push(parent.len());
                    parent.push(node as u32);
                    level.push(d as u32 + 1);
                }
            }
            frontier = next;
        }
        first_child.resize(parent.len(), 0);
        child_count.resize(parent.len(), 0);
        TreeLayout { degree, depth, parent, level, first_child, child_count }
    }

    fn distance(&self, mut a: usize, mut b: usize) -> usize {
        let mut d = 0;
        while self.level[a] > self.level[b] {
            a = self.parent[a] as usize;
            d += 1;
        }
        while self.level[b] > self.level[a] {
            b = self.parent[b] as usize;
            d += 1;
        }
        while a != b {
            a = self.parent[a] as usize;
            b = self.parent[b] as usize;
            d += 2;
        }
        d
    }

    fn neighbors(&self, s: usize, out: &mut Vec<usize>) {
        out.clear();
        if self.parent[s] != u32::MAX {
            out.push(self.parent[s] as usize);
        }
        let f = self.first_child[s] as usize;
        out.extend(f..f + self.child_count[s] as usize);
    }
}

#[derive(Clone, Debug)]
enum Geometry {
    /// Lattice or strip: sites are integer vectors in `[-half, half]^dim`,
    /// enumerated lexicographically, spaced by `step`.
    Grid { dim: usize, half: i64, side: usize },
    Tree(TreeLayout),
}

/// A metric measure space surrogate: finite window of a homogeneous space.
/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct SpaceModel {
    spec: SpaceSpec,
    n_sites: usize,
    geometry: Geometry,
}

/// Builds a [`SpaceModel`] from its parameters.
pub fn build_space(spec: &SpaceSpec) -> Result<SpaceModel> {
    SpaceModel::new(spec.clone())
}

impl SpaceModel {
    pub fn new(spec: SpaceSpec) -> Result<Self> {
        if spec.fiber == 0 {
            return Err(Error::invalid(MODULE, "fiber dimension must be positive"));
        }
        let geometry = match spec.kind {
            SpaceKind::Lattice => {
                if spec.dim == 0 || spec.dim > 4 {
                    return Err(Error::invalid(MODULE, format!("lattice dimension {} unsupported (1..=4)", spec.dim)));
                }
                if spec.window < 8 {
                    return Err(Error::invalid(MODULE, format!("window {} too small (need >= 8)", spec.window)));
                }
                Geometry::Grid { dim: spec.dim, half: spec.window as i64, side: 2 * spec.window + 1 }
            }
            SpaceKind::Strip => {
                if !(spec.mesh > 0.0) || !spec.mesh.is_finite() {
                    return Err(Error::invalid(MODULE, format!("mesh must be positive, got {}", spec.mesh)));
                }
                let cells = 0.5 * spec.length / spec.mesh;
                if (cells - cells.round()).abs() > 1e-6 * cells.max(1.0) {
                    return Err(Error::invalid(
                        MODULE,
                        format!("mesh {} does not divide the half-length {}", spec.mesh, 0.5 * spec.length),
                    ));
                }
                let half = cells.round() as usize;
                if half < 8 {
                    return Err(Error::invalid(MODULE, format!("strip window of {half} cells too small (need >= 8)")));
                }
                Geometry::Grid { dim: 1, half: half as i64, side: 2 * half + 1 }
            }
            SpaceKind::RegularTree => {
                if spec.degree < 3 {
                    return Err(Error::invalid(MODULE, format!("tree degree {} < 3", spec.degree)));
                }
                if spec.window < 2 {
                    return Err(Error::invalid(MODULE, "tree depth must be at least 2"));
                }
                let count = 1.0 + spec.degree as f64 * ((spec.degree as f64 - 1.0).powi(spec.window as i32) - 1.0)
                    / (spec.degree as f64 - 2.0);
                if count > 2.0e7 {
                    return Err(Error::invalid(MODULE, format!("tree with {count} sites is too large")));
                }
                Geometry::Tree(TreeLayout::build(spec.degree, spec.window))
            }
        };
        let mut spec = spec;
        let n_sites = match &geometry {
            Geometry::Grid { dim, side, half } => {
                if spec.kind == SpaceKind::Strip {
                    spec.window = *half as usize;
                }
                side.pow(*dim as u32)
            }
            Geometry::Tree(t) => t.parent.len(),
        };
        Ok(SpaceModel { spec, n_sites, geometry })
    }

    pub fn spec(&self) -> &SpaceSpec {
        &self.spec
    }

    pub fn kind(&self) -> SpaceKind {
        self.spec.kind
    }

    pub fn len(&self) -> usize {
        self.n_sites
    }

    pub fn is_empty(&self) -> bool {
        self.n_sites == 0
    }

    /// Half-width of the window in sites (tree: depth).
    pub fn window(&self) -> usize {
        self.spec.window
    }

    pub fn fiber(&self) -> usize {
        self.spec.fiber
    }

    /// Distance between adjacent sites: the mesh on the strip, 1 otherwise.
    pub fn step(&self) -> f64 {
        self.spec.mesh
    }

    /// Lattice dimension (1 for the strip, 0 for trees).
    pub fn dim(&self) -> usize {
        match &self.geometry {
            Geometry::Grid { dim, .. } => *dim,
            Geometry::Tree(_) => 0,
        }
    }

    /// True for the translation-invariant grid models (lattice, strip).
    pub fn is_grid(&self) -> bool {
        matches!(self.geometry, Geometry::Grid { .. })
    }

    /// Volume carried by each site: 1 on lattices and trees, `h` on the strip.
    pub fn volume_weight(&self) -> f64 {
        self.spec.mesh
    }

    pub fn volume_weight_at(&self, _site: usize) -> f64 {
        self.volume_weight()
    }

    pub fn volume(&self, set: &SiteSet) -> f64 {
        set.len() as f64 * self.volume_weight()
    }

    /// The distinguished center: the origin of a grid, the root of a tree.
    pub fn center(&self) -> usize {
        match &self.geometry {
            Geometry::Grid { .. } => (self.n_sites - 1) / 2,
            Geometry::Tree(_) => 0,
        }
    }

    /// Integer grid coordinates of a site (tree: `[level]`).
    pub fn coords(&self, site: usize) -> Vec<i64> {
        match &self.geometry {
            Geometry::Grid { dim, half, side } => {
                let mut c = vec![0i64; *dim];
                let mut r = site;
                for a in (0..*dim).rev() {
                    c[a] = (r % side) as i64 - half;
                    r /= side;
                }
                c
            }
            Geometry::Tree(t) => vec![t.level[site] as i64],
        }
    }

    pub fn index_of(&self, coords: &[i64]) -> Option<usize> {
        match &self.geometry {
            Geometry::Grid { dim, half, side } => {
                if coords.len() != *dim {
                    return None;
                }
                let mut idx = 0usize;
                for &c in coords {
                    if c.abs() > *half {
                        return None;
                    }
                    idx = idx * side + (c + half) as usize;
                }
                Some(idx)
            }
            Geometry::Tree(_) => None,
        }
    }

    /// Physical position of a strip site (`j h`); first coordinate otherwise.
    pub fn position(&self, site: usize) -> f64 {
        self.coords(site)[0] as f64 * self.step()
    }

    /// Stride of each grid axis in the site enumeration.
    pub(crate) fn grid_strides(&self) -> Option<(usize, i64, usize)> {
        match &self.geometry {
            Geometry::Grid { dim, half, side } => Some((*dim, *half, *side)),
            Geometry::Tree(_) => None,
        }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        match &self.geometry {
            Geometry::Grid { .. } => {
                let (ca, cb) = (self.coords(a), self.coords(b));
                let steps = ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).max().unwrap_or(0);
                steps as f64 * self.step()
            }
            Geometry::Tree(t) => t.distance(a, b) as f64,
        }
    }

    /// Distance from a site to the complement of the window in the infinite
    /// space.
    pub fn boundary_distance(&self, site: usize) -> f64 {
        match &self.geometry {
            Geometry::Grid { half, .. } => {
                let m = self.coords(site).iter().map(|c| c.abs()).max().unwrap_or(0);
                (half - m + 1) as f64 * self.step()
            }
            Geometry::Tree(t) => (t.depth as u32 - t.level[site] + 1) as f64,
        }
    }

    /// Neighbours at unit step (grid: sup-norm neighbours; tree: edges).
    fn step_neighbors(&self, site: usize, out: &mut Vec<usize>) {
        match &self.geometry {
            Geometry::Grid { dim, .. } => {
                out.clear();
                let c = self.coords(site);
                let mut offset = vec![-1i64; *dim];
                loop {
                    if offset.iter().any(|&o| o != 0) {
                        let n: Vec<i64> = c.iter().zip(&offset).map(|(a, b)| a + b).collect();
                        if let Some(i) = self.index_of(&n) {
                            out.push(i);
                        }
                    }
                    let mut a = 0;
                    while a < *dim {
                        offset[a] += 1;
                        if offset[a] <= 1 {
                            break;
                        }
                        offset[a] = -1;
                        a += 1;
                    }
                    if a == *dim {
                        break;
                    }
                }
            }
            Geometry::Tree(t) => t.neighbors(site, out),
        }
    }

    /// Graph neighbours used to build nearest-neighbour operators (grid:
    /// axis neighbours; tree: edges).
    pub fn adjacent(&self, site: usize) -> Vec<usize> {
        match &self.geometry {
            Geometry::Grid { dim, .. } => {
                let c = self.coords(site);
                let mut out = Vec::with_capacity(2 * dim);
                for a in 0..*dim {
                    for s in [-1i64, 1] {
                        let mut n = c.clone();
                        n[a] += s;
                        if let Some(i) = self.index_of(&n) {
                            out.push(i);
                        }
                    }
                }
                out
            }
            Geometry::Tree(t) => {
                let mut out = Vec::new();
                t.neighbors(site, &mut out);
                out
            }
        }
    }

    /// Number of neighbours every vertex has in the infinite space.
    pub fn infinite_degree(&self) -> usize {
        match &self.geometry {
            Geometry::Grid { dim, .. } => 2 * dim,
            Geometry::Tree(t) => t.degree,
        }
    }

    fn radius_steps(&self, r: f64) -> usize {
        if r <= 0.0 {
            0
        } else {
            (r / self.step() + SNAP).floor() as usize
        }
    }

    /// Closed ball `B(x, r)`; errors if it leaves the window.
    pub fn ball(&self, center: usize, r: f64) -> Result<SiteSet> {
        self.pen_plus(&SiteSet::new(vec![center]), r)
    }

    /// `Pen+(K, r) = {x : d(x, K) <= r}`.
    pub fn pen_plus(&self, set: &SiteSet, r: f64) -> Result<SiteSet> {
        if set.is_empty() {
            return Err(Error::invalid(MODULE, "penumbra of an empty set"));
        }
        if r < 0.0 {
            return Err(Error::invalid(MODULE, format!("pen_plus radius {r} < 0")));
        }
        let steps = self.radius_steps(r);
        let min_room = set.iter().map(|s| self.boundary_distance(s)).fold(f64::INFINITY, f64::min);
        let room_steps = (min_room / self.step()).round() as usize;
        if steps >= room_steps {
            return Err(Error::escape(
                MODULE,
                format!("Pen+(K, {r}) leaves the window (K comes within {min_room} of the boundary)"),
            ));
        }
        match &self.geometry {
            Geometry::Grid { .. } => Ok(SiteSet::from_mask(&self.grid_dilate(&set.to_mask(self.n_sites), steps))),
            Geometry::Tree(_) => {
                let dist = self.bfs_distances(set.iter().map(|s| (s, 0)), steps);
                Ok(SiteSet::from_mask(&dist.iter().map(|&d| d <= steps).collect::<Vec<_>>()))
            }
        }
    }

    /// `Pen-(K, r) = M \ Pen+(M \ K, r)`, with the complement taken in the
    /// infinite space (sites beyond the window belong to it).
    pub fn pen_minus(&self, set: &SiteSet, r: f64) -> Result<SiteSet> {
        if r < 0.0 {
            return Err(Error::invalid(MODULE, format!("pen_minus radius {r} < 0")));
        }
        let steps = self.radius_steps(r);
        let inside = set.to_mask(self.n_sites);
        let near_outside = |s: usize| (self.boundary_distance(s) / self.step()).round() as usize <= steps;
        let covered: Vec<bool> = match &self.geometry {
            Geometry::Grid { .. } => {
                let complement: Vec<bool> = inside.iter().map(|b| !b).collect();
                self.grid_dilate(&complement, steps)
            }
            Geometry::Tree(_) => {
                let seeds = (0..self.n_sites).filter(|&s| !inside[s]).map(|s| (s, 0));
                self.bfs_distances(seeds, steps).iter().map(|&d| d <= steps).collect()
            }
        };
        Ok(set.iter().filter(|&s| !covered[s] && !near_outside(s)).collect())
    }

    /// Signed penumbra: `K(r) = Pen+(K, r)` for `r >= 0`, `Pen-(K, -r)` otherwise.
    pub fn penumbra(&self, set: &SiteSet, r: f64) -> Result<SiteSet> {
        if r >= 0.0 {
            self.pen_plus(set, r)
        } else {
            self.pen_minus(set, -r)
        }
    }

    /// Separable sup-norm dilation of a mask by `steps` along every axis,
    /// truncated at the window.
    fn grid_dilate(&self, mask: &[bool], steps: usize) -> Vec<bool> {
        let (dim, _, side) = self.grid_strides().expect("grid geometry");
        if steps == 0 {
            return mask.to_vec();
        }
        let mut cur = mask.to_vec();
        let mut line = vec![0usize; side + 1];
        for axis in 0..dim {
            let stride = side.pow((dim - 1 - axis) as u32);
            let mut next = vec![false; cur.len()];
            for base in 0..cur.len() {
                // iterate over line starts: coordinate along `axis` equals 0
                if (base / stride) % side != 0 {
                    continue;
                }
                line[0] = 0;
                for k in 0..side {
                    line[k + 1] = line[k] + cur[base + k * stride] as usize;
                }
                for k in 0..side {
                    let lo = k.saturating_sub(steps);
                    let hi = (k + steps).min(side - 1);
                    next[base + k * stride] = line[hi + 1] > line[lo];
                }
            }
            cur = next;
        }
        cur
    }

    fn bfs_distances<I: Iterator<Item = (usize, usize)>>(&self, seeds: I, limit: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n_sites];
        let mut queue = VecDeque::new();
        for (s, d) in seeds {
            if d < dist[s] {
                dist[s] = d;
                queue.push_back(s);
            }
        }
        let mut nb = Vec::new();
        while let Some(s) = queue.pop_front() {
            if dist[s] >= limit {
                continue;
            }
            self.step_neighbors(s, &mut nb);
            for &n in &nb {
                if dist[n] == usize::MAX {
                    dist[n] = dist[s] + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Sites whose distance to the window boundary exceeds `margin`.
    pub fn interior(&self, margin: f64) -> SiteSet {
        (0..self.n_sites).filter(|&s| self.boundary_distance(s) > margin + SNAP).collect()
    }

    /// Human-readable site label used in CSV output: grid coordinates
    /// joined by `:` (strip: position), tree: index.
    pub fn site_label(&self, site: usize) -> String {
        match self.kind() {
            SpaceKind::Strip => format!("{}", self.position(site)),
            SpaceKind::Lattice => {
                self.coords(site).iter().map(|c| c.to_string()).collect::<Vec<_>>().join(":")
            }
            SpaceKind::RegularTree => site.to_string(),
        }
    }

    /// CSV of a site set: one row per site, sorted by enumeration order,
    /// columns are the coordinates (`x0,x1,...`; strip: `x`; tree: `site,level`).
    pub fn site_set_csv(&self, set: &SiteSet) -> String {
        let mut out = String::new();
        match self.kind() {
            SpaceKind::Lattice => {
                let header: Vec<String> = (0..self.dim()).map(|a| format!("x{a}")).collect();
                out.push_str(&header.join(","));
                out.push('\n');
                for s in set.iter() {
                    let c: Vec<String> = self.coords(s).iter().map(|c| c.to_string()).collect();
                    out.push_str(&c.join(","));
                    out.push('\n');
                }
            }
            SpaceKind::Strip => {
                out.push_str("x\n");
                for s in set.iter() {
                    out.push_str(&format!("{}\n", self.position(s)));
                }
            }
            SpaceKind::RegularTree => {
                out.push_str("site,level\n");
                for s in set.iter() {
                    out.push_str(&format!("{},{}\n", s, self.coords(s)[0]));
                }
            }
        }
        out
    }
}

/// Nested site-set sequence `K_1 ⊂ K_2 ⊂ ...` with the scale of each set
/// (the radius for balls) and the probe radii used for regularity checks.
#[derive(Clone, Debug)]
pub struct Exhaustion {
    scales: Vec<f64>,
    sets: Vec<SiteSet>,
    radii_probes: Vec<f64>,
}

impl Exhaustion {
    pub fn new(scales: Vec<f64>, sets: Vec<SiteSet>, radii_probes: Vec<f64>) -> Result<Self> {
        if scales.len() != sets.len() || sets.is_empty() {
            return Err(Error::invalid(MODULE, "exhaustion needs one scale per set and at least one set"));
        }
        for w in scales.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid(MODULE, "exhaustion scales must increase"));
            }
        }
        for (i, w) in sets.windows(2).enumerate() {
            if !w[0].is_subset(&w[1]) {
                return Err(Error::invalid(MODULE, format!("exhaustion sets {i} and {} are not nested", i + 1)));
            }
        }
        Ok(Exhaustion { scales, sets, radii_probes })
    }

    /// Balls `B(center, r)` for the given radii.
    pub fn balls(space: &SpaceModel, center: usize, radii: &[f64], probes: &[f64]) -> Result<Self> {
        let sets = radii.iter().map(|&r| space.ball(center, r)).collect::<Result<Vec<_>>>()?;
        Exhaustion::new(radii.to_vec(), sets, probes.to_vec())
    }

    /// Centered balls with radii `first, first + stride, ...` up to `last`.
    pub fn centered(space: &SpaceModel, first: usize, last: usize, stride: usize, probes: &[f64]) -> Result<Self> {
        let radii: Vec<f64> = (first..=last).step_by(stride.max(1)).map(|n| n as f64 * space.step()).collect();
        Exhaustion::balls(space, space.center(), &radii, probes)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn sets(&self) -> &[SiteSet] {
        &self.sets
    }

    pub fn radii_probes(&self) -> &[f64] {
        &self.radii_probes
    }

    /// Whether the last set covers every site at least `window/2` away from
    /// the boundary (the working region of the window).
    pub fn covers_working_region(&self, space: &SpaceModel) -> bool {
        let margin = space.window() as f64 * space.step() / 2.0;
        let last = self.sets.last().expect("non-empty");
        space.interior(margin).is_subset(last)
    }
}

/// Regularity ratios for one probe radius.
#[derive(Clone, Debug)]
pub struct RegularityProbe {
    pub radius: f64,
    /// `(scale, vol(K_n(r)) / vol(K_n(-r)))` per exhaustion set.
    pub ratios: Vec<(f64, f64)>,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct RegularityReport {
    pub probes: Vec<RegularityProbe>,
    pub pass: bool,
}

/// Ratio sequences `vol(K_n(r)) / vol(K_n(-r))` per probe radius, with a
/// verdict: the excess over 1 must follow the declining `C / sqrt(n)`
/// schedule fitted on the first half of the sequence.
pub fn check_regular(space: &SpaceModel, exhaustion: &Exhaustion) -> Result<RegularityReport> {
    let mut probes = Vec::new();
    for &r in exhaustion.radii_probes() {
        let mut ratios = Vec::with_capacity(exhaustion.len());
        for (scale, k) in exhaustion.scales().iter().zip(exhaustion.sets()) {
            let outer = space.pen_plus(k, r)?;
            let inner = space.pen_minus(k, r)?;
            let ratio = if inner.is_empty() { f64::INFINITY } else { space.volume(&outer) / space.volume(&inner) };
            ratios.push((*scale, ratio));
        }
        let finite: Vec<(f64, f64)> = ratios.iter().copied().filter(|(_, q)| q.is_finite()).collect();
        let scales: Vec<f64> = finite.iter().map(|p| p.0).collect();
        let excess: Vec<f64> = finite.iter().map(|p| p.1 - 1.0).collect();
        let pass = finite.len() == ratios.len() && vanishing_trend(&scales, &excess).pass;
        probes.push(RegularityProbe { radius: r, ratios, pass });
    }
    let pass = !probes.is_empty() && probes.iter().all(|p| p.pass);
    Ok(RegularityReport { probes, pass })
}

/// Volume of the geodesic ball of radius `r` in the simply connected
/// `dim`-dimensional model space of constant curvature `curvature`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeComparison {
    pub curvature: f64,
    pub dim: usize,
}

impl VolumeComparison {
    pub fn new(curvature: f64, dim: usize) -> Self {
        VolumeComparison { curvature, dim }
    }

    /// `S_δ(r)`: `sinh(r√-δ)/√-δ`, `r`, or `sin(r√δ)/√δ`.
    pub fn s(&self, r: f64) -> f64 {
        let k = self.curvature;
        if k < 0.0 {
            let q = (-k).sqrt();
            (r * q).sinh() / q
        } else if k == 0.0 {
            r
        } else {
            let q = k.sqrt();
            (r * q).sin() / q
        }
    }

    /// `n π^{n/2} / Γ(n/2 + 1)`, the area of the unit sphere in R^n.
    pub fn dimensional_constant(&self) -> f64 {
        let n = self.dim as f64;
        n * PI.powf(n / 2.0) / gamma_half_integer(self.dim + 2)
    }

    /// Largest admissible radius (π/√δ for positive curvature).
    pub fn max_radius(&self) -> f64 {
        if self.curvature > 0.0 {
            PI / self.curvature.sqrt()
        } else {
            f64::INFINITY
        }
    }

    /// `V_δ(r) = c_n ∫_0^r S_δ(t)^{n-1} dt`, by Gauss–Legendre quadrature.
    pub fn volume(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::domain(MODULE, format!("comparison volume needs r > 0, got {r}")));
        }
        if self.dim == 0 {
            return Err(Error::domain(MODULE, "comparison volume needs dimension >= 1"));
        }
        if r >= self.max_radius() {
            return Err(Error::domain(
                MODULE,
                format!("r = {r} exceeds pi/sqrt(curvature) = {}", self.max_radius()),
            ));
        }
        let p = (self.dim - 1) as i32;
        let integral = quadrature::integrate(|t| self.s(t).powi(p), 0.0, r, 8, 24);
        Ok(self.dimensional_constant() * integral)
    }
}

/// `Γ(m/2)` for a positive integer `m`.
fn gamma_half_integer(m: usize) -> f64 {
    let mut g = if m.is_multiple_of(2) { 1.0 } else { PI.sqrt() };
    let mut x = if m.is_multiple_of(2) { 1.0 } else { 0.5 };
    while x < m as f64 / 2.0 - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Uniform ball-volume bounds `β₁(r) = V_{c₁}(r ∧ r₀) <= vol B(x, r) <= V_{c₂}(r) = β₂(r)`
/// for sectional curvature in `[c₂, c₁]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComparisonBounds {
    pub upper_curvature: f64,
    pub lower_curvature: f64,
    pub dim: usize,
    pub injectivity_radius: f64,
}

impl ComparisonBounds {
    pub fn new(upper_curvature: f64, lower_curvature: f64, dim: usize, injectivity_radius: f64) -> Result<Self> {
        if upper_curvature < lower_curvature {
            return Err(Error::invalid(MODULE, "upper curvature bound below lower bound"));
        }
        if !(injectivity_radius > 0.0) {
            return Err(Error::invalid(MODULE, "injectivity radius must be positive"));
        }
        Ok(ComparisonBounds { upper_curvature, lower_curvature, dim, injectivity_radius })
    }

    /// Flat model: both bounds equal the Euclidean ball volume.
    pub fn euclidean(dim: usize) -> Self {
        ComparisonBounds { upper_curvature: 0.0, lower_curvature: 0.0, dim, injectivity_radius: f64::INFINITY }
    }

    fn r0(&self) -> f64 {
        let c1 = VolumeComparison::new(self.upper_curvature, self.dim);
        self.injectivity_radius.min(c1.max_radius())
    }

    pub fn beta1(&self, r: f64) -> Result<f64> {
        let r0 = self.r0();
        // stay strictly inside the admissible range when capped
        let capped = if r >= r0 { r0 * (1.0 - 1e-12) } else { r };
        VolumeComparison::new(self.upper_curvature, self.dim).volume(capped)
    }

    pub fn beta2(&self, r: f64) -> Result<f64> {
        VolumeComparison::new(self.lower_curvature, self.dim).volume(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z1(window: usize) -> SpaceModel {
        SpaceModel::new(SpaceSpec::lattice(1, window)).unwrap()
    }

    fn interval(space: &SpaceModel, a: i64, b: i64) -> SiteSet {
        (a..=b).map(|x| space.index_of(&[x]).unwrap()).collect()
    }

    #[test]
    fn site_counts() {
        assert_eq!(z1(100).len(), 201);
        let strip = SpaceModel::new(SpaceSpec::strip(20.0, 0.1)).unwrap();
        assert_eq!(strip.len(), 201);
        assert!((strip.volume_weight() - 0.1).abs() < 1e-15);
        let tree = SpaceModel::new(SpaceSpec::tree(3, 8)).unwrap();
        assert_eq!(tree.len(), 766);
    }

    #[test]
    fn build_rejects_bad_parameters() {
        assert!(SpaceModel::new(SpaceSpec::strip(20.0, -0.1)).is_err());
        assert!(SpaceModel::new(SpaceSpec::strip(20.0, 0.3)).is_err());
        assert!(SpaceModel::new(SpaceSpec::lattice(1, 4)).is_err());
        assert!(SpaceModel::new(SpaceSpec::tree(2, 8)).is_err());
    }

    #[test]
    fn interval_penumbrae() {
        let s = z1(50);
        let k = interval(&s, 0, 10);
        let plus = s.pen_plus(&k, 2.0).unwrap();
        assert_eq!(plus, interval(&s, -2, 12));
        assert_eq!(plus.len(), 15);
        let minus = s.pen_minus(&k, 2.0).unwrap();
        assert_eq!(minus, interval(&s, 2, 8));
        assert_eq!(minus.len(), 7);
    }

    #[test]
    fn pen_plus_refuses_to_leave_the_window() {
        let s = z1(10);
        let k = interval(&s, 5, 9);
        assert!(matches!(s.pen_plus(&k, 2.0), Err(Error::WindowEscape { .. })));
        assert!(s.pen_plus(&k, 1.0).is_ok());
    }

    #[test]
    fn pen_minus_treats_outside_as_complement() {
        let s = z1(10);
        let k = interval(&s, 5, 10);
        // site 10 touches the outside, 9 is within 2 of it
        assert_eq!(s.pen_minus(&k, 2.0).unwrap(), interval(&s, 7, 8));
    }

    #[test]
    fn box_regularity_ratios() {
        let s2 = SpaceModel::new(SpaceSpec::lattice(2, 110)).unwrap();
        let k = s2.ball(s2.center(), 100.0).unwrap();
        let r = s2.volume(&s2.pen_plus(&k, 1.0).unwrap()) / s2.volume(&s2.pen_minus(&k, 1.0).unwrap());
        assert!((r - (203.0f64 / 199.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn tree_distances_and_balls() {
        let t = SpaceModel::new(SpaceSpec::tree(3, 6)).unwrap();
        let b2 = t.ball(0, 2.0).unwrap();
        assert_eq!(b2.len(), 1 + 3 + 6);
        let leaf = t.len() - 1;
        assert_eq!(t.distance(0, leaf), 6.0);
        assert_eq!(t.distance(leaf, leaf - 1), 2.0);
        assert!(t.ball(0, 6.0).is_ok());
        assert!(t.ball(0, 7.0).is_err());
    }

    #[test]
    fn comparison_volume_reference_values() {
        assert!((VolumeComparison::new(0.0, 1).volume(3.0).unwrap() - 6.0).abs() < 1e-12);
        assert!((VolumeComparison::new(0.0, 2).volume(1.0).unwrap() - PI).abs() < 1e-12);
        assert!((VolumeComparison::new(0.0, 3).volume(1.0).unwrap() - 4.0 / 3.0 * PI).abs() < 1e-12);
        assert!(VolumeComparison::new(1.0, 2).volume(PI).is_err());
        assert!(VolumeComparison::new(1.0, 2).volume(0.0).is_err());
    }

    #[test]
    fn config_round_trip() {
        let spec = SpaceSpec::lattice(2, 256);
        assert_eq!(spec.to_config(), "[space] kind=lattice d=2 window=256 fiber=1");
        let parsed = SpaceSpec::from_pairs(vec![("kind", "lattice"), ("d", "2"), ("window", "256"), ("fiber", "1")]);
        assert_eq!(parsed.unwrap(), spec);
        assert!(SpaceSpec::from_pairs(vec![("colour", "red")]).is_err());
    }

    #[test]
    fn site_set_algebra() {
        let a = SiteSet::new(vec![5, 1, 3, 3]);
        let b = SiteSet::new(vec![3, 4]);
        assert_eq!(a.as_slice(), &[1, 3, 5]);
        assert_eq!(a.union(&b).as_slice(), &[1, 3, 4, 5]);
        assert_eq!(a.difference(&b).as_slice(), &[1, 5]);
        assert_eq!(a.intersection(&b).as_slice(), &[3]);
        assert!(SiteSet::new(vec![1, 5]).is_subset(&a));
    }
}
