//! Banded kernel operators with finite propagation.
//!
//! An operator is stored through its matrix entries `M(x, y) = a(x, y) w`,
//! where `a` is the integral kernel and `w` the (uniform) volume weight of a
//! site; with this normalisation composition is the matrix product, the
//! local trace is a sum of diagonal traces and the Schur bound is a row sum.
//! Each entry is a dense `fiber x fiber` block.
//!
//! Translation-invariant operators on grids are kept as stencils (offset ->
//! block) and compose exactly; everything else is kept as explicit rows over
//! the window, i.e. as the compression of the operator to the window. Rows
//! closer to the window boundary than [`KernelOperator::exact_margin`] may
//! differ from the infinite-space operator after compositions.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::space::{SiteSet, SpaceModel};

const MODULE: &str = "operator";
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Sites above which operator norms come from power iteration rather than a
/// dense eigen-decomposition.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Clone, Debug)]
struct Stencil {
    offsets: Vec<Vec<i64>>,
    blocks: Vec<Complex64>,
}

#[derive(Clone, Debug)]
struct Rows {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    blocks: Vec<Complex64>,
}

#[derive(Clone, Debug)]
enum Storage {
    Stencil(Stencil),
    Rows(Rows),
}

/// Bounded kernel operator with a declared propagation bound `u_A`.
#[derive(Clone, Debug)]
pub struct KernelOperator {
    space: Arc<SpaceModel>,
    fiber: usize,
    storage: Storage,
    propagation: f64,
    self_adjoint: bool,
    exact_margin: f64,
    positive_by_construction: Option<String>,
}

fn block_mul_acc(acc: &mut [Complex64], a: &[Complex64], b: &[Complex64], f: usize) {
    if f == 1 {
        acc[0] += a[0] * b[0];
        return;
    }
    for i in 0..f {
        for k in 0..f {
            let aik = a[i * f + k];
            if aik == ZERO {
                continue;
            }
            for j in 0..f {
                acc[i * f + j] += aik * b[k * f + j];
            }
        }
    }
}

fn block_adjoint(a: &[Complex64], f: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; f * f];
    for i in 0..f {
        for j in 0..f {
            out[j * f + i] = a[i * f + j].conj();
        }
    }
    out
}

/// Spectral norm of a `f x f` block.
fn block_norm(a: &[Complex64], f: usize) -> f64 {
    if f == 1 {
        return a[0].norm();
    }
    if a.iter().all(|z| *z == ZERO) {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(f, f, a);
    m.singular_values().max()
}

fn identity_block(f: usize, scale: Complex64) -> Vec<Complex64> {
    let mut b = vec![ZERO; f * f];
    for i in 0..f {
        b[i * f + i] = scale;
    }
    b
}

fn is_zero_block(b: &[Complex64]) -> bool {
    b.iter().all(|z| z.re == 0.0 && z.im == 0.0)
}

fn block_trace(b: &[Complex64], f: usize) -> Complex64 {
    (0..f).map(|i| b[i * f + i]).sum()
}

impl KernelOperator {
    /// Translation-invariant operator on a grid: `entries` maps an offset
    /// (in sites, one component per axis) to the matrix block `M(x, x+o)`.
    pub fn from_stencil(
        space: Arc<SpaceModel>,
        fiber: usize,
        entries: Vec<(Vec<i64>, Vec<Complex64>)>,
    ) -> Result<Self> {
        let dim = space.dim();
        if !space.is_grid() {
            return Err(Error::invalid(MODULE, "stencil operators need a lattice or strip"));
        }
        let mut merged: Vec<(Vec<i64>, Vec<Complex64>)> = Vec::new();
        for (o, b) in entries {
            if o.len() != dim || b.len() != fiber * fiber {
                return Err(Error::invalid(MODULE, "stencil offset or block has the wrong shape"));
            }
            if let Some(slot) = merged.iter_mut().find(|(p, _)| *p == o) {
                for (x, y) in slot.1.iter_mut().zip(&b) {
                    *x += y;
                }
            } else {
                merged.push((o, b));
            }
        }
        merged.retain(|(_, b)| !is_zero_block(b));
        merged.sort_by(|a, b| a.0.cmp(&b.0));
        let step = space.step();
        let propagation = merged
            .iter()
            .map(|(o, _)| o.iter().map(|c| c.abs()).max().unwrap_or(0) as f64 * step)
            .fold(0.0, f64::max);
        let stencil = Stencil {
            offsets: merged.iter().map(|e| e.0.clone()).collect(),
            blocks: merged.into_iter().flat_map(|e| e.1).collect(),
        };
        let mut op = KernelOperator {
            space,
            fiber,
            storage: Storage::Stencil(stencil),
            propagation,
            self_adjoint: false,
            exact_margin: 0.0,
            positive_by_construction: None,
        };
        op.self_adjoint = op.detect_self_adjoint();
        Ok(op)
    }

    /// Explicit operator from `(row, col, block)` matrix entries; duplicate
    /// positions are summed.
    pub fn from_entries(
        space: Arc<SpaceModel>,
        fiber: usize,
        entries: impl IntoIterator<Item = (usize, usize, Vec<Complex64>)>,
    ) -> Result<Self> {
        let n = space.len();
        let mut by_row: Vec<Vec<(usize, Vec<Complex64>)>> = vec![Vec::new(); n];
        for (x, y, b) in entries {
            if x >= n || y >= n || b.len() != fiber * fiber {
                return Err(Error::invalid(MODULE, format!("entry ({x}, {y}) out of range or misshapen")));
            }
            by_row[x].push((y, b));
        }
        let rows = Self::assemble_rows(by_row, fiber);
        Self::from_rows(space, fiber, rows, None, 0.0)
    }

    fn assemble_rows(by_row: Vec<Vec<(usize, Vec<Complex64>)>>, fiber: usize) -> Rows {
        let ff = fiber * fiber;
        let mut row_ptr = Vec::with_capacity(by_row.len() + 1);
        let mut cols = Vec::new();
        let mut blocks = Vec::new();
        row_ptr.push(0);
        for mut row in by_row {
            row.sort_by_key(|e| e.0);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut acc = row[i].1.clone();
                let mut j = i + 1;
                while j < row.len() && row[j].0 == c {
                    for (a, b) in acc.iter_mut().zip(&row[j].1) {
                        *a += b;
                    }
                    j += 1;
                }
                if !is_zero_block(&acc) {
                    cols.push(c);
                    blocks.extend_from_slice(&acc[..ff]);
                }
                i = j;
            }
            row_ptr.push(cols.len());
        }
        Rows { row_ptr, cols, blocks }
    }

    fn from_rows(
        space: Arc<SpaceModel>,
        fiber: usize,
        rows: Rows,
        declared: Option<f64>,
        exact_margin: f64,
    ) -> Result<Self> {
        let mut op = KernelOperator {
            space,
            fiber,
            storage: Storage::Rows(rows),
            propagation: 0.0,
            self_adjoint: false,
            exact_margin,
            positive_by_construction: None,
        };
        let measured = op.measured_propagation();
        op.propagation = declared.map_or(measured, |d| d.max(measured));
        op.self_adjoint = op.detect_self_adjoint();
        Ok(op)
    }

    /// Operator whose matrix block `M(x, y)` is `f(x, y)` for every pair at
    /// distance at most `propagation` (pairs leaving the window are dropped).
    pub fn from_fn<F>(space: Arc<SpaceModel>, fiber: usize, propagation: f64, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Option<Vec<Complex64>> + Sync,
    {
        let n = space.len();
        let sp = space.clone();
        let by_row: Vec<Vec<(usize, Vec<Complex64>)>> = (0..n)
            .into_par_iter()
            .map(|x| {
                neighbourhood(&sp, x, propagation)
                    .into_iter()
                    .filter_map(|y| f(x, y).map(|b| (y, b)))
                    .collect()
            })
            .collect();
        for row in &by_row {
            if row.iter().any(|(_, b)| b.len() != fiber * fiber) {
                return Err(Error::invalid(MODULE, "kernel function returned a misshapen block"));
            }
        }
        let rows = Self::assemble_rows(by_row, fiber);
        Self::from_rows(space, fiber, rows, Some(propagation), 0.0)
    }

    pub fn identity(space: Arc<SpaceModel>, fiber: usize) -> Self {
        Self::scalar(space, fiber, 1.0)
    }

    pub fn scalar(space: Arc<SpaceModel>, fiber: usize, c: f64) -> Self {
        if space.is_grid() {
            let dim = space.dim();
            Self::from_stencil(space, fiber, vec![(vec![0; dim], identity_block(fiber, Complex64::new(c, 0.0)))])
                .expect("well-formed stencil")
        } else {
            let n = space.len();
            Self::from_entries(space, fiber, (0..n).map(|x| (x, x, identity_block(fiber, Complex64::new(c, 0.0)))))
                .expect("well-formed diagonal")
        }
    }

    pub fn zero(space: Arc<SpaceModel>, fiber: usize) -> Self {
        Self::scalar(space, fiber, 0.0)
    }

    /// Multiplication by a site function (scalar on each fiber).
    pub fn diagonal(space: Arc<SpaceModel>, fiber: usize, values: &[f64]) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::invalid(MODULE, "diagonal needs one value per site"));
        }
        Self::from_entries(
            space,
            fiber,
            values.iter().enumerate().map(|(x, v)| (x, x, identity_block(fiber, Complex64::new(*v, 0.0)))),
        )
    }

    /// Graph Laplacian `deg - adjacency` of the infinite space (grid: axis
    /// neighbours; tree: edges), scaled by `1/h^2` on the strip and tensored
    /// with the identity on the fiber.
    pub fn laplacian(space: Arc<SpaceModel>, fiber: usize) -> Self {
        let h2 = space.step() * space.step();
        if space.is_grid() {
            let dim = space.dim();
            let mut entries = vec![(vec![0; dim], identity_block(fiber, Complex64::new(2.0 * dim as f64 / h2, 0.0)))];
            for a in 0..dim {
                for s in [-1i64, 1] {
                    let mut o = vec![0; dim];
                    o[a] = s;
                    entries.push((o, identity_block(fiber, Complex64::new(-1.0 / h2, 0.0))));
                }
            }
            Self::from_stencil(space, fiber, entries).expect("well-formed stencil")
        } else {
            let deg = space.infinite_degree() as f64;
            let n = space.len();
            let sp = space.clone();
            let entries = (0..n).flat_map(move |x| {
                let mut e = vec![(x, x, identity_block(fiber, Complex64::new(deg, 0.0)))];
                for y in sp.adjacent(x) {
                    e.push((x, y, identity_block(fiber, Complex64::new(-1.0, 0.0))));
                }
                e
            });
            Self::from_entries(space, fiber, entries).expect("well-formed laplacian")
        }
    }

    /// Nearest-neighbour adjacency operator.
    pub fn adjacency(space: Arc<SpaceModel>, fiber: usize) -> Self {
        let lap = Self::laplacian(space.clone(), fiber);
        let deg = space.infinite_degree() as f64 / (space.step() * space.step());
        Self::scalar(space, fiber, deg).sub(&lap).expect("same space").scaled(Complex64::new(1.0, 0.0))
    }

    /// Unit translation along `axis`: `(S v)(x) = v(x - e_axis)`.
    pub fn shift(space: Arc<SpaceModel>, fiber: usize, axis: usize) -> Result<Self> {
        if !space.is_grid() || axis >= space.dim() {
            return Err(Error::invalid(MODULE, "shift needs a grid and a valid axis"));
        }
        let mut o = vec![0; space.dim()];
        o[axis] = -1;
        Self::from_stencil(space, fiber, vec![(o, identity_block(fiber, ONE))])
    }

    pub fn space(&self) -> &Arc<SpaceModel> {
        &self.space
    }

    pub fn fiber(&self) -> usize {
        self.fiber
    }

    /// Declared propagation bound `u_A`.
    pub fn propagation(&self) -> f64 {
        self.propagation
    }

    pub fn is_self_adjoint(&self) -> bool {
        self.self_adjoint
    }

    pub fn is_stencil(&self) -> bool {
        matches!(self.storage, Storage::Stencil(_))
    }

    /// Rows whose distance to the window boundary is at most this value may
    /// differ from the infinite-space operator.
    pub fn exact_margin(&self) -> f64 {
        self.exact_margin
    }

    /// Sites whose rows are exact.
    pub fn exact_rows(&self) -> SiteSet {
        self.space.interior(self.exact_margin)
    }

    /// Records that the operator is positive by construction (a Gram
    /// product `C* C`, a sum of such, ...). Only meaningful for self-adjoint
    /// operators; the note is reported by [`certify_positive`].
    pub fn mark_positive(mut self, reason: impl Into<String>) -> Self {
        if self.self_adjoint {
            self.positive_by_construction = Some(reason.into());
        }
        self
    }

    /// Declares a larger propagation bound than measured.
    pub fn with_propagation(mut self, bound: f64) -> Self {
        self.propagation = self.propagation.max(bound);
        self
    }

    /// Replaces the declared propagation of a stencil by the offsets it
    /// actually stores (stencil entries are exact).
    pub fn tighten_propagation(mut self) -> Self {
        if self.is_stencil() {
            self.propagation = self.measured_propagation();
        }
        self
    }

    /// Number of stored blocks.
    pub fn stored_blocks(&self) -> usize {
        match &self.storage {
            Storage::Stencil(s) => s.offsets.len(),
            Storage::Rows(r) => r.cols.len(),
        }
    }

    fn same_space(&self, other: &KernelOperator) -> Result<()> {
        if !(Arc::ptr_eq(&self.space, &other.space) || self.space.spec() == other.space.spec())
            || self.fiber != other.fiber
        {
            return Err(Error::SpaceMismatch { module: MODULE });
        }
        Ok(())
    }

    fn stencil_neighbour(&self, x: usize, offset: &[i64]) -> Option<usize> {
        let (dim, half, side) = self.space.grid_strides()?;
        let mut idx = 0usize;
        let mut r = x;
        let mut stride = side.pow(dim as u32 - 1);
        for o in offset.iter() {
            let c = (r / stride) as i64 - half;
            r %= stride;
            let t = c + o;
            if t.abs() > half {
                return None;
            }
            idx += (t + half) as usize * stride;
            stride = stride.max(side) / side;
        }
        Some(idx)
    }

    /// Visits every stored block of row `x` as `(column, block)`.
    pub fn for_each_in_row<F: FnMut(usize, &[Complex64])>(&self, x: usize, mut f: F) {
        let ff = self.fiber * self.fiber;
        match &self.storage {
            Storage::Stencil(s) => {
                for (k, o) in s.offsets.iter().enumerate() {
                    if let Some(y) = self.stencil_neighbour(x, o) {
                        f(y, &s.blocks[k * ff..(k + 1) * ff]);
                    }
                }
            }
            Storage::Rows(r) => {
                for k in r.row_ptr[x]..r.row_ptr[x + 1] {
                    f(r.cols[k], &r.blocks[k * ff..(k + 1) * ff]);
                }
            }
        }
    }

    /// Matrix block `M(x, y)` (zero when not stored).
    pub fn block(&self, x: usize, y: usize) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.fiber * self.fiber];
        self.for_each_in_row(x, |c, b| {
            if c == y {
                for (o, v) in out.iter_mut().zip(b) {
                    *o += v;
                }
            }
        });
        out
    }

    /// Kernel value `a(x, y) = M(x, y) / w`.
    pub fn kernel(&self, x: usize, y: usize) -> Vec<Complex64> {
        let w = self.space.volume_weight();
        self.block(x, y).into_iter().map(|z| z / w).collect()
    }

    /// Largest distance between a row and a column of a stored non-zero block.
    pub fn measured_propagation(&self) -> f64 {
        match &self.storage {
            Storage::Stencil(s) => s
                .offsets
                .iter()
                .map(|o| o.iter().map(|c| c.abs()).max().unwrap_or(0) as f64 * self.space.step())
                .fold(0.0, f64::max),
            Storage::Rows(r) => (0..self.space.len())
                .into_par_iter()
                .map(|x| {
                    (r.row_ptr[x]..r.row_ptr[x + 1])
                        .map(|k| self.space.distance(x, r.cols[k]))
                        .fold(0.0, f64::max)
                })
                .reduce(|| 0.0, f64::max),
        }
    }

    fn detect_self_adjoint(&self) -> bool {
        let f = self.fiber;
        let ff = f * f;
        let scale = self.max_abs_entry().max(1e-300);
        let tol = 1e-12 * scale;
        match &self.storage {
            Storage::Stencil(s) => s.offsets.iter().enumerate().all(|(k, o)| {
                let neg: Vec<i64> = o.iter().map(|c| -c).collect();
                let adj = block_adjoint(&s.blocks[k * ff..(k + 1) * ff], f);
                match s.offsets.iter().position(|p| *p == neg) {
                    Some(j) => adj.iter().zip(&s.blocks[j * ff..(j + 1) * ff]).all(|(a, b)| (a - b).norm() <= tol),
                    None => adj.iter().all(|a| a.norm() <= tol),
                }
            }),
            Storage::Rows(_) => (0..self.space.len()).into_par_iter().all(|x| {
                let mut ok = true;
                self.for_each_in_row(x, |y, b| {
                    let adj = block_adjoint(b, f);
                    let other = self.block(y, x);
                    if adj.iter().zip(&other).any(|(a, c)| (a - c).norm() > tol) {
                        ok = false;
                    }
                });
                ok
            }),
        }
    }

    fn max_abs_entry(&self) -> f64 {
        let blocks = match &self.storage {
            Storage::Stencil(s) => &s.blocks,
            Storage::Rows(r) => &r.blocks,
        };
        blocks.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn to_rows(&self) -> Rows {
        match &self.storage {
            Storage::Rows(r) => r.clone(),
            Storage::Stencil(_) => {
                let by_row: Vec<Vec<(usize, Vec<Complex64>)>> = (0..self.space.len())
                    .into_par_iter()
                    .map(|x| {
                        let mut row = Vec::new();
                        self.for_each_in_row(x, |y, b| row.push((y, b.to_vec())));
                        row
                    })
                    .collect();
                Self::assemble_rows(by_row, self.fiber)
            }
        }
    }

    /// Explicit-row copy of this operator (its compression to the window).
    pub fn to_explicit(&self) -> KernelOperator {
        KernelOperator {
            space: self.space.clone(),
            fiber: self.fiber,
            storage: Storage::Rows(self.to_rows()),
            propagation: self.propagation,
            self_adjoint: self.self_adjoint,
            exact_margin: self.exact_margin,
            positive_by_construction: self.positive_by_construction.clone(),
        }
    }

    /// `A B`. The propagation bound is `u_A + u_B`; the sum must fit inside
    /// the window.
    pub fn compose(&self, other: &KernelOperator) -> Result<KernelOperator> {
        self.same_space(other)?;
        let bound = self.propagation + other.propagation;
        let extent = self.space.window() as f64 * self.space.step();
        if bound > extent + 1e-9 {
            return Err(Error::escape(
                MODULE,
                format!("composed propagation {bound} exceeds the window half-width {extent}"),
            ));
        }
        let f = self.fiber;
        let ff = f * f;
        if let (Storage::Stencil(a), Storage::Stencil(b)) = (&self.storage, &other.storage) {
            let mut out: Vec<(Vec<i64>, Vec<Complex64>)> = Vec::new();
            let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
            for (i, oa) in a.offsets.iter().enumerate() {
                for (j, ob) in b.offsets.iter().enumerate() {
                    let o: Vec<i64> = oa.iter().zip(ob).map(|(p, q)| p + q).collect();
                    let slot = *index.entry(o.clone()).or_insert_with(|| {
                        out.push((o, vec![ZERO; ff]));
                        out.len() - 1
                    });
                    block_mul_acc(&mut out[slot].1, &a.blocks[i * ff..(i + 1) * ff], &b.blocks[j * ff..(j + 1) * ff], f);
                }
            }
            let mut op = Self::from_stencil(self.space.clone(), f, out)?;
            op.propagation = op.propagation.max(bound);
            return Ok(op);
        }
        let a = self.to_rows();
        let b = other.to_rows();
        let by_row: Vec<Vec<(usize, Vec<Complex64>)>> = (0..self.space.len())
            .into_par_iter()
            .map(|x| {
                let mut pos: HashMap<usize, usize> = HashMap::new();
                let mut row: Vec<(usize, Vec<Complex64>)> = Vec::new();
                for ka in a.row_ptr[x]..a.row_ptr[x + 1] {
                    let z = a.cols[ka];
                    let ab = &a.blocks[ka * ff..(ka + 1) * ff];
                    for kb in b.row_ptr[z]..b.row_ptr[z + 1] {
                        let y = b.cols[kb];
                        let slot = *pos.entry(y).or_insert_with(|| {
                            row.push((y, vec![ZERO; ff]));
                            row.len() - 1
                        });
                        block_mul_acc(&mut row[slot].1, ab, &b.blocks[kb * ff..(kb + 1) * ff], f);
                    }
                }
                row
            })
            .collect();
        let margin = self.exact_margin.max(self.propagation + other.exact_margin);
        Self::from_rows(self.space.clone(), f, Self::assemble_rows(by_row, f), Some(bound), margin)
    }

    fn combine(&self, other: &KernelOperator, beta: Complex64) -> Result<KernelOperator> {
        self.same_space(other)?;
        let f = self.fiber;
        let ff = f * f;
        if let (Storage::Stencil(a), Storage::Stencil(b)) = (&self.storage, &other.storage) {
            let mut entries: Vec<(Vec<i64>, Vec<Complex64>)> = a
                .offsets
                .iter()
                .enumerate()
                .map(|(k, o)| (o.clone(), a.blocks[k * ff..(k + 1) * ff].to_vec()))
                .collect();
            entries.extend(
                b.offsets
                    .iter()
                    .enumerate()
                    .map(|(k, o)| (o.clone(), b.blocks[k * ff..(k + 1) * ff].iter().map(|z| z * beta).collect())),
            );
            let mut op = Self::from_stencil(self.space.clone(), f, entries)?;
            op.propagation = op.propagation.max(self.propagation.max(other.propagation));
            return Ok(op);
        }
        let a = self.to_rows();
        let b = other.to_rows();
        let by_row: Vec<Vec<(usize, Vec<Complex64>)>> = (0..self.space.len())
            .map(|x| {
                let mut row: Vec<(usize, Vec<Complex64>)> = (a.row_ptr[x]..a.row_ptr[x + 1])
                    .map(|k| (a.cols[k], a.blocks[k * ff..(k + 1) * ff].to_vec()))
                    .collect();
                row.extend(
                    (b.row_ptr[x]..b.row_ptr[x + 1])
                        .map(|k| (b.cols[k], b.blocks[k * ff..(k + 1) * ff].iter().map(|z| z * beta).collect())),
                );
                row
            })
            .collect();
        Self::from_rows(
            self.space.clone(),
            f,
            Self::assemble_rows(by_row, f),
            Some(self.propagation.max(other.propagation)),
            self.exact_margin.max(other.exact_margin),
        )
    }

    pub fn add(&self, other: &KernelOperator) -> Result<KernelOperator> {
        self.combine(other, ONE)
    }

    pub fn sub(&self, other: &KernelOperator) -> Result<KernelOperator> {
        self.combine(other, -ONE)
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, other: &KernelOperator, c: Complex64) -> Result<KernelOperator> {
        self.combine(other, c)
    }

    pub fn scaled(&self, c: Complex64) -> KernelOperator {
        let mut out = self.clone();
        let blocks = match &mut out.storage {
            Storage::Stencil(s) => &mut s.blocks,
            Storage::Rows(r) => &mut r.blocks,
        };
        for z in blocks.iter_mut() {
            *z *= c;
        }
        out.self_adjoint = self.self_adjoint && c.im == 0.0;
        if !(c.im == 0.0 && c.re >= 0.0) {
            out.positive_by_construction = None;
        }
        out
    }

    /// `A*`: the kernel flipped with block conjugate-transpose.
    pub fn adjoint(&self) -> KernelOperator {
        let f = self.fiber;
        let ff = f * f;
        match &self.storage {
            Storage::Stencil(s) => {
                let entries = s
                    .offsets
                    .iter()
                    .enumerate()
                    .map(|(k, o)| (o.iter().map(|c| -c).collect(), block_adjoint(&s.blocks[k * ff..(k + 1) * ff], f)))
                    .collect();
                let mut op = Self::from_stencil(self.space.clone(), f, entries).expect("well-formed stencil");
                op.propagation = self.propagation;
                op
            }
            Storage::Rows(r) => {
                let n = self.space.len();
                let mut by_row: Vec<Vec<(usize, Vec<Complex64>)>> = vec![Vec::new(); n];
                for x in 0..n {
                    for k in r.row_ptr[x]..r.row_ptr[x + 1] {
                        by_row[r.cols[k]].push((x, block_adjoint(&r.blocks[k * ff..(k + 1) * ff], f)));
                    }
                }
                let margin = if self.exact_margin > 0.0 { self.exact_margin + self.propagation } else { 0.0 };
                Self::from_rows(self.space.clone(), f, Self::assemble_rows(by_row, f), Some(self.propagation), margin)
                    .expect("well-formed adjoint")
            }
        }
    }

    /// `A v` for a site-indexed vector (`v[site * fiber + i]`); the volume
    /// weights are already folded into the matrix entries.
    pub fn apply(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        let f = self.fiber;
        if v.len() != self.space.len() * f {
            return Err(Error::invalid(MODULE, "vector length does not match the window"));
        }
        let mut out = vec![ZERO; v.len()];
        out.par_chunks_mut(f).enumerate().for_each(|(x, o)| {
            self.for_each_in_row(x, |y, b| {
                for i in 0..f {
                    for j in 0..f {
                        o[i] += b[i * f + j] * v[y * f + j];
                    }
                }
            });
        });
        Ok(out)
    }

    /// `sum_{x in K} tr M(x, x)` for every site, as a reusable density.
    pub fn local_trace_measure(&self) -> LocalTraceMeasure {
        let f = self.fiber;
        match &self.storage {
            Storage::Stencil(s) => {
                let zero = vec![0; self.space.dim()];
                let d = s
                    .offsets
                    .iter()
                    .position(|o| *o == zero)
                    .map(|k| block_trace(&s.blocks[k * f * f..(k + 1) * f * f], f).re)
                    .unwrap_or(0.0);
                LocalTraceMeasure { density: Density::Uniform(d) }
            }
            Storage::Rows(_) => {
                let d = (0..self.space.len())
                    .into_par_iter()
                    .map(|x| block_trace(&self.block(x, x), f).re)
                    .collect();
                LocalTraceMeasure { density: Density::PerSite(d) }
            }
        }
    }

    /// Dense `(n f) x (n f)` matrix of the window compression.
    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let f = self.fiber;
        let n = self.space.len() * f;
        let mut m = DMatrix::from_element(n, n, ZERO);
        for x in 0..self.space.len() {
            self.for_each_in_row(x, |y, b| {
                for i in 0..f {
                    for j in 0..f {
                        m[(x * f + i, y * f + j)] += b[i * f + j];
                    }
                }
            });
        }
        m
    }

    /// CSV dump of the kernel `a(x, y)` on the band: `x,y,i,j,re,im`, with
    /// `x`, `y` site indices, in lexicographic `(x, y, i, j)` order.
    pub fn kernel_csv(&self) -> String {
        let f = self.fiber;
        let w = self.space.volume_weight();
        let mut out = String::from("x,y,i,j,re,im\n");
        for x in 0..self.space.len() {
            let mut row: Vec<(usize, Vec<Complex64>)> = Vec::new();
            self.for_each_in_row(x, |y, b| row.push((y, b.to_vec())));
            row.sort_by_key(|e| e.0);
            for (y, b) in row {
                for i in 0..f {
                    for j in 0..f {
                        let z = b[i * f + j] / w;
                        let _ = writeln!(out, "{x},{y},{i},{j},{:e},{:e}", z.re, z.im);
                    }
                }
            }
        }
        out
    }

    /// Parses the format written by [`KernelOperator::kernel_csv`].
    pub fn from_kernel_csv(space: Arc<SpaceModel>, fiber: usize, text: &str) -> Result<Self> {
        let w = space.volume_weight();
        let mut entries: HashMap<(usize, usize), Vec<Complex64>> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('x') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
            if fields.len() != 6 {
                return Err(Error::invalid(MODULE, format!("kernel csv line {}: expected 6 fields", lineno + 1)));
            }
            let parse_u = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::invalid(MODULE, format!("kernel csv line {}: bad index `{s}`", lineno + 1)))
            };
            let parse_f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(MODULE, format!("kernel csv line {}: bad value `{s}`", lineno + 1)))
            };
            let (x, y, i, j) = (parse_u(fields[0])?, parse_u(fields[1])?, parse_u(fields[2])?, parse_u(fields[3])?);
            if i >= fiber || j >= fiber {
                return Err(Error::invalid(MODULE, format!("kernel csv line {}: fiber index out of range", lineno + 1)));
            }
            let z = Complex64::new(parse_f(fields[4])?, parse_f(fields[5])?) * w;
            entries.entry((x, y)).or_insert_with(|| vec![ZERO; fiber * fiber])[i * fiber + j] += z;
        }
        Self::from_entries(space, fiber, entries.into_iter().map(|((x, y), b)| (x, y, b)))
    }
}

/// Sites within distance `r` of `x` inside the window (no escape check).
pub(crate) fn neighbourhood(space: &SpaceModel, x: usize, r: f64) -> Vec<usize> {
    let steps = (r / space.step() + 1e-9).floor() as i64;
    if space.is_grid() {
        let c = space.coords(x);
        let dim = c.len();
        let mut out = Vec::new();
        let mut o = vec![-steps; dim];
        loop {
            let t: Vec<i64> = c.iter().zip(&o).map(|(a, b)| a + b).collect();
            if let Some(i) = space.index_of(&t) {
                out.push(i);
            }
            let mut a = 0;
            while a < dim {
                o[a] += 1;
                if o[a] <= steps {
                    break;
                }
                o[a] = -steps;
                a += 1;
            }
            if a == dim {
                break;
            }
        }
        out
    } else {
        let mut seen = vec![x];
        let mut frontier = vec![x];
        for _ in 0..steps {
            let mut next = Vec::new();
            for &s in &frontier {
                for n in space.adjacent(s) {
                    if !seen.contains(&n) {
                        seen.push(n);
                        next.push(n);
                    }
                }
            }
            frontier = next;
        }
        seen.sort_unstable();
        seen
    }
}

#[derive(Clone, Debug)]
enum Density {
    Uniform(f64),
    PerSite(Vec<f64>),
}

/// `μ_T(K) = Tr(E_K T E_K)`, evaluated from cached per-site diagonal traces.
#[derive(Clone, Debug)]
pub struct LocalTraceMeasure {
    density: Density,
}

impl LocalTraceMeasure {
    pub fn measure(&self, set: &SiteSet) -> f64 {
        match &self.density {
            Density::Uniform(d) => set.len() as f64 * d,
            Density::PerSite(v) => set.iter().map(|s| v[s]).sum(),
        }
    }

    /// Diagonal trace at one site.
    pub fn at(&self, site: usize) -> f64 {
        match &self.density {
            Density::Uniform(d) => *d,
            Density::PerSite(v) => v[site],
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.density, Density::Uniform(_))
    }
}

/// `μ_A(K) = sum_{x in K} w tr a(x, x)`.
pub fn local_trace(op: &KernelOperator, set: &SiteSet) -> f64 {
    op.local_trace_measure().measure(set)
}

/// Schur-test bound `sup_x sum_y |a(x, y)| w >= ||A||` for self-adjoint `A`.
pub fn schur_bound(op: &KernelOperator) -> Result<f64> {
    if !op.is_self_adjoint() {
        return Err(Error::NotSelfAdjoint { context: "schur_bound".into() });
    }
    Ok(row_sum_sup(op, None))
}

/// Schur bound with the supremum restricted to the rows in `rows`.
pub fn schur_bound_on(op: &KernelOperator, rows: &SiteSet) -> Result<f64> {
    if !op.is_self_adjoint() {
        return Err(Error::NotSelfAdjoint { context: "schur_bound_on".into() });
    }
    Ok(row_sum_sup(op, Some(rows)))
}

/// General Schur test `||A|| <= sqrt(R C)` with `R`, `C` the largest row and
/// column sums of block norms; no symmetry needed.
pub fn schur_bound_general(op: &KernelOperator) -> f64 {
    (row_sum_sup(op, None) * row_sum_sup(&op.adjoint(), None)).sqrt()
}

/// [`schur_bound_general`] with both suprema restricted to `rows`.
pub fn schur_bound_general_on(op: &KernelOperator, rows: &SiteSet) -> f64 {
    (row_sum_sup(op, Some(rows)) * row_sum_sup(&op.adjoint(), Some(rows))).sqrt()
}

/// Certified norm bound of a scalar stencil from its Fourier symbol
/// `Σ_o c_o e^{i o·θ}`: the maximum over `N_a = 32 r_a` angles per axis
/// (`r_a` the stencil radius along axis `a`), inflated by the Bernstein
/// factor `1 / (1 - π r_a / N_a)` per axis, plus a rounding allowance.
/// `None` for row storage, fiber > 1, or more than `1e9` evaluation steps.
pub fn symbol_norm_bound(op: &KernelOperator) -> Option<f64> {
    let Storage::Stencil(s) = &op.storage else { return None };
    if op.fiber != 1 {
        return None;
    }
    let Some(first) = s.offsets.first() else { return Some(0.0) };
    let dim = first.len();
    let radius: Vec<usize> =
        (0..dim).map(|a| s.offsets.iter().map(|o| o[a].unsigned_abs() as usize).max().unwrap_or(0).max(1)).collect();
    let angles: Vec<usize> = radius.iter().map(|r| 32 * r).collect();
    let width: Vec<usize> = radius.iter().map(|r| 2 * r + 1).collect();
    // work of contracting axes in order: Π_{b<a} N_b · N_a · Π_{b>=a} width_b
    let mut work = 0.0;
    for a in 0..dim {
        work += angles[..=a].iter().map(|&n| n as f64).product::<f64>() * width[a..].iter().map(|&w| w as f64).product::<f64>();
    }
    if work > 1e9 {
        return None;
    }
    // dense coefficient box, axis 0 slowest
    let mut data = vec![ZERO; width.iter().product()];
    for (o, c) in s.offsets.iter().zip(&s.blocks) {
        let idx = (0..dim).fold(0, |acc, a| acc * width[a] + (o[a] + radius[a] as i64) as usize);
        data[idx] += *c;
    }
    // contract one axis at a time; `shape` holds angles for done axes, widths for the rest
    let mut shape = width.clone();
    for a in 0..dim {
        let outer: usize = shape[..a].iter().product();
        let inner: usize = shape[a + 1..].iter().product();
        let (w, n, r) = (width[a], angles[a], radius[a] as f64);
        let phase: Vec<Complex64> = (0..n * w)
            .map(|k| {
                let (j, m) = (k / w, k % w);
                Complex64::from_polar(1.0, std::f64::consts::TAU * j as f64 / n as f64 * (m as f64 - r))
            })
            .collect();
        let mut next = vec![ZERO; outer * n * inner];
        next.par_chunks_mut(n * inner).enumerate().for_each(|(p, chunk)| {
            for j in 0..n {
                for m in 0..w {
                    let e = phase[j * w + m];
                    let src = &data[(p * w + m) * inner..(p * w + m + 1) * inner];
                    for (dst, v) in chunk[j * inner..(j + 1) * inner].iter_mut().zip(src) {
                        *dst += e * v;
                    }
                }
            }
        });
        data = next;
        shape[a] = n;
    }
    let grid_max = data.par_iter().map(|v| v.norm()).reduce(|| 0.0, f64::max);
    let inflate: f64 = radius.iter().zip(&angles).map(|(&r, &n)| 1.0 / (1.0 - std::f64::consts::PI * r as f64 / n as f64)).product();
    let l1: f64 = s.blocks.iter().map(|c| c.norm()).sum();
    let terms: f64 = width.iter().map(|&w| w as f64).product();
    let rounding = 4.0 * l1 * f64::EPSILON * terms;
    Some((grid_max * inflate + rounding).min(l1))
}

fn row_sum_sup(op: &KernelOperator, rows: Option<&SiteSet>) -> f64 {
    let f = op.fiber();
    let row_sum = |x: usize| {
        let mut s = 0.0;
        op.for_each_in_row(x, |_, b| s += block_norm(b, f));
        s
    };
    if op.is_stencil() && rows.is_none() {
        // every interior row carries the full stencil
        return row_sum(op.space().center());
    }
    match rows {
        Some(set) => set.as_slice().par_iter().map(|&x| row_sum(x)).reduce(|| 0.0, f64::max),
        None => (0..op.space().len()).into_par_iter().map(row_sum).reduce(|| 0.0, f64::max),
    }
}

/// How an operator norm was estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMethod {
    Dense,
    PowerIteration,
}

/// Ground-truth norm of the window compression: dense decomposition up to
/// [`DENSE_LIMIT`] rows, power iteration (tolerance 1e-10) above.
pub fn norm_estimate(op: &KernelOperator, seed: u64) -> (f64, NormMethod) {
    let n = op.space().len() * op.fiber();
    if n <= DENSE_LIMIT {
        let m = op.to_dense();
        let v = if op.is_self_adjoint() {
            m.symmetric_eigenvalues().iter().map(|x| x.abs()).fold(0.0, f64::max)
        } else {
            m.singular_values().max()
        };
        (v, NormMethod::Dense)
    } else {
        (power_norm_estimate(op, 2000, 1e-10, seed), NormMethod::PowerIteration)
    }
}

/// Power iteration on `A* A` from a seeded random start; returns
/// `sqrt` of the final Rayleigh quotient, a lower estimate of `||A||`.
pub fn power_norm_estimate(op: &KernelOperator, max_iter: usize, tol: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = op.space().len() * op.fiber();
    let mut v: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let adj = op.adjoint();
    let mut est = 0.0;
    for _ in 0..max_iter {
        let nv = norm2(&v);
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|z| *z /= nv);
        let av = op.apply(&v).expect("shape");
        let w = adj.apply(&av).expect("shape");
        let next = norm2(&av).powi(2);
        let done = (next - est).abs() <= tol * next.max(1e-300);
        est = next;
        v = w;
        if done {
            break;
        }
    }
    est.sqrt()
}

pub(crate) fn norm2(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Evidence that an operator is positive.
#[derive(Clone, Debug, PartialEq)]
pub enum Positivity {
    /// Self-adjoint with every diagonal block dominating its off-diagonal row sum.
    DiagonallyDominant,
    /// Dense spectrum of the window compression is non-negative.
    Spectral { min_eigenvalue: f64 },
    /// Positive by construction (Gram product, non-negative function of a
    /// self-adjoint operator, ...), as stated by the caller.
    Asserted(String),
}

/// Tries diagonal dominance, then (for small windows) the dense spectrum.
pub fn certify_positive(op: &KernelOperator) -> Option<Positivity> {
    if !op.is_self_adjoint() {
        return None;
    }
    if let Some(reason) = &op.positive_by_construction {
        return Some(Positivity::Asserted(reason.clone()));
    }
    let f = op.fiber();
    let dominant = (0..op.space().len()).into_par_iter().all(|x| {
        let mut off = 0.0;
        let mut diag_min = 0.0;
        op.for_each_in_row(x, |y, b| {
            if y == x {
                let m = DMatrix::from_row_slice(f, f, b);
                diag_min = m.symmetric_eigenvalues().min();
            } else {
                off += block_norm(b, f);
            }
        });
        diag_min + 1e-12 >= off
    });
    if dominant {
        return Some(Positivity::DiagonallyDominant);
    }
    if op.space().len() * f <= DENSE_LIMIT {
        let eig = op.to_dense().symmetric_eigenvalues();
        let min = eig.min();
        let scale = eig.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
        if min >= -1e-10 * scale {
            return Some(Positivity::Spectral { min_eigenvalue: min });
        }
    }
    None
}

/// Recipes for finite-propagation δ-unitaries on grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnitaryRecipe {
    /// `U = S diag(e^{iθ_x})` with seeded random phases: exactly unitary.
    PhasedShift { axis: usize, seed: u64 },
    /// `U = S + ε D` with `D` a seeded random diagonal, `|D_x| <= 1`.
    PerturbedShift { axis: usize, epsilon: f64, seed: u64 },
}

/// Measured defects `||U*U - 1||` and `||UU* - 1||` (Schur-certified upper
/// bounds over the rows where the products are exact).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitaryDefects {
    pub left: f64,
    pub right: f64,
}

impl UnitaryDefects {
    pub fn max(&self) -> f64 {
        self.left.max(self.right)
    }
}

/// Builds a δ-unitary and certifies its defects are below `delta`.
pub fn make_delta_unitary(space: Arc<SpaceModel>, fiber: usize, delta: f64, recipe: UnitaryRecipe) -> Result<KernelOperator> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(MODULE, format!("delta must lie in (0, 1), got {delta}")));
    }
    let u = match recipe {
        UnitaryRecipe::PhasedShift { axis, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phases: Vec<Complex64> =
                (0..space.len()).map(|_| Complex64::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU))).collect();
            let s = KernelOperator::shift(space.clone(), fiber, axis)?;
            let d = KernelOperator::from_entries(
                space.clone(),
                fiber,
                phases.iter().enumerate().map(|(x, p)| (x, x, identity_block(fiber, *p))),
            )?;
            s.compose(&d)?
        }
        UnitaryRecipe::PerturbedShift { axis, epsilon, seed } => {
            if !(epsilon >= 0.0) || 2.0 * epsilon + epsilon * epsilon >= 1.0 {
                return Err(Error::invalid(
                    MODULE,
                    format!("perturbation {epsilon} allows defects >= 1 (operators need not be invertible)"),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let diag: Vec<Complex64> = (0..space.len())
                .map(|_| Complex64::from_polar(rng.gen_range(0.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            let s = KernelOperator::shift(space.clone(), fiber, axis)?;
            let d = KernelOperator::from_entries(
                space.clone(),
                fiber,
                diag.iter().enumerate().map(|(x, p)| (x, x, identity_block(fiber, *p))),
            )?;
            s.add_scaled(&d, Complex64::new(epsilon, 0.0))?
        }
    };
    let defects = unitary_defects(&u)?;
    if defects.max() >= delta {
        return Err(Error::numerical(
            MODULE,
            format!("constructed operator has defect {:.3e} >= delta = {delta}", defects.max()),
        ));
    }
    Ok(u)
}

/// Both unitarity defects of `u`, certified by the Schur bound over the
/// rows where `U*U` and `UU*` are exact.
pub fn unitary_defects(u: &KernelOperator) -> Result<UnitaryDefects> {
    let id = KernelOperator::identity(u.space().clone(), u.fiber());
    let adj = u.adjoint();
    let left = adj.compose(u)?.sub(&id)?;
    let right = u.compose(&adj)?.sub(&id)?;
    let margin = left.exact_margin().max(right.exact_margin()).max(2.0 * u.propagation());
    let rows = u.space().interior(margin);
    if rows.is_empty() {
        return Err(Error::escape(MODULE, "no rows far enough from the window boundary to measure defects"));
    }
    Ok(UnitaryDefects { left: schur_bound_on(&left, &rows)?, right: schur_bound_on(&right, &rows)? })
}

/// `(membership, defects)` for the δ-unitary set `U_δ`.
pub fn is_delta_unitary(u: &KernelOperator, delta: f64) -> Result<(bool, UnitaryDefects)> {
    let d = unitary_defects(u)?;
    Ok((d.left < delta && d.right < delta, d))
}

/// Finite-propagation approximation of `U^{-1}` for a δ-unitary with
/// `δ < 1`: `(sum_k X^k) U*` with `X = 1 - U*U`, truncated once the
/// Neumann tail drops below `tol`.
pub fn approximate_inverse(u: &KernelOperator, tol: f64) -> Result<KernelOperator> {
    let defects = unitary_defects(u)?;
    let delta = defects.left;
    if delta >= 1.0 {
        return Err(Error::invalid(MODULE, format!("defect {delta} >= 1: Neumann series diverges")));
    }
    let id = KernelOperator::identity(u.space().clone(), u.fiber());
    let adj = u.adjoint();
    let x = id.sub(&adj.compose(u)?)?;
    let norm_u = (1.0 + defects.left).sqrt();
    let mut terms = 0usize;
    while delta.powi(terms as i32 + 1) / (1.0 - delta) * norm_u > tol && terms < 200 {
        terms += 1;
    }
    // Horner: 1 + X (1 + X (1 + ...))
    let mut acc = id.clone();
    for _ in 0..terms {
        acc = id.add(&x.compose(&acc)?)?;
    }
    acc.compose(&adj)
}
