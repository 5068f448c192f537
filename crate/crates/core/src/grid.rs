//! Uniform structured 2D meshes, coarse/fine pairing and the conservative
//! fine-to-coarse projection.
//!
//! Cells are numbered row-major (`j * nx + i`) over the full block; obstacle
//! cells are masked out and the remaining active cells are renumbered in the
//! same order. Internal faces are stored x-normal first, then y-normal, each
//! oriented from owner (lower index) to neighbour.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::CellField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryTag {
    Inlet,
    Outlet,
    Wall,
    Obstacle,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 4] = [
        BoundaryTag::Inlet,
        BoundaryTag::Outlet,
        BoundaryTag::Wall,
        BoundaryTag::Obstacle,
    ];
}

/// Face-normal axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Outward direction of a boundary face as seen from its cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    XMinus,
    XPlus,
    YMinus,
    YPlus,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::XMinus, Side::XPlus, Side::YMinus, Side::YPlus];

    pub fn axis(self) -> Axis {
        match self {
            Side::XMinus | Side::XPlus => Axis::X,
            Side::YMinus | Side::YPlus => Axis::Y,
        }
    }

    /// +1 for the positive direction of the axis, -1 otherwise.
    pub fn sign(self) -> f64 {
        match self {
            Side::XPlus | Side::YPlus => 1.0,
            Side::XMinus | Side::YMinus => -1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn offset(self) -> (isize, isize) {
        match self {
            Side::XMinus => (-1, 0),
            Side::XPlus => (1, 0),
            Side::YMinus => (0, -1),
            Side::YPlus => (0, 1),
        }
    }
}

/// Axis-aligned solid rectangle in physical coordinates (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideTags {
    pub left: BoundaryTag,
    pub right: BoundaryTag,
    pub bottom: BoundaryTag,
    pub top: BoundaryTag,
}

impl Default for SideTags {
    fn default() -> Self {
        SideTags {
            left: BoundaryTag::Inlet,
            right: BoundaryTag::Outlet,
            bottom: BoundaryTag::Wall,
            top: BoundaryTag::Wall,
        }
    }
}

impl SideTags {
    pub fn closed_box() -> Self {
        SideTags {
            left: BoundaryTag::Wall,
            right: BoundaryTag::Wall,
            bottom: BoundaryTag::Wall,
            top: BoundaryTag::Wall,
        }
    }

    fn tag(&self, side: Side) -> BoundaryTag {
        match side {
            Side::XMinus => self.left,
            Side::XPlus => self.right,
            Side::YMinus => self.bottom,
            Side::YPlus => self.top,
        }
    }
}

/// Everything needed to rebuild a mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub nx: usize,
    pub ny: usize,
    /// Domain extent along x (m).
    pub lx: f64,
    /// Domain extent along y (m).
    pub ly: f64,
    #[serde(default)]
    pub obstacle: Option<Rect>,
    #[serde(default)]
    pub sides: SideTags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InternalFace {
    pub owner: usize,
    pub neighbour: usize,
    pub axis: Axis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub side: Side,
    pub tag: BoundaryTag,
}

/// What lies across one side of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighbour {
    Cell(usize),
    Boundary(usize),
}

#[derive(Debug, Clone)]
pub struct StructuredMesh {
    spec: MeshSpec,
    dx: f64,
    dy: f64,
    active: Vec<Option<usize>>,
    ij: Vec<(usize, usize)>,
    internal: Vec<InternalFace>,
    n_x_faces: usize,
    boundary: Vec<BoundaryFace>,
    neighbours: Vec<[Neighbour; 4]>,
    obstacle_cells: Option<(usize, usize, usize, usize)>,
}

fn aligned_index(coord: f64, h: f64, what: &str) -> Result<usize> {
    let k = coord / h;
    let r = k.round();
    if (k - r).abs() > 1e-9 * k.abs().max(1.0) || r < 0.0 {
        return Err(Error::Mesh(format!(
            "obstacle {what} = {coord} is not aligned with the cell size {h}"
        )));
    }
    Ok(r as usize)
}

/// Builds a uniform mesh, masking obstacle cells and tagging boundaries.
pub fn build_mesh(spec: &MeshSpec) -> Result<StructuredMesh> {
    StructuredMesh::new(spec.clone())
}

impl StructuredMesh {
    pub fn new(spec: MeshSpec) -> Result<Self> {
        let (nx, ny) = (spec.nx, spec.ny);
        if nx < 4 || ny < 4 {
            return Err(Error::Mesh(format!("need nx, ny >= 4, got {nx} x {ny}")));
        }
        if !(spec.lx > 0.0 && spec.ly > 0.0) {
            return Err(Error::Mesh("domain extents must be positive".into()));
        }
        let dx = spec.lx / nx as f64;
        let dy = spec.ly / ny as f64;
        if ((dx - dy) / dx).abs() > 1e-12 {
            return Err(Error::Mesh(format!(
                "cells must be square: dx = {dx}, dy = {dy}"
            )));
        }
        let mut solid = vec![false; nx * ny];
        let mut obstacle_cells = None;
        if let Some(r) = spec.obstacle {
            if !(r.x0 < r.x1 && r.y0 < r.y1) {
                return Err(Error::Mesh("obstacle rectangle is empty".into()));
            }
            let i0 = aligned_index(r.x0, dx, "x0")?;
            let i1 = aligned_index(r.x1, dx, "x1")?;
            let j0 = aligned_index(r.y0, dy, "y0")?;
            let j1 = aligned_index(r.y1, dy, "y1")?;
            if i1 > nx || j1 > ny {
                return Err(Error::Mesh("obstacle extends outside the domain".into()));
            }
            for j in j0..j1 {
                for i in i0..i1 {
                    solid[j * nx + i] = true;
                }
            }
            obstacle_cells = Some((i0, i1, j0, j1));
        }
        let mut active = vec![None; nx * ny];
        let mut ij = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if !solid[j * nx + i] {
                    active[j * nx + i] = Some(ij.len());
                    ij.push((i, j));
                }
            }
        }
        if ij.is_empty() {
            return Err(Error::Mesh("no active cells".into()));
        }
        let mut mesh = StructuredMesh {
            spec,
            dx,
            dy,
            active,
            ij,
            internal: Vec::new(),
            n_x_faces: 0,
            boundary: Vec::new(),
            neighbours: Vec::new(),
            obstacle_cells,
        };
        mesh.build_faces();
        Ok(mesh)
    }

    fn build_faces(&mut self) {
        let (nx, ny) = (self.nx(), self.ny());
        for j in 0..ny {
            for i in 0..nx - 1 {
                if let (Some(o), Some(n)) = (self.active[j * nx + i], self.active[j * nx + i + 1]) {
                    self.internal.push(InternalFace {
                        owner: o,
                        neighbour: n,
                        axis: Axis::X,
                    });
                }
            }
        }
        self.n_x_faces = self.internal.len();
        for j in 0..ny - 1 {
            for i in 0..nx {
                if let (Some(o), Some(n)) = (self.active[j * nx + i], self.active[(j + 1) * nx + i])
                {
                    self.internal.push(InternalFace {
                        owner: o,
                        neighbour: n,
                        axis: Axis::Y,
                    });
                }
            }
        }
        let sides = self.spec.sides;
        let mut neighbours = Vec::with_capacity(self.ij.len());
        for c in 0..self.ij.len() {
            let (i, j) = self.ij[c];
            let mut nb = [Neighbour::Cell(0); 4];
            for side in Side::ALL {
                let (di, dj) = side.offset();
                let (ii, jj) = (i as isize + di, j as isize + dj);
                let inside = ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny;
                nb[side.index()] = if inside {
                    match self.active[jj as usize * nx + ii as usize] {
                        Some(n) => Neighbour::Cell(n),
                        None => {
                            self.boundary.push(BoundaryFace {
                                cell: c,
                                side,
                                tag: BoundaryTag::Obstacle,
                            });
                            Neighbour::Boundary(self.boundary.len() - 1)
                        }
                    }
                } else {
                    self.boundary.push(BoundaryFace {
                        cell: c,
                        side,
                        tag: sides.tag(side),
                    });
                    Neighbour::Boundary(self.boundary.len() - 1)
                };
            }
            neighbours.push(nb);
        }
        self.neighbours = neighbours;
    }

    pub fn spec(&self) -> &MeshSpec {
        &self.spec
    }

    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    pub fn ny(&self) -> usize {
        self.spec.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Cell edge length (dx = dy).
    pub fn h(&self) -> f64 {
        self.dx
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn n_cells(&self) -> usize {
        self.ij.len()
    }

    /// Active cell index at block position (i, j), if any.
    pub fn cell_at(&self, i: isize, j: isize) -> Option<usize> {
        if i < 0 || j < 0 || i as usize >= self.nx() || j as usize >= self.ny() {
            return None;
        }
        self.active[j as usize * self.nx() + i as usize]
    }

    pub fn ij(&self, cell: usize) -> (usize, usize) {
        self.ij[cell]
    }

    pub fn centre(&self, cell: usize) -> (f64, f64) {
        let (i, j) = self.ij[cell];
        ((i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dy)
    }

    pub fn internal_faces(&self) -> &[InternalFace] {
        &self.internal
    }

    pub fn x_faces(&self) -> &[InternalFace] {
        &self.internal[..self.n_x_faces]
    }

    pub fn y_faces(&self) -> &[InternalFace] {
        &self.internal[self.n_x_faces..]
    }

    pub fn n_x_faces(&self) -> usize {
        self.n_x_faces
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary
    }

    pub fn neighbour(&self, cell: usize, side: Side) -> Neighbour {
        self.neighbours[cell][side.index()]
    }

    /// Obstacle extent in cell indices `(i0, i1, j0, j1)`, half-open.
    pub fn obstacle_cells(&self) -> Option<(usize, usize, usize, usize)> {
        self.obstacle_cells
    }

    pub fn has_tag(&self, tag: BoundaryTag) -> bool {
        self.boundary.iter().any(|b| b.tag == tag)
    }

    /// Active cells whose centre row contains `y`.
    pub fn row_cells(&self, y: f64) -> Vec<usize> {
        let j = ((y / self.dy).floor().max(0.0) as usize).min(self.ny() - 1);
        (0..self.nx())
            .filter_map(|i| self.cell_at(i as isize, j as isize))
            .collect()
    }
}

/// A fine mesh and its isotropically coarsened partner.
#[derive(Debug, Clone)]
pub struct MeshPair {
    pub fine: StructuredMesh,
    pub coarse: StructuredMesh,
    pub reduction_factor: usize,
    /// For each coarse cell, its fine cells.
    children: Vec<Vec<usize>>,
}

impl MeshPair {
    pub fn new(fine: StructuredMesh, reduction_factor: usize) -> Result<Self> {
        let f = reduction_factor;
        if f < 2 {
            return Err(Error::Mesh(format!(
                "reduction factor must be >= 2, got {f}"
            )));
        }
        let spec = fine.spec().clone();
        if spec.nx % f != 0 || spec.ny % f != 0 {
            return Err(Error::Mesh(format!(
                "fine mesh {} x {} is not divisible by reduction factor {f}",
                spec.nx, spec.ny
            )));
        }
        let coarse = StructuredMesh::new(MeshSpec {
            nx: spec.nx / f,
            ny: spec.ny / f,
            ..spec
        })
        .map_err(|e| Error::Mesh(format!("coarse mesh for reduction factor {f}: {e}")))?;
        let mut children = vec![Vec::with_capacity(f * f); coarse.n_cells()];
        for c in 0..fine.n_cells() {
            let (i, j) = fine.ij(c);
            match coarse.cell_at((i / f) as isize, (j / f) as isize) {
                Some(cc) => children[cc].push(c),
                None => return Err(Error::Mesh("obstacle straddles a coarse cell".into())),
            }
        }
        if children.iter().any(|ch| ch.len() != f * f) {
            return Err(Error::Mesh("obstacle straddles a coarse cell".into()));
        }
        Ok(MeshPair {
            fine,
            coarse,
            reduction_factor: f,
            children,
        })
    }

    pub fn children(&self, coarse_cell: usize) -> &[usize] {
        &self.children[coarse_cell]
    }

    /// Arithmetic mean of the fine values inside each coarse cell.
    pub fn project(&self, fine_field: &CellField) -> Result<CellField> {
        project(fine_field, self)
    }

    pub fn project_values(&self, fine: &[f64]) -> Result<Vec<f64>> {
        if fine.len() != self.fine.n_cells() {
            return Err(Error::Mismatch(format!(
                "field has {} values, fine mesh has {} cells",
                fine.len(),
                self.fine.n_cells()
            )));
        }
        let inv = 1.0 / (self.reduction_factor * self.reduction_factor) as f64;
        // offsets from the first child keep constant blocks bit-exact
        Ok(self
            .children
            .iter()
            .map(|ch| {
                let v0 = fine[ch[0]];
                v0 + ch.iter().map(|&c| fine[c] - v0).sum::<f64>() * inv
            })
            .collect())
    }
}

/// Conservative projection of a fine field onto the coarse mesh.
pub fn project(fine_field: &CellField, pair: &MeshPair) -> Result<CellField> {
    Ok(CellField::new(
        fine_field.quantity,
        pair.project_values(&fine_field.values)?,
    ))
}
