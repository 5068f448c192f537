//! Finite-volume assembly on the structured mesh.
//!
//! Everything here operates on [`Var`]s so the same code runs plain (on an
//! inactive tape) or traced for gradients. Matrices are stored as values on
//! a fixed 5-point [`CsrPattern`].

use std::sync::Arc;

use crate::autodiff::{Tape, Var, NO_INDEX};
use crate::error::{Error, Result};
use crate::fields::{BoundaryConditions, FaceBc, FaceField, Quantity};
use crate::grid::{Axis, Neighbour, Side, StructuredMesh};
use crate::linalg::CsrPattern;

/// Index tables derived once per mesh.
#[derive(Debug, Clone)]
pub struct Topology {
    pub n: usize,
    pub n_faces: usize,
    pub n_x_faces: usize,
    pub n_boundary: usize,
    pub h: f64,
    pub volume: f64,
    pub owner: Arc<Vec<u32>>,
    pub neighbour: Arc<Vec<u32>>,
    /// `true` for faces with normal along x.
    pub face_is_x: Arc<Vec<bool>>,
    pub b_cell: Arc<Vec<u32>>,
    /// Outward normal sign of each boundary face along its axis.
    pub b_sign: Arc<Vec<f64>>,
    pub b_is_x: Arc<Vec<bool>>,
    pub pattern: Arc<CsrPattern>,
    pub diag_slots: Arc<Vec<u32>>,
    /// Row and column of every stored entry.
    pub slot_row: Arc<Vec<u32>>,
    pub slot_col: Arc<Vec<u32>>,
    /// Slots (owner,owner), (neighbour,neighbour), (owner,neighbour),
    /// (neighbour,owner) for every internal face, concatenated.
    pub face_slots: Arc<Vec<u32>>,
    /// Diagonal slot of each boundary face's cell.
    pub b_diag_slot: Arc<Vec<u32>>,
    /// `owner ++ neighbour`.
    pub owner_neighbour: Arc<Vec<u32>>,
    /// Normal velocity component of owner and neighbour as indices into
    /// `ux ++ uy`.
    pub normal_owner: Arc<Vec<u32>>,
    pub normal_neighbour: Arc<Vec<u32>>,
    /// Cell upstream of the owner along the face axis, as an index into
    /// `cells ++ boundary faces`; used when the flux is non-negative.
    pub far_owner: Arc<Vec<u32>>,
    /// Cell downstream of the neighbour, used when the flux is negative.
    pub far_neighbour: Arc<Vec<u32>>,
}

impl Topology {
    pub fn new(mesh: &StructuredMesh) -> Topology {
        let n = mesh.n_cells();
        let faces = mesh.internal_faces();
        let mut rows = vec![Vec::new(); n];
        for f in faces {
            rows[f.owner].push(f.neighbour);
        }
        let pattern = CsrPattern::from_rows(&rows);
        let slot = |r: usize, c: usize| pattern.slot(r, c).expect("5-point slot") as u32;
        let mut face_slots = Vec::with_capacity(4 * faces.len());
        for f in faces {
            face_slots.push(slot(f.owner, f.owner));
        }
        for f in faces {
            face_slots.push(slot(f.neighbour, f.neighbour));
        }
        for f in faces {
            face_slots.push(slot(f.owner, f.neighbour));
        }
        for f in faces {
            face_slots.push(slot(f.neighbour, f.owner));
        }
        let mut slot_row = Vec::with_capacity(pattern.nnz());
        for r in 0..n {
            for _ in pattern.row_ptr()[r]..pattern.row_ptr()[r + 1] {
                slot_row.push(r as u32);
            }
        }
        let slot_col = pattern.cols().iter().map(|&c| c as u32).collect();
        let owner: Vec<u32> = faces.iter().map(|f| f.owner as u32).collect();
        let neighbour: Vec<u32> = faces.iter().map(|f| f.neighbour as u32).collect();
        let face_is_x: Vec<bool> = faces.iter().map(|f| f.axis == Axis::X).collect();
        let comp = |c: u32, x: bool| if x { c } else { c + n as u32 };
        let normal_owner = owner
            .iter()
            .zip(&face_is_x)
            .map(|(&c, &x)| comp(c, x))
            .collect();
        let normal_neighbour = neighbour
            .iter()
            .zip(&face_is_x)
            .map(|(&c, &x)| comp(c, x))
            .collect();
        let bf = mesh.boundary_faces();
        let b_cell: Vec<u32> = bf.iter().map(|b| b.cell as u32).collect();
        let b_diag_slot = b_cell
            .iter()
            .map(|&c| pattern.diag_slot(c as usize) as u32)
            .collect();
        let ext = |nb: Neighbour| match nb {
            Neighbour::Cell(c) => c as u32,
            Neighbour::Boundary(b) => (n + b) as u32,
        };
        let far_owner = faces
            .iter()
            .map(|f| {
                let side = if f.axis == Axis::X {
                    Side::XMinus
                } else {
                    Side::YMinus
                };
                ext(mesh.neighbour(f.owner, side))
            })
            .collect();
        let far_neighbour = faces
            .iter()
            .map(|f| {
                let side = if f.axis == Axis::X {
                    Side::XPlus
                } else {
                    Side::YPlus
                };
                ext(mesh.neighbour(f.neighbour, side))
            })
            .collect();
        let mut owner_neighbour = owner.clone();
        owner_neighbour.extend_from_slice(&neighbour);
        Topology {
            n,
            n_faces: faces.len(),
            n_x_faces: mesh.n_x_faces(),
            n_boundary: bf.len(),
            h: mesh.h(),
            volume: mesh.cell_area(),
            owner: Arc::new(owner),
            neighbour: Arc::new(neighbour),
            face_is_x: Arc::new(face_is_x),
            b_cell: Arc::new(b_cell),
            b_sign: Arc::new(bf.iter().map(|b| b.side.sign()).collect()),
            b_is_x: Arc::new(bf.iter().map(|b| b.side.axis() == Axis::X).collect()),
            diag_slots: Arc::new(pattern.diag_slots().iter().map(|&s| s as u32).collect()),
            slot_row: Arc::new(slot_row),
            slot_col: Arc::new(slot_col),
            face_slots: Arc::new(face_slots),
            b_diag_slot: Arc::new(b_diag_slot),
            owner_neighbour: Arc::new(owner_neighbour),
            normal_owner: Arc::new(normal_owner),
            normal_neighbour: Arc::new(normal_neighbour),
            far_owner: Arc::new(far_owner),
            far_neighbour: Arc::new(far_neighbour),
            pattern: Arc::new(pattern),
        }
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    /// `face_is_x` as 1/0 weights times `scale`, or the complement.
    pub fn axis_weights(&self, x: bool, scale: f64) -> Vec<f64> {
        self.face_is_x
            .iter()
            .map(|&fx| if fx == x { scale } else { 0.0 })
            .collect()
    }

    pub fn boundary_axis_weights(&self, x: bool, scale: f64) -> Vec<f64> {
        self.b_is_x
            .iter()
            .zip(self.b_sign.iter())
            .map(|(&bx, &s)| if bx == x { s * scale } else { 0.0 })
            .collect()
    }
}

/// Resolved boundary data for one quantity, in boundary-face order.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    pub kinds: Vec<FaceBc>,
    /// Cell index for zero-gradient faces, `NO_INDEX` for fixed ones.
    pub zg_index: Arc<Vec<u32>>,
    /// Fixed value, or 0 for zero-gradient faces.
    pub fixed_value: Arc<Vec<f64>>,
    pub fixed_mask: Arc<Vec<f64>>,
    pub zg_mask: Arc<Vec<f64>>,
}

impl BoundaryData {
    pub fn new(mesh: &StructuredMesh, bcs: &BoundaryConditions, q: Quantity) -> Result<Self> {
        Ok(Self::from_kinds(mesh, bcs.resolve(mesh, q)?))
    }

    pub fn from_kinds(mesh: &StructuredMesh, kinds: Vec<FaceBc>) -> Self {
        let bf = mesh.boundary_faces();
        let zg_index = kinds
            .iter()
            .zip(bf)
            .map(|(k, b)| match k {
                FaceBc::Fixed(_) => NO_INDEX,
                FaceBc::ZeroGradient => b.cell as u32,
            })
            .collect();
        let fixed_value = kinds
            .iter()
            .map(|k| match k {
                FaceBc::Fixed(v) => *v,
                FaceBc::ZeroGradient => 0.0,
            })
            .collect();
        let fixed_mask: Vec<f64> = kinds
            .iter()
            .map(|k| matches!(k, FaceBc::Fixed(_)) as u8 as f64)
            .collect();
        let zg_mask = fixed_mask.iter().map(|m| 1.0 - m).collect();
        BoundaryData {
            kinds,
            zg_index: Arc::new(zg_index),
            fixed_value: Arc::new(fixed_value),
            fixed_mask: Arc::new(fixed_mask),
            zg_mask: Arc::new(zg_mask),
        }
    }

    /// Face values: the fixed value or the adjacent cell value.
    pub fn values(&self, tape: &Tape, phi: &Var) -> Var {
        let g = tape.gather(phi, Arc::clone(&self.zg_index));
        tape.add(&g, &Var::constant(self.fixed_value.to_vec()))
    }

    pub fn any_fixed(&self) -> bool {
        self.fixed_mask.iter().any(|&m| m > 0.0)
    }
}

/// Boundary data of the face-normal velocity component, indexing `ux ++ uy`.
pub fn normal_velocity_bc(topo: &Topology, ux: &BoundaryData, uy: &BoundaryData) -> BoundaryData {
    let kinds = topo
        .b_is_x
        .iter()
        .enumerate()
        .map(|(i, &x)| if x { ux.kinds[i] } else { uy.kinds[i] })
        .collect::<Vec<_>>();
    let zg_index = kinds
        .iter()
        .enumerate()
        .map(|(i, k)| match k {
            FaceBc::Fixed(_) => NO_INDEX,
            FaceBc::ZeroGradient => {
                let c = topo.b_cell[i];
                if topo.b_is_x[i] {
                    c
                } else {
                    c + topo.n as u32
                }
            }
        })
        .collect();
    let fixed_value = kinds
        .iter()
        .map(|k| match k {
            FaceBc::Fixed(v) => *v,
            FaceBc::ZeroGradient => 0.0,
        })
        .collect();
    let fixed_mask: Vec<f64> = kinds
        .iter()
        .map(|k| matches!(k, FaceBc::Fixed(_)) as u8 as f64)
        .collect();
    let zg_mask = fixed_mask.iter().map(|m| 1.0 - m).collect();
    BoundaryData {
        kinds,
        zg_index: Arc::new(zg_index),
        fixed_value: Arc::new(fixed_value),
        fixed_mask: Arc::new(fixed_mask),
        zg_mask: Arc::new(zg_mask),
    }
}

/// Matrix values on the topology's pattern plus a right-hand side.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub values: Var,
    pub rhs: Var,
}

impl LinearSystem {
    pub fn zero(topo: &Topology) -> LinearSystem {
        LinearSystem {
            values: Var::constant(vec![0.0; topo.nnz()]),
            rhs: Var::constant(vec![0.0; topo.n]),
        }
    }

    pub fn add(&self, tape: &Tape, other: &LinearSystem) -> LinearSystem {
        LinearSystem {
            values: tape.add(&self.values, &other.values),
            rhs: tape.add(&self.rhs, &other.rhs),
        }
    }

    pub fn add_rhs(&self, tape: &Tape, rhs: &Var) -> LinearSystem {
        LinearSystem {
            values: self.values.clone(),
            rhs: tape.add(&self.rhs, rhs),
        }
    }

    pub fn diag(&self, topo: &Topology) -> Vec<f64> {
        topo.diag_slots
            .iter()
            .map(|&s| self.values.value()[s as usize])
            .collect()
    }

    /// Coefficient of `col` in row `row`, zero outside the pattern.
    pub fn coeff(&self, topo: &Topology, row: usize, col: usize) -> f64 {
        topo.pattern
            .slot(row, col)
            .map(|s| self.values.value()[s])
            .unwrap_or(0.0)
    }
}

/// `A x` on the tape.
pub fn matvec(tape: &Tape, topo: &Topology, values: &Var, x: &Var) -> Var {
    let xc = tape.gather(x, Arc::clone(&topo.slot_col));
    let prod = tape.mul(values, &xc);
    tape.scatter_add(&prod, Arc::clone(&topo.slot_row), topo.n)
}

/// Internal and boundary mass fluxes (outward for boundary faces) from the
/// linearly interpolated cell velocity.
pub fn face_mass_flux(
    tape: &Tape,
    topo: &Topology,
    ux: &Var,
    uy: &Var,
    normal_bc: &BoundaryData,
) -> (Var, Var) {
    let u = tape.concat(&[ux, uy]);
    let a = tape.gather(&u, Arc::clone(&topo.normal_owner));
    let b = tape.gather(&u, Arc::clone(&topo.normal_neighbour));
    let f = tape.scale(&tape.add(&a, &b), 0.5 * topo.h);
    let ub = normal_bc.values(tape, &u);
    let sign_h: Vec<f64> = topo.b_sign.iter().map(|s| s * topo.h).collect();
    let fb = tape.mul(&ub, &Var::constant(sign_h));
    (f, fb)
}

/// Plain-value wrapper around [`face_mass_flux`].
pub fn mass_flux_field(
    mesh: &StructuredMesh,
    bcs: &BoundaryConditions,
    ux: &[f64],
    uy: &[f64],
) -> Result<FaceField> {
    let topo = Topology::new(mesh);
    let bx = BoundaryData::new(mesh, bcs, Quantity::Ux)?;
    let by = BoundaryData::new(mesh, bcs, Quantity::Uy)?;
    let nb = normal_velocity_bc(&topo, &bx, &by);
    let tape = Tape::inactive();
    let (f, fb) = face_mass_flux(
        &tape,
        &topo,
        &Var::constant(ux.to_vec()),
        &Var::constant(uy.to_vec()),
        &nb,
    );
    Ok(FaceField {
        internal: f.to_vec(),
        boundary: fb.to_vec(),
    })
}

fn scatter_faces(tape: &Tape, topo: &Topology, parts: [&Var; 4]) -> Var {
    let v = tape.concat(&parts);
    tape.scatter_add(&v, Arc::clone(&topo.face_slots), topo.nnz())
}

/// Upwind convection: matrix part from internal and zero-gradient boundary
/// faces, right-hand side from fixed-value boundary faces.
pub fn assemble_convection_upwind(
    tape: &Tape,
    topo: &Topology,
    flux: &Var,
    boundary_flux: &Var,
    bc: &BoundaryData,
) -> LinearSystem {
    let pos = tape.relu(flux);
    let neg = tape.relu(&tape.neg(flux));
    let values = scatter_faces(tape, topo, [&pos, &neg, &tape.neg(&neg), &tape.neg(&pos)]);
    let bd = tape.mul(boundary_flux, &Var::constant(bc.zg_mask.to_vec()));
    let bvals = tape.scatter_add(&bd, Arc::clone(&topo.b_diag_slot), topo.nnz());
    let br = tape.mul(boundary_flux, &Var::constant(bc.fixed_value.to_vec()));
    let rhs = tape.scatter_add(&tape.neg(&br), Arc::clone(&topo.b_cell), topo.n);
    LinearSystem {
        values: tape.add(&values, &bvals),
        rhs,
    }
}

/// Two-point diffusion with face coefficients `nu_face` (internal) and
/// `nu_boundary`; the face area over the centre distance is 1 on square
/// cells, and h/2 on boundary faces doubles it.
pub fn assemble_diffusion(
    tape: &Tape,
    topo: &Topology,
    nu_face: &Var,
    nu_boundary: &Var,
    bc: &BoundaryData,
) -> LinearSystem {
    let neg = tape.neg(nu_face);
    let values = scatter_faces(tape, topo, [nu_face, nu_face, &neg, &neg]);
    let db = tape.mul(
        nu_boundary,
        &Var::constant(bc.fixed_mask.iter().map(|m| 2.0 * m).collect()),
    );
    let bvals = tape.scatter_add(&db, Arc::clone(&topo.b_diag_slot), topo.nnz());
    let rb = tape.mul(&db, &Var::constant(bc.fixed_value.to_vec()));
    let rhs = tape.scatter_add(&rb, Arc::clone(&topo.b_cell), topo.n);
    LinearSystem {
        values: tape.add(&values, &bvals),
        rhs,
    }
}

/// Checks viscosities before assembly.
pub fn check_viscosity(nu: &[f64]) -> Result<()> {
    match nu.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        Some(v) => Err(Error::Invalid(format!(
            "viscosity must be positive, got {v}"
        ))),
        None => Ok(()),
    }
}

/// Explicit correction `F (u_dc - u_upwind)` moved to the right-hand side:
/// the owner loses it, the neighbour gains it.
pub fn deferred_correction(tape: &Tape, topo: &Topology, flux: &Var, delta: &Var) -> Var {
    let t = tape.mul(flux, delta);
    let v = tape.concat(&[&tape.neg(&t), &t]);
    tape.scatter_add(&v, Arc::clone(&topo.owner_neighbour), topo.n)
}

/// Implicit Euler transient term.
pub fn time_derivative(tape: &Tape, topo: &Topology, phi_old: &Var, dt: f64) -> LinearSystem {
    let c = topo.volume / dt;
    let values = tape.scatter_add(
        &Var::constant(vec![c; topo.n]),
        Arc::clone(&topo.diag_slots),
        topo.nnz(),
    );
    LinearSystem {
        values,
        rhs: tape.scale(phi_old, c),
    }
}

/// Arithmetic mean of a cell quantity onto internal faces.
pub fn interpolate_linear(tape: &Tape, topo: &Topology, phi: &Var) -> Var {
    let a = tape.gather(phi, Arc::clone(&topo.owner));
    let b = tape.gather(phi, Arc::clone(&topo.neighbour));
    tape.scale(&tape.add(&a, &b), 0.5)
}

/// Gauss gradient times cell volume, x and y components, from internal face
/// values and boundary face values.
pub fn gauss_gradient(tape: &Tape, topo: &Topology, face: &Var, boundary: &Var) -> (Var, Var) {
    let idx = {
        let mut v = topo.owner_neighbour.to_vec();
        v.extend_from_slice(&topo.b_cell);
        Arc::new(v)
    };
    let comp = |x: bool| {
        let w = Var::constant(topo.axis_weights(x, topo.h));
        let fw = tape.mul(face, &w);
        let bw = tape.mul(
            boundary,
            &Var::constant(topo.boundary_axis_weights(x, topo.h)),
        );
        let all = tape.concat(&[&fw, &tape.neg(&fw), &bw]);
        tape.scatter_add(&all, Arc::clone(&idx), topo.n)
    };
    (comp(true), comp(false))
}

/// Net outward flux per cell.
pub fn divergence(tape: &Tape, topo: &Topology, flux: &Var, boundary_flux: &Var) -> Var {
    let v = tape.concat(&[flux, &tape.neg(flux), boundary_flux]);
    let mut idx = topo.owner_neighbour.to_vec();
    idx.extend_from_slice(&topo.b_cell);
    tape.scatter_add(&v, Arc::new(idx), topo.n)
}
