//! Cell fields, boundary conditions, the solver state and the input
//! normalizations used by the neural scheme.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, BoundaryTag, StructuredMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Ux,
    Uy,
    P,
    K,
    Omega,
}

impl Quantity {
    pub const ALL: [Quantity; 5] = [
        Quantity::Ux,
        Quantity::Uy,
        Quantity::P,
        Quantity::K,
        Quantity::Omega,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Ux => "ux",
            Quantity::Uy => "uy",
            Quantity::P => "p",
            Quantity::K => "k",
            Quantity::Omega => "omega",
        }
    }

    pub fn from_name(s: &str) -> Option<Quantity> {
        Quantity::ALL.into_iter().find(|q| q.name() == s)
    }

    /// Velocity component axis, if this is a velocity component.
    pub fn velocity_axis(self) -> Option<Axis> {
        match self {
            Quantity::Ux => Some(Axis::X),
            Quantity::Uy => Some(Axis::Y),
            _ => None,
        }
    }
}

/// One scalar per active cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub quantity: Quantity,
    pub values: Vec<f64>,
}

impl CellField {
    pub fn new(quantity: Quantity, values: Vec<f64>) -> Self {
        CellField { quantity, values }
    }

    pub fn uniform(quantity: Quantity, n: usize, v: f64) -> Self {
        CellField::new(quantity, vec![v; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_mesh(&self, mesh: &StructuredMesh) -> Result<()> {
        if self.values.len() != mesh.n_cells() {
            return Err(Error::Mismatch(format!(
                "{} has {} values, mesh has {} cells",
                self.quantity.name(),
                self.values.len(),
                mesh.n_cells()
            )));
        }
        Ok(())
    }
}

/// One value per face; sign convention is owner to neighbour for internal
/// faces and outward for boundary faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub internal: Vec<f64>,
    pub boundary: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    FixedValue(f64),
    ZeroGradient,
    /// Zero normal velocity, zero-gradient tangential velocity.
    SlipWall,
    /// Zero velocity.
    NoSlipWall,
}

/// A condition reduced to what the discretization needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaceBc {
    Fixed(f64),
    ZeroGradient,
}

impl BoundaryCondition {
    /// Resolves against the quantity and the face-normal axis.
    pub fn resolve(self, quantity: Quantity, normal: Axis) -> FaceBc {
        match self {
            BoundaryCondition::FixedValue(v) => FaceBc::Fixed(v),
            BoundaryCondition::ZeroGradient => FaceBc::ZeroGradient,
            BoundaryCondition::NoSlipWall => match quantity.velocity_axis() {
                Some(_) => FaceBc::Fixed(0.0),
                None => FaceBc::ZeroGradient,
            },
            BoundaryCondition::SlipWall => match quantity.velocity_axis() {
                Some(a) if a == normal => FaceBc::Fixed(0.0),
                _ => FaceBc::ZeroGradient,
            },
        }
    }
}

/// Per-tag conditions for every solved quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub ux: BTreeMap<BoundaryTag, BoundaryCondition>,
    pub uy: BTreeMap<BoundaryTag, BoundaryCondition>,
    pub p: BTreeMap<BoundaryTag, BoundaryCondition>,
    pub k: BTreeMap<BoundaryTag, BoundaryCondition>,
    pub omega: BTreeMap<BoundaryTag, BoundaryCondition>,
}

impl BoundaryConditions {
    /// Inlet on the left, outlet on the right, slip side walls, no-slip
    /// obstacle.
    pub fn channel(u_in: f64, k_in: f64, omega_in: f64, omega_wall: f64) -> Self {
        use BoundaryCondition::*;
        use BoundaryTag::*;
        let map = |items: [(BoundaryTag, BoundaryCondition); 4]| items.into_iter().collect();
        BoundaryConditions {
            ux: map([
                (Inlet, FixedValue(u_in)),
                (Outlet, ZeroGradient),
                (Wall, SlipWall),
                (Obstacle, NoSlipWall),
            ]),
            uy: map([
                (Inlet, FixedValue(0.0)),
                (Outlet, ZeroGradient),
                (Wall, SlipWall),
                (Obstacle, NoSlipWall),
            ]),
            p: map([
                (Inlet, ZeroGradient),
                (Outlet, FixedValue(0.0)),
                (Wall, ZeroGradient),
                (Obstacle, ZeroGradient),
            ]),
            k: map([
                (Inlet, FixedValue(k_in)),
                (Outlet, ZeroGradient),
                (Wall, ZeroGradient),
                (Obstacle, FixedValue(0.0)),
            ]),
            omega: map([
                (Inlet, FixedValue(omega_in)),
                (Outlet, ZeroGradient),
                (Wall, ZeroGradient),
                (Obstacle, FixedValue(omega_wall)),
            ]),
        }
    }

    /// All walls no-slip, pressure floating.
    pub fn closed_box() -> Self {
        use BoundaryCondition::*;
        let map = |bc: BoundaryCondition| {
            BoundaryTag::ALL
                .into_iter()
                .map(|t| (t, bc))
                .collect::<BTreeMap<_, _>>()
        };
        BoundaryConditions {
            ux: map(NoSlipWall),
            uy: map(NoSlipWall),
            p: map(ZeroGradient),
            k: map(ZeroGradient),
            omega: map(ZeroGradient),
        }
    }

    pub fn for_quantity(&self, q: Quantity) -> &BTreeMap<BoundaryTag, BoundaryCondition> {
        match q {
            Quantity::Ux => &self.ux,
            Quantity::Uy => &self.uy,
            Quantity::P => &self.p,
            Quantity::K => &self.k,
            Quantity::Omega => &self.omega,
        }
    }

    /// Every boundary tag present in the mesh must have one condition per
    /// quantity.
    pub fn validate(&self, mesh: &StructuredMesh) -> Result<()> {
        for q in Quantity::ALL {
            let map = self.for_quantity(q);
            for tag in BoundaryTag::ALL {
                if mesh.has_tag(tag) && !map.contains_key(&tag) {
                    return Err(Error::Boundary(format!(
                        "no condition for {} on {:?} boundary",
                        q.name(),
                        tag
                    )));
                }
            }
            for (tag, bc) in map {
                if let BoundaryCondition::FixedValue(v) = bc {
                    if !v.is_finite() {
                        return Err(Error::Boundary(format!(
                            "non-finite value for {} on {:?}",
                            q.name(),
                            tag
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per boundary face resolved conditions for `q`.
    pub fn resolve(&self, mesh: &StructuredMesh, q: Quantity) -> Result<Vec<FaceBc>> {
        let map = self.for_quantity(q);
        mesh.boundary_faces()
            .iter()
            .map(|b| {
                map.get(&b.tag)
                    .map(|bc| bc.resolve(q, b.side.axis()))
                    .ok_or_else(|| {
                        Error::Boundary(format!(
                            "no condition for {} on {:?} boundary",
                            q.name(),
                            b.tag
                        ))
                    })
            })
            .collect()
    }

    /// True when some boundary fixes the pressure level.
    pub fn pressure_is_anchored(&self, mesh: &StructuredMesh) -> bool {
        mesh.boundary_faces().iter().any(|b| {
            matches!(
                self.p
                    .get(&b.tag)
                    .map(|bc| bc.resolve(Quantity::P, b.side.axis())),
                Some(FaceBc::Fixed(_))
            )
        })
    }
}

/// Boundary face values of `field`: fixed faces carry the set value,
/// zero-gradient faces the adjacent cell value.
pub fn apply_boundary(
    field: &CellField,
    mesh: &StructuredMesh,
    bcs: &BoundaryConditions,
) -> Result<Vec<f64>> {
    field.check_mesh(mesh)?;
    let resolved = bcs.resolve(mesh, field.quantity)?;
    Ok(mesh
        .boundary_faces()
        .iter()
        .zip(resolved)
        .map(|(b, bc)| match bc {
            FaceBc::Fixed(v) => v,
            FaceBc::ZeroGradient => field.values[b.cell],
        })
        .collect())
}

/// Solution fields at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub ux: CellField,
    pub uy: CellField,
    pub p: CellField,
    pub k: CellField,
    pub omega: CellField,
}

impl State {
    pub fn uniform(n: usize, ux: f64, uy: f64, p: f64, k: f64, omega: f64) -> State {
        State {
            ux: CellField::uniform(Quantity::Ux, n, ux),
            uy: CellField::uniform(Quantity::Uy, n, uy),
            p: CellField::uniform(Quantity::P, n, p),
            k: CellField::uniform(Quantity::K, n, k),
            omega: CellField::uniform(Quantity::Omega, n, omega),
        }
    }

    pub fn field(&self, q: Quantity) -> &CellField {
        match q {
            Quantity::Ux => &self.ux,
            Quantity::Uy => &self.uy,
            Quantity::P => &self.p,
            Quantity::K => &self.k,
            Quantity::Omega => &self.omega,
        }
    }

    pub fn field_mut(&mut self, q: Quantity) -> &mut CellField {
        match q {
            Quantity::Ux => &mut self.ux,
            Quantity::Uy => &mut self.uy,
            Quantity::P => &mut self.p,
            Quantity::K => &mut self.k,
            Quantity::Omega => &mut self.omega,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.ux.len()
    }

    pub fn check_mesh(&self, mesh: &StructuredMesh) -> Result<()> {
        for q in Quantity::ALL {
            self.field(q).check_mesh(mesh)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        Quantity::ALL.iter().all(|&q| self.field(q).is_finite())
    }

    /// Largest absolute difference over all fields.
    pub fn max_abs_diff(&self, other: &State) -> f64 {
        Quantity::ALL
            .iter()
            .flat_map(|&q| {
                self.field(q)
                    .values
                    .iter()
                    .zip(&other.field(q).values)
                    .map(|(a, b)| (a - b).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn kinetic_energy(&self, cell_area: f64) -> f64 {
        self.ux
            .values
            .iter()
            .zip(&self.uy.values)
            .map(|(u, v)| 0.5 * (u * u + v * v) * cell_area)
            .sum()
    }
}

/// Velocity normalization scale: max |u| over the snapshot, or 1 for an
/// all-zero field.
pub fn velocity_scale(u: &[f64]) -> f64 {
    let m = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `u / max|u|`; values land in [-1, 1] with signs preserved. Returns the
/// normalized field and the scale used.
pub fn normalize_velocity(u: &CellField) -> (CellField, f64) {
    let s = velocity_scale(&u.values);
    (
        CellField::new(u.quantity, u.values.iter().map(|v| v / s).collect()),
        s,
    )
}

/// `p - p_ref`.
pub fn normalize_pressure(p: &CellField, p_ref: f64) -> CellField {
    CellField::new(p.quantity, p.values.iter().map(|v| v - p_ref).collect())
}

pub fn denormalize_pressure(p: &CellField, p_ref: f64) -> CellField {
    CellField::new(p.quantity, p.values.iter().map(|v| v + p_ref).collect())
}
