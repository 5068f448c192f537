//! Classical face interpolation schemes and the gradient-ratio machinery.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::discretization::{BoundaryData, Topology};
use crate::error::{Error, Result};
use crate::fields::{BoundaryConditions, CellField};
use crate::grid::StructuredMesh;

/// Threshold below which a ratio denominator counts as zero.
pub const R_EPS: f64 = 1e-12;
pub const R_MIN: f64 = 0.0;
pub const R_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Upwind,
    Linear,
    TvdMinmod,
    TvdVanleer,
    DeepConvection,
}

impl SchemeKind {
    pub const CLASSICAL: [SchemeKind; 4] = [
        SchemeKind::Upwind,
        SchemeKind::Linear,
        SchemeKind::TvdMinmod,
        SchemeKind::TvdVanleer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Upwind => "upwind",
            SchemeKind::Linear => "linear",
            SchemeKind::TvdMinmod => "tvd_minmod",
            SchemeKind::TvdVanleer => "tvd_vanleer",
            SchemeKind::DeepConvection => "deep_convection",
        }
    }

    pub fn is_neural(self) -> bool {
        self == SchemeKind::DeepConvection
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::CLASSICAL
            .into_iter()
            .chain([SchemeKind::DeepConvection])
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// Minmod limiter `max(0, min(1, r))`.
pub fn minmod(r: f64) -> f64 {
    r.clamp(0.0, 1.0)
}

/// Van Leer limiter `(r + |r|) / (1 + |r|)`.
pub fn van_leer(r: f64) -> f64 {
    (r + r.abs()) / (1.0 + r.abs())
}

/// Scalar gradient ratio with the degenerate-denominator convention and
/// clipping.
pub fn ratio(u_up: f64, u_p: f64, u_down: f64) -> f64 {
    let (num, den) = (u_p - u_up, u_down - u_p);
    if den.abs() < R_EPS {
        if num.abs() < R_EPS {
            1.0
        } else {
            R_MAX
        }
    } else {
        (num / den).clamp(R_MIN, R_MAX)
    }
}

/// Per-face upwind (P), downwind (D) and far-upwind (U) indices into
/// `cells ++ boundary faces`, chosen by the flux sign.
#[derive(Debug, Clone)]
pub struct Direction {
    pub up: Arc<Vec<u32>>,
    pub down: Arc<Vec<u32>>,
    pub far: Arc<Vec<u32>>,
    pub positive: Arc<Vec<bool>>,
}

impl Direction {
    pub fn from_flux(topo: &Topology, flux: &[f64]) -> Direction {
        let positive: Vec<bool> = flux.iter().map(|f| *f >= 0.0).collect();
        let pick = |a: &[u32], b: &[u32]| -> Vec<u32> {
            positive
                .iter()
                .enumerate()
                .map(|(i, &p)| if p { a[i] } else { b[i] })
                .collect()
        };
        Direction {
            up: Arc::new(pick(&topo.owner, &topo.neighbour)),
            down: Arc::new(pick(&topo.neighbour, &topo.owner)),
            far: Arc::new(pick(&topo.far_owner, &topo.far_neighbour)),
            positive: Arc::new(positive),
        }
    }
}

/// Upwind face value.
pub fn upwind_values(tape: &Tape, dir: &Direction, phi: &Var) -> Var {
    tape.gather(phi, Arc::clone(&dir.up))
}

/// Clipped gradient ratio per face along the face-normal axis.
pub fn compute_r_var(tape: &Tape, dir: &Direction, phi: &Var, phi_b: &Var) -> Var {
    let ext = tape.concat(&[phi, phi_b]);
    let p = tape.gather(&ext, Arc::clone(&dir.up));
    let d = tape.gather(&ext, Arc::clone(&dir.down));
    let u = tape.gather(&ext, Arc::clone(&dir.far));
    tape.ratio_clip(&tape.sub(&p, &u), &tape.sub(&d, &p), R_EPS, R_MIN, R_MAX)
}

fn limiter_var(tape: &Tape, kind: SchemeKind, r: &Var) -> Var {
    match kind {
        SchemeKind::TvdMinmod => tape.clamp(r, 0.0, 1.0),
        // r is already clipped to [0, 2] so |r| = r
        SchemeKind::TvdVanleer => tape.div(&tape.scale(r, 2.0), &tape.offset(r, 1.0)),
        _ => unreachable!("not a limited scheme"),
    }
}

/// Face value minus the upwind value for a classical scheme; the quantity
/// moved to the right-hand side by deferred correction.
pub fn classical_correction(
    tape: &Tape,
    dir: &Direction,
    kind: SchemeKind,
    phi: &Var,
    phi_b: &Var,
) -> Result<Option<Var>> {
    match kind {
        SchemeKind::Upwind => Ok(None),
        SchemeKind::Linear => {
            let p = tape.gather(phi, Arc::clone(&dir.up));
            let d = tape.gather(phi, Arc::clone(&dir.down));
            Ok(Some(tape.scale(&tape.sub(&d, &p), 0.5)))
        }
        SchemeKind::TvdMinmod | SchemeKind::TvdVanleer => {
            let r = compute_r_var(tape, dir, phi, phi_b);
            let psi = limiter_var(tape, kind, &r);
            let p = tape.gather(phi, Arc::clone(&dir.up));
            let d = tape.gather(phi, Arc::clone(&dir.down));
            Ok(Some(tape.mul(&tape.scale(&psi, 0.5), &tape.sub(&d, &p))))
        }
        SchemeKind::DeepConvection => Err(Error::Invalid(
            "deep_convection face values come from the neural scheme".into(),
        )),
    }
}

/// Face values of a classical scheme.
pub fn face_values_var(
    tape: &Tape,
    dir: &Direction,
    kind: SchemeKind,
    phi: &Var,
    phi_b: &Var,
) -> Result<Var> {
    let up = upwind_values(tape, dir, phi);
    Ok(match classical_correction(tape, dir, kind, phi, phi_b)? {
        Some(c) => tape.add(&up, &c),
        None => up,
    })
}

/// Gradient ratios of both velocity components per internal face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRatio {
    pub r_x: Vec<f64>,
    pub r_y: Vec<f64>,
}

/// Face values of `u` under a classical scheme, upwinded by `flux`.
pub fn interpolate_face(
    mesh: &StructuredMesh,
    bcs: &BoundaryConditions,
    u: &CellField,
    flux: &[f64],
    kind: SchemeKind,
) -> Result<Vec<f64>> {
    u.check_mesh(mesh)?;
    let topo = Topology::new(mesh);
    if flux.len() != topo.n_faces {
        return Err(Error::Mismatch(format!(
            "flux has {} values, mesh has {} internal faces",
            flux.len(),
            topo.n_faces
        )));
    }
    let bd = BoundaryData::new(mesh, bcs, u.quantity)?;
    let tape = Tape::inactive();
    let phi = Var::constant(u.values.clone());
    let phi_b = bd.values(&tape, &phi);
    let dir = Direction::from_flux(&topo, flux);
    Ok(face_values_var(&tape, &dir, kind, &phi, &phi_b)?.to_vec())
}

/// Clipped ratios for both velocity components.
pub fn compute_r(
    mesh: &StructuredMesh,
    bcs: &BoundaryConditions,
    ux: &CellField,
    uy: &CellField,
    flux: &[f64],
) -> Result<FaceRatio> {
    let topo = Topology::new(mesh);
    let dir = Direction::from_flux(&topo, flux);
    let tape = Tape::inactive();
    let one = |u: &CellField| -> Result<Vec<f64>> {
        u.check_mesh(mesh)?;
        let bd = BoundaryData::new(mesh, bcs, u.quantity)?;
        let phi = Var::constant(u.values.clone());
        let phi_b = bd.values(&tape, &phi);
        Ok(compute_r_var(&tape, &dir, &phi, &phi_b).to_vec())
    };
    Ok(FaceRatio {
        r_x: one(ux)?,
        r_y: one(uy)?,
    })
}

/// `u_P + psi(r) (u_D - u_P) / 2` for one face.
pub fn tvd_face_value(u_up: f64, u_p: f64, u_down: f64, limiter: fn(f64) -> f64) -> f64 {
    let r = ratio(u_up, u_p, u_down);
    u_p + 0.5 * limiter(r) * (u_down - u_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Quantity;
    use crate::grid::{build_mesh, MeshSpec, SideTags};
    use proptest::prelude::*;

    fn mesh8() -> StructuredMesh {
        build_mesh(&MeshSpec {
            nx: 8,
            ny: 4,
            lx: 8.0,
            ly: 4.0,
            obstacle: None,
            sides: SideTags::default(),
        })
        .unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ratio(0.0, 1.0, 2.0), 1.0);
        assert_eq!(ratio(0.0, 1.0, 1.0), 2.0);
        assert_eq!(ratio(3.0, 3.0, 3.0), 1.0);
        assert_eq!(ratio(0.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn limiter_examples() {
        assert_eq!(tvd_face_value(5.0, 2.0, 7.0, minmod), 2.0); // r < 0 -> upwind
        assert_eq!(van_leer(1.0), 1.0);
        assert_eq!(tvd_face_value(0.0, 1.0, 2.0, van_leer), 1.5);
        assert_eq!(minmod(0.0), 0.0);
        // smooth linear data is reproduced exactly by both limiters
        for lim in [minmod as fn(f64) -> f64, van_leer] {
            assert_eq!(tvd_face_value(1.0, 2.0, 3.0, lim), 2.5);
            assert_eq!(tvd_face_value(4.0, 4.0, 4.0, lim), 4.0);
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::CLASSICAL
            .into_iter()
            .chain([SchemeKind::DeepConvection])
        {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("quick".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn interpolate_examples() {
        let m = mesh8();
        let bcs = BoundaryConditions::channel(1.0, 1e-4, 1.0, 1.0);
        let topo = Topology::new(&m);
        let mut v = vec![0.0; 32];
        v[0] = 2.0;
        v[1] = 5.0;
        let u = CellField::new(Quantity::Ux, v);
        let flux = vec![1.0; topo.n_faces];
        let up = interpolate_face(&m, &bcs, &u, &flux, SchemeKind::Upwind).unwrap();
        let lin = interpolate_face(&m, &bcs, &u, &flux, SchemeKind::Linear).unwrap();
        assert_eq!(up[0], 2.0);
        assert_eq!(lin[0], 3.5);
        let back =
            interpolate_face(&m, &bcs, &u, &vec![-1.0; topo.n_faces], SchemeKind::Upwind).unwrap();
        assert_eq!(back[0], 5.0);
    }

    #[test]
    fn constant_field_reproduced() {
        let m = mesh8();
        let bcs = BoundaryConditions::closed_box();
        let topo = Topology::new(&m);
        let u = CellField::uniform(Quantity::P, 32, 1.7);
        let flux: Vec<f64> = (0..topo.n_faces).map(|i| (i as f64 * 0.7).sin()).collect();
        for k in SchemeKind::CLASSICAL {
            let f = interpolate_face(&m, &bcs, &u, &flux, k).unwrap();
            assert!(f.iter().all(|v| (*v - 1.7).abs() < 1e-15), "{k}");
        }
    }

    #[test]
    fn deep_convection_needs_network() {
        let m = mesh8();
        let bcs = BoundaryConditions::closed_box();
        let u = CellField::uniform(Quantity::Ux, 32, 0.0);
        let topo = Topology::new(&m);
        assert!(interpolate_face(
            &m,
            &bcs,
            &u,
            &vec![0.0; topo.n_faces],
            SchemeKind::DeepConvection
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn r_is_clipped(v in prop::collection::vec(-3.0f64..3.0, 32),
                        f in prop::collection::vec(-1.0f64..1.0, 52)) {
            let m = mesh8();
            let bcs = BoundaryConditions::channel(1.0, 1e-4, 1.0, 1.0);
            let ux = CellField::new(Quantity::Ux, v.clone());
            let uy = CellField::new(Quantity::Uy, v.iter().rev().cloned().collect());
            let r = compute_r(&m, &bcs, &ux, &uy, &f).unwrap();
            for x in r.r_x.iter().chain(&r.r_y) {
                prop_assert!((0.0..=2.0).contains(x));
            }
        }

        #[test]
        fn upwind_within_neighbours(v in prop::collection::vec(-3.0f64..3.0, 32),
                                    f in prop::collection::vec(-1.0f64..1.0, 52)) {
            let m = mesh8();
            let bcs = BoundaryConditions::closed_box();
            let topo = Topology::new(&m);
            let u = CellField::new(Quantity::Ux, v.clone());
            let up = interpolate_face(&m, &bcs, &u, &f, SchemeKind::Upwind).unwrap();
            for i in 0..topo.n_faces {
                let (a, b) = (v[topo.owner[i] as usize], v[topo.neighbour[i] as usize]);
                prop_assert!(up[i] >= a.min(b) && up[i] <= a.max(b));
            }
        }

        #[test]
        fn tvd_bounded_by_neighbours(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
            for lim in [minmod as fn(f64) -> f64, van_leer] {
                let f = tvd_face_value(a, b, c, lim);
                prop_assert!(f >= b.min(c) - 1e-12 && f <= b.max(c) + 1e-12);
            }
        }
    }
}
