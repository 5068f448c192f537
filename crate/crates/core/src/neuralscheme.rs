//! The learned convection interpolator.
//!
//! For every internal face a 12-cell patch is read from the normalized
//! state, passed through the encoder matching the face orientation and then
//! through the shared generator. The generator emits 11 raw values per
//! velocity component, mapped by an affine transform onto weight vectors
//! whose entries sum to one.
//!
//! Canonical stencil order (ordering version 1): slot `k = t * 4 + a`, with
//! `t` in 0..3 the transverse offset -1, 0, +1 in global coordinates and
//! `a` in 0..4 the position along the face normal counted from upstream:
//! far-upwind U, upwind P, downwind D, far-downwind. P is slot 5, D slot 6.
//! The 60 network inputs are five channel blocks of 12 slots each:
//! `r_x, r_y, ux_norm, uy_norm, p_norm`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, NO_INDEX};
use crate::discretization::{BoundaryData, Topology};
use crate::error::{Error, Result};
use crate::grid::{Axis, Neighbour, Side, StructuredMesh};
use crate::schemes::{Direction, R_EPS, R_MAX, R_MIN};

pub const STENCIL: usize = 12;
pub const CHANNELS: usize = 5;
pub const INPUT: usize = STENCIL * CHANNELS;
pub const RAW: usize = STENCIL - 1;
pub const OUTPUT: usize = 2 * RAW;
pub const FAR_SLOT: usize = 4;
pub const UP_SLOT: usize = 5;
pub const DOWN_SLOT: usize = 6;
pub const ORDERING_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: f64 = 0.3;

/// Layer widths. Encoders map 60 inputs through `encoder`; the generator
/// maps the last encoder width through `generator` to 22 outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: Vec<usize>,
    pub generator: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder: vec![53, 49, 45, 41],
            generator: vec![31, 32],
        }
    }
}

/// One dense layer's position inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Architecture {
    /// Small network used for finite-difference gradient sweeps.
    pub fn reduced() -> Self {
        Architecture {
            encoder: vec![1],
            generator: vec![2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.encoder.iter().chain(&self.generator).any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "invalid network widths: encoder {:?}, generator {:?}",
                self.encoder, self.generator
            )));
        }
        Ok(())
    }

    fn widths(&self) -> (Vec<usize>, Vec<usize>) {
        let mut enc = vec![INPUT];
        enc.extend(&self.encoder);
        let mut gen = vec![*self.encoder.last().unwrap_or(&INPUT)];
        gen.extend(&self.generator);
        gen.push(OUTPUT);
        (enc, gen)
    }

    /// Encoder x, encoder y and generator layers, in storage order.
    pub fn layers(&self) -> [Vec<Layer>; 3] {
        let (enc, gen) = self.widths();
        let mut off = 0;
        let mut build = |w: &[usize]| {
            w.windows(2)
                .map(|p| {
                    let l = Layer {
                        inp: p[0],
                        out: p[1],
                        w: off,
                        b: off + p[0] * p[1],
                    };
                    off += p[0] * p[1] + p[1];
                    l
                })
                .collect::<Vec<_>>()
        };
        let ex = build(&enc);
        let ey = build(&enc);
        let g = build(&gen);
        [ex, ey, g]
    }

    pub fn n_params(&self) -> usize {
        let (enc, gen) = self.widths();
        let count = |w: &[usize]| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
        2 * count(&enc) + count(&gen)
    }
}

/// Flat trainable parameters with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases; the last generator layer is
    /// scaled by `final_scale` so the initial weights sit near `b`.
    pub fn init(arch: Architecture, seed: u64, final_scale: f64) -> Result<MlpParams> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; arch.n_params()];
        let [ex, ey, g] = arch.layers();
        let last = g.len() - 1;
        for (gi, layers) in [ex, ey, g].iter().enumerate() {
            for (li, l) in layers.iter().enumerate() {
                let lim = (6.0 / (l.inp + l.out) as f64).sqrt();
                let s = if gi == 2 && li == last {
                    final_scale
                } else {
                    1.0
                };
                for v in &mut theta[l.w..l.w + l.inp * l.out] {
                    *v = rng.gen_range(-lim..lim) * s;
                }
            }
        }
        Ok(MlpParams { arch, theta })
    }

    pub fn check(&self) -> Result<()> {
        self.arch.validate()?;
        if self.theta.len() != self.arch.n_params() {
            return Err(Error::Format(format!(
                "parameter vector has {} entries, architecture needs {}",
                self.theta.len(),
                self.arch.n_params()
            )));
        }
        if let Some(i) = self.theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("parameter {i} is not finite")));
        }
        Ok(())
    }
}

fn mlp(tape: &Tape, theta: &Var, layers: &[Layer], x: &Var) -> Var {
    let mut h = x.clone();
    for l in layers {
        let w = tape.slice(theta, l.w, l.inp * l.out);
        let b = tape.slice(theta, l.b, l.out);
        h = tape.tanh(&tape.dense(&h, &w, &b, l.inp, l.out));
    }
    h
}

/// `w = A x + b` with A an orthonormal basis of the sum-zero subspace and b
/// the midpoint weights on P and D.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintTransform {
    /// Row-major STENCIL x RAW.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Default for ConstraintTransform {
    fn default() -> Self {
        Self::new()
    }
}

impl ConstraintTransform {
    pub fn new() -> Self {
        // Helmert columns: v_k = (1, .., 1, -k, 0, ..) / sqrt(k (k + 1))
        let mut a = vec![0.0; STENCIL * RAW];
        for k in 1..STENCIL {
            let s = 1.0 / ((k * (k + 1)) as f64).sqrt();
            for i in 0..k {
                a[i * RAW + (k - 1)] = s;
            }
            a[k * RAW + (k - 1)] = -(k as f64) * s;
        }
        let mut b = vec![0.0; STENCIL];
        b[UP_SLOT] = 0.5;
        b[DOWN_SLOT] = 0.5;
        ConstraintTransform { a, b }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), RAW);
        (0..STENCIL)
            .map(|i| self.b[i] + (0..RAW).map(|k| self.a[i * RAW + k] * x[k]).sum::<f64>())
            .collect()
    }

    /// Raw output reproducing weights `w` (which must sum to one).
    pub fn raw_for(&self, w: &[f64]) -> Vec<f64> {
        (0..RAW)
            .map(|k| {
                (0..STENCIL)
                    .map(|i| self.a[i * RAW + k] * (w[i] - self.b[i]))
                    .sum()
            })
            .collect()
    }

    /// Raw output whose weights select the upwind cell.
    pub fn upwind_raw(&self) -> Vec<f64> {
        let mut e = vec![0.0; STENCIL];
        e[UP_SLOT] = 1.0;
        self.raw_for(&e)
    }
}

/// Mesh-dependent index tables for patch extraction.
#[derive(Debug, Clone)]
pub struct PatchIndex {
    pub n_cells: usize,
    pub n_faces: usize,
    pub n_x_faces: usize,
    /// Stencil cells per face for non-negative and negative flux.
    stencil: [Vec<[Option<u32>; STENCIL]>; 2],
    mask: [Vec<bool>; 2],
    /// Per-cell neighbour on each side as index into `cells ++ boundary`.
    side: [Arc<Vec<u32>>; 4],
}

impl PatchIndex {
    pub fn new(mesh: &StructuredMesh) -> PatchIndex {
        let n = mesh.n_cells();
        let faces = mesh.internal_faces();
        let mut stencil = [
            Vec::with_capacity(faces.len()),
            Vec::with_capacity(faces.len()),
        ];
        let mut mask = [
            Vec::with_capacity(faces.len()),
            Vec::with_capacity(faces.len()),
        ];
        for f in faces {
            let (i, j) = mesh.ij(f.owner);
            let (i, j) = (i as isize, j as isize);
            for (d, positive) in [true, false].into_iter().enumerate() {
                // positions along the normal relative to the owner, upstream first
                let along: [isize; 4] = if positive {
                    [-1, 0, 1, 2]
                } else {
                    [2, 1, 0, -1]
                };
                let mut cells = [None; STENCIL];
                for (t, dt) in [-1isize, 0, 1].into_iter().enumerate() {
                    for (a, da) in along.into_iter().enumerate() {
                        let (ci, cj) = match f.axis {
                            Axis::X => (i + da, j + dt),
                            Axis::Y => (i + dt, j + da),
                        };
                        cells[t * 4 + a] = mesh.cell_at(ci, cj).map(|c| c as u32);
                    }
                }
                mask[d].push(cells.iter().any(|c| c.is_none()));
                stencil[d].push(cells);
            }
        }
        let side = Side::ALL.map(|s| {
            Arc::new(
                (0..n)
                    .map(|c| match mesh.neighbour(c, s) {
                        Neighbour::Cell(k) => k as u32,
                        Neighbour::Boundary(b) => (n + b) as u32,
                    })
                    .collect::<Vec<_>>(),
            )
        });
        PatchIndex {
            n_cells: n,
            n_faces: faces.len(),
            n_x_faces: mesh.n_x_faces(),
            stencil,
            mask,
            side,
        }
    }

    pub fn stencil(&self, face: usize, positive: bool) -> &[Option<u32>; STENCIL] {
        &self.stencil[(!positive) as usize][face]
    }

    /// True when any stencil cell lies outside the fluid domain.
    pub fn is_boundary_patch(&self, face: usize, positive: bool) -> bool {
        self.mask[(!positive) as usize][face]
    }

    fn face_is_x(&self, face: usize) -> bool {
        face < self.n_x_faces
    }

    /// Gather table into the 11-block channel vector (see [`cell_channels`]).
    fn input_table(&self, dir: &Direction) -> (Arc<Vec<u32>>, Arc<Vec<u32>>) {
        let n = self.n_cells as u32;
        let mut tx = Vec::with_capacity(self.n_x_faces * INPUT);
        let mut ty = Vec::with_capacity((self.n_faces - self.n_x_faces) * INPUT);
        for f in 0..self.n_faces {
            let pos = dir.positive[f];
            let cells = self.stencil(f, pos);
            let axis = if self.face_is_x(f) { 0 } else { 1 };
            let r_block = axis * 2 + (!pos) as u32;
            let blocks = [r_block, 4 + r_block, 8, 9, 10];
            let out = if self.face_is_x(f) { &mut tx } else { &mut ty };
            for blk in blocks {
                for c in cells {
                    out.push(match c {
                        Some(c) => blk * n + c,
                        None => NO_INDEX,
                    });
                }
            }
        }
        (Arc::new(tx), Arc::new(ty))
    }

    /// Rows `2f` (ux) and `2f + 1` (uy) of stencil indices into `ux ++ uy`;
    /// missing cells repeat the upwind cell.
    fn velocity_table(&self, dir: &Direction) -> Arc<Vec<u32>> {
        let n = self.n_cells as u32;
        let mut t = Vec::with_capacity(self.n_faces * 2 * STENCIL);
        for f in 0..self.n_faces {
            let cells = self.stencil(f, dir.positive[f]);
            let p = cells[UP_SLOT].expect("upwind cell exists");
            for off in [0, n] {
                for c in cells {
                    t.push(c.unwrap_or(p) + off);
                }
            }
        }
        Arc::new(t)
    }
}

/// Per-cell channels as 11 blocks of length n:
/// `r(ux) along x for +/- flow, r(ux) along y +/-, r(uy) x +/-, r(uy) y +/-,
/// ux_norm, uy_norm, p_norm`.
pub fn cell_channels(
    tape: &Tape,
    index: &PatchIndex,
    ux: &Var,
    uy: &Var,
    p: &Var,
    ux_b: &Var,
    uy_b: &Var,
    p_ref: f64,
) -> Var {
    let ratios = |u: &Var, ub: &Var| -> Vec<Var> {
        let ext = tape.concat(&[u, ub]);
        let mut out = Vec::with_capacity(4);
        for (minus, plus) in [(0, 1), (2, 3)] {
            let m = tape.gather(&ext, Arc::clone(&index.side[minus]));
            let pl = tape.gather(&ext, Arc::clone(&index.side[plus]));
            let back = tape.sub(u, &m);
            let fwd = tape.sub(&pl, u);
            // flow towards +: U = minus side, D = plus side
            out.push(tape.ratio_clip(&back, &fwd, R_EPS, R_MIN, R_MAX));
            // flow towards -: numerator and denominator swap (signs cancel)
            out.push(tape.ratio_clip(&fwd, &back, R_EPS, R_MIN, R_MAX));
        }
        out
    };
    let rx = ratios(ux, ux_b);
    let ry = ratios(uy, uy_b);
    let uxn = tape.div(ux, &tape.norm_scale(ux));
    let uyn = tape.div(uy, &tape.norm_scale(uy));
    let pn = tape.offset(p, -p_ref);
    let mut parts: Vec<&Var> = rx.iter().chain(&ry).collect();
    parts.extend([&uxn, &uyn, &pn]);
    tape.concat(&parts)
}

/// How raw generator outputs are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum RawMode {
    Network,
    /// Every face uses this 22-value raw output.
    Frozen(Vec<f64>),
}

/// Network parameters, transform and inference options.
#[derive(Debug, Clone)]
pub struct NeuralScheme {
    pub params: MlpParams,
    pub transform: ConstraintTransform,
    pub mode: RawMode,
    /// Bounding limiter on boundary patches; `None` disables it.
    pub lambda: Option<f64>,
    pub p_ref: f64,
}

impl NeuralScheme {
    pub fn new(params: MlpParams) -> Self {
        NeuralScheme {
            params,
            transform: ConstraintTransform::new(),
            mode: RawMode::Network,
            lambda: Some(DEFAULT_LAMBDA),
            p_ref: 0.0,
        }
    }

    /// Outputs frozen so that every face takes its upwind value.
    pub fn upwind_frozen(params: MlpParams) -> Self {
        let mut s = NeuralScheme::new(params);
        let u = s.transform.upwind_raw();
        s.mode = RawMode::Frozen([u.clone(), u].concat());
        s
    }
}

/// Intermediate results of one evaluation.
pub struct NeuralOutput {
    /// Face values minus upwind values, per component.
    pub delta_x: Var,
    pub delta_y: Var,
    /// Interleaved face values (`2f` x, `2f + 1` y).
    pub face: Var,
    /// Interleaved weights, `2 * n_faces` rows of 12.
    pub weights: Var,
    pub limited: usize,
}

/// Evaluates the modified inverse operator for all internal faces.
#[allow(clippy::too_many_arguments)]
pub fn modified_inverse_var(
    tape: &Tape,
    scheme: &NeuralScheme,
    theta: &Var,
    index: &PatchIndex,
    topo: &Topology,
    dir: &Direction,
    state: [&Var; 3],
    bc: [&BoundaryData; 2],
) -> Result<NeuralOutput> {
    let [ux, uy, p] = state;
    let nf = index.n_faces;
    let nxf = index.n_x_faces;
    let raw = match &scheme.mode {
        RawMode::Frozen(r) => {
            if r.len() != OUTPUT {
                return Err(Error::Invalid(format!(
                    "frozen output needs {OUTPUT} values"
                )));
            }
            Var::constant(r.iter().copied().cycle().take(nf * OUTPUT).collect())
        }
        RawMode::Network => {
            let ux_b = bc[0].values(tape, ux);
            let uy_b = bc[1].values(tape, uy);
            let ch = cell_channels(tape, index, ux, uy, p, &ux_b, &uy_b, scheme.p_ref);
            let (tx, ty) = index.input_table(dir);
            let [ex, ey, g] = scheme.params.arch.layers();
            let hx = mlp(tape, theta, &ex, &tape.gather(&ch, tx));
            let hy = mlp(tape, theta, &ey, &tape.gather(&ch, ty));
            let enc = if nxf == nf {
                hx
            } else if nxf == 0 {
                hy
            } else {
                tape.concat(&[&hx, &hy])
            };
            let raw = mlp(tape, theta, &g, &enc);
            if let Some(i) = raw.value().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite network output at face {} (patch input of that face is {})",
                    i / OUTPUT,
                    if index.is_boundary_patch(i / OUTPUT, dir.positive[i / OUTPUT]) {
                        "a boundary patch"
                    } else {
                        "interior"
                    }
                )));
            }
            raw
        }
    };
    let ct = &scheme.transform;
    let w = tape.dense(
        &raw,
        &Var::constant(ct.a.clone()),
        &Var::constant(ct.b.clone()),
        RAW,
        STENCIL,
    );
    let uxy = tape.concat(&[ux, uy]);
    let stencil = tape.gather(&uxy, index.velocity_table(dir));
    let face = tape.row_sum(&tape.mul(&w, &stencil), STENCIL);
    let n = topo.n as u32;
    let up_idx: Vec<u32> = dir.up.iter().flat_map(|&c| [c, c + n]).collect();
    let up = tape.gather(&uxy, Arc::new(up_idx));
    let mut delta = tape.sub(&face, &up);
    let mut limited = 0;
    if let Some(lambda) = scheme.lambda {
        let fv = face.value();
        let (uv, ov) = (up.value(), uxy.value());
        let mut keep = vec![true; 2 * nf];
        for f in 0..nf {
            if !index.is_boundary_patch(f, dir.positive[f]) {
                continue;
            }
            let (o, nb) = (topo.owner[f], topo.neighbour[f]);
            for c in 0..2 {
                let off = c as u32 * n;
                let (lo, hi) =
                    limiter_bounds(ov[(o + off) as usize], ov[(nb + off) as usize], lambda);
                let v = fv[2 * f + c];
                if v < lo || v > hi {
                    keep[2 * f + c] = false;
                    limited += 1;
                }
                debug_assert!(uv[2 * f + c] >= lo && uv[2 * f + c] <= hi);
            }
        }
        if limited > 0 {
            delta = tape.select(Arc::new(keep), &delta, &Var::scalar(0.0));
        }
    }
    let even: Vec<u32> = (0..nf as u32).map(|f| 2 * f).collect();
    let odd: Vec<u32> = (0..nf as u32).map(|f| 2 * f + 1).collect();
    Ok(NeuralOutput {
        delta_x: tape.gather(&delta, Arc::new(even)),
        delta_y: tape.gather(&delta, Arc::new(odd)),
        face,
        weights: w,
        limited,
    })
}

/// `[min - lambda |min|, max + lambda |max|]` of the two face cells.
pub fn limiter_bounds(u_owner: f64, u_neighbour: f64, lambda: f64) -> (f64, f64) {
    let lo = u_owner.min(u_neighbour);
    let hi = u_owner.max(u_neighbour);
    (lo - lambda * lo.abs(), hi + lambda * hi.abs())
}

/// Replaces out-of-bounds values on masked faces by the upwind value.
pub fn bound_boundary_faces(
    u_face: &[f64],
    u_owner: &[f64],
    u_neighbour: &[f64],
    u_upwind: &[f64],
    lambda: f64,
    mask: &[bool],
) -> Vec<f64> {
    (0..u_face.len())
        .map(|f| {
            if !mask[f] {
                return u_face[f];
            }
            let (lo, hi) = limiter_bounds(u_owner[f], u_neighbour[f], lambda);
            if u_face[f] < lo || u_face[f] > hi {
                u_upwind[f]
            } else {
                u_face[f]
            }
        })
        .collect()
}

/// One patch in plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub values: Vec<f64>,
    pub boundary: bool,
    pub axis: Axis,
}

/// Patches of every internal face from already normalized channels.
#[allow(clippy::too_many_arguments)]
pub fn extract_patches(
    mesh: &StructuredMesh,
    index: &PatchIndex,
    dir: &Direction,
    ux: &[f64],
    uy: &[f64],
    p: &[f64],
    ux_b: &[f64],
    uy_b: &[f64],
    p_ref: f64,
) -> Vec<Patch> {
    let tape = Tape::inactive();
    let c = |v: &[f64]| Var::constant(v.to_vec());
    let ch = cell_channels(
        &tape,
        index,
        &c(ux),
        &c(uy),
        &c(p),
        &c(ux_b),
        &c(uy_b),
        p_ref,
    );
    let (tx, ty) = index.input_table(dir);
    let gx = tape.gather(&ch, tx);
    let gy = tape.gather(&ch, ty);
    let all: Vec<f64> = gx.value().iter().chain(gy.value()).copied().collect();
    all.chunks(INPUT)
        .enumerate()
        .map(|(f, v)| Patch {
            values: v.to_vec(),
            boundary: index.is_boundary_patch(f, dir.positive[f]),
            axis: mesh.internal_faces()[f].axis,
        })
        .collect()
}

/// Weights of a single patch: returns `(w_x, w_y)`.
pub fn generate_weights(
    patch: &Patch,
    params: &MlpParams,
    ct: &ConstraintTransform,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::inactive();
    let theta = Var::constant(params.theta.clone());
    let [ex, ey, g] = params.arch.layers();
    let enc = if patch.axis == Axis::X { ex } else { ey };
    let h = mlp(&tape, &theta, &enc, &Var::constant(patch.values.clone()));
    let raw = mlp(&tape, &theta, &g, &h);
    if raw.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite network output for patch {:?}",
            patch.values
        )));
    }
    Ok((ct.apply(&raw.value()[..RAW]), ct.apply(&raw.value()[RAW..])))
}

/// `sum_i w_i u_i`.
pub fn face_velocity(weights: &[f64], stencil: &[f64]) -> f64 {
    weights.iter().zip(stencil).map(|(w, u)| w * u).sum()
}

// ----- parameter file ---------------------------------------------------------

const MAGIC: &[u8; 8] = b"DCVPARAM";
pub const PARAM_FORMAT_VERSION: u32 = 1;

/// Extra values stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamMeta {
    /// Best loss recorded for these parameters, NaN if none.
    pub loss: f64,
    pub epoch: u64,
}

impl Default for ParamMeta {
    fn default() -> Self {
        ParamMeta {
            loss: f64::NAN,
            epoch: 0,
        }
    }
}

/// Little-endian layout: magic, format version, ordering version, joint
/// emission flag, encoder widths, generator widths, output width, parameter
/// count, parameters, loss, epoch.
pub fn encode_params(params: &MlpParams, meta: &ParamMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.theta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ORDERING_VERSION.to_le_bytes());
    out.push(1);
    for widths in [&params.arch.encoder, &params.arch.generator] {
        out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for w in widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(OUTPUT as u32).to_le_bytes());
    out.extend_from_slice(&(params.theta.len() as u64).to_le_bytes());
    for v in &params.theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&meta.loss.to_le_bytes());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("parameter file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(buf: &[u8]) -> Result<(MlpParams, ParamMeta)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a parameter file".into()));
    }
    let version = r.u32()?;
    if version != PARAM_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter format version {version}"
        )));
    }
    let ordering = r.u32()?;
    if ordering != ORDERING_VERSION {
        return Err(Error::Format(format!(
            "unsupported stencil ordering version {ordering}"
        )));
    }
    if r.take(1)?[0] != 1 {
        return Err(Error::Format("only joint x/y emission is supported".into()));
    }
    let mut widths = || -> Result<Vec<usize>> {
        let n = r.u32()? as usize;
        if n > 64 {
            return Err(Error::Format("implausible layer count".into()));
        }
        (0..n).map(|_| Ok(r.u32()? as usize)).collect()
    };
    let encoder = widths()?;
    let generator = widths()?;
    let arch = Architecture { encoder, generator };
    arch.validate().map_err(|e| Error::Format(e.to_string()))?;
    if r.u32()? as usize != OUTPUT {
        return Err(Error::Format("output width mismatch".into()));
    }
    let n = r.u64()? as usize;
    if n != arch.n_params() {
        return Err(Error::Format(format!(
            "file holds {n} parameters, architecture needs {}",
            arch.n_params()
        )));
    }
    let theta = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let meta = ParamMeta {
        loss: r.f64()?,
        epoch: r.u64()?,
    };
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes in parameter file".into()));
    }
    Ok((MlpParams { arch, theta }, meta))
}

pub fn save_params(path: &Path, params: &MlpParams, meta: &ParamMeta) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_params(params, meta))
        .map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(MlpParams, ParamMeta)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_params(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{BoundaryConditions, Quantity};
    use crate::grid::{build_mesh, MeshSpec, Rect, SideTags};
    use proptest::prelude::*;

    fn mesh(nx: usize, ny: usize, obstacle: Option<Rect>) -> StructuredMesh {
        build_mesh(&MeshSpec {
            nx,
            ny,
            lx: nx as f64,
            ly: ny as f64,
            obstacle,
            sides: SideTags::default(),
        })
        .unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Architecture::default().n_params(), 23_082);
        assert_eq!(Architecture::reduced().n_params(), 192);
        let [ex, ey, g] = Architecture::default().layers();
        assert_eq!(ex.len(), 4);
        assert_eq!(ey[0].w, ex[3].b + 41);
        assert_eq!(g.last().unwrap().out, OUTPUT);
    }

    #[test]
    fn transform_is_orthonormal_and_consistent() {
        let ct = ConstraintTransform::new();
        for k in 0..RAW {
            let col_sum: f64 = (0..STENCIL).map(|i| ct.a[i * RAW + k]).sum();
            assert!(col_sum.abs() < 1e-15);
            for l in 0..RAW {
                let d: f64 = (0..STENCIL)
                    .map(|i| ct.a[i * RAW + k] * ct.a[i * RAW + l])
                    .sum();
                assert!((d - (k == l) as u8 as f64).abs() < 1e-14);
            }
        }
        assert_eq!(ct.apply(&[0.0; RAW]), ct.b);
        let w = ct.apply(&ct.upwind_raw());
        for (i, v) in w.iter().enumerate() {
            let want = if i == UP_SLOT { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn interior_and_edge_patches() {
        let m = mesh(8, 8, None);
        let idx = PatchIndex::new(&m);
        // x face between (3,3) and (4,3)
        let f = m
            .internal_faces()
            .iter()
            .position(|f| f.axis == Axis::X && m.ij(f.owner) == (3, 3))
            .unwrap();
        assert!(idx.stencil(f, true).iter().all(|c| c.is_some()));
        assert!(!idx.is_boundary_patch(f, true));
        let st = idx.stencil(f, true);
        assert_eq!(st[UP_SLOT], Some(m.cell_at(3, 3).unwrap() as u32));
        assert_eq!(st[DOWN_SLOT], Some(m.cell_at(4, 3).unwrap() as u32));
        assert_eq!(st[FAR_SLOT], Some(m.cell_at(2, 3).unwrap() as u32));
        let st = idx.stencil(f, false);
        assert_eq!(st[UP_SLOT], Some(m.cell_at(4, 3).unwrap() as u32));
        assert_eq!(st[FAR_SLOT], Some(m.cell_at(5, 3).unwrap() as u32));
        // first x face touches the left edge
        assert!(idx.is_boundary_patch(0, true));
        assert!(idx.stencil(0, true)[FAR_SLOT].is_none());
    }

    #[test]
    fn zero_state_gives_zero_patches() {
        let m = mesh(8, 8, None);
        let idx = PatchIndex::new(&m);
        let topo = Topology::new(&m);
        let dir = Direction::from_flux(&topo, &vec![0.0; topo.n_faces]);
        let z = vec![0.0; 64];
        let zb = vec![0.0; topo.n_boundary];
        let patches = extract_patches(&m, &idx, &dir, &z, &z, &z, &zb, &zb, 0.0);
        // r of a flat field is 1 by convention (zero-filled cells stay 0);
        // every other channel is zero
        for p in &patches {
            for (k, v) in p.values.iter().enumerate() {
                if k < 2 * STENCIL {
                    assert!(*v == 0.0 || *v == 1.0);
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn limiter_cases() {
        assert_eq!(limiter_bounds(1.0, 2.0, 0.3), (0.7, 2.6));
        let out = bound_boundary_faces(
            &[3.0, 1.5],
            &[1.0, 1.0],
            &[2.0, 2.0],
            &[1.0, 1.0],
            0.3,
            &[true, true],
        );
        assert_eq!(out, vec![1.0, 1.5]);
        let out = bound_boundary_faces(&[0.2], &[0.0], &[0.0], &[0.0], 0.3, &[true]);
        assert_eq!(out, vec![0.0]);
        let out = bound_boundary_faces(&[9.0], &[1.0], &[2.0], &[1.0], 0.3, &[false]);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn param_file_round_trip() {
        let p = MlpParams::init(Architecture::reduced(), 7, 1e-3).unwrap();
        let meta = ParamMeta {
            loss: 12.5,
            epoch: 3,
        };
        let bytes = encode_params(&p, &meta);
        let (q, m) = decode_params(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[12] = 9;
        assert!(decode_params(&bad).is_err());
    }

    #[test]
    fn frozen_upwind_and_constant_reproduction() {
        let m = mesh(
            8,
            8,
            Some(Rect {
                x0: 3.0,
                x1: 5.0,
                y0: 3.0,
                y1: 5.0,
            }),
        );
        let topo = Topology::new(&m);
        let idx = PatchIndex::new(&m);
        let bcs = BoundaryConditions::channel(1.0, 1e-4, 1.0, 1.0);
        let bx = BoundaryData::new(&m, &bcs, Quantity::Ux).unwrap();
        let by = BoundaryData::new(&m, &bcs, Quantity::Uy).unwrap();
        let n = m.n_cells();
        let tape = Tape::inactive();
        let params = MlpParams::init(Architecture::reduced(), 1, 1.0).unwrap();
        let theta = Var::constant(params.theta.clone());
        let ux = Var::constant((0..n).map(|i| (i as f64 * 0.37).sin()).collect());
        let uy = Var::constant((0..n).map(|i| (i as f64 * 0.11).cos()).collect());
        let p = Var::constant(vec![0.1; n]);
        let flux: Vec<f64> = (0..topo.n_faces).map(|i| (i as f64 * 1.3).sin()).collect();
        let dir = Direction::from_flux(&topo, &flux);
        let frozen = NeuralScheme::upwind_frozen(params.clone());
        let out = modified_inverse_var(
            &tape,
            &frozen,
            &theta,
            &idx,
            &topo,
            &dir,
            [&ux, &uy, &p],
            [&bx, &by],
        )
        .unwrap();
        assert!(out
            .delta_x
            .value()
            .iter()
            .chain(out.delta_y.value())
            .all(|d| d.abs() < 1e-15));
        // constant velocity: every face reproduces it under the live network
        let mut live = NeuralScheme::new(params);
        live.lambda = None;
        let cx = Var::constant(vec![0.8; n]);
        let cy = Var::constant(vec![-0.3; n]);
        let out = modified_inverse_var(
            &tape,
            &live,
            &theta,
            &idx,
            &topo,
            &dir,
            [&cx, &cy, &p],
            [&bx, &by],
        )
        .unwrap();
        for (k, v) in out.face.value().iter().enumerate() {
            let want = if k % 2 == 0 { 0.8 } else { -0.3 };
            assert!((v - want).abs() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn limiter_output_in_bounds(uo in -3.0f64..3.0, un in -3.0f64..3.0, uf in -6.0f64..6.0, lam in 0.0f64..1.0) {
            let up = uo;
            let out = bound_boundary_faces(&[uf], &[uo], &[un], &[up], lam, &[true])[0];
            let (lo, hi) = limiter_bounds(uo, un, lam);
            prop_assert!(out >= lo && out <= hi);
            prop_assert!(up >= lo && up <= hi);
        }

        #[test]
        fn weights_sum_to_one(x in prop::collection::vec(-1.0f64..1.0, RAW)) {
            let ct = ConstraintTransform::new();
            let s: f64 = ct.apply(&x).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn identical_patches_identical_weights(seed in 0u64..100, v in prop::collection::vec(-1.0f64..1.0, INPUT)) {
            let params = MlpParams::init(Architecture::reduced(), seed, 1.0).unwrap();
            let ct = ConstraintTransform::new();
            let p = Patch { values: v, boundary: false, axis: Axis::Y };
            prop_assert_eq!(generate_weights(&p, &params, &ct).unwrap(), generate_weights(&p.clone(), &params, &ct).unwrap());
        }
    }
}
