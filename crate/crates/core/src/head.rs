//! Linear expression blendshapes with one skinned jaw joint.
//!
//! A [`HeadTemplate`] is a small stand-in for a parametric head model:
//! vertices move linearly with the expression coefficients, then vertices
//! with a nonzero skin weight rotate about the jaw pivot.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rotation::{self, Mat3};
use crate::tape::{skin_vertex, JawRig, Tape, Var};
use crate::tensor::Tensor;

pub const JAW_DIMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Brow,
    Eye,
    Nose,
    Mouth,
    Jaw,
    Other,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Brow,
        Region::Eye,
        Region::Nose,
        Region::Mouth,
        Region::Jaw,
        Region::Other,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Region> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Brow => "brow",
            Region::Eye => "eye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::Jaw => "jaw",
            Region::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTemplate {
    /// `V × 3` rest positions.
    pub mean_vertices: Tensor,
    /// `E × 3V`: row `k` is expression direction `k`, vertex-major xyz.
    pub exp_basis: Tensor,
    pub jaw_pivot: [f64; 3],
    pub jaw_axis_frame: Mat3,
    pub skin_weights: Vec<f64>,
    pub region_labels: Vec<Region>,
}

/// Driving parameters of one frame: expression coefficients and jaw axis-angle.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub exp: Vec<f64>,
    pub jaw: [f64; 3],
}

impl HeadParams {
    pub fn zeros(e: usize) -> Self {
        Self {
            exp: vec![0.0; e],
            jaw: [0.0; 3],
        }
    }

    /// Splits a concatenated `[exp ‖ jaw]` vector.
    pub fn from_concat(p: &[f64], e: usize) -> Result<Self> {
        if p.len() != e + JAW_DIMS {
            return Err(Error::Dim {
                what: "parameter vector length",
                expected: e + JAW_DIMS,
                actual: p.len(),
            });
        }
        let jaw = [p[e], p[e + 1], p[e + 2]];
        let norm = (jaw[0] * jaw[0] + jaw[1] * jaw[1] + jaw[2] * jaw[2]).sqrt();
        if norm > std::f64::consts::PI {
            return Err(Error::Range(format!("jaw rotation norm {norm} exceeds pi")));
        }
        Ok(Self {
            exp: p[..e].to_vec(),
            jaw,
        })
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut p = self.exp.clone();
        p.extend_from_slice(&self.jaw);
        p
    }

    pub fn len(&self) -> usize {
        self.exp.len() + JAW_DIMS
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Renderable output: positions plus per-vertex RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct AvatarState {
    pub vertices: Tensor,
    pub colors: Tensor,
}

impl AvatarState {
    /// Builds a state, clamping colors into `[0, 1]`.
    pub fn new(vertices: Tensor, colors: Tensor) -> Result<Self> {
        if vertices.shape() != colors.shape() || vertices.cols() != 3 || !vertices.is_matrix() {
            return Err(Error::shape("avatar_state", vertices.shape(), colors.shape()));
        }
        if !vertices.is_finite() {
            return Err(Error::NonFinite("avatar vertices".into()));
        }
        Ok(Self {
            vertices,
            colors: colors.map(|c| c.clamp(0.0, 1.0)),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.rows()
    }
}

impl HeadTemplate {
    pub fn vertex_count(&self) -> usize {
        self.mean_vertices.rows()
    }

    pub fn expr_dims(&self) -> usize {
        self.exp_basis.rows()
    }

    pub fn param_dims(&self) -> usize {
        self.expr_dims() + JAW_DIMS
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let e = self.expr_dims();
        if v < 4 || e < 1 {
            return Err(Error::Domain(format!("template needs V >= 4 and E >= 1, got V={v}, E={e}")));
        }
        if self.mean_vertices.shape() != [v, 3] || self.exp_basis.shape() != [e, 3 * v] {
            return Err(Error::shape("template", self.mean_vertices.shape(), self.exp_basis.shape()));
        }
        if self.skin_weights.len() != v || self.region_labels.len() != v {
            return Err(Error::Dim {
                what: "per-vertex template arrays",
                expected: v,
                actual: self.skin_weights.len().min(self.region_labels.len()),
            });
        }
        let f = &self.jaw_axis_frame;
        let ftf = rotation::mat_mul(&rotation::transpose(f), f);
        for (i, row) in ftf.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (x - expect).abs() > 1e-10 {
                    return Err(Error::Domain("jaw axis frame is not orthonormal".into()));
                }
            }
        }
        for (w, r) in self.skin_weights.iter().zip(&self.region_labels) {
            if !(0.0..=1.0).contains(w) {
                return Err(Error::Domain(format!("skin weight {w} outside [0, 1]")));
            }
            if matches!(r, Region::Brow | Region::Eye) && *w != 0.0 {
                return Err(Error::Domain("brow/eye vertices must not follow the jaw".into()));
            }
        }
        Ok(())
    }

    pub fn rig(&self) -> JawRig {
        JawRig {
            pivot: self.jaw_pivot,
            frame: self.jaw_axis_frame,
            weights: self.skin_weights.clone(),
        }
    }

    /// Indices of the vertices carrying each region label.
    pub fn region_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); Region::COUNT];
        for (i, r) in self.region_labels.iter().enumerate() {
            out[r.index()].push(i);
        }
        out
    }

    /// `K × V` matrix whose product with per-vertex rows gives per-region means.
    pub fn region_average(&self) -> Tensor {
        let v = self.vertex_count();
        let members = self.region_members();
        let mut m = Tensor::zeros(&[Region::COUNT, v]);
        for (r, idx) in members.iter().enumerate() {
            let w = 1.0 / idx.len().max(1) as f64;
            for &i in idx {
                m.set(r, i, w);
            }
        }
        m
    }

    /// `V × K` one-hot region membership.
    pub fn region_onehot(&self) -> Tensor {
        let v = self.vertex_count();
        let mut m = Tensor::zeros(&[v, Region::COUNT]);
        for (i, r) in self.region_labels.iter().enumerate() {
            m.set(i, r.index(), 1.0);
        }
        m
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(axis_angle: [f64; 3]) -> Mat3 {
    rotation::rodrigues(axis_angle)
}

/// Vertices for one frame of parameters (`V × 3`).
pub fn synthesize_vertices(template: &HeadTemplate, params: &HeadParams) -> Result<Tensor> {
    let e = template.expr_dims();
    if params.exp.len() != e {
        return Err(Error::Dim {
            what: "expression coefficients",
            expected: e,
            actual: params.exp.len(),
        });
    }
    let v = template.vertex_count();
    let mut blend = template.mean_vertices.data().to_vec();
    for (k, &psi) in params.exp.iter().enumerate() {
        if psi == 0.0 {
            continue;
        }
        for (b, d) in blend.iter_mut().zip(template.exp_basis.row(k)) {
            *b += psi * d;
        }
    }
    let r = rotation::conjugate(&template.jaw_axis_frame, &rotation::rodrigues(params.jaw));
    let mut out = Vec::with_capacity(3 * v);
    for i in 0..v {
        let b = [blend[3 * i], blend[3 * i + 1], blend[3 * i + 2]];
        out.extend(skin_vertex(&r, b, &template.jaw_pivot, template.skin_weights[i]));
    }
    Ok(Tensor::matrix(v, 3, out))
}

/// Template constants recorded once per tape for batched synthesis.
pub struct TemplateVars {
    basis: Var,
    mean: Var,
    rig: Arc<JawRig>,
    expr_dims: usize,
}

impl TemplateVars {
    pub fn record(tape: &mut Tape, template: &HeadTemplate) -> Result<Self> {
        let v = template.vertex_count();
        let basis = tape.constant(template.exp_basis.clone());
        let mean = tape.constant(template.mean_vertices.reshape(&[1, 3 * v])?);
        Ok(Self {
            basis,
            mean,
            rig: Arc::new(template.rig()),
            expr_dims: template.expr_dims(),
        })
    }

    /// Differentiable synthesis: `F × (E+3)` parameters to `F × 3V` vertices.
    pub fn synthesize(&self, tape: &mut Tape, params: Var) -> Result<Var> {
        let shape = tape.value(params).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.expr_dims + JAW_DIMS {
            return Err(Error::Dim {
                what: "parameter vector length",
                expected: self.expr_dims + JAW_DIMS,
                actual: *shape.last().unwrap_or(&0),
            });
        }
        let exp = tape.slice_cols(params, 0, self.expr_dims)?;
        let jaw = tape.slice_cols(params, self.expr_dims, JAW_DIMS)?;
        let offsets = tape.matmul(exp, self.basis)?;
        let blend = tape.add_row(offsets, self.mean)?;
        tape.articulate_jaw(blend, jaw, self.rig.clone())
    }
}

/// Vertices for every frame of a `F × (E+3)` sequence, as `F × 3V`.
pub fn synthesize_sequence(template: &HeadTemplate, params: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = TemplateVars::record(&mut tape, template)?;
    let p = tape.constant(params.clone());
    let out = vars.synthesize(&mut tape, p)?;
    Ok(tape.value(out).clone())
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn classify(x: f64, y: f64) -> Region {
    if y > 0.45 {
        Region::Brow
    } else if y > 0.1 && x.abs() > 0.15 {
        Region::Eye
    } else if y > -0.2 && x.abs() <= 0.2 {
        Region::Nose
    } else if y > -0.65 && y <= -0.2 && x.abs() < 0.45 {
        Region::Mouth
    } else if y <= -0.65 {
        Region::Jaw
    } else {
        Region::Other
    }
}

/// Deterministic pseudo-face on the front of an ellipsoid.
///
/// Every stored value is representable in `f32`, so templates survive the
/// `.f32` blob container bit-exactly.
pub fn make_default_template(seed: u64, v: usize, e: usize) -> Result<HeadTemplate> {
    if v < 64 || e < 4 {
        return Err(Error::Domain(format!("default template needs V >= 64 and E >= 4, got V={v}, E={e}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let semi = [0.75, 1.0, 0.6];
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());

    let mut pos = Vec::with_capacity(3 * v);
    let mut labels = Vec::with_capacity(v);
    let mut weights = Vec::with_capacity(v);
    for i in 0..v {
        // Area-uniform spiral over the hemisphere facing +z, with a small jitter.
        let nz = 1.0 - (i as f64 + 0.5) / v as f64;
        let phi = i as f64 * golden + rng.random_range(-0.1..0.1);
        let rxy = (1.0 - nz * nz).sqrt();
        let (ux, uy) = (rxy * phi.cos(), rxy * phi.sin());
        let p = [f32_round(semi[0] * ux), f32_round(semi[1] * uy), f32_round(semi[2] * nz)];
        let region = classify(ux, uy);
        let w = match region {
            Region::Mouth | Region::Jaw | Region::Other if uy < -0.1 => ((-0.1 - uy) / 0.55).clamp(0.0, 1.0),
            _ => 0.0,
        };
        pos.extend(p);
        labels.push(region);
        weights.push(f32_round(w));
    }

    let targets = [Region::Brow, Region::Eye, Region::Mouth];
    let members: Vec<Vec<usize>> = {
        let mut m = vec![Vec::new(); Region::COUNT];
        for (i, r) in labels.iter().enumerate() {
            m[r.index()].push(i);
        }
        m
    };
    if let Some(r) = Region::ALL.iter().find(|r| members[r.index()].is_empty()) {
        return Err(Error::Domain(format!("region {} received no vertices", r.name())));
    }

    let sigma2 = 2.0 * 0.35 * 0.35;
    let mut basis = Vec::with_capacity(e * 3 * v);
    for k in 0..e {
        let region = targets[k % targets.len()];
        let pool = &members[region.index()];
        let c = pool[rng.random_range(0..pool.len())];
        let center = [pos[3 * c], pos[3 * c + 1], pos[3 * c + 2]];
        let dir: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let mix: [f64; 9] = std::array::from_fn(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.3 * z });
        let mut col = Vec::with_capacity(3 * v);
        for i in 0..v {
            let p = [pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]];
            let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
            let g = (-d2 / sigma2).exp();
            for a in 0..3 {
                let field = dir[a] + mix[3 * a] * p[0] + mix[3 * a + 1] * p[1] + mix[3 * a + 2] * p[2];
                col.push(g * field);
            }
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = rng.random_range(0.5..2.0);
        basis.extend(col.iter().map(|x| f32_round(x * target / norm)));
    }

    let template = HeadTemplate {
        mean_vertices: Tensor::matrix(v, 3, pos),
        exp_basis: Tensor::matrix(e, 3 * v, basis),
        jaw_pivot: [0.0, 0.1, -0.3],
        jaw_axis_frame: rotation::IDENTITY,
        skin_weights: weights,
        region_labels: labels,
    };
    template.validate()?;
    Ok(template)
}
