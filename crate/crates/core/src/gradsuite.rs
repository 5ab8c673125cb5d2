//! The full gradient-check table: every differentiable tape op, both
//! modulators and both training losses.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::app::{AppModulatorConfig, AppearanceModWeights, QUERY_FEATURES};
use crate::attention;
use crate::emotion::{masked_token_var, EMOTION_DIMS};
use crate::error::Result;
use crate::geo::{GeoModulatorConfig, GeoModulatorWeights};
use crate::gradcheck::grad_check_with_faults;
use crate::head::{make_default_template, TemplateVars};
use crate::params::Bound;
use crate::render::{self, Camera};
use crate::tape::{Faults, Tape, Var};
use crate::tensor::Tensor;
use crate::train::{app_loss_var, geo_loss_var, GeoLossWeights};

/// Pass threshold on the worst relative error.
pub const SUITE_TOLERANCE: f64 = 1e-5;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub pass: bool,
}

type Case = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Gen(ChaCha8Rng);

impl Gen {
    fn t(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| self.0.random_range(-1.0..1.0)).collect())
    }

    /// Entries bounded away from the kinks at `kinks`.
    fn away(&mut self, rows: usize, cols: usize, kinks: &[f64]) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| loop {
                let x: f64 = self.0.random_range(-1.0..1.0);
                if kinks.iter().all(|k| (x - k).abs() > 0.05) {
                    break x;
                }
            })
            .collect();
        Tensor::matrix(rows, cols, data)
    }

    fn positive(&mut self, rows: usize, cols: usize) -> Tensor {
        self.t(rows, cols).map(|v| 0.5 + v.abs())
    }
}

/// Contracts an arbitrary-shape output to a scalar with fixed weights so
/// every output coordinate contributes a distinct amount.
fn contract(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn op(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Box::new(move |t, v| {
        let out = f(t, v)?;
        contract(t, out)
    })
}

fn cases() -> Result<Vec<(&'static str, Case, Vec<Tensor>)>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(0x6772_6164));
    let mut rows: Vec<(&'static str, Case, Vec<Tensor>)> = vec![
        ("add", op(|t, v| t.add(v[0], v[1])), vec![g.t(3, 4), g.t(3, 4)]),
        ("sub", op(|t, v| t.sub(v[0], v[1])), vec![g.t(3, 4), g.t(3, 4)]),
        ("mul", op(|t, v| t.mul(v[0], v[1])), vec![g.t(3, 4), g.t(3, 4)]),
        ("scalar_mul", op(|t, v| t.mul(v[0], v[1])), vec![Tensor::scalar(0.7), g.t(3, 4)]),
        ("scale", op(|t, v| t.scale(v[0], -1.7)), vec![g.t(3, 4)]),
        ("tanh", op(|t, v| t.tanh(v[0])), vec![g.t(3, 4)]),
        ("relu", op(|t, v| t.relu(v[0])), vec![g.away(3, 4, &[0.0])]),
        ("matmul", op(|t, v| t.matmul(v[0], v[1])), vec![g.t(3, 5), g.t(5, 2)]),
        ("transpose", op(|t, v| t.transpose(v[0])), vec![g.t(3, 4)]),
        ("reshape", op(|t, v| t.reshape(v[0], &[2, 6])), vec![g.t(3, 4)]),
        ("softmax_rows", op(|t, v| t.softmax_rows(v[0])), vec![g.t(3, 5)]),
        ("sum", Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0])), vec![g.t(3, 4)]),
        ("mean", Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0])), vec![g.t(3, 4)]),
        ("sumsq", Box::new(|t: &mut Tape, v: &[Var]| t.sumsq(v[0])), vec![g.t(3, 4)]),
        ("add_row", op(|t, v| t.add_row(v[0], v[1])), vec![g.t(3, 4), g.t(1, 4)]),
        ("mul_row", op(|t, v| t.mul_row(v[0], v[1])), vec![g.t(3, 4), g.t(1, 4)]),
        ("concat_rows", op(|t, v| t.concat_rows(&[v[0], v[1]])), vec![g.t(2, 3), g.t(4, 3)]),
        ("concat_cols", op(|t, v| t.concat_cols(&[v[0], v[1]])), vec![g.t(3, 2), g.t(3, 4)]),
        ("slice_cols", op(|t, v| t.slice_cols(v[0], 1, 2)), vec![g.t(3, 4)]),
        ("slice_rows", op(|t, v| t.slice_rows(v[0], 1, 2)), vec![g.t(4, 3)]),
        (
            "gather_rows",
            op(|t, v| t.gather_rows(v[0], Arc::new(vec![2, 0, 2, 1, 2]))),
            vec![g.t(3, 4)],
        ),
        ("layer_norm_rows", op(|t, v| t.layer_norm_rows(v[0], 1e-5)), vec![g.t(3, 5)]),
        ("clamp", op(|t, v| t.clamp(v[0], -0.5, 0.5)), vec![g.away(3, 4, &[-0.5, 0.5])]),
        ("rodrigues", op(|t, v| t.rodrigues(v[0])), vec![g.t(1, 3)]),
        ("rodrigues_small_angle", op(|t, v| t.rodrigues(v[0])), vec![g.t(1, 3).scale(1e-4)]),
        ("masked_token", op(|t, v| masked_token_var(t, v[0], v[1])), vec![g.t(4, EMOTION_DIMS), g.t(1, EMOTION_DIMS)]),
        (
            "attention",
            op(|t, v| attention::multi_head(t, v[0], v[1], v[2], 2)),
            vec![g.t(3, 4), g.t(5, 4), g.t(5, 4)],
        ),
    ];

    let template = Arc::new(make_default_template(3, 64, 4)?);
    let p = template.param_dims();
    {
        let tpl = template.clone();
        let rig = Arc::new(tpl.rig());
        let v = tpl.vertex_count();
        rows.push((
            "articulate_jaw",
            op(move |t, x| t.articulate_jaw(x[0], x[1], rig.clone())),
            vec![g.t(2, 3 * v).scale(0.5), g.t(2, 3).scale(0.3)],
        ));
    }

    // Geometry modulator, with a nonzero head so every path carries gradient.
    let gcfg = GeoModulatorConfig {
        layers: 2,
        d_model: 8,
        group_size: Some(3),
        heads: 2,
        ff_hidden: 6,
    };
    let mut geo = GeoModulatorWeights::init(&gcfg, p, 4, 11)?;
    *geo.params.get_mut("head").expect("head exists") = g.t(8, 3).scale(0.3);
    let geo_store = geo.params.clone();
    let mut inputs = vec![g.t(2, p).scale(0.3), g.t(4, EMOTION_DIMS).scale(0.5)];
    inputs.extend(geo_store.iter().map(|(_, t)| t.clone()));
    rows.push((
        "geo_modulator",
        op(move |t, x| {
            let bound = Bound::from_vars(&geo_store, &x[2..])?;
            geo.forward(t, &bound, x[0], x[1])
        }),
        inputs,
    ));

    // Appearance decoder on random queries.
    let acfg = AppModulatorConfig {
        layers: 2,
        d_model: 4,
        heads: 2,
        ff_hidden: 4,
    };
    let mut app = AppearanceModWeights::init(&acfg, 4, 12)?;
    *app.params.get_mut("head").expect("head exists") = g.t(4, 3).scale(0.1);
    let app_store = app.params.clone();
    let mut inputs = vec![
        g.t(6, 3).map(|c| 0.5 + 0.2 * c),
        g.t(6, 3),
        g.t(4, EMOTION_DIMS).scale(0.5),
        g.t(5, QUERY_FEATURES),
    ];
    inputs.extend(app_store.iter().map(|(_, t)| t.clone()));
    rows.push((
        "app_modulator",
        op(move |t, x| {
            let bound = Bound::from_vars(&app_store, &x[4..])?;
            let a = app.encode_regions(t, &bound, x[0], x[1])?;
            let ae = app.emotion_tokens(t, &bound, x[2])?;
            let combined = t.concat_rows(&[a, ae])?;
            let base = t.gather_rows(x[0], Arc::new(vec![0, 1, 2, 3, 4]))?;
            app.decode(t, &bound, combined, x[3], base)
        }),
        inputs,
    ));

    // Geometry loss: parameter and surface terms.
    let target = g.t(2, p).scale(0.3);
    let target_vertices = crate::head::synthesize_sequence(&template, &target)?;
    let tpl = template.clone();
    rows.push((
        "geo_loss",
        Box::new(move |t: &mut Tape, x: &[Var]| {
            let tv = TemplateVars::record(t, &tpl)?;
            geo_loss_var(t, &tv, x[0], &target, &target_vertices, &GeoLossWeights::default())
        }),
        vec![g.t(2, p).scale(0.3)],
    ));

    // Appearance loss through the splat renderer with frozen assignment.
    let cam = Camera::front(16, 1.0)?;
    let assign = render::rasterize(&template.mean_vertices, &cam)?;
    let v = template.vertex_count();
    let target_px = g.positive(cam.pixels(), 3).scale(0.5);
    rows.push((
        "app_loss",
        Box::new(move |t: &mut Tape, x: &[Var]| {
            let px = render::shade_on_tape(t, x[0], &assign)?;
            app_loss_var(t, px, &target_px)
        }),
        vec![g.positive(v, 3).scale(0.5)],
    ));
    Ok(rows)
}

/// Runs every check; `faults` lets tests inject a broken adjoint.
pub fn run_suite(faults: Faults) -> Result<Vec<SuiteRow>> {
    let mut out = Vec::new();
    for (name, f, inputs) in cases()? {
        let r = grad_check_with_faults(f, &inputs, EPS, faults)?;
        out.push(SuiteRow {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            coordinates: r.coordinates,
            pass: r.max_rel_err < SUITE_TOLERANCE,
        });
    }
    Ok(out)
}
