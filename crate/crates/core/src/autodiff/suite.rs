//! Per-op gradient checks, run by the `gradcheck` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{gradient_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Per-op tolerance (64-bit).
pub const OP_TOLERANCE: f64 = 1e-4;
/// Whole-model tolerance (64-bit).
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < self.tolerance
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// `n * mse(y, target)`: a scalar whose gradient w.r.t. `y` is O(1) per element.
pub(crate) fn probe(tape: &mut Tape<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(y).len() as f64;
    let m = tape.mse(y, target)?;
    Ok(tape.scale(m, n))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    build: OpFn,
}

fn case(name: &'static str, inputs: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|s| s.to_vec()).collect(), build: Box::new(build) }
}

fn cases() -> Vec<OpCase> {
    vec![
        case("conv2d 3x3 s1 p1", &[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        case("conv2d 3x3 s2 p1", &[&[1, 2, 7, 7], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        case("conv2d 1x1", &[&[2, 4, 3, 3], &[2, 4, 1, 1], &[2]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0)),
        case("max_pool2d", &[&[2, 2, 6, 6]], |t, v| t.max_pool2d(v[0], 2, 2)),
        case("global_avg_pool", &[&[2, 3, 4, 5]], |t, v| t.global_avg_pool(v[0])),
        case("global_max_pool", &[&[2, 3, 4, 5]], |t, v| t.global_max_pool(v[0])),
        case("fully_connected", &[&[3, 5], &[4, 5], &[4]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        case("relu", &[&[3, 7]], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", &[&[3, 7]], |t, v| Ok(t.sigmoid(v[0]))),
        case("add", &[&[2, 5], &[2, 5]], |t, v| t.add(v[0], v[1])),
        case("concat", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("upsample_nearest", &[&[1, 2, 3, 3]], |t, v| t.upsample_nearest(v[0], 2)),
        case("channel_mul", &[&[2, 3, 4, 4], &[2, 3]], |t, v| t.channel_mul(v[0], v[1])),
        case("softmax_cross_entropy", &[&[4, 3]], |t, v| {
            let target = Tensor::from_f64(&[4, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1., 0.2, 0.3, 0.5])?;
            t.softmax_cross_entropy(v[0], &target)
        }),
        case("mse", &[&[6]], |t, v| {
            let target = Tensor::from_f64(&[6], &[0.1, -0.4, 2.0, 0.0, 1.5, -1.0])?;
            t.mse(v[0], &target)
        }),
        case("bce_with_logits", &[&[8]], |t, v| {
            let targets = [1., 0., 1., 0., 0., 1., 0., 0.];
            let weights = [1., 1., 0.5, 2., 0., 1., 1., 0.25];
            t.bce_with_logits(v[0], &targets, &weights)
        }),
        case("smooth_l1", &[&[8]], |t, v| {
            let target = [0.3, -2.0, 0.1, 4.0, -0.2, 0.0, 1.1, -3.0];
            let weights = [1., 1., 1., 0., 1., 2., 1., 1.];
            t.smooth_l1(v[0], &target, &weights)
        }),
    ]
}

/// Gradient check of every primitive op.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in cases() {
        let mut store = ParamStore::new();
        let ids: Vec<_> = c.inputs.iter().enumerate().map(|(i, s)| store.add(format!("in{i}"), randn(&mut rng, s))).collect();
        // shape of the output, to draw a matching probe target
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<_> = ids.iter().map(|&id| t.param(&store, id)).collect();
            let y = (c.build)(&mut t, &vars)?;
            t.value(y).shape().to_vec()
        };
        let target = randn(&mut rng, &out_shape);
        let scalar_out = out_shape == [1];
        let build = &c.build;
        let report = gradient_check(
            &store,
            |t, s| {
                let vars: Vec<_> = ids.iter().map(|&id| t.param(s, id)).collect();
                let y = build(t, &vars)?;
                if scalar_out {
                    Ok(y)
                } else {
                    probe(t, y, &target)
                }
            },
            GradCheckOptions { seed, ..Default::default() },
        )?;
        out.push(SuiteEntry { name: c.name.to_string(), report, tolerance: OP_TOLERANCE });
    }
    Ok(out)
}

/// Renders suite results as an aligned table.
pub fn format_table(entries: &[SuiteEntry]) -> String {
    let mut s = format!("{:<28} {:>14} {:>8} {:>7} {:>10}  {}\n", "op", "max_rel_err", "checked", "kinks", "tolerance", "status");
    for e in entries {
        s.push_str(&format!(
            "{:<28} {:>14.3e} {:>8} {:>7} {:>10.0e}  {}\n",
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            e.report.skipped_kinks,
            e.tolerance,
            if e.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
