//! Central finite-difference checks of every backward rule, evaluated in
//! `f64`.
//!
//! Each differentiable op is checked on its own with small random inputs,
//! then a whole network is checked end to end under each task loss.

use std::fmt::Write as _;

use crate::autodiff::{AutodiffError, Graph, NodeId, OpKind};
use crate::net::{MedNetwork, MedSpec, NetError, SkipMode};
use crate::rng::{Rng, Stream};
use crate::tasks::{loss_denoise, loss_flash, loss_inpaint, loss_sr, TaskError};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Gradient tensors whose largest entry is below this are compared
/// absolutely; f64 round-off in a central difference with step 1e-3 sits
/// around 1e-13.
pub const GRADIENT_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("gradcheck image size must be 1..=16 and divisible by {divisor}, got {size}")]
    Size { size: usize, divisor: usize },
}

type Result<T> = std::result::Result<T, GradcheckError>;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub spec: MedSpec,
    pub size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Corrupts this op's backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            spec: MedSpec::med(4, &[3, 2], SkipMode::IntraSkip, false).with_base_channels(2),
            size: 16,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    /// Scalar inputs compared.
    pub checked: usize,
    /// Scalar inputs excluded for straddling a leaky-ReLU kink.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub ops: Vec<CheckRow>,
    pub end_to_end: Vec<CheckRow>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn rows(&self) -> impl Iterator<Item = &CheckRow> {
        self.ops.iter().chain(&self.end_to_end)
    }

    pub fn passed(&self) -> bool {
        self.rows().all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&CheckRow> {
        self.rows()
            .filter(|r| r.max_rel_error >= self.tolerance)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut block = |title: &str, rows: &[CheckRow]| {
            let _ = writeln!(s, "{title}");
            for r in rows {
                let verdict = if r.max_rel_error < self.tolerance {
                    "ok"
                } else {
                    "FAIL"
                };
                let _ = writeln!(
                    s,
                    "  {:<22} max rel error {:.3e}  ({} inputs, {} at a kink)  {verdict}",
                    r.name, r.max_rel_error, r.checked, r.skipped
                );
            }
        };
        block("per-op", &self.ops);
        block("end-to-end", &self.end_to_end);
        let _ = writeln!(
            s,
            "{} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        );
        s
    }
}

/// Relative error of one gradient tensor:
/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, GRADIENT_FLOOR)`.
///
/// Normalizing by the tensor's scale rather than per element keeps entries
/// many orders below their neighbours from turning the O(step²) truncation
/// error into a spurious failure.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(GRADIENT_FLOOR, f64::max);
    diff / scale
}

/// Outcome of one [`compare`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Comparison {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±step` evaluations put some leaky-ReLU input on
    /// opposite sides of the kink; a central difference is meaningless there.
    pub skipped: usize,
}

impl Comparison {
    fn merge(&mut self, other: Comparison) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

fn kink_signs(g: &Graph<f64>) -> Vec<bool> {
    g.nodes_of(OpKind::LeakyRelu)
        .into_iter()
        .flat_map(|id| {
            let x = g.parents(id)[0];
            g.value(x)
                .data()
                .iter()
                .map(|&v| v > 0.0)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Compares backward against central differences for every element of
/// every input. `f` builds a scalar loss from the input nodes.
pub fn compare<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    fault: Option<OpKind>,
    f: F,
) -> Result<Comparison>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::<f64>::new();
    if let Some(op) = fault {
        g.inject_backward_fault(op);
    }
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("inputs track gradients").clone())
        .collect();

    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &ids)?;
        Ok((g.value(l).item(), kink_signs(&g)))
    };
    let mut out = Comparison::default();
    let mut vals = inputs.to_vec();
    for t in 0..vals.len() {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for i in 0..vals[t].numel() {
            let orig = vals[t].data()[i];
            vals[t].data_mut()[i] = orig + step;
            let (up, up_signs) = eval(&vals)?;
            vals[t].data_mut()[i] = orig - step;
            let (down, down_signs) = eval(&vals)?;
            vals[t].data_mut()[i] = orig;
            if up_signs != down_signs {
                out.skipped += 1;
                continue;
            }
            a.push(analytic[t].data()[i]);
            n.push((up - down) / (2.0 * step));
        }
        out.checked += a.len();
        out.max_rel_error = out.max_rel_error.max(rel_error(&a, &n));
    }
    Ok(out)
}

struct Sampler(Rng);

impl Sampler {
    fn tensor(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.uniform(lo, hi))
    }

    /// Values with magnitude in `[0.05, 1]`, clear of the leaky-ReLU kink.
    fn away_from_zero(&mut self, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.uniform(0.05, 1.0);
            if self.0.uniform(0.0, 1.0) < 0.5 {
                -m
            } else {
                m
            }
        })
    }

    fn mask(&mut self, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            if self.0.uniform(0.0, 1.0) < 0.3 {
                0.0
            } else {
                1.0
            }
        })
    }
}

/// `mse(y, target)` against a fixed random target, turning any tensor
/// output into a scalar with a non-trivial upstream gradient.
fn project(g: &mut Graph<f64>, y: NodeId, target: &Tensor<f64>) -> Result<NodeId> {
    let t = g.constant(target.clone());
    Ok(g.mse(y, t)?)
}

fn op_row(op: OpKind, s: &mut Sampler, step: f64, fault: Option<OpKind>) -> Result<CheckRow> {
    let mut total = Comparison::default();
    let mut run = |inputs: Vec<Tensor<f64>>,
                   f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>|
     -> Result<()> {
        total.merge(compare(&inputs, step, fault, f)?);
        Ok(())
    };
    let img = |c, h, w| Shape::image(c, h, w);
    match op {
        OpKind::Conv2d => {
            for (cin, cout, k, stride, hw) in [
                (3, 2, 3, 1, 5),
                (2, 3, 3, 2, 6),
                (4, 2, 1, 1, 4),
                (2, 2, 3, 2, 5),
            ] {
                let x = s.tensor(Shape::new(2, cin, hw, hw), -1.0, 1.0);
                let w = s.tensor(Shape::new(cout, cin, k, k), -0.5, 0.5);
                let b = s.tensor(img(cout, 1, 1), -0.5, 0.5);
                let out = hw.div_ceil(stride);
                let target = s.tensor(Shape::new(2, cout, out, out), -1.0, 1.0);
                run(vec![x, w, b], &|g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride)?;
                    project(g, y, &target)
                })?;
            }
        }
        OpKind::BatchNorm => {
            let x = s.tensor(img(3, 4, 4), -1.0, 1.0);
            let gamma = s.tensor(img(3, 1, 1), 0.5, 1.5);
            let beta = s.tensor(img(3, 1, 1), -0.5, 0.5);
            let target = s.tensor(img(3, 4, 4), -1.0, 1.0);
            run(vec![x, gamma, beta], &|g, ids| {
                let y = g.batch_norm(ids[0], ids[1], ids[2], 1e-5)?;
                project(g, y, &target)
            })?;
        }
        OpKind::LeakyRelu => {
            let x = s.away_from_zero(img(2, 4, 4));
            let target = s.tensor(img(2, 4, 4), -1.0, 1.0);
            run(vec![x], &|g, ids| {
                let y = g.leaky_relu(ids[0], 0.2)?;
                project(g, y, &target)
            })?;
        }
        OpKind::Sigmoid => {
            let x = s.tensor(img(2, 4, 4), -3.0, 3.0);
            let target = s.tensor(img(2, 4, 4), 0.0, 1.0);
            run(vec![x], &|g, ids| {
                let y = g.sigmoid(ids[0])?;
                project(g, y, &target)
            })?;
        }
        OpKind::UpsampleBilinear => {
            let x = s.tensor(img(2, 3, 4), -1.0, 1.0);
            let target = s.tensor(img(2, 6, 8), -1.0, 1.0);
            run(vec![x], &|g, ids| {
                let y = g.upsample_bilinear(ids[0], 2)?;
                project(g, y, &target)
            })?;
        }
        OpKind::DownsampleArea => {
            for f in [2, 4] {
                let x = s.tensor(img(2, 8, 8), -1.0, 1.0);
                let target = s.tensor(img(2, 8 / f, 8 / f), -1.0, 1.0);
                run(vec![x], &|g, ids| {
                    let y = g.downsample_area(ids[0], f)?;
                    project(g, y, &target)
                })?;
            }
        }
        OpKind::ConcatChannels => {
            let a = s.tensor(img(3, 4, 4), -1.0, 1.0);
            let b = s.tensor(img(2, 4, 4), -1.0, 1.0);
            let target = s.tensor(img(5, 4, 4), -1.0, 1.0);
            run(vec![a, b], &|g, ids| {
                let y = g.concat_channels(ids[0], ids[1])?;
                project(g, y, &target)
            })?;
        }
        OpKind::Mse => {
            let a = s.tensor(img(3, 4, 4), -1.0, 1.0);
            let b = s.tensor(img(3, 4, 4), -1.0, 1.0);
            run(vec![a, b], &|g, ids| Ok(g.mse(ids[0], ids[1])?))?;
        }
        OpKind::MaskedMse => {
            let a = s.tensor(img(3, 4, 4), -1.0, 1.0);
            let b = s.tensor(img(3, 4, 4), -1.0, 1.0);
            let m = s.mask(img(3, 4, 4));
            run(vec![a, b], &|g, ids| Ok(g.masked_mse(ids[0], ids[1], &m)?))?;
        }
        OpKind::Scale => {
            let x = s.tensor(img(2, 3, 3), -1.0, 1.0);
            let target = s.tensor(img(2, 3, 3), -1.0, 1.0);
            run(vec![x], &|g, ids| {
                let y = g.scale(ids[0], -1.7)?;
                project(g, y, &target)
            })?;
        }
        OpKind::Add => {
            let a = s.tensor(img(2, 3, 3), -1.0, 1.0);
            let b = s.tensor(img(2, 3, 3), -1.0, 1.0);
            let target = s.tensor(img(2, 3, 3), -1.0, 1.0);
            run(vec![a, b], &|g, ids| {
                let y = g.add(ids[0], ids[1])?;
                project(g, y, &target)
            })?;
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
    Ok(CheckRow {
        name: op.name().to_string(),
        max_rel_error: total.max_rel_error,
        checked: total.checked,
        skipped: total.skipped,
    })
}

/// Checks every network parameter under one task loss.
fn network_row(
    name: &str,
    opts: &GradcheckOptions,
    s: &mut Sampler,
    flash: bool,
) -> Result<CheckRow> {
    let channels = if flash { 6 } else { 3 };
    let net = MedNetwork::build(&opts.spec, channels)?;
    let n = opts.size;
    let z = s.tensor(Shape::image(channels, n, n), 0.0, 1.0);
    let levels = net.head_count();
    let targets: Vec<Tensor<f64>> = (0..levels)
        .map(|l| s.tensor(Shape::image(3, n >> l, n >> l), 0.0, 1.0))
        .collect();
    let masks: Vec<Tensor<f64>> = (0..levels)
        .map(|l| s.mask(Shape::image(3, n >> l, n >> l)))
        .collect();
    let flash_img = s.tensor(Shape::image(3, n, n), 0.0, 1.0);
    let lambda = [1.0, 0.5, 0.25];
    // BN affine terms start at 1 and 0, which on a 1x1 map leaves the
    // following leaky ReLU exactly at its kink; check at a generic point.
    let params: Vec<Tensor<f64>> = net
        .params()
        .iter()
        .zip(net.param_names())
        .map(|(p, name)| {
            if name.ends_with(".bn.gamma") {
                s.tensor(p.shape(), 0.5, 1.5)
            } else if name.ends_with(".bn.beta") {
                s.tensor(p.shape(), -0.5, 0.5)
            } else {
                p.cast()
            }
        })
        .collect();
    let c = compare(&params, opts.step, opts.fault, |g, ids| {
        let zn = g.constant(z.clone());
        let heads = net.forward_with(g, ids, zn)?;
        let t: Vec<NodeId> = targets.iter().map(|t| g.constant(t.clone())).collect();
        let loss = match name {
            "denoise" => loss_denoise(g, &heads, &t, &lambda)?,
            "super_resolve" => loss_sr(g, &heads, &t, &lambda)?,
            "inpaint" => loss_inpaint(g, &heads, &t, &masks, &lambda)?,
            _ => {
                let f = g.constant(flash_img.clone());
                loss_flash(g, &heads, &t, f, &[0.7, 0.3])?
            }
        };
        Ok(loss)
    })?;
    Ok(CheckRow {
        name: format!("network+{name}"),
        max_rel_error: c.max_rel_error,
        checked: c.checked,
        skipped: c.skipped,
    })
}

/// Runs the per-op suite and the end-to-end network checks.
pub fn run(opts: &GradcheckOptions) -> Result<GradReport> {
    opts.spec.validate()?;
    let divisor = opts.spec.required_divisor();
    if opts.size == 0 || opts.size > 16 || !opts.size.is_multiple_of(divisor) {
        return Err(GradcheckError::Size {
            size: opts.size,
            divisor,
        });
    }
    let mut s = Sampler(Rng::stream(opts.seed, Stream::Input));
    let ops = OpKind::DIFFERENTIABLE
        .into_iter()
        .map(|op| op_row(op, &mut s, opts.step, opts.fault))
        .collect::<Result<Vec<_>>>()?;
    let end_to_end = [
        ("denoise", false),
        ("super_resolve", false),
        ("inpaint", false),
        ("flash_no_flash", true),
    ]
    .into_iter()
    .map(|(name, flash)| network_row(name, opts, &mut s, flash))
    .collect::<Result<Vec<_>>>()?;
    Ok(GradReport {
        ops,
        end_to_end,
        tolerance: opts.tolerance,
    })
}
