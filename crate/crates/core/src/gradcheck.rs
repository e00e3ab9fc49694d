//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever runs forward passes; it never looks at the
//! backward rules it is checking. Error per element is
//! `|analytic - numeric| / (|numeric| + floor)`. A perturbation that moves
//! any `relu` or `l1_loss` across its kink is retried with a smaller step.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            floor: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Location of the largest relative error, e.g. `"decoder.0.ffn.w1[13]"`.
    pub worst: Option<String>,
    pub checked: usize,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Default)]
struct Tally {
    max_rel: f64,
    max_abs: f64,
    worst: Option<String>,
    checked: usize,
    groups: BTreeMap<String, (f64, usize)>,
}

impl Tally {
    fn record(&mut self, group: &str, location: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / (numeric.abs() + floor);
        if rel > self.max_rel || self.worst.is_none() {
            self.max_rel = self.max_rel.max(rel);
            self.worst = Some(location());
        }
        self.max_abs = self.max_abs.max(abs);
        self.checked += 1;
        let entry = self.groups.entry(group.to_string()).or_insert((0.0, 0));
        entry.0 = entry.0.max(rel);
        entry.1 += 1;
    }

    fn finish(self) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            worst: self.worst,
            checked: self.checked,
            groups: self
                .groups
                .into_iter()
                .map(|(group, (max_rel_error, checked))| GroupReport {
                    group,
                    max_rel_error,
                    checked,
                })
                .collect(),
        }
    }
}

/// Largest number of times the step is divided by ten to keep a kink out
/// of the stencil.
const MAX_SHRINKS: usize = 4;

/// Symmetric difference quotient; the step is re-derived from the perturbed
/// values so representation error in `x ± h` cancels. `f` returns the loss
/// and the tape's kink fingerprint; while either perturbed evaluation lands
/// on a different smooth piece than `base` the step shrinks tenfold.
fn central_difference(x: f64, h: f64, base: u64, mut f: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<f64> {
    let mut h = h;
    let mut shrinks = 0;
    loop {
        let (xp, xm) = (x + h, x - h);
        let (fp, kp) = f(xp)?;
        let (fm, km) = f(xm)?;
        let quotient = (fp - fm) / (xp - xm);
        if (kp == base && km == base) || shrinks == MAX_SHRINKS {
            return Ok(quotient);
        }
        h /= 10.0;
        shrinks += 1;
    }
}

/// Loss value and kink fingerprint of a finished forward pass.
fn scalar_of(g: &Graph, v: Var) -> Result<(f64, u64)> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!("gradcheck needs a scalar, got {:?}", t.shape())));
    }
    Ok((t.item(), g.kink_pattern()))
}

/// Checks every element of every input tensor.
pub fn check_tensors<F>(inputs: &[Tensor], config: &GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let base = g.kink_pattern();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut tally = Tally::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let group = format!("input{i}");
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let numeric = central_difference(x, config.step, base, |xv| {
                work[i].data_mut()[j] = xv;
                let mut g = Graph::new();
                let vars: Vec<Var> = work.iter().map(|t| g.param(t.clone())).collect();
                let out = build(&mut g, &vars)?;
                scalar_of(&g, out)
            })?;
            work[i].data_mut()[j] = x;
            tally.record(&group, || format!("{group}[{j}]"), analytic[i][j], numeric, config.floor);
        }
    }
    Ok(tally.finish())
}

/// Like [`check_tensors`] with inputs drawn uniformly from `[-1, 1)`.
pub fn check_graph<R, F>(shapes: &[Vec<usize>], rng: &mut R, config: &GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        })
        .collect::<Result<_>>()?;
    check_tensors(&inputs, config, build)
}

/// Checks every scalar of every parameter in `store`. `group_of` maps a
/// parameter name to the report group it belongs to.
pub fn check_store<F, G>(store: &ParamStore, config: &GradCheckConfig, group_of: G, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
    G: Fn(&str) -> String,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = build(&mut g, &bound)?;
    let base = g.kink_pattern();
    g.backward(out)?;
    let mut work = store.clone();
    work.zero_grads();
    work.accumulate_grads(&g, &bound);
    let analytic: Vec<Vec<f64>> = work.iter().map(|p| p.grad.clone()).collect();

    let mut tally = Tally::default();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let id = work.id(name).expect("same store");
        let group = group_of(name);
        for j in 0..analytic[pi].len() {
            let x = store.get(id).value.data()[j];
            let numeric = central_difference(x, config.step, base, |xv| {
                work.get_mut(id).value.data_mut()[j] = xv;
                let mut g = Graph::new();
                let bound = work.bind(&mut g);
                let out = build(&mut g, &bound)?;
                scalar_of(&g, out)
            })?;
            work.get_mut(id).value.data_mut()[j] = x;
            tally.record(&group, || format!("{name}[{j}]"), analytic[pi][j], numeric, config.floor);
        }
    }
    Ok(tally.finish())
}

/// Groups parameters by their first `depth` dot-separated name components.
pub fn prefix_group(name: &str, depth: usize) -> String {
    name.split('.').take(depth).collect::<Vec<_>>().join(".")
}
