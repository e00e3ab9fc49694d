//! Finite-difference suites over the engine, attention, translator blocks
//! and the full model, grouped by scope.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{scaled_dot_attention, AttentionMask, MultiHeadAttention};
use crate::autodiff::{Graph, Var};
use crate::data::vocab::EOS;
use crate::error::{Error, Result};
use crate::gradcheck::{check_graph, check_store, prefix_group, GradCheckConfig, GradCheckReport};
use crate::layers::Ctx;
use crate::model::{DialogueExample, LossWeights, ModelConfig, MtnTct};
use crate::params::ParamStore;
use crate::tct::{TctBlock, TctMasks};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Attention,
    Tct,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitives, Scope::Attention, Scope::Tct, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Attention => "attention",
            Scope::Tct => "tct",
            Scope::Model => "model",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|scope| scope.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope `{s}`")))
    }
}

/// One named check and its report.
#[derive(Clone, Debug)]
pub struct NamedReport {
    pub check: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub scope: Scope,
    pub tolerance: f64,
    pub checks: Vec<NamedReport>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.report.passed(self.tolerance))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            for group in &c.report.groups {
                let status = if group.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
                writeln!(
                    f,
                    "{} {} {} max_rel_error {:.3e} checked {} {status}",
                    self.scope, c.check, group.group, group.max_rel_error, group.checked
                )?;
            }
        }
        let status = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{} max_rel_error {:.3e} {status}", self.scope, self.max_rel_error())
    }
}

pub fn run_suite(scope: Scope, seed: u64) -> Result<SuiteReport> {
    run_suite_with(scope, seed, &GradCheckConfig::default())
}

pub fn run_suite_with(scope: Scope, seed: u64, config: &GradCheckConfig) -> Result<SuiteReport> {
    let config = config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = match scope {
        Scope::Primitives => primitives(&mut rng, &config)?,
        Scope::Attention => attention(&mut rng, &config)?,
        Scope::Tct => tct(&mut rng, &config)?,
        Scope::Model => model(&mut rng, &config)?,
    };
    Ok(SuiteReport {
        scope,
        tolerance: config.tolerance,
        checks,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// `sum(x * w)` for a fixed random `w`, so no output direction is trivial.
fn project(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    g.sum(p)
}

/// Moves norm gains and biases off their 1/0 initial values.
fn perturb_vectors(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let names: Vec<String> = store.iter().filter(|p| p.value.rank() == 1).map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.id(&name).expect("listed");
        let shape = store.get(id).value.shape().to_vec();
        let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
        let t = uniform(rng, &shape).map(|v| base + 0.3 * v);
        store.set(id, t)?;
    }
    Ok(())
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn primitives(rng: &mut ChaCha8Rng, config: &GradCheckConfig) -> Result<Vec<NamedReport>> {
    let w34 = uniform(rng, &[3, 4]);
    let w235 = uniform(rng, &[2, 3, 5]);
    let w73 = uniform(rng, &[7, 3]);
    let w53 = uniform(rng, &[5, 3]);
    let (wa, wb, wc, wd, we, wf, wg) = (w34.clone(), w34.clone(), w34.clone(), w34.clone(), w34.clone(), w34.clone(), w34);
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 6], vec![6, 4]], Box::new(move |g, v| {
            let m = g.matmul(v[0], v[1])?;
            project(g, m, &wa)
        })),
        ("batched_matmul", vec![vec![2, 3, 4], vec![4, 5]], Box::new(move |g, v| {
            let m = g.matmul(v[0], v[1])?;
            project(g, m, &w235)
        })),
        ("add_broadcast", vec![vec![3, 4], vec![4]], Box::new(move |g, v| {
            let s = g.add(v[0], v[1])?;
            let sq = g.mul(s, s)?;
            project(g, sq, &wb)
        })),
        ("mul_scale", vec![vec![3, 4], vec![3, 4]], Box::new(move |g, v| {
            let m = g.mul(v[0], v[1])?;
            let s = g.scale(m, -2.5)?;
            project(g, s, &wc)
        })),
        ("relu", vec![vec![3, 4]], Box::new(move |g, v| {
            let r = g.relu(v[0])?;
            project(g, r, &wd)
        })),
        ("softmax", vec![vec![3, 4]], Box::new(move |g, v| {
            let s = g.softmax(v[0])?;
            project(g, s, &we)
        })),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], Box::new(move |g, v| {
            let n = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            project(g, n, &wf)
        })),
        ("dropout", vec![vec![3, 4]], Box::new(move |g, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(17);
            let d = g.dropout(v[0], 0.4, true, &mut mask_rng)?;
            project(g, d, &wg)
        })),
        ("concat_narrow_transpose", vec![vec![3, 4], vec![4, 4]], Box::new(move |g, v| {
            let c = g.concat(&[v[0], v[1]], 0)?;
            let n = g.narrow(c, 1, 1, 3)?;
            let t = g.transpose(n)?;
            let tt = g.transpose(t)?;
            project(g, tt, &w73)
        })),
        ("embedding_gather", vec![vec![6, 3], vec![4, 3]], Box::new(move |g, v| {
            let e = g.embedding_lookup(v[0], &[5, 0, 5, 2, 1])?;
            let r = g.gather_rows(v[1], &[3, 3, 0, 1, 2])?;
            let s = g.add(e, r)?;
            project(g, s, &w53)
        })),
        ("mean", vec![vec![3, 4]], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        })),
        ("cross_entropy", vec![vec![4, 5]], Box::new(|g, v| g.cross_entropy(v[0], &[1, 0, 4, 3], 0))),
        ("l1_loss", vec![vec![4, 3], vec![4, 3]], Box::new(|g, v| g.l1_loss(v[0], v[1], &[true, false, true, true]))),
        ("cosine_similarity_loss", vec![vec![4, 3], vec![4, 3]], Box::new(|g, v| {
            g.cosine_similarity_loss(v[0], v[1], &[true, true, false, true])
        })),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, build)| {
            Ok(NamedReport {
                check: name.to_string(),
                report: check_graph(&shapes, rng, config, build)?,
            })
        })
        .collect()
}

fn attention(rng: &mut ChaCha8Rng, config: &GradCheckConfig) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    let masks = [
        ("none", AttentionMask::none()),
        ("causal", AttentionMask::causal()),
        ("padding", AttentionMask::padding(vec![false, true, false, false])),
        ("causal_padding", AttentionMask::causal_padding(vec![false, false, true, false])),
    ];
    for (name, mask) in masks {
        let w = uniform(rng, &[4, 3]);
        let report = check_graph(&[vec![4, 6], vec![4, 6], vec![4, 3]], rng, config, |g, v| {
            let a = scaled_dot_attention(g, v[0], v[1], v[2], &mask)?;
            project(g, a, &w)
        })?;
        out.push(NamedReport {
            check: format!("scaled_dot_{name}"),
            report,
        });
    }

    let mut store = ParamStore::new(rng.random());
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2)?;
    let (x, y, w) = (uniform(rng, &[5, 8]), uniform(rng, &[6, 8]), uniform(rng, &[5, 8]));
    let cross = AttentionMask::padding(vec![false, false, true, false, false, false]);
    let report = check_store(&store, config, |n| prefix_group(n, 2), |g, b| {
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let out = mha.forward(g, b, xv, yv, yv, &cross)?;
        project(g, out, &w)
    })?;
    out.push(NamedReport {
        check: "multi_head_parameters".into(),
        report,
    });

    // gradients flowing into queries, keys and values of the layer
    let report = check_graph(&[vec![5, 8], vec![6, 8]], rng, config, |g, v| {
        let b = store.bind(g);
        let q = mha.forward(g, &b, v[0], v[0], v[0], &AttentionMask::causal())?;
        let out = mha.forward(g, &b, q, v[1], v[1], &AttentionMask::none())?;
        project(g, out, &w)
    })?;
    out.push(NamedReport {
        check: "multi_head_inputs".into(),
        report,
    });
    Ok(out)
}

fn tct(rng: &mut ChaCha8Rng, config: &GradCheckConfig) -> Result<Vec<NamedReport>> {
    let mut store = ParamStore::new(rng.random());
    let block = TctBlock::new(&mut store, "tct", 8, 2, 16)?;
    perturb_vectors(&mut store, rng)?;
    let (target, source, w) = (uniform(rng, &[4, 8]), uniform(rng, &[6, 8]), uniform(rng, &[4, 8]));
    let masks = TctMasks {
        source_padding: vec![false, false, false, false, true, false],
        ..TctMasks::default()
    };
    let report = check_store(&store, config, |n| prefix_group(n, 2), |g, b| {
        let t = g.constant(target.clone());
        let s = g.constant(source.clone());
        let out = block.forward(g, b, &mut Ctx::eval(), t, s, &masks)?;
        project(g, out.output, &w)
    })?;
    let mut out = vec![NamedReport {
        check: "block_parameters".into(),
        report,
    }];
    let report = check_graph(&[vec![4, 8], vec![6, 8]], rng, config, |g, v| {
        let b = store.bind(g);
        let o = block.forward(g, &b, &mut Ctx::eval(), v[0], v[1], &masks)?;
        project(g, o.output, &w)
    })?;
    out.push(NamedReport {
        check: "block_inputs".into(),
        report,
    });
    Ok(out)
}

/// Toy model configuration used by the end-to-end check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        tct_blocks: 1,
        decoder_layers: 1,
        autoencoder_layers: 1,
        visual_dim: 3,
        audio_dim: 2,
    }
}

/// Random example for `config` with every sequence at most `max_len` long.
pub fn toy_example(rng: &mut ChaCha8Rng, config: &ModelConfig, max_len: usize) -> DialogueExample {
    let v = config.vocab_size;
    let tokens = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(2..=max_len);
        let mut t: Vec<usize> = (1..len).map(|_| rng.random_range(4..v)).collect();
        t.push(EOS);
        t
    };
    let history = (0..2).map(|_| tokens(rng)).collect();
    let question = tokens(rng);
    let caption = tokens(rng);
    let summary = tokens(rng);
    let answer = tokens(rng);
    let feats = |rng: &mut ChaCha8Rng, cols: usize| {
        (cols > 0).then(|| {
            let rows = rng.random_range(2..=max_len);
            uniform(rng, &[rows, cols])
        })
    };
    let visual = feats(rng, config.visual_dim);
    let audio = feats(rng, config.audio_dim);
    DialogueExample {
        id: "toy".into(),
        history,
        question,
        visual,
        audio,
        caption,
        summary,
        answer,
    }
}

fn model(rng: &mut ChaCha8Rng, config: &GradCheckConfig) -> Result<Vec<NamedReport>> {
    let cfg = toy_model_config();
    let mut model = MtnTct::new(cfg.clone(), rng.random())?;
    perturb_vectors(model.store_mut(), rng)?;
    let ex = toy_example(rng, &cfg, 6);
    let weights = LossWeights { alpha: 0.7, beta: 1.3 };
    let report = check_store(model.store(), config, |n| prefix_group(n, 1), |g, b| {
        Ok(model.composite_loss(g, b, &mut Ctx::eval(), &ex, weights)?.total)
    })?;
    Ok(vec![NamedReport {
        check: "composite_loss".into(),
        report,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for scope in Scope::ALL {
            assert_eq!(scope.name().parse::<Scope>().unwrap(), scope);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn primitive_and_attention_suites_pass() {
        for scope in [Scope::Primitives, Scope::Attention] {
            let report = run_suite(scope, 1).unwrap();
            assert!(report.passed(), "{report}");
        }
    }
}
