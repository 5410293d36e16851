//! Central-difference gradient verification.
//!
//! [`finite_diff_grad`] is the independent oracle for the whole gradient
//! contract: it only ever calls the forward (value) path, never the tape's
//! backward, so agreement between the two is evidence rather than tautology.
//! [`run`] drives it over randomized fixtures for every loss and both
//! forward maps.

use std::fmt;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::losses::{self, Batch};
use crate::rng::Rng;
use crate::tensor::{softmax, ModelParams, Tensor};
use crate::text::{self, EncoderConfig, EncoderNodes};

/// Per-entry central differences `(f(p+h) - f(p-h)) / 2h` for every
/// parameter in the collection.
pub fn finite_diff_grad<F>(
    f: F,
    params: &ModelParams,
    step: f64,
) -> Result<Vec<(String, Tensor)>>
where
    F: Fn(&ModelParams) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let len = work.get(&name)?.value.len();
        let mut grad = Tensor::zeros(work.get(&name)?.value.dims());
        for k in 0..len {
            let original = work.get(&name)?.value.data()[k];
            work.get_mut(&name)?.value.data_mut()[k] = original + step;
            let plus = f(&work)?;
            work.get_mut(&name)?.value.data_mut()[k] = original - step;
            let minus = f(&work)?;
            work.get_mut(&name)?.value.data_mut()[k] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite-difference evaluation".into()));
            }
            grad.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push((name, grad));
    }
    Ok(out)
}

/// A differentiable scalar function of a parameter collection: returns the
/// value together with the analytic gradients the tape produced.
pub type DifferentiableFn<'a> =
    Box<dyn Fn(&ModelParams) -> Result<(f64, Vec<(String, Tensor)>)> + 'a>;

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Upper bound on fixture vector dimensions.
    pub dim: usize,
    pub fixtures: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            dim: 6,
            fixtures: 20,
            seed: 0,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetReport {
    pub target: String,
    pub fixtures: usize,
    /// Worst relative disagreement among entries above the absolute floor;
    /// 0 when every entry agreed within the floor.
    pub max_rel_error: f64,
    /// Worst absolute disagreement across all entries.
    pub max_abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub targets: Vec<TargetReport>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.targets.iter().all(|t| t.pass)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.targets {
            writeln!(
                f,
                "{:<10} max rel error {:>10.3e}  max abs error {:>10.3e}  ({} fixtures)  {}",
                t.target,
                t.max_rel_error,
                t.max_abs_error,
                t.fixtures,
                if t.pass { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Worst (relative, absolute) disagreement between analytic and numeric
/// gradients. Entries within an absolute floor of 1e-8 do not count toward
/// the relative figure, so near-zero gradients with pure roundoff noise
/// cannot fail the relative tolerance.
pub fn compare_grads(
    analytic: &[(String, Tensor)],
    numeric: &[(String, Tensor)],
) -> Result<(f64, f64)> {
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for (name, a) in analytic {
        let n = numeric
            .iter()
            .find(|(nn, _)| nn == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if a.dims() != n.dims() {
            return Err(Error::dims(name.clone(), a.dims(), n.dims()));
        }
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let diff = (x - y).abs();
            worst_abs = worst_abs.max(diff);
            if diff <= 1e-8 {
                continue;
            }
            worst_rel = worst_rel.max(diff / x.abs().max(y.abs()));
        }
    }
    Ok((worst_rel, worst_abs))
}

/// Check one differentiable function against the finite-difference oracle;
/// returns the worst (relative, absolute) error over all parameters.
pub fn check_fn(
    f: &DifferentiableFn<'_>,
    params: &ModelParams,
    step: f64,
) -> Result<(f64, f64)> {
    let (_, analytic) = f(params)?;
    let numeric = finite_diff_grad(|p| f(p).map(|(v, _)| v), params, step)?;
    compare_grads(&analytic, &numeric)
}

fn random_unit_scale_vector(rng: &mut Rng, dim: usize) -> Tensor {
    loop {
        let data: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let t = Tensor::vector(&data);
        if t.norm() > 0.4 {
            return t;
        }
    }
}

fn leaf_all(tape: &mut Tape, params: &ModelParams) -> Vec<(String, NodeId)> {
    params
        .iter()
        .map(|p| (p.name.clone(), tape.leaf(p.value.clone())))
        .collect()
}

fn grads_of(
    tape: &Tape,
    root: NodeId,
    nodes: &[(String, NodeId)],
) -> Vec<(String, Tensor)> {
    let grads = tape.backward(root);
    nodes
        .iter()
        .map(|(name, id)| (name.clone(), grads.get(*id).clone()))
        .collect()
}

fn instance_fixture(
    rng: &mut Rng,
    dim_cap: usize,
) -> (ModelParams, Vec<usize>, usize, usize) {
    let t = rng.int_inclusive(2, 4);
    let c = rng.int_inclusive(2, 4);
    let dim = rng.int_inclusive(2, dim_cap.max(2));
    let mut params = ModelParams::new();
    for i in 0..t {
        params
            .insert(format!("v{i}"), random_unit_scale_vector(rng, dim))
            .expect("unique");
    }
    for k in 0..c {
        params
            .insert(format!("c{k}"), random_unit_scale_vector(rng, dim))
            .expect("unique");
    }
    // force at least one positive pair for the instance-instance loss
    let mut labels: Vec<usize> = (0..t).map(|_| rng.index(c)).collect();
    labels[1] = labels[0];
    (params, labels, t, c)
}

fn build_batch(
    nodes: &[(String, NodeId)],
    labels: &[usize],
    t: usize,
    c: usize,
) -> Result<(Batch, Vec<NodeId>)> {
    let vectors: Vec<NodeId> = (0..t)
        .map(|i| {
            nodes
                .iter()
                .find(|(n, _)| n == &format!("v{i}"))
                .map(|(_, id)| *id)
                .expect("vector leaf")
        })
        .collect();
    let protos: Vec<NodeId> = (0..c)
        .map(|k| {
            nodes
                .iter()
                .find(|(n, _)| n == &format!("c{k}"))
                .map(|(_, id)| *id)
                .expect("prototype leaf")
        })
        .collect();
    Ok((Batch::new(vectors, labels.to_vec())?, protos))
}

/// Verify one named target over `fixtures` randomized instances produced
/// by `make`.
fn check_target(
    name: &str,
    cfg: &GradcheckConfig,
    rng: &mut Rng,
    mut make: impl FnMut(&mut Rng) -> Result<(ModelParams, DifferentiableFn<'static>)>,
) -> Result<TargetReport> {
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for _ in 0..cfg.fixtures {
        let (params, f) = make(rng)?;
        let (rel, abs) = check_fn(&f, &params, cfg.step)?;
        worst_rel = worst_rel.max(rel);
        worst_abs = worst_abs.max(abs);
    }
    Ok(TargetReport {
        target: name.into(),
        fixtures: cfg.fixtures,
        max_rel_error: worst_rel,
        max_abs_error: worst_abs,
        pass: worst_rel < cfg.tolerance,
    })
}

/// Run the full verification suite. Every target must stay under the
/// configured relative tolerance on every fixture.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = Rng::new(cfg.seed);
    let dim_cap = cfg.dim;
    let mut targets = Vec::new();

    targets.push(check_target("loss_cls", cfg, &mut rng, |rng| {
        let (params, labels, t, c) = instance_fixture(rng, dim_cap);
        let f: DifferentiableFn<'static> = Box::new(move |p| {
            let mut tape = Tape::new();
            let nodes = leaf_all(&mut tape, p);
            let (batch, protos) = build_batch(&nodes, &labels, t, c)?;
            let loss = losses::loss_cls(&mut tape, &batch, &protos, 0.1)?;
            Ok((loss.value, grads_of(&tape, loss.node, &nodes)))
        });
        Ok((params, f))
    })?);

    targets.push(check_target("loss_ii", cfg, &mut rng, |rng| {
        let (params, labels, t, c) = instance_fixture(rng, dim_cap);
        let f: DifferentiableFn<'static> = Box::new(move |p| {
            let mut tape = Tape::new();
            let nodes = leaf_all(&mut tape, p);
            let (batch, _) = build_batch(&nodes, &labels, t, c)?;
            let loss = losses::loss_ii(&mut tape, &batch)?;
            Ok((loss.value, grads_of(&tape, loss.node, &nodes)))
        });
        Ok((params, f))
    })?);

    targets.push(check_target("loss_is", cfg, &mut rng, |rng| {
        let (params, labels, t, c) = instance_fixture(rng, dim_cap);
        let f: DifferentiableFn<'static> = Box::new(move |p| {
            let mut tape = Tape::new();
            let nodes = leaf_all(&mut tape, p);
            let (batch, protos) = build_batch(&nodes, &labels, t, c)?;
            let loss = losses::loss_is(&mut tape, &batch, &protos)?;
            Ok((loss.value, grads_of(&tape, loss.node, &nodes)))
        });
        Ok((params, f))
    })?);

    targets.push(check_target("loss_l2", cfg, &mut rng, |rng| {
        let count = rng.int_inclusive(1, 3);
        let mut params = ModelParams::new();
        let mut references = Vec::new();
        for i in 0..count {
            let dim = rng.int_inclusive(1, dim_cap.max(1));
            params
                .insert(format!("p{i}"), random_unit_scale_vector(rng, dim))
                .expect("unique");
            references.push(random_unit_scale_vector(rng, dim));
        }
        let f: DifferentiableFn<'static> = Box::new(move |p| {
            let mut tape = Tape::new();
            let nodes = leaf_all(&mut tape, p);
            let pairs: Vec<(NodeId, &Tensor)> = nodes
                .iter()
                .zip(&references)
                .map(|((_, id), r)| (*id, r))
                .collect();
            let loss = losses::loss_l2_penalty(&mut tape, &pairs)?;
            Ok((loss.value, grads_of(&tape, loss.node, &nodes)))
        });
        Ok((params, f))
    })?);

    targets.push(check_target("loss_kd", cfg, &mut rng, |rng| {
        // query vector against a prototype block, frozen soft target
        let n = rng.int_inclusive(2, 4);
        let dim = rng.int_inclusive(2, dim_cap.max(2));
        let mut params = ModelParams::new();
        params
            .insert("v", random_unit_scale_vector(rng, dim))
            .expect("unique");
        for k in 0..n {
            params
                .insert(format!("c{k}"), random_unit_scale_vector(rng, dim))
                .expect("unique");
        }
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let p_soft = softmax(&Tensor::vector(&raw));
        let tau_kd = [0.5, 1.0, 2.0][rng.index(3)];
        let f: DifferentiableFn<'static> = Box::new(move |p| {
            let mut tape = Tape::new();
            let nodes = leaf_all(&mut tape, p);
            let v = nodes[0].1;
            let logits: Vec<NodeId> = (1..=n)
                .map(|k| tape.cosine(v, nodes[k].1))
                .collect::<Result<_>>()?;
            let loss = losses::loss_kd(&mut tape, &logits, &p_soft, tau_kd)?;
            Ok((loss.value, grads_of(&tape, loss.node, &nodes)))
        });
        Ok((params, f))
    })?);

    targets.push(check_target("encode", cfg, &mut rng, |rng| {
        // weighted sum of the encoder output; gradients flow through every
        // encoder parameter
        let cfg_enc = EncoderConfig {
            embedding_dim: rng.int_inclusive(2, 3),
            hidden_dim: rng.int_inclusive(2, 4),
        };
        let vocab_size = rng.int_inclusive(4, 6);
        let mut params = ModelParams::new();
        text::init_encoder_params(&mut params, vocab_size, &cfg_enc, rng)?;
        let len = rng.int_inclusive(2, 5);
        let ids: Vec<usize> = (0..len).map(|_| rng.index(vocab_size)).collect();
        let weights = random_unit_scale_vector(rng, cfg_enc.hidden_dim);
        let f: DifferentiableFn<'static> = Box::new(move |p| {
            let mut tape = Tape::new();
            let nodes = leaf_all(&mut tape, p);
            let by_name = |name: &str| {
                nodes
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, id)| *id)
                    .expect("encoder leaf")
            };
            let enc = EncoderNodes {
                embed: by_name(text::PARAM_EMBED),
                w1: by_name(text::PARAM_W1),
                b1: by_name(text::PARAM_B1),
                w2: by_name(text::PARAM_W2),
                b2: by_name(text::PARAM_B2),
            };
            let h = text::encode_on_tape(&mut tape, &enc, &ids)?;
            let out = tape.weighted_sum(h, &weights)?;
            Ok((tape.scalar_value(out), grads_of(&tape, out, &nodes)))
        });
        Ok((params, f))
    })?);

    targets.push(check_target("project", cfg, &mut rng, |rng| {
        // weighted sum of W h; gradients through both W and h
        let rows = rng.int_inclusive(2, dim_cap.max(2));
        let cols = rng.int_inclusive(2, dim_cap.max(2));
        let mut params = ModelParams::new();
        let mut w = Tensor::zeros(&[rows, cols]);
        for x in w.data_mut() {
            *x = rng.uniform(-1.0, 1.0);
        }
        params.insert("w", w).expect("unique");
        params
            .insert("h", random_unit_scale_vector(rng, cols))
            .expect("unique");
        let weights = random_unit_scale_vector(rng, rows);
        let f: DifferentiableFn<'static> = Box::new(move |p| {
            let mut tape = Tape::new();
            let nodes = leaf_all(&mut tape, p);
            let v = tape.matvec(nodes[0].1, nodes[1].1)?;
            let out = tape.weighted_sum(v, &weights)?;
            Ok((tape.scalar_value(out), grads_of(&tape, out, &nodes)))
        });
        Ok((params, f))
    })?);

    Ok(GradcheckReport { targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut params = ModelParams::new();
        params.insert("x", Tensor::vector(&[1.0, -2.0])).unwrap();
        let grads = finite_diff_grad(|_| Ok(3.5), &params, 1e-5).unwrap();
        assert_eq!(grads[0].1.data(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_matches_analytic_derivative() {
        // f(p) = sum(p^2), gradient 2p
        let mut params = ModelParams::new();
        params.insert("p", Tensor::vector(&[1.0, 2.0])).unwrap();
        let f = |p: &ModelParams| Ok(p.get("p")?.value.data().iter().map(|x| x * x).sum());
        let grads = finite_diff_grad(f, &params, 1e-5).unwrap();
        for (g, want) in grads[0].1.data().iter().zip([2.0, 4.0]) {
            assert!((g - want).abs() < 1e-7, "{g} vs {want}");
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let params = ModelParams::new();
        assert!(finite_diff_grad(|_| Ok(0.0), &params, 0.0).is_err());
    }

    #[test]
    fn full_suite_passes_with_defaults() {
        let cfg = GradcheckConfig {
            fixtures: 5,
            ..GradcheckConfig::default()
        };
        let report = run(&cfg).unwrap();
        assert!(report.all_pass(), "\n{report}");
        assert_eq!(report.targets.len(), 7);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let cfg = GradcheckConfig {
            fixtures: 3,
            seed: 9,
            ..GradcheckConfig::default()
        };
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        for (x, y) in a.targets.iter().zip(&b.targets) {
            assert_eq!(x.max_rel_error.to_bits(), y.max_rel_error.to_bits());
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // analytic side deliberately reports 3p instead of 2p
        let mut params = ModelParams::new();
        params.insert("p", Tensor::vector(&[1.0, 2.0])).unwrap();
        let f: DifferentiableFn = Box::new(|p| {
            let value: f64 = p.get("p")?.value.data().iter().map(|x| x * x).sum();
            let wrong = Tensor::vector(
                &p.get("p")?
                    .value
                    .data()
                    .iter()
                    .map(|x| 3.0 * x)
                    .collect::<Vec<_>>(),
            );
            Ok((value, vec![("p".to_string(), wrong)]))
        });
        let (worst, _) = check_fn(&f, &params, 1e-5).unwrap();
        assert!(worst > 0.2, "corruption not detected: {worst}");
    }
}
