//! Per-scene training steps for the three modes, and batch assembly.

use rand::Rng;

use super::config::{supervision_positions, Mode, TrainConfig};
use super::metrics::MetricsRecord;
use super::optim::{accumulate, grad_norm, scale_grads, ParamGrads};
use super::TrainError;
use crate::decoder::{rap_step, Decoder, FeaturePyramid, QuerySet, RefineMap};
use crate::fixed_point;
use crate::grad::{grad_exact_ift, unroll, EstimatorKind};
use crate::losses::{hungarian_match, match_cost, set_loss, Targets};
use crate::tensor::{LeafKey, Tape, Tensor};

/// One training example: rendered features and its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a FeaturePyramid,
    pub targets: &'a Targets,
}

/// Loss terms at one supervised position.
#[derive(Debug, Clone, Copy, Default)]
struct Terms {
    total: f64,
    focal: f64,
    l1: f64,
    giou: f64,
}

/// Result of one scene: gradients, per-position terms and tape statistics.
#[derive(Debug, Clone, Default)]
pub struct SceneOutput {
    pub grads: ParamGrads,
    positions: Vec<Terms>,
    pub residual: f64,
    pub tape_nodes: usize,
    pub refine_apps: usize,
    pub init_apps: usize,
}

impl SceneOutput {
    pub fn loss(&self) -> f64 {
        self.positions.iter().map(|t| t.total).sum()
    }

    pub fn position_losses(&self) -> Vec<f64> {
        self.positions.iter().map(|t| t.total).collect()
    }
}

/// Accumulates supervised losses on one tape.
struct Supervisor<'a> {
    decoder: &'a Decoder,
    cfg: &'a TrainConfig,
    targets: &'a Targets,
    terms: Vec<Terms>,
    losses: Vec<Tensor>,
}

impl<'a> Supervisor<'a> {
    fn new(decoder: &'a Decoder, cfg: &'a TrainConfig, targets: &'a Targets) -> Self {
        Self { decoder, cfg, targets, terms: Vec::new(), losses: Vec::new() }
    }

    fn supervise(&mut self, tape: &Tape, y: &QuerySet) -> Result<Tensor, TrainError> {
        let pred = self.decoder.predict(tape, y)?;
        let cost = match_cost(&pred, self.targets, self.cfg.weights, self.cfg.focal)?;
        let assignment = hungarian_match(&cost)?;
        let l = set_loss(tape, &pred, self.targets, &assignment, self.cfg.weights, self.cfg.focal)?;
        let position = self.terms.len();
        if !l.total.item().is_finite() {
            return Err(TrainError::NonFinite { position });
        }
        self.terms.push(Terms { total: l.total.item(), focal: l.focal, l1: l.l1, giou: l.giou });
        self.losses.push(l.total.clone());
        Ok(l.total)
    }

    /// Records terms computed elsewhere without adding to the tape loss.
    fn record(&mut self, t: Terms) {
        self.terms.push(t);
    }

    fn backward(&self, tape: &Tape) -> Result<ParamGrads, TrainError> {
        let Some(first) = self.losses.first() else {
            return Ok(ParamGrads::new());
        };
        let mut total = first.clone();
        for l in &self.losses[1..] {
            total = tape.add(&total, l)?;
        }
        Ok(tape.backward(&total)?.params())
    }
}

fn final_residual(decoder: &Decoder, x: &FeaturePyramid, y: &QuerySet, layer: usize) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let _g = tape.no_grad();
    let r = fixed_point::residual(
        |l: &[Tensor]| Ok(decoder.refine(&tape, x, &QuerySet::from_latent(l), layer)?.into_latent()),
        &y.detach().into_latent(),
    )?;
    Ok(r)
}

/// Deep-equilibrium step on one scene:
/// (a) supervise the initialization layer; (b) `h` supervised refinements
/// from its output; (c) `T_train` noisy refinements with recording off,
/// snapshotting at the supervision positions; (d) re-apply the layer `k`
/// times from each detached snapshot with recording on and supervise;
/// (e) sum the losses; (f) backpropagate.
///
/// With the exact estimator, (d) instead solves the adjoint equation at
/// each snapshot on its own tape and adds those gradients.
pub fn scene_step_deq(
    decoder: &Decoder,
    cfg: &TrainConfig,
    sample: Sample<'_>,
    rng: &mut impl Rng,
) -> Result<SceneOutput, TrainError> {
    let x = sample.features;
    let tape = Tape::new();
    let mut sup = Supervisor::new(decoder, cfg, sample.targets);

    let y0 = decoder.init_layer(&tape, x, &decoder.init_queries(&tape))?;
    sup.supervise(&tape, &y0)?;
    let mut y = y0.clone();
    for _ in 0..cfg.h {
        y = decoder.refine(&tape, x, &y, 0)?;
        sup.supervise(&tape, &y)?;
    }

    let omega = supervision_positions(cfg.sup_m, cfg.sup_c, cfg.t_train);
    let mut snapshots = Vec::with_capacity(omega.len());
    {
        let _g = tape.no_grad();
        let mut y = y0.detach();
        for t in 1..=cfg.t_train {
            y = rap_step(decoder, &tape, x, &y, 0, cfg.noise, rng)?;
            if omega.binary_search(&t).is_ok() {
                snapshots.push(y.clone());
            }
        }
    }
    let residual = final_residual(decoder, x, snapshots.last().expect("T is in the schedule"), 0)?;

    let map = RefineMap { decoder, features: x, layer: 0 };
    let mut extra = ParamGrads::new();
    for snap in &snapshots {
        match cfg.estimator {
            EstimatorKind::Neumann { k } => {
                let out = unroll(&map, &tape, &snap.clone().into_latent(), k)?;
                sup.supervise(&tape, &QuerySet::from_latent(&out))?;
            }
            EstimatorKind::Jfb => {
                let out = unroll(&map, &tape, &snap.clone().into_latent(), 1)?;
                sup.supervise(&tape, &QuerySet::from_latent(&out))?;
            }
            EstimatorKind::ExactIft { max_steps, tol } => {
                let (terms, grads) = exact_snapshot_grads(decoder, cfg, sample, snap, max_steps, tol)?;
                if !terms.total.is_finite() {
                    return Err(TrainError::NonFinite { position: sup.terms.len() });
                }
                sup.record(terms);
                accumulate(&mut extra, grads);
            }
        }
    }
    let mut grads = sup.backward(&tape)?;
    accumulate(&mut grads, extra);
    Ok(SceneOutput {
        grads,
        positions: sup.terms,
        residual,
        tape_nodes: tape.node_count(),
        refine_apps: tape.counter("refine"),
        init_apps: tape.counter("init"),
    })
}

/// Loss at `y_star` and its exact implicit gradient through the refinement
/// layer, plus the direct head gradient.
fn exact_snapshot_grads(
    decoder: &Decoder,
    cfg: &TrainConfig,
    sample: Sample<'_>,
    y_star: &QuerySet,
    max_steps: usize,
    tol: f64,
) -> Result<(Terms, ParamGrads), TrainError> {
    let tape = Tape::new();
    let q = tape.leaf(LeafKey::Input(0), &y_star.content.detach());
    let p = tape.leaf(LeafKey::Input(1), &y_star.position.detach());
    let mut sup = Supervisor::new(decoder, cfg, sample.targets);
    let loss = sup.supervise(&tape, &QuerySet { content: q.clone(), position: p.clone() })?;
    let g = tape.backward(&loss)?;
    let upstream = [g.wrt(&q), g.wrt(&p)];
    let mut grads = g.params();
    let map = RefineMap { decoder, features: sample.features, layer: 0 };
    let implicit = grad_exact_ift(&map, &y_star.detach().into_latent(), &upstream, max_steps, tol)?;
    let params = implicit
        .by_key
        .into_iter()
        .filter_map(|(k, t)| match k {
            LeafKey::Param(id) => Some((id, t)),
            LeafKey::Input(_) => None,
        })
        .collect();
    accumulate(&mut grads, params);
    Ok((sup.terms[0], grads))
}

/// Backpropagation through time: the initialization layer then `T_train`
/// taped applications of the shared layer, each supervised.
pub fn scene_step_rnn(decoder: &Decoder, cfg: &TrainConfig, sample: Sample<'_>) -> Result<SceneOutput, TrainError> {
    scene_step_stacked(decoder, cfg, sample, &vec![0; cfg.t_train])
}

/// The initialization layer then each independent refinement layer once,
/// each supervised.
pub fn scene_step_ffn(decoder: &Decoder, cfg: &TrainConfig, sample: Sample<'_>) -> Result<SceneOutput, TrainError> {
    let layers: Vec<usize> = (0..decoder.num_refine_layers()).collect();
    scene_step_stacked(decoder, cfg, sample, &layers)
}

fn scene_step_stacked(
    decoder: &Decoder,
    cfg: &TrainConfig,
    sample: Sample<'_>,
    layers: &[usize],
) -> Result<SceneOutput, TrainError> {
    let x = sample.features;
    let tape = Tape::new();
    let mut sup = Supervisor::new(decoder, cfg, sample.targets);
    let mut y = decoder.init_layer(&tape, x, &decoder.init_queries(&tape))?;
    sup.supervise(&tape, &y)?;
    for &layer in layers {
        y = decoder.refine(&tape, x, &y, layer)?;
        sup.supervise(&tape, &y)?;
    }
    let residual = final_residual(decoder, x, &y, layers.last().copied().unwrap_or(0))?;
    let grads = sup.backward(&tape)?;
    Ok(SceneOutput {
        grads,
        positions: sup.terms,
        residual,
        tape_nodes: tape.node_count(),
        refine_apps: tape.counter("refine"),
        init_apps: tape.counter("init"),
    })
}

/// Dispatches on `cfg.mode`.
pub fn scene_step(
    decoder: &Decoder,
    cfg: &TrainConfig,
    sample: Sample<'_>,
    rng: &mut impl Rng,
) -> Result<SceneOutput, TrainError> {
    match cfg.mode {
        Mode::Deq => scene_step_deq(decoder, cfg, sample, rng),
        Mode::Rnn => scene_step_rnn(decoder, cfg, sample),
        Mode::Ffn => scene_step_ffn(decoder, cfg, sample),
    }
}

/// Batch-mean gradients and the metrics row for one optimizer step.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub grads: ParamGrads,
    pub record: MetricsRecord,
}

/// Runs every scene of the batch, averages gradients and losses.
pub fn batch_step(
    decoder: &Decoder,
    cfg: &TrainConfig,
    batch: &[Sample<'_>],
    rng: &mut impl Rng,
) -> Result<BatchOutput, TrainError> {
    let mut grads = ParamGrads::new();
    let mut record = MetricsRecord::default();
    let n = batch.len().max(1) as f64;
    for sample in batch {
        let out = scene_step(decoder, cfg, *sample, rng)?;
        accumulate(&mut grads, out.grads);
        if record.position_losses.len() < out.positions.len() {
            record.position_losses.resize(out.positions.len(), 0.0);
        }
        for (acc, t) in record.position_losses.iter_mut().zip(&out.positions) {
            *acc += t.total / n;
        }
        for t in &out.positions {
            record.loss += t.total / n;
            record.focal += t.focal / n;
            record.l1 += t.l1 / n;
            record.giou += t.giou / n;
        }
        record.residual += out.residual / n;
        record.tape_nodes = record.tape_nodes.max(out.tape_nodes);
        record.refine_apps = out.refine_apps;
    }
    scale_grads(&mut grads, 1.0 / n);
    record.grad_norm = grad_norm(grads.values());
    if !record.grad_norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    Ok(BatchOutput { grads, record })
}
