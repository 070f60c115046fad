//! Training loop, evaluation and the gradient-estimator benchmark.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, TrainConfig};
use super::metrics::{average_precision, ApSummary, Detection, GroundTruth, MetricsRecord, SCORE_THRESHOLD};
use super::optim::{grad_norm, AdamW, ParamGrads};
use super::step::{batch_step, Sample};
use super::TrainError;
use crate::decoder::{Decoder, FeaturePyramid, QuerySet, RefineMap};
use crate::fixed_point;
use crate::grad::{estimate, EstimatorKind};
use crate::losses::{hungarian_match, match_cost, set_loss, Targets};
use crate::synth::{generate_dataset, Dataset, DatasetSpec, Renderer};
use crate::tensor::{sigmoid_scalar as sigmoid, LeafKey, Tape, Tensor};

/// Offset between the training and held-out dataset seeds.
const EVAL_SEED_OFFSET: u64 = 0x5eed_0000_0001;
const NOISE_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 2;

/// Training dataset spec for `cfg`.
pub fn train_spec(cfg: &TrainConfig) -> DatasetSpec {
    DatasetSpec { seed: cfg.seed, ..cfg.data.clone() }
}

/// Held-out dataset spec for `cfg`: `eval_scenes` scenes under a different
/// master seed.
pub fn eval_spec(cfg: &TrainConfig) -> DatasetSpec {
    DatasetSpec { seed: cfg.seed.wrapping_add(EVAL_SEED_OFFSET), num_scenes: cfg.eval_scenes, ..cfg.data.clone() }
}

pub fn renderer(cfg: &TrainConfig) -> Renderer {
    Renderer {
        d_model: cfg.decoder.d_model,
        levels: cfg.decoder.levels,
        num_classes: cfg.decoder.num_classes,
        noise_std: cfg.data.noise_std,
    }
}

/// Learning rate at `step` of `total`: cosine decay to zero when enabled.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if !cfg.cosine || total == 0 {
        return cfg.lr;
    }
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ap: ApSummary,
    /// Mean `|f(y) - y|` at the returned iterate.
    pub residual: f64,
}

/// Noise-free inference on one scene: the initialization layer then the
/// refinement schedule of `cfg.mode`. In deq mode the fixed point is solved
/// with `cfg.solver` for `T_infer` steps; rnn repeats the shared layer
/// `T_train` times as trained; ffn applies each layer once.
pub fn infer(decoder: &Decoder, cfg: &TrainConfig, x: &FeaturePyramid) -> Result<(QuerySet, f64), TrainError> {
    let tape = Tape::new();
    let _g = tape.no_grad();
    let y0 = decoder.init_layer(&tape, x, &decoder.init_queries(&tape))?;
    let f = |l: &[Tensor]| Ok(decoder.refine(&tape, x, &QuerySet::from_latent(l), 0)?.into_latent());
    match cfg.mode {
        Mode::Deq => {
            let solver = fixed_point::SolverConfig { max_steps: cfg.t_infer, ..cfg.solver.clone() };
            let (y, _) = fixed_point::solve(f, &y0.into_latent(), &solver, &[])?;
            let r = fixed_point::residual(f, &y)?;
            Ok((QuerySet::from_latent(&y), r))
        }
        Mode::Rnn => {
            let mut y = y0.into_latent();
            for _ in 0..cfg.t_train {
                y = f(&y)?;
            }
            let r = fixed_point::residual(f, &y)?;
            Ok((QuerySet::from_latent(&y), r))
        }
        Mode::Ffn => {
            let mut y = y0;
            for layer in 0..decoder.num_refine_layers() {
                y = decoder.refine(&tape, x, &y, layer)?;
            }
            let last = decoder.num_refine_layers() - 1;
            let r = fixed_point::residual(
                |l: &[Tensor]| Ok(decoder.refine(&tape, x, &QuerySet::from_latent(l), last)?.into_latent()),
                &y.clone().into_latent(),
            )?;
            Ok((y, r))
        }
    }
}

/// Every (query, class) pair whose sigmoid score exceeds the threshold.
pub fn detections(decoder: &Decoder, y: &QuerySet, image: usize) -> Result<Vec<Detection>, TrainError> {
    let tape = Tape::new();
    let _g = tape.no_grad();
    let pred = decoder.predict(&tape, y)?;
    let k = pred.num_classes();
    let mut out = Vec::new();
    for i in 0..pred.len() {
        let bbox = pred.box_at(i);
        for c in 0..k {
            let score = sigmoid(pred.logits.data()[i * k + c]);
            if score > SCORE_THRESHOLD {
                out.push(Detection { image, class: c, score, bbox });
            }
        }
    }
    Ok(out)
}

pub fn ground_truth(dataset: &Dataset) -> Vec<GroundTruth> {
    dataset
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(image, s)| s.objects.iter().map(move |o| GroundTruth { image, class: o.class, bbox: o.bbox }))
        .collect()
}

/// AP@0.5 and AP@[0.5:0.95] over `dataset`, no NMS.
pub fn evaluate(decoder: &Decoder, cfg: &TrainConfig, dataset: &Dataset) -> Result<EvalResult, TrainError> {
    let r = renderer(cfg);
    let mut dets = Vec::new();
    let mut residual = 0.0;
    for (image, scene) in dataset.scenes.iter().enumerate() {
        let (y, res) = infer(decoder, cfg, &r.render(scene))?;
        residual += res;
        dets.extend(detections(decoder, &y, image)?);
    }
    let ap = average_precision(&dets, &ground_truth(dataset), cfg.decoder.num_classes);
    Ok(EvalResult { ap, residual: residual / dataset.scenes.len().max(1) as f64 })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub eval: EvalResult,
    pub steps: usize,
}

/// Holds everything a run mutates.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub decoder: Decoder,
    pub train: Dataset,
    pub eval: Dataset,
    optimizer: AdamW,
    noise_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let decoder = Decoder::new(cfg.decoder_config(), cfg.seed)?;
        let train = generate_dataset(&train_spec(&cfg))?;
        let eval = generate_dataset(&eval_spec(&cfg))?;
        Self::with_parts(cfg, decoder, train, eval)
    }

    pub fn with_parts(cfg: TrainConfig, decoder: Decoder, train: Dataset, eval: Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(NOISE_STREAM);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM);
        let optimizer = AdamW::new(cfg.weight_decay);
        Ok(Self { cfg, decoder, train, eval, optimizer, noise_rng, shuffle_rng, step: 0 })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.scenes.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    /// One optimizer step on the given scene indices.
    pub fn step_on(&mut self, indices: &[usize], epoch: usize) -> Result<MetricsRecord, TrainError> {
        let r = renderer(&self.cfg);
        let scenes: Vec<(FeaturePyramid, Targets)> = indices
            .iter()
            .map(|&i| {
                let s = &self.train.scenes[i];
                (r.render(s), s.targets())
            })
            .collect();
        let batch: Vec<Sample<'_>> = scenes.iter().map(|(x, t)| Sample { features: x, targets: t }).collect();
        let out = batch_step(&self.decoder, &self.cfg, &batch, &mut self.noise_rng)?;
        let lr = learning_rate(&self.cfg, self.step, self.total_steps());
        let grads = clip(out.grads, self.cfg.grad_clip);
        self.optimizer.step(self.decoder.params_mut(), &grads, lr);
        self.step += 1;
        let mut record = out.record;
        record.step = self.step;
        record.epoch = epoch;
        record.lr = lr;
        Ok(record)
    }

    /// Full run. `on_record` sees every logged row, including the final
    /// evaluation row.
    pub fn run(&mut self, mut on_record: impl FnMut(&MetricsRecord)) -> Result<TrainSummary, TrainError> {
        let mut records = Vec::new();
        let mut order: Vec<usize> = (0..self.train.scenes.len()).collect();
        for epoch in 1..=self.cfg.epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.clone().chunks(self.cfg.batch_size) {
                let mut record = self.step_on(chunk, epoch)?;
                let last_of_epoch = self.step % self.steps_per_epoch() == 0;
                if self.cfg.eval_every > 0 && last_of_epoch && epoch % self.cfg.eval_every == 0 {
                    let e = evaluate(&self.decoder, &self.cfg, &self.eval)?;
                    record.ap50 = Some(e.ap.ap50);
                    record.ap = Some(e.ap.ap);
                }
                if self.step % self.cfg.log_every == 0 || record.ap50.is_some() {
                    on_record(&record);
                }
                records.push(record);
            }
        }
        let eval = evaluate(&self.decoder, &self.cfg, &self.eval)?;
        Ok(TrainSummary { records, eval, steps: self.step })
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; 0 disables.
pub fn clip(mut grads: ParamGrads, max_norm: f64) -> ParamGrads {
    if max_norm > 0.0 {
        let n = grad_norm(grads.values());
        if n > max_norm {
            super::optim::scale_grads(&mut grads, max_norm / n);
        }
    }
    grads
}

/// Writes the CSV header then one row per record.
pub fn write_csv(w: &mut impl Write, records: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(w, "{}", super::metrics::CSV_HEADER)?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// One estimator's gradient compared to the exact implicit gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub estimator: String,
    pub cosine: f64,
    pub rel_error: f64,
    pub norm: f64,
    pub micros: f64,
}

fn flatten(g: &ParamGrads, ids: &[crate::tensor::ParamId]) -> Vec<f64> {
    ids.iter()
        .flat_map(|id| g.get(id).map(|t| t.to_vec()).unwrap_or_default())
        .collect()
}

/// Gradient of the supervised loss at the solved fixed point of each scene,
/// per estimator, compared against the exact estimator. Only refinement
/// parameters are compared, since the head gradient is shared.
pub fn bench_grad(
    decoder: &Decoder,
    cfg: &TrainConfig,
    dataset: &Dataset,
    estimators: &[EstimatorKind],
) -> Result<Vec<BenchRow>, TrainError> {
    let r = renderer(cfg);
    let ids = decoder.refine_param_ids(0);
    let mut flat: Vec<Vec<f64>> = vec![Vec::new(); estimators.len() + 1];
    let mut micros = vec![0.0; estimators.len() + 1];
    let kinds: Vec<EstimatorKind> = std::iter::once(EstimatorKind::exact()).chain(estimators.iter().copied()).collect();
    for scene in &dataset.scenes {
        let x = r.render(scene);
        let targets = scene.targets();
        let (y, _) = infer(decoder, &TrainConfig { mode: Mode::Deq, ..cfg.clone() }, &x)?;
        let tape = Tape::new();
        let q = tape.leaf(LeafKey::Input(0), &y.content);
        let p = tape.leaf(LeafKey::Input(1), &y.position);
        let pred = decoder.predict(&tape, &QuerySet { content: q.clone(), position: p.clone() })?;
        let assignment = hungarian_match(&match_cost(&pred, &targets, cfg.weights, cfg.focal)?)?;
        let loss = set_loss(&tape, &pred, &targets, &assignment, cfg.weights, cfg.focal)?;
        let g = tape.backward(&loss.total)?;
        let upstream = [g.wrt(&q), g.wrt(&p)];
        let map = RefineMap { decoder, features: &x, layer: 0 };
        let latent = y.into_latent();
        for (i, kind) in kinds.iter().enumerate() {
            let start = Instant::now();
            let est = estimate(*kind, &map, &latent, &upstream)?;
            micros[i] += start.elapsed().as_secs_f64() * 1e6;
            let grads: ParamGrads = est
                .by_key
                .into_iter()
                .filter_map(|(k, t)| match k {
                    LeafKey::Param(id) => Some((id, t)),
                    LeafKey::Input(_) => None,
                })
                .collect();
            flat[i].extend(flatten(&grads, &ids));
        }
    }
    let exact = &flat[0];
    let exact_norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scenes = dataset.scenes.len().max(1) as f64;
    Ok(kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let v = &flat[i];
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(exact).map(|(a, b)| a * b).sum();
            let diff = v.iter().zip(exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            BenchRow {
                estimator: super::config::format_estimator(*kind),
                cosine: dot / (norm * exact_norm).max(f64::MIN_POSITIVE),
                rel_error: diff / exact_norm.max(f64::MIN_POSITIVE),
                norm,
                micros: micros[i] / scenes,
            }
        })
        .collect())
}
