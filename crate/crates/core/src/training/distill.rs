//! The mini-batch loop shared by teacher pre-training and distillation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cona::{evaluate, recipe, ConaConfig, Role, RoleBatches};
use crate::encoders::{backward_trace, part_boundaries, DualEncoderBundle, Encoder, ForwardTrace};
use crate::error::{Error, Result};
use crate::losses::{feature_distance, similarity_distance, EmbeddingBatch};
use crate::numerics::{l2_normalize_rows, l2_normalize_rows_backward, matmul, matmul_t, t_matmul, Matrix};
use crate::retrieval::{build_index, recall_at_k, RecallReport, DEFAULT_KS};
use crate::scalar::Scalar;

use super::data::SyntheticDataset;
use super::optim::{adamw_step, lr_at, AdamWConfig, OptimizerState, ScheduleSpec};

/// Loss applied between student and teacher taps at each part boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TapStrategy {
    FD,
    SD,
}

/// Intermediate-layer distillation: both encoders of a modality are split
/// into `parts` groups of layers and their boundary activations are matched
/// (intra-modal, teacher to student) after row normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntermediateConfig {
    pub parts: usize,
    pub strategy: TapStrategy,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Trailing fraction of the dataset held out for validation recall.
    pub val_fraction: f64,
    pub ks: Vec<usize>,
    #[serde(default)]
    pub intermediate: Option<IntermediateConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 256,
            peak_lr: 1e-3,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            seed: 0,
            val_fraction: 0.1,
            ks: DEFAULT_KS.to_vec(),
            intermediate: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for pre-training the teacher pair.
    pub fn teacher_default() -> Self {
        Self {
            epochs: 10,
            peak_lr: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig("warmup_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::InvalidConfig("peak_lr must be > 0".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::InvalidConfig("ks must be non-empty and >= 1".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
        terms: BTreeMap<String, f64>,
    },
    Epoch {
        epoch: usize,
        text_to_image: RecallReport,
        image_to_text: RecallReport,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<MetricRecord>,
}

impl TrainLog {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn last_epoch(&self) -> Option<(&RecallReport, &RecallReport)> {
        self.records.iter().rev().find_map(|r| match r {
            MetricRecord::Epoch {
                text_to_image,
                image_to_text,
                ..
            } => Some((text_to_image, image_to_text)),
            _ => None,
        })
    }
}

/// Recall in both retrieval directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub text_to_image: RecallReport,
    pub image_to_text: RecallReport,
}

/// Ids used for dataset rows; zero-padded so string order is row order.
pub fn pair_id(row: usize) -> String {
    format!("{row:08}")
}

/// Encodes paired rows and measures recall with the image side as gallery
/// (text queries) and vice versa.
pub fn evaluate_retrieval<T: Scalar>(
    text: &Encoder<T>,
    image: &Encoder<T>,
    text_inputs: &Matrix<T>,
    image_inputs: &Matrix<T>,
    ks: &[usize],
) -> Result<RetrievalEval> {
    if text_inputs.rows() != image_inputs.rows() {
        return Err(Error::shape("evaluate_retrieval rows", text_inputs.rows(), image_inputs.rows()));
    }
    let ids: Vec<String> = (0..text_inputs.rows()).map(pair_id).collect();
    let t = text.encode(text_inputs)?;
    let i = image.encode(image_inputs)?;
    let image_index = build_index(ids.clone(), i.matrix().clone())?;
    let text_index = build_index(ids.clone(), t.matrix().clone())?;
    Ok(RetrievalEval {
        text_to_image: recall_at_k(&image_index, &t, &ids, ks)?,
        image_to_text: recall_at_k(&text_index, &i, &ids, ks)?,
    })
}

/// Held-out recall of a text/image encoder pair on the validation split.
pub fn validation_recall<T: Scalar>(
    text: &Encoder<T>,
    image: &Encoder<T>,
    dataset: &SyntheticDataset<T>,
    val_fraction: f64,
    ks: &[usize],
) -> Result<Option<RetrievalEval>> {
    let (_, val) = dataset.split(val_fraction);
    if val.is_empty() {
        return Ok(None);
    }
    let tx = dataset.text_inputs.slice_rows(val.start, val.end);
    let ix = dataset.image_inputs.slice_rows(val.start, val.end);
    evaluate_retrieval(text, image, &tx, &ix, ks).map(Some)
}

struct Learner<'a, T> {
    encoder: &'a mut Encoder<T>,
    state: OptimizerState<T>,
}

impl<'a, T: Scalar> Learner<'a, T> {
    fn new(encoder: &'a mut Encoder<T>, cfg: AdamWConfig) -> Self {
        let state = OptimizerState::new(cfg, &encoder.params.tensors());
        Self { encoder, state }
    }

    fn update(&mut self, trace: &ForwardTrace<T>, d_emb: &Matrix<T>, tap_grads: &[(usize, Matrix<T>)], lr: T) -> Result<()> {
        if self.encoder.is_frozen() {
            return Ok(());
        }
        let (grads, _) = backward_trace(&self.encoder.params, trace, Some(d_emb), tap_grads)?;
        adamw_step(&mut self.encoder.params.tensors_mut(), &grads.tensors(), &mut self.state, lr)
    }
}

/// Per-modality state for intermediate-layer matching.
struct TapMatcher<T> {
    student_layers: Vec<usize>,
    teacher_layers: Vec<usize>,
    /// Maps student tap width to teacher tap width when they differ.
    projections: Vec<Option<Matrix<T>>>,
    states: Vec<Option<OptimizerState<T>>>,
}

impl<T: Scalar> TapMatcher<T> {
    fn new(student: &Encoder<T>, teacher: &Encoder<T>, parts: usize, opt: AdamWConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let student_layers = part_boundaries(student.spec.num_layers, parts)?;
        let teacher_layers = part_boundaries(teacher.spec.num_layers, parts)?;
        let (ws, wt) = (student.spec.hidden_dim, teacher.spec.hidden_dim);
        let projections: Vec<Option<Matrix<T>>> = (0..parts)
            .map(|_| (ws != wt).then(|| Matrix::random_uniform(wt, ws, 1.0 / (ws as f64).sqrt(), rng)))
            .collect();
        let states = projections
            .iter()
            .map(|p| p.as_ref().map(|m| OptimizerState::new(opt, &[m.as_slice()])))
            .collect();
        Ok(Self {
            student_layers,
            teacher_layers,
            projections,
            states,
        })
    }

    /// Loss per part and the gradients on the student's taps.
    fn losses(
        &self,
        student: &ForwardTrace<T>,
        teacher: &ForwardTrace<T>,
        strategy: TapStrategy,
        weight: T,
    ) -> Result<(Vec<T>, Vec<(usize, Matrix<T>)>, Vec<Option<Matrix<T>>>)> {
        let mut values = Vec::new();
        let mut tap_grads = Vec::new();
        let mut proj_grads = Vec::new();
        for (k, (&sl, &tl)) in self.student_layers.iter().zip(&self.teacher_layers).enumerate() {
            let s_tap = &student.pre_activations[sl - 1];
            let mapped = match &self.projections[k] {
                Some(p) => matmul_t(s_tap, p)?,
                None => s_tap.clone(),
            };
            let s_norm = l2_normalize_rows(&mapped)?;
            let s = EmbeddingBatch::new(s_norm.clone())?;
            let t = EmbeddingBatch::normalized(&teacher.pre_activations[tl - 1])?.detach();
            let lv = match strategy {
                TapStrategy::FD => feature_distance(&s, &t)?,
                TapStrategy::SD => similarity_distance(&s, &s, &t, &t)?,
            };
            let mut d_s = lv.grad(0).expect("student side attached").clone();
            if let (TapStrategy::SD, Some(g1)) = (strategy, lv.grad(1)) {
                d_s.add_scaled(g1, T::one())?;
            }
            let d_s = d_s.scale(weight);
            let d_mapped = l2_normalize_rows_backward(&s_norm, &mapped.row_norms(), &d_s)?;
            let (d_tap, d_proj) = match &self.projections[k] {
                Some(p) => (matmul(&d_mapped, p)?, Some(t_matmul(&d_mapped, s_tap)?)),
                None => (d_mapped, None),
            };
            values.push(weight * lv.value);
            tap_grads.push((sl, d_tap));
            proj_grads.push(d_proj);
        }
        Ok((values, tap_grads, proj_grads))
    }

    fn update_projections(&mut self, grads: &[Option<Matrix<T>>], lr: T) -> Result<()> {
        for ((p, st), g) in self.projections.iter_mut().zip(&mut self.states).zip(grads) {
            if let (Some(p), Some(st), Some(g)) = (p.as_mut(), st.as_mut(), g.as_ref()) {
                adamw_step(&mut [p.as_mut_slice()], &[g.as_slice()], st, lr)?;
            }
        }
        Ok(())
    }
}

/// Shared loop. `teachers` is `None` when the trainable pair is itself being
/// pre-trained; the teacher roles then see detached copies of its outputs.
fn run<T: Scalar>(
    text: &mut Encoder<T>,
    image: &mut Encoder<T>,
    teachers: Option<(&Encoder<T>, &Encoder<T>)>,
    dataset: &SyntheticDataset<T>,
    cona: &ConaConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    cona.validate()?;
    if text.spec.input_dim != dataset.text_inputs.cols() || image.spec.input_dim != dataset.image_inputs.cols() {
        return Err(Error::shape(
            "dataset input widths",
            format!("({}, {})", text.spec.input_dim, image.spec.input_dim),
            format!("({}, {})", dataset.text_inputs.cols(), dataset.image_inputs.cols()),
        ));
    }
    let (train, _) = dataset.split(cfg.val_fraction);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut log = TrainLog::default();
    if total_steps == 0 {
        return Ok(log);
    }
    let schedule = ScheduleSpec::with_warmup_fraction(cfg.peak_lr, cfg.warmup_fraction, total_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut matchers = match (cfg.intermediate, teachers) {
        (Some(ic), Some((tt, it))) => Some((
            ic,
            TapMatcher::new(text, tt, ic.parts, cfg.optimizer, &mut rng)?,
            TapMatcher::new(image, it, ic.parts, cfg.optimizer, &mut rng)?,
        )),
        (Some(_), None) => {
            return Err(Error::InvalidConfig("intermediate-layer losses need teachers".into()));
        }
        (None, _) => None,
    };

    let mut text_learner = Learner::new(text, cfg.optimizer);
    let mut image_learner = Learner::new(image, cfg.optimizer);
    let mut order: Vec<usize> = train.collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = T::of(lr_at(&schedule, step)?);
            let xt = dataset.text_inputs.select_rows(chunk);
            let xi = dataset.image_inputs.select_rows(chunk);
            let st = text_learner.encoder.trace(&xt)?;
            let si = image_learner.encoder.trace(&xi)?;
            let (tt, ti) = match teachers {
                Some((tt, it)) => (Some(tt.trace(&xt)?), Some(it.trace(&xi)?)),
                None => (None, None),
            };
            let batches = RoleBatches::new(
                st.embedding_batch(),
                si.embedding_batch(),
                tt.as_ref().unwrap_or(&st).embedding_batch(),
                ti.as_ref().unwrap_or(&si).embedding_batch(),
            );
            let ev = evaluate(cona, &batches)?;
            let mut total = ev.value();
            let mut terms: BTreeMap<String, f64> = ev.term_values.iter().map(|(k, v)| (k.clone(), v.widen())).collect();

            let (mut text_taps, mut image_taps) = (Vec::new(), Vec::new());
            if let Some((ic, tm, im)) = matchers.as_mut() {
                let w = T::of(ic.weight);
                let (tv, tg, tp) = tm.losses(&st, tt.as_ref().expect("teachers present"), ic.strategy, w)?;
                let (iv, ig, ip) = im.losses(&si, ti.as_ref().expect("teachers present"), ic.strategy, w)?;
                for (k, (a, b)) in tv.iter().zip(&iv).enumerate() {
                    let part = *a + *b;
                    total = total + part;
                    terms.insert(format!("part{}", k + 1), part.widen());
                }
                tm.update_projections(&tp, lr)?;
                im.update_projections(&ip, lr)?;
                text_taps = tg;
                image_taps = ig;
            }
            if !total.is_finite() {
                return Err(Error::NonFiniteValue("training loss"));
            }

            let zeros = |b: &EmbeddingBatch<T>| Matrix::zeros(b.batch_size(), b.dim());
            let d_text = ev.grad(Role::TextStudent).cloned().unwrap_or_else(|| zeros(&batches.text_student));
            let d_image = ev.grad(Role::ImageStudent).cloned().unwrap_or_else(|| zeros(&batches.image_student));
            text_learner.update(&st, &d_text, &text_taps, lr)?;
            image_learner.update(&si, &d_image, &image_taps, lr)?;

            log.records.push(MetricRecord::Step {
                step,
                epoch,
                lr: lr.widen(),
                loss: total.widen(),
                terms,
            });
            step += 1;
        }
        if let Some(eval) = validation_recall(text_learner.encoder, image_learner.encoder, dataset, cfg.val_fraction, &cfg.ks)? {
            log.records.push(MetricRecord::Epoch {
                epoch,
                text_to_image: eval.text_to_image,
                image_to_text: eval.image_to_text,
            });
        }
    }
    Ok(log)
}

/// Trains a teacher pair with the symmetric text-image InfoNCE objective and
/// returns it frozen.
pub fn pretrain_teacher<T: Scalar>(
    text_teacher: &mut Encoder<T>,
    image_teacher: &mut Encoder<T>,
    dataset: &SyntheticDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    pretrain_teacher_with(text_teacher, image_teacher, dataset, &recipe("clip")?, cfg)
}

/// [`pretrain_teacher`] with an explicit objective (e.g. a different temperature).
pub fn pretrain_teacher_with<T: Scalar>(
    text_teacher: &mut Encoder<T>,
    image_teacher: &mut Encoder<T>,
    dataset: &SyntheticDataset<T>,
    objective: &ConaConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if cfg.intermediate.is_some() {
        return Err(Error::InvalidConfig("intermediate-layer losses need teachers".into()));
    }
    text_teacher.set_frozen(false);
    image_teacher.set_frozen(false);
    let log = run(text_teacher, image_teacher, None, dataset, objective, cfg);
    text_teacher.set_frozen(true);
    image_teacher.set_frozen(true);
    log
}

/// Distills the bundle's students from its frozen teachers.
pub fn distill<T: Scalar>(
    bundle: &mut DualEncoderBundle<T>,
    dataset: &SyntheticDataset<T>,
    cona: &ConaConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    bundle.validate()?;
    if !bundle.text_teacher.is_frozen() || !bundle.image_teacher.is_frozen() {
        return Err(Error::InvalidConfig("teachers must be frozen for distillation".into()));
    }
    let DualEncoderBundle {
        text_teacher,
        image_teacher,
        text_student,
        image_student,
    } = bundle;
    if text_student.is_frozen() || image_student.is_frozen() {
        return Err(Error::InvalidConfig("students must be trainable".into()));
    }
    run(text_student, image_student, Some((text_teacher, image_teacher)), dataset, cona, cfg)
}
