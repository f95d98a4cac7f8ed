//! Gradient checks: analytic gradients composed through small encoders
//! against central finite differences.

use cona::cona::{evaluate, ConaConfig, Role, RoleBatches};
use cona::encoders::{backward_trace, Encoder, EncoderSpec};
use cona::losses::{EmbeddingBatch, LossValue};
use cona::numerics::{compare_grads, finite_diff_grad, Matrix, DEFAULT_FD_STEP};
use cona::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
/// Relative errors are measured against max(|analytic|, |numeric|, floor),
/// with floor = GRAD_FLOOR * max(1, |loss|): finite-difference roundoff
/// scales with the loss value, not with the gradient coordinate.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Step for the coordinate-wise check, where O(h²) truncation is negligible.
pub const FINE_STEP: f64 = 1e-5;
pub const INSTANCES: u64 = 20;
pub const TAU: f64 = 0.07;

pub fn flatten(encoders: &[Encoder<f64>]) -> Matrix<f64> {
    let v: Vec<f64> = encoders.iter().flat_map(|e| e.params.tensors().concat()).collect();
    Matrix::from_vec(1, v.len(), v).unwrap()
}

pub fn unflatten(template: &[Encoder<f64>], flat: &Matrix<f64>) -> Vec<Encoder<f64>> {
    let mut out = template.to_vec();
    let mut it = flat.as_slice().iter();
    for e in &mut out {
        for t in e.params.tensors_mut() {
            for x in t.iter_mut() {
                *x = *it.next().unwrap();
            }
        }
    }
    out
}

pub fn flatten_grads(encoders: &[Encoder<f64>], inputs: &[Matrix<f64>], d_emb: &[Option<&Matrix<f64>>]) -> Matrix<f64> {
    let mut v = Vec::new();
    for ((e, x), d) in encoders.iter().zip(inputs).zip(d_emb) {
        let trace = e.trace(x).unwrap();
        let zero = Matrix::zeros(x.rows(), e.spec.output_dim);
        let (g, _) = backward_trace(&e.params, &trace, Some(d.unwrap_or(&zero)), &[]).unwrap();
        v.extend(g.tensors().concat());
    }
    Matrix::from_vec(1, v.len(), v).unwrap()
}

pub struct Instance {
    pub encoders: Vec<Encoder<f64>>,
    pub inputs: Vec<Matrix<f64>>,
}

/// `count` small trainable encoders, each with its own input batch.
pub fn instance(seed: u64, count: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=6);
    let out = rng.random_range(2..=5);
    let mut encoders = Vec::new();
    let mut inputs = Vec::new();
    for _ in 0..count {
        let spec = EncoderSpec::new(rng.random_range(2..=5), rng.random_range(2..=6), rng.random_range(1..=3), out).unwrap();
        encoders.push(Encoder::random(spec, &mut rng).unwrap());
        inputs.push(Matrix::random_normal(n, spec.input_dim, &mut rng));
    }
    Instance { encoders, inputs }
}

/// Checks d loss / d params for a loss over the encoders' embeddings whose
/// per-embedding gradients come back in the `LossValue` slots.
///
/// Returns the whole-gradient relative error at h = 1e-4 and the worst
/// coordinate-wise relative error at the finer step.
pub fn check<F>(inst: &Instance, loss: F) -> (f64, f64)
where
    F: Fn(&[EmbeddingBatch<f64>]) -> Result<LossValue<f64>>,
{
    let embed = |encs: &[Encoder<f64>]| -> Vec<_> {
        encs.iter().zip(&inst.inputs).map(|(e, x)| e.encode(x).unwrap()).collect()
    };
    let lv = loss(&embed(&inst.encoders)).unwrap();
    let d: Vec<Option<&Matrix<f64>>> = (0..inst.encoders.len()).map(|k| lv.grad(k)).collect();
    let analytic = flatten_grads(&inst.encoders, &inst.inputs, &d);
    let numeric = |h: f64| {
        finite_diff_grad(
            |flat| Ok(loss(&embed(&unflatten(&inst.encoders, flat)))?.value),
            &flatten(&inst.encoders),
            h,
        )
        .unwrap()
    };
    let floor = GRAD_FLOOR * lv.value.abs().max(1.0);
    let coarse = compare_grads(&analytic, &numeric(DEFAULT_FD_STEP), floor).unwrap();
    let fine = compare_grads(&analytic, &numeric(FINE_STEP), floor).unwrap();
    (coarse.norm_rel_err, fine.max_rel_err)
}

pub fn assert_all_pass(name: &str, errs: &[(f64, f64)]) {
    let worst_norm = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let worst_coord = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    assert!(worst_norm <= REL_TOL, "{name}: whole-gradient relative error {worst_norm:e}");
    assert!(worst_coord <= REL_TOL, "{name}: coordinate relative error {worst_coord:e} at h = {FINE_STEP}");
}

/// A full cell evaluated on student encoders with fixed teacher embeddings.
pub fn check_config(cfg: &ConaConfig, seed: u64) -> (f64, f64) {
    let inst = instance(seed, 4);
    let teachers: Vec<_> = inst.encoders[2..]
        .iter()
        .zip(&inst.inputs[2..])
        .map(|(e, x)| e.encode(x).unwrap())
        .collect();
    let students = Instance {
        encoders: inst.encoders[..2].to_vec(),
        inputs: inst.inputs[..2].to_vec(),
    };
    check(&students, |e| {
        let rb = RoleBatches::new(e[0].clone(), e[1].clone(), teachers[0].clone(), teachers[1].clone());
        let ev = evaluate(cfg, &rb)?;
        Ok(LossValue::new(
            ev.value(),
            vec![ev.grad(Role::TextStudent).cloned(), ev.grad(Role::ImageStudent).cloned()],
        ))
    })
}

