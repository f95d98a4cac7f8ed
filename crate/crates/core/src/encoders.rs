//! Toy text/image encoders: a stack of affine layers with `tanh` between
//! them, a linear projection to the shared embedding width, and output row
//! normalization.
//!
//! ```text
//! z_1 = x W_1ᵀ + b_1,  z_k = tanh(z_{k-1}) W_kᵀ + b_k,  o = z_L Pᵀ + c,  F = o / ‖o‖
//! ```
//!
//! The pre-activations `z_k` are the per-layer taps used for intermediate-layer
//! distillation. Because a layer's pre-activation only depends on the layers
//! below it, a student built from a teacher's first `k` layers reproduces the
//! teacher's first `k` taps bit-for-bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;
use crate::numerics::{l2_normalize_rows, l2_normalize_rows_backward, matmul, matmul_t, t_matmul, Matrix, MIN_ROW_NORM};
use crate::scalar::Scalar;

/// Shared embedding width `d`.
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_TEACHER_LAYERS: usize = 6;
pub const DEFAULT_STUDENT_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, num_layers: usize, output_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dim,
            num_layers,
            output_dim,
            nonlinearity: Nonlinearity::Tanh,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default teacher shape for the given input width.
    pub fn teacher(input_dim: usize) -> Result<Self> {
        Self::new(input_dim, DEFAULT_HIDDEN_DIM, DEFAULT_TEACHER_LAYERS, DEFAULT_EMBED_DIM)
    }

    /// Default student shape for the given input width.
    pub fn student(input_dim: usize) -> Result<Self> {
        Self::new(input_dim, DEFAULT_HIDDEN_DIM, DEFAULT_STUDENT_LAYERS, DEFAULT_EMBED_DIM)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder dims and layer count must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(out, in)` shape of layer `k` (0-based).
    pub fn layer_shape(&self, k: usize) -> (usize, usize) {
        let fan_in = if k == 0 { self.input_dim } else { self.hidden_dim };
        (self.hidden_dim, fan_in)
    }

    pub fn projection_shape(&self) -> (usize, usize) {
        (self.output_dim, self.hidden_dim)
    }

    pub fn num_params(&self) -> usize {
        let layers: usize = (0..self.num_layers)
            .map(|k| {
                let (o, i) = self.layer_shape(k);
                o * i + o
            })
            .sum();
        layers + self.output_dim * self.hidden_dim + self.output_dim
    }
}

/// Weight `out × in` and bias `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![T::zero(); out],
        }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for weights and bias.
    pub fn random<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = Matrix::random_uniform(out, inp, bound, rng);
        let bias = (0..out).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        Self { weight, bias }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    /// `x Wᵀ + b`.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = matmul_t(x, &self.weight)?;
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    /// Gradients of `x Wᵀ + b` given `d_out`; returns `(grad, d_x)`.
    fn backward(&self, x: &Matrix<T>, d_out: &Matrix<T>, need_input: bool) -> Result<(Affine<T>, Option<Matrix<T>>)> {
        let grad = Affine {
            weight: t_matmul(d_out, x)?,
            bias: d_out.column_sums(),
        };
        let d_x = if need_input { Some(matmul(d_out, &self.weight)?) } else { None };
        Ok((grad, d_x))
    }
}

/// Parameters of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<Affine<T>>,
    pub projection: Affine<T>,
    pub frozen: bool,
}

/// Gradients laid out like [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads<T> {
    pub layers: Vec<Affine<T>>,
    pub projection: Affine<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn random<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let layers = (0..spec.num_layers)
            .map(|k| {
                let (o, i) = spec.layer_shape(k);
                Affine::random(o, i, rng)
            })
            .collect();
        let (o, i) = spec.projection_shape();
        Self {
            layers,
            projection: Affine::random(o, i, rng),
            frozen: false,
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn check_spec(&self, spec: &EncoderSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers {
            return Err(Error::shape("encoder layers", spec.num_layers, self.layers.len()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.shape() != spec.layer_shape(k) || l.bias.len() != spec.hidden_dim {
                return Err(Error::shape("encoder layer", format!("{:?}", spec.layer_shape(k)), format!("{:?}", l.shape())));
            }
        }
        if self.projection.shape() != spec.projection_shape() || self.projection.bias.len() != spec.output_dim {
            return Err(Error::shape(
                "encoder projection",
                format!("{:?}", spec.projection_shape()),
                format!("{:?}", self.projection.shape()),
            ));
        }
        Ok(())
    }

    /// Parameter tensors in declaration order: each layer's weight then
    /// bias, then the projection's weight and bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.projection))
            .flat_map(|a| [a.weight.as_slice(), a.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .flat_map(|a| [a.weight.as_mut_slice(), a.bias.as_mut_slice()])
            .collect()
    }
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn zeros_like(params: &EncoderParams<T>) -> Self {
        Self {
            layers: params.layers.iter().map(|a| Affine::zeros(a.weight.rows(), a.weight.cols())).collect(),
            projection: Affine::zeros(params.projection.weight.rows(), params.projection.weight.cols()),
        }
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.projection))
            .flat_map(|a| [a.weight.as_slice(), a.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .flat_map(|a| [a.weight.as_mut_slice(), a.bias.as_mut_slice()])
            .collect()
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// Input to each layer (the raw input for layer 0, `tanh(z_{k-1})` after).
    pub layer_inputs: Vec<Matrix<T>>,
    /// Pre-activation of each layer; these are the taps.
    pub pre_activations: Vec<Matrix<T>>,
    /// Projection output before normalization.
    pub raw_output: Matrix<T>,
    pub output_norms: Vec<T>,
    pub embedding: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn embedding_batch(&self) -> EmbeddingBatch<T> {
        EmbeddingBatch::new(self.embedding.clone()).expect("forward output rows are unit-norm")
    }

    /// Taps at the given 1-based layer indices.
    pub fn taps(&self, layers: &[usize]) -> Vec<Matrix<T>> {
        layers.iter().map(|&l| self.pre_activations[l - 1].clone()).collect()
    }
}

/// Runs the encoder and keeps the intermediates.
pub fn forward_trace<T: Scalar>(params: &EncoderParams<T>, spec: &EncoderSpec, inputs: &Matrix<T>) -> Result<ForwardTrace<T>> {
    params.check_spec(spec)?;
    if inputs.cols() != spec.input_dim {
        return Err(Error::shape("encoder input width", spec.input_dim, inputs.cols()));
    }
    let mut layer_inputs = Vec::with_capacity(spec.num_layers);
    let mut pre_activations = Vec::with_capacity(spec.num_layers);
    let mut h = inputs.clone();
    for (k, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(&h)?;
        layer_inputs.push(h);
        h = if k + 1 < spec.num_layers { z.map(|v| v.tanh()) } else { z.clone() };
        pre_activations.push(z);
    }
    let raw_output = params.projection.apply(&h)?;
    let output_norms = raw_output.row_norms();
    if let Some(row) = output_norms.iter().position(|n| !(n.widen() >= MIN_ROW_NORM)) {
        return Err(Error::ZeroRow { row });
    }
    let embedding = l2_normalize_rows(&raw_output)?;
    if !embedding.is_finite() {
        return Err(Error::NonFiniteValue("encoder forward"));
    }
    Ok(ForwardTrace {
        layer_inputs,
        pre_activations,
        raw_output,
        output_norms,
        embedding,
    })
}

/// Encodes `inputs` into unit-norm embeddings.
pub fn forward<T: Scalar>(params: &EncoderParams<T>, spec: &EncoderSpec, inputs: &Matrix<T>) -> Result<EmbeddingBatch<T>> {
    Ok(forward_trace(params, spec, inputs)?.embedding_batch())
}

/// Last layer (1-based) of each of `parts` evenly sized groups of layers.
pub fn part_boundaries(num_layers: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 || parts > num_layers {
        return Err(Error::BadParts { parts, num_layers });
    }
    Ok((1..=parts).map(|k| (k * num_layers).div_ceil(parts)).collect())
}

/// Forward pass that also returns the pre-activation at each part boundary.
pub fn forward_with_taps<T: Scalar>(
    params: &EncoderParams<T>,
    spec: &EncoderSpec,
    inputs: &Matrix<T>,
    parts: usize,
) -> Result<(EmbeddingBatch<T>, Vec<Matrix<T>>)> {
    let bounds = part_boundaries(spec.num_layers, parts)?;
    let trace = forward_trace(params, spec, inputs)?;
    Ok((trace.embedding_batch(), trace.taps(&bounds)))
}

/// Copies the teacher's first `student_spec.num_layers` layers and its
/// projection head into an unfrozen student.
pub fn init_student_from_teacher<T: Scalar>(teacher: &EncoderParams<T>, student_spec: &EncoderSpec) -> Result<EncoderParams<T>> {
    student_spec.validate()?;
    if student_spec.num_layers > teacher.layers.len() {
        return Err(Error::IncompatibleShapes(format!(
            "student has {} layers, teacher only {}",
            student_spec.num_layers,
            teacher.layers.len()
        )));
    }
    for k in 0..student_spec.num_layers {
        let t = teacher.layers[k].shape();
        if t != student_spec.layer_shape(k) {
            return Err(Error::IncompatibleShapes(format!(
                "layer {k}: teacher {t:?}, student {:?}",
                student_spec.layer_shape(k)
            )));
        }
    }
    if teacher.projection.shape() != student_spec.projection_shape() {
        return Err(Error::IncompatibleShapes(format!(
            "projection: teacher {:?}, student {:?}",
            teacher.projection.shape(),
            student_spec.projection_shape()
        )));
    }
    Ok(EncoderParams {
        layers: teacher.layers[..student_spec.num_layers].to_vec(),
        projection: teacher.projection.clone(),
        frozen: false,
    })
}

/// Reverse pass through a recorded forward pass.
///
/// `d_embedding` is the gradient on the normalized output (or `None`);
/// `tap_grads` adds gradients on individual pre-activations, keyed by
/// 1-based layer index. Returns parameter gradients and the input gradient.
pub fn backward_trace<T: Scalar>(
    params: &EncoderParams<T>,
    trace: &ForwardTrace<T>,
    d_embedding: Option<&Matrix<T>>,
    tap_grads: &[(usize, Matrix<T>)],
) -> Result<(EncoderGrads<T>, Matrix<T>)> {
    let d_raw = match d_embedding {
        Some(d) => l2_normalize_rows_backward(&trace.embedding, &trace.output_norms, d)?,
        None => Matrix::zeros(trace.raw_output.rows(), trace.raw_output.cols()),
    };
    backward_from_raw(params, trace, &d_raw, tap_grads)
}

fn backward_from_raw<T: Scalar>(
    params: &EncoderParams<T>,
    trace: &ForwardTrace<T>,
    d_raw: &Matrix<T>,
    tap_grads: &[(usize, Matrix<T>)],
) -> Result<(EncoderGrads<T>, Matrix<T>)> {
    let num_layers = params.layers.len();
    for (layer, g) in tap_grads {
        if *layer == 0 || *layer > num_layers {
            return Err(Error::BadParts { parts: *layer, num_layers });
        }
        trace.pre_activations[layer - 1].check_same_shape(g, "tap gradient")?;
    }
    // the last layer has no nonlinearity, so its pre-activation feeds the projection
    let last_hidden = &trace.pre_activations[num_layers - 1];
    let (proj_grad, d_h) = params.projection.backward(last_hidden, d_raw, true)?;
    let mut d_h = d_h.expect("requested");
    let mut layer_grads = Vec::with_capacity(num_layers);
    for k in (0..num_layers).rev() {
        // d_h is the gradient on this layer's output (post-activation)
        let mut d_z = if k + 1 < num_layers {
            let h_out = &trace.layer_inputs[k + 1];
            d_h.zip_map(h_out, |g, h| g * (T::one() - h * h))?
        } else {
            d_h
        };
        for (layer, g) in tap_grads {
            if *layer == k + 1 {
                d_z.add_scaled(g, T::one())?;
            }
        }
        let (g, d_in) = params.layers[k].backward(&trace.layer_inputs[k], &d_z, true)?;
        layer_grads.push(g);
        d_h = d_in.expect("requested");
    }
    layer_grads.reverse();
    Ok((
        EncoderGrads {
            layers: layer_grads,
            projection: proj_grad,
        },
        d_h,
    ))
}

/// Gradients of a downstream scalar with respect to parameters and inputs,
/// given its gradient `upstream` on the normalized embeddings.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    spec: &EncoderSpec,
    inputs: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<(EncoderGrads<T>, Matrix<T>)> {
    let trace = forward_trace(params, spec, inputs)?;
    trace.embedding.check_same_shape(upstream, "encoder backward")?;
    backward_trace(params, &trace, Some(upstream), &[])
}

/// Pre-normalization output, for callers that apply their own head.
pub fn forward_raw<T: Scalar>(params: &EncoderParams<T>, spec: &EncoderSpec, inputs: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(forward_trace(params, spec, inputs)?.raw_output)
}

/// Backward pass for [`forward_raw`]: `upstream` is the gradient on the
/// pre-normalization output.
pub fn backward_raw<T: Scalar>(
    params: &EncoderParams<T>,
    spec: &EncoderSpec,
    inputs: &Matrix<T>,
    upstream: &Matrix<T>,
) -> Result<(EncoderGrads<T>, Matrix<T>)> {
    let trace = forward_trace(params, spec, inputs)?;
    trace.raw_output.check_same_shape(upstream, "encoder backward_raw")?;
    backward_from_raw(params, &trace, upstream, &[])
}

/// An encoder's architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub spec: EncoderSpec,
    pub params: EncoderParams<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(spec: EncoderSpec, params: EncoderParams<T>) -> Result<Self> {
        spec.validate()?;
        params.check_spec(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn random<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            params: EncoderParams::random(&spec, rng),
            spec,
        })
    }

    pub fn encode(&self, inputs: &Matrix<T>) -> Result<EmbeddingBatch<T>> {
        forward(&self.params, &self.spec, inputs)
    }

    pub fn trace(&self, inputs: &Matrix<T>) -> Result<ForwardTrace<T>> {
        forward_trace(&self.params, &self.spec, inputs)
    }

    pub fn is_frozen(&self) -> bool {
        self.params.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.frozen = frozen;
    }
}

/// How a student encoder gets its starting parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Copy the first layers and the projection of the same-modality teacher.
    #[default]
    FromTeacher,
    /// Fresh seeded uniform initialization.
    Random,
}

/// Teacher and student encoders for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderBundle<T> {
    pub text_teacher: Encoder<T>,
    pub image_teacher: Encoder<T>,
    pub text_student: Encoder<T>,
    pub image_student: Encoder<T>,
}

impl<T: Scalar> DualEncoderBundle<T> {
    /// Freezes the teachers and initializes students for distillation.
    #[allow(clippy::too_many_arguments)]
    pub fn for_distillation<R: Rng + ?Sized>(
        mut text_teacher: Encoder<T>,
        mut image_teacher: Encoder<T>,
        text_student_spec: EncoderSpec,
        image_student_spec: EncoderSpec,
        text_init: StudentInit,
        image_init: StudentInit,
        rng: &mut R,
    ) -> Result<Self> {
        text_teacher.set_frozen(true);
        image_teacher.set_frozen(true);
        let mut student = |teacher: &Encoder<T>, spec: EncoderSpec, init: StudentInit| -> Result<Encoder<T>> {
            let params = match init {
                StudentInit::FromTeacher => init_student_from_teacher(&teacher.params, &spec)?,
                StudentInit::Random => EncoderParams::random(&spec, rng),
            };
            Encoder::new(spec, params)
        };
        let text_student = student(&text_teacher, text_student_spec, text_init)?;
        let image_student = student(&image_teacher, image_student_spec, image_init)?;
        let bundle = Self {
            text_teacher,
            image_teacher,
            text_student,
            image_student,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.text_teacher.spec.output_dim;
        for e in [&self.image_teacher, &self.text_student, &self.image_student] {
            if e.spec.output_dim != d {
                return Err(Error::shape("bundle output_dim", d, e.spec.output_dim));
            }
        }
        if self.text_teacher.spec.input_dim != self.text_student.spec.input_dim {
            return Err(Error::shape(
                "text input_dim",
                self.text_teacher.spec.input_dim,
                self.text_student.spec.input_dim,
            ));
        }
        if self.image_teacher.spec.input_dim != self.image_student.spec.input_dim {
            return Err(Error::shape(
                "image input_dim",
                self.image_teacher.spec.input_dim,
                self.image_student.spec.input_dim,
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::infonce;
    use crate::numerics::{compare_grads, dot, finite_diff_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn identity_encoder(n: usize) -> (EncoderSpec, EncoderParams<f64>) {
        let spec = EncoderSpec::new(n, n, 1, n).unwrap();
        let id = Affine {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        };
        (
            spec,
            EncoderParams {
                layers: vec![id.clone()],
                projection: id,
                frozen: false,
            },
        )
    }

    #[test]
    fn identity_encoder_passes_unit_rows_through() {
        let (spec, params) = identity_encoder(4);
        let x = l2_normalize_rows(&Matrix::<f64>::random_normal(3, 4, &mut rng(0))).unwrap();
        let out = forward(&params, &spec, &x).unwrap();
        assert!(out.matrix().max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn zero_input_gives_identical_rows() {
        let spec = EncoderSpec::new(5, 7, 3, 4).unwrap();
        let params = EncoderParams::<f64>::random(&spec, &mut rng(1));
        let out = forward(&params, &spec, &Matrix::zeros(6, 5)).unwrap();
        for i in 1..6 {
            assert_eq!(out.matrix().row(i), out.matrix().row(0));
        }
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let spec = EncoderSpec::new(5, 6, 3, 4).unwrap();
        let p = EncoderParams::<f64>::random(&spec, &mut rng(8));
        let x = Matrix::<f64>::random_normal(4, 5, &mut rng(80));
        let out = forward(&p, &spec, &x).unwrap();
        for n in 0..4 {
            let mut h: Vec<f64> = x.row(n).to_vec();
            for (k, layer) in p.layers.iter().enumerate() {
                let mut z = vec![0.0; spec.hidden_dim];
                for o in 0..spec.hidden_dim {
                    let mut s = layer.bias[o];
                    for (i, hv) in h.iter().enumerate() {
                        s += layer.weight[(o, i)] * hv;
                    }
                    z[o] = if k + 1 < spec.num_layers { s.tanh() } else { s };
                }
                h = z;
            }
            let mut y = vec![0.0; 4];
            for o in 0..4 {
                y[o] = p.projection.bias[o] + (0..6).map(|i| p.projection.weight[(o, i)] * h[i]).sum::<f64>();
            }
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            for o in 0..4 {
                assert!((out.matrix()[(n, o)] - y[o] / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_width_checked() {
        let spec = EncoderSpec::new(5, 6, 2, 4).unwrap();
        let p = EncoderParams::<f64>::random(&spec, &mut rng(2));
        assert!(matches!(
            forward(&p, &spec, &Matrix::zeros(2, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn taps_and_boundaries() {
        assert_eq!(part_boundaries(6, 6).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(part_boundaries(6, 1).unwrap(), vec![6]);
        assert_eq!(part_boundaries(6, 4).unwrap(), vec![2, 3, 5, 6]);
        assert_eq!(part_boundaries(4, 3).unwrap(), vec![2, 3, 4]);
        assert!(matches!(part_boundaries(3, 4), Err(Error::BadParts { .. })));
        assert!(matches!(part_boundaries(3, 0), Err(Error::BadParts { .. })));

        let spec = EncoderSpec::new(5, 6, 4, 3).unwrap();
        let p = EncoderParams::<f64>::random(&spec, &mut rng(3));
        let x = Matrix::random_normal(2, 5, &mut rng(4));
        let (emb, taps) = forward_with_taps(&p, &spec, &x, 1).unwrap();
        assert_eq!(taps.len(), 1);
        let trace = forward_trace(&p, &spec, &x).unwrap();
        assert_eq!(taps[0], trace.pre_activations[3]);
        assert_eq!(emb.matrix(), &trace.embedding);
        let (_, taps) = forward_with_taps(&p, &spec, &x, 4).unwrap();
        assert_eq!(taps, trace.pre_activations);
    }

    #[test]
    fn student_copies_teacher_prefix() {
        let t_spec = EncoderSpec::new(8, 10, 6, 4).unwrap();
        let teacher = EncoderParams::<f64>::random(&t_spec, &mut rng(5)).frozen(true);
        let s_spec = EncoderSpec::new(8, 10, 2, 4).unwrap();
        let student = init_student_from_teacher(&teacher, &s_spec).unwrap();
        assert!(!student.frozen);
        assert_eq!(student.layers[..], teacher.layers[..2]);
        assert_eq!(student.projection, teacher.projection);

        let x = Matrix::random_normal(3, 8, &mut rng(6));
        let (_, s_taps) = forward_with_taps(&student, &s_spec, &x, 2).unwrap();
        let (_, t_taps) = forward_with_taps(&teacher, &t_spec, &x, 6).unwrap();
        assert_eq!(s_taps[0].as_slice(), t_taps[0].as_slice());
        assert_eq!(s_taps[1].as_slice(), t_taps[1].as_slice());

        let full = init_student_from_teacher(&teacher, &t_spec).unwrap();
        assert_eq!(full.clone().frozen(true), teacher);

        let wrong = EncoderSpec::new(8, 12, 2, 4).unwrap();
        assert!(matches!(init_student_from_teacher(&teacher, &wrong), Err(Error::IncompatibleShapes(_))));
        let too_deep = EncoderSpec::new(8, 10, 7, 4).unwrap();
        assert!(matches!(init_student_from_teacher(&teacher, &too_deep), Err(Error::IncompatibleShapes(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let spec = EncoderSpec::new(4, 5, 3, 3).unwrap();
        let p = EncoderParams::<f64>::random(&spec, &mut rng(7));
        let x = Matrix::random_normal(3, 4, &mut rng(70));
        let (g, dx) = backward(&p, &spec, &x, &Matrix::zeros(3, 3)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_closed_form() {
        // one layer, no normalization: o = (x W1ᵀ + b1) Pᵀ + c, loss = Σ U ⊙ o
        let spec = EncoderSpec::new(3, 4, 1, 2).unwrap();
        let p = EncoderParams::<f64>::random(&spec, &mut rng(11));
        let x = Matrix::random_normal(5, 3, &mut rng(12));
        let u = Matrix::random_normal(5, 2, &mut rng(13));
        let (g, dx) = backward_raw(&p, &spec, &x, &u).unwrap();
        let z = p.layers[0].apply(&x).unwrap();
        assert_eq!(g.projection.weight, t_matmul(&u, &z).unwrap());
        assert_eq!(g.projection.bias, u.column_sums());
        let dz = matmul(&u, &p.projection.weight).unwrap();
        assert_eq!(g.layers[0].weight, t_matmul(&dz, &x).unwrap());
        assert_eq!(dx, matmul(&dz, &p.layers[0].weight).unwrap());
    }

    fn set_tensor(p: &mut EncoderParams<f64>, idx: usize, m: &Matrix<f64>) {
        p.tensors_mut()[idx].copy_from_slice(m.as_slice());
    }

    fn tensor_matrix(t: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(1, t.len(), t.to_vec()).unwrap()
    }

    #[test]
    fn backward_through_infonce_matches_fd() {
        let spec = EncoderSpec::new(5, 6, 3, 4).unwrap();
        let p = EncoderParams::<f64>::random(&spec, &mut rng(9));
        let x = Matrix::random_normal(4, 5, &mut rng(90));
        let target = EmbeddingBatch::normalized(&Matrix::random_normal(4, 4, &mut rng(91))).unwrap().detach();
        let tau = 0.5;
        let loss_of = |params: &EncoderParams<f64>, inp: &Matrix<f64>| -> Result<f64> {
            Ok(infonce(&forward(params, &spec, inp)?, &target, tau)?.value)
        };
        let emb = forward(&p, &spec, &x).unwrap();
        let lv = infonce(&emb, &target, tau).unwrap();
        let (g, dx) = backward(&p, &spec, &x, lv.grad(0).unwrap()).unwrap();

        for (idx, analytic) in g.tensors().iter().enumerate() {
            let at = tensor_matrix(p.tensors()[idx]);
            let numeric = finite_diff_grad(
                |m| {
                    let mut probe = p.clone();
                    set_tensor(&mut probe, idx, m);
                    loss_of(&probe, &x)
                },
                &at,
                1e-4,
            )
            .unwrap();
            let rep = compare_grads(&tensor_matrix(analytic), &numeric, 1e-6).unwrap();
            assert!(rep.passes(1e-4), "tensor {idx}: {rep:?}");
        }
        let numeric = finite_diff_grad(|m| loss_of(&p, m), &x, 1e-4).unwrap();
        assert!(compare_grads(&dx, &numeric, 1e-6).unwrap().passes(1e-4));
    }

    #[test]
    fn tap_gradients_match_fd() {
        let spec = EncoderSpec::new(3, 4, 3, 2).unwrap();
        let p = EncoderParams::<f64>::random(&spec, &mut rng(14));
        let x = Matrix::random_normal(3, 3, &mut rng(15));
        let w = Matrix::random_normal(3, 4, &mut rng(16));
        // loss = Σ w ⊙ z_2 (a tap only, no embedding term)
        let loss_of = |params: &EncoderParams<f64>| -> Result<f64> {
            let t = forward_trace(params, &spec, &x)?;
            Ok(dot(t.pre_activations[1].as_slice(), w.as_slice()))
        };
        let trace = forward_trace(&p, &spec, &x).unwrap();
        let (g, _) = backward_trace(&p, &trace, None, &[(2, w.clone())]).unwrap();
        assert!(g.projection.weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.layers[2].weight.as_slice().iter().all(|&v| v == 0.0));
        for idx in 0..4 {
            let at = tensor_matrix(p.tensors()[idx]);
            let numeric = finite_diff_grad(
                |m| {
                    let mut probe = p.clone();
                    set_tensor(&mut probe, idx, m);
                    loss_of(&probe)
                },
                &at,
                1e-4,
            )
            .unwrap();
            let rep = compare_grads(&tensor_matrix(g.tensors()[idx]), &numeric, 1e-6).unwrap();
            assert!(rep.passes(1e-6), "tensor {idx}: {rep:?}");
        }
    }

    #[test]
    fn bundle_freezes_teachers() {
        let mut r = rng(17);
        let t_spec = EncoderSpec::new(6, 8, 4, 3).unwrap();
        let i_spec = EncoderSpec::new(7, 8, 4, 3).unwrap();
        let tt = Encoder::<f64>::random(t_spec, &mut r).unwrap();
        let it = Encoder::<f64>::random(i_spec, &mut r).unwrap();
        let s_spec = EncoderSpec::new(6, 8, 2, 3).unwrap();
        let si_spec = EncoderSpec::new(7, 8, 2, 3).unwrap();
        let b = DualEncoderBundle::for_distillation(tt, it, s_spec, si_spec, StudentInit::FromTeacher, StudentInit::Random, &mut r).unwrap();
        assert!(b.text_teacher.is_frozen() && b.image_teacher.is_frozen());
        assert!(!b.text_student.is_frozen() && !b.image_student.is_frozen());
        assert_eq!(b.text_student.params.layers[0], b.text_teacher.params.layers[0]);
        assert_ne!(b.image_student.params.layers[0], b.image_teacher.params.layers[0]);
    }
}
