//! Synthetic paired text/image inputs generated from a shared latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul_t, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub pairs: usize,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub noise: f64,
    pub seed: u64,
    /// Use identity modality maps (requires both input dims to equal the latent dim).
    #[serde(default)]
    pub identity_maps: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            latent_dim: 16,
            text_dim: 48,
            image_dim: 64,
            noise: 0.1,
            seed: 10,
            identity_maps: false,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::InvalidConfig("pairs must be >= 1".into()));
        }
        if self.latent_dim == 0 || self.text_dim == 0 || self.image_dim == 0 {
            return Err(Error::InvalidConfig("dimensions must be >= 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidConfig(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.identity_maps && (self.text_dim != self.latent_dim || self.image_dim != self.latent_dim) {
            return Err(Error::InvalidConfig("identity maps need text_dim = image_dim = latent_dim".into()));
        }
        Ok(())
    }
}

/// Row `i` of `text_inputs` and row `i` of `image_inputs` form the positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<T> {
    pub text_inputs: Matrix<T>,
    pub image_inputs: Matrix<T>,
    pub spec: DataSpec,
}

/// The generator's hidden state, exposed for analysis.
#[derive(Clone, Debug)]
pub struct GeneratedLatents<T> {
    pub latents: Matrix<T>,
    /// `text_dim × latent_dim`.
    pub text_map: Matrix<T>,
    /// `image_dim × latent_dim`.
    pub image_map: Matrix<T>,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn len(&self) -> usize {
        self.text_inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(train, validation)` row ranges; the last `fraction` of pairs are held out.
    pub fn split(&self, fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let m = self.len();
        let held = ((m as f64) * fraction).round() as usize;
        let held = if m >= 2 { held.clamp(1, m - 1) } else { 0 };
        (0..m - held, m - held..m)
    }
}

/// Draws `z_i ~ N(0, I)` and emits `A_T z_i + noise·ε` and `A_I z_i + noise·ε'`
/// with fixed Gaussian maps scaled by `1/√latent_dim`.
pub fn generate_pairs<T: Scalar>(spec: &DataSpec) -> Result<SyntheticDataset<T>> {
    Ok(generate_pairs_with_latents(spec)?.0)
}

pub fn generate_pairs_with_latents<T: Scalar>(spec: &DataSpec) -> Result<(SyntheticDataset<T>, GeneratedLatents<T>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (text_map, image_map) = if spec.identity_maps {
        (Matrix::identity(spec.latent_dim), Matrix::identity(spec.latent_dim))
    } else {
        let scale = T::of(1.0 / (spec.latent_dim as f64).sqrt());
        (
            Matrix::<T>::random_normal(spec.text_dim, spec.latent_dim, &mut rng).scale(scale),
            Matrix::<T>::random_normal(spec.image_dim, spec.latent_dim, &mut rng).scale(scale),
        )
    };
    let latents = Matrix::<T>::random_normal(spec.pairs, spec.latent_dim, &mut rng);
    let noise = T::of(spec.noise);
    let mut text_inputs = matmul_t(&latents, &text_map)?;
    let text_noise = Matrix::<T>::random_normal(spec.pairs, spec.text_dim, &mut rng);
    text_inputs.add_scaled(&text_noise, noise)?;
    let mut image_inputs = matmul_t(&latents, &image_map)?;
    let image_noise = Matrix::<T>::random_normal(spec.pairs, spec.image_dim, &mut rng);
    image_inputs.add_scaled(&image_noise, noise)?;
    Ok((
        SyntheticDataset {
            text_inputs,
            image_inputs,
            spec: *spec,
        },
        GeneratedLatents {
            latents,
            text_map,
            image_map,
        },
    ))
}
