use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, WorldConfig, OBJECT};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Fixed per-view affine maps from latent state to observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRenderer {
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// One `[obs_dim × latent_dim]` matrix per view.
    pub projections: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
    pub noise: f64,
    /// View whose projection ignores the object, if any.
    pub occluded_view: Option<usize>,
}

impl ViewRenderer {
    pub fn new(seed: u64, cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7e4de7]));
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let mut projections = Vec::with_capacity(cfg.n_views);
        let mut biases = Vec::with_capacity(cfg.n_views);
        for _ in 0..cfg.n_views {
            let data = (0..cfg.obs_dim * cfg.latent_dim)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>();
            projections.push(Tensor::matrix(cfg.obs_dim, cfg.latent_dim, data)?);
            biases.push(
                (0..cfg.obs_dim)
                    .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>(),
            );
        }
        let occluded_view = if rand::Rng::random_bool(&mut rng, cfg.occlusion_prob) {
            let v = rand::Rng::random_range(&mut rng, 0..cfg.n_views);
            let p = &mut projections[v];
            for r in 0..cfg.obs_dim {
                for c in OBJECT {
                    p.data_mut()[r * cfg.latent_dim + c] = 0.0;
                }
            }
            Some(v)
        } else {
            None
        };
        Ok(Self {
            latent_dim: cfg.latent_dim,
            obs_dim: cfg.obs_dim,
            projections,
            biases,
            noise: cfg.obs_noise,
            occluded_view,
        })
    }

    pub fn n_views(&self) -> usize {
        self.projections.len()
    }

    /// Noise-free image of `state` in `view`.
    pub fn project(&self, state: &[f64], view: usize) -> Result<Vec<f64>> {
        let w = self
            .projections
            .get(view)
            .ok_or_else(|| Error::Range(format!("view {view} of {}", self.n_views())))?;
        if state.len() != self.latent_dim {
            return Err(Error::shape("render", &[self.latent_dim], &[state.len()]));
        }
        Ok((0..self.obs_dim)
            .map(|r| {
                let row = w.row(r);
                self.biases[view][r] + row.iter().zip(state).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    pub(crate) fn render_with<R: rand::Rng>(
        &self,
        state: &[f64],
        view: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut obs = self.project(state, view)?;
        if self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
            obs.iter_mut().for_each(|x| *x += n.sample(rng));
        }
        Ok(obs)
    }
}

/// One noisy observation of `state` from `view`, deterministic in `seed`.
pub fn render_view(r: &ViewRenderer, state: &[f64], view: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::vector(r.render_with(state, view, &mut rng)?))
}
