//! Image and text towers mapping into a shared embedding space, LoRA
//! adapters, and the similarity function used by every objective.

mod checkpoint;
mod layers;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use layers::{Linear, LoraAdapter, LoraConfig, Param};

use layers::BoundLinear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Activation, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityFn {
    /// Inner product of L2-normalized embeddings.
    #[default]
    Cosine,
    /// `-‖a - b‖`.
    NegL2,
}

impl SimilarityFn {
    /// Row-wise similarity of two `[n×d]` (or `[d]`) embeddings.
    pub fn rows<'t>(self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("similarity", &a.shape(), &b.shape()));
        }
        match self {
            SimilarityFn::Cosine => a.l2_normalize()?.dot_rows(b.l2_normalize()?),
            SimilarityFn::NegL2 => a.sub(b)?.norm()?.neg(),
        }
    }

    /// Similarity of two plain vectors.
    pub fn eval(self, a: &[f64], b: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let av = tape.constant(Tensor::vector(a.to_vec()));
        let bv = tape.constant(Tensor::vector(b.to_vec()));
        self.rows(av, bv)?.item()
    }
}

/// Which towers receive LoRA adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoraTowers {
    Image,
    Text,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: ActivationKind,
    pub similarity: SimilarityFn,
    /// Adapters on the linear layers with the base frozen; `None` trains the base.
    pub lora: Option<LoraConfig>,
    pub lora_towers: LoraTowers,
    /// Whether the goal table itself is trainable (the projection always is).
    pub train_goal_table: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            embed_dim: 64,
            activation: ActivationKind::Gelu,
            similarity: SimilarityFn::Cosine,
            lora: None,
            lora_towers: LoraTowers::Both,
            train_goal_table: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Gelu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Tanh => Activation::Tanh,
            ActivationKind::Gelu => Activation::Gelu,
        }
    }
}

/// MLP from observation vectors to `d`-dimensional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub layers: Vec<Linear>,
    pub activation: ActivationKind,
}

pub(crate) struct BoundImage<'t> {
    layers: Vec<BoundLinear<'t>>,
    activation: Activation,
}

impl ImageEncoder {
    pub fn new(
        obs_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        activation: ActivationKind,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![obs_dim];
        widths.extend_from_slice(hidden);
        widths.push(embed_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("image.{i}"), w[0], w[1], &mut rng))
            .collect();
        Self { layers, activation }
    }

    pub fn obs_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map(|l| l.d_out()).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.obs_dim()];
        w.extend(self.layers.iter().map(|l| l.d_out()));
        w
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| l.lora.is_some())
    }

    /// Attaches fresh adapters to every layer and freezes the base weights.
    pub fn add_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.lora = Some(LoraAdapter::new(
                &format!("image.{i}"),
                l.d_in(),
                l.d_out(),
                cfg,
                &mut rng,
            )?);
            l.weight.trainable = false;
            l.bias.trainable = false;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape) -> BoundImage<'t> {
        BoundImage {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            activation: self.activation.into(),
        }
    }

    /// Embeds a single observation.
    pub fn encode(&self, obs: &Tensor) -> Result<Tensor> {
        let d = self.obs_dim();
        if obs.shape() != [d] {
            return Err(Error::shape("encode_image", obs.shape(), &[d]));
        }
        let out = self.encode_batch(&obs.reshape(vec![1, d])?)?;
        out.reshape(vec![self.embed_dim()])
    }

    /// Embeds the rows of an `[n×obs_dim]` matrix.
    pub fn encode_batch(&self, obs: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let x = tape.constant(obs.clone());
        let out = bound.forward(x)?;
        let t = out.value().clone();
        Ok(t)
    }

    /// Copy with adapters folded into the base weights.
    ///
    /// Returns the copy unchanged (and `false`) when there are no adapters.
    pub fn merge_lora(&self) -> Result<(ImageEncoder, bool)> {
        let mut out = self.clone();
        let mut merged = false;
        for l in &mut out.layers {
            if l.merge()? {
                merged = true;
                l.weight.trainable = true;
                l.bias.trainable = true;
            }
        }
        if !merged {
            log::warn!("merge_lora: encoder has no adapters, nothing to merge");
        }
        Ok((out, merged))
    }
}

impl<'t> BoundImage<'t> {
    pub(crate) fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }

    pub(crate) fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let d_in = self.layers[0].vars()[0].shape()[0];
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != d_in {
            return Err(Error::shape(
                "encode_image",
                &shape,
                &[shape.first().copied().unwrap_or(0), d_in],
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h)?;
            if i < last {
                h = h.activation(self.activation)?;
            }
        }
        Ok(h)
    }
}

/// Goal lookup table followed by a linear projection into the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    /// Goal id of each table row.
    pub goal_ids: Vec<u32>,
    pub table: Param,
    pub projection: Linear,
}

pub(crate) struct BoundText<'t> {
    table: Var<'t>,
    projection: BoundLinear<'t>,
}

impl TextEncoder {
    /// Builds the tower from one feature row per goal.
    pub fn new(
        goal_ids: Vec<u32>,
        features: Tensor,
        embed_dim: usize,
        train_table: bool,
        seed: u64,
    ) -> Result<Self> {
        let (rows, width) = features.dims2()?;
        if rows != goal_ids.len() {
            return Err(Error::Contract(format!(
                "{} goal ids but {} table rows",
                goal_ids.len(),
                rows
            )));
        }
        let mut sorted = goal_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != goal_ids.len() {
            return Err(Error::Contract("duplicate goal id in text table".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            goal_ids,
            table: Param::new("text.table", features, train_table),
            projection: Linear::new("text.proj", width, embed_dim, &mut rng),
        })
    }

    /// Table filled with uniform random features.
    pub fn random(
        goal_ids: Vec<u32>,
        table_dim: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
        let table = layers::uniform(&mut rng, &[goal_ids.len(), table_dim], 1.0);
        Self::new(goal_ids, table, embed_dim, true, seed)
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.d_out()
    }

    pub fn row_of(&self, goal: u32) -> Result<usize> {
        self.goal_ids
            .iter()
            .position(|&g| g == goal)
            .ok_or_else(|| Error::Lookup(format!("unknown goal id {goal}")))
    }

    pub fn add_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &mut self.projection;
        p.lora = Some(LoraAdapter::new(
            "text.proj",
            p.d_in(),
            p.d_out(),
            cfg,
            &mut rng,
        )?);
        p.weight.trainable = false;
        p.bias.trainable = false;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.table];
        v.extend(self.projection.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.table];
        v.extend(self.projection.params_mut());
        v
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape) -> BoundText<'t> {
        BoundText {
            table: self.table.bind(tape),
            projection: self.projection.bind(tape),
        }
    }

    pub fn encode(&self, goal: u32) -> Result<Tensor> {
        let out = self.encode_batch(&[goal])?;
        out.reshape(vec![self.embed_dim()])
    }

    pub fn encode_batch(&self, goals: &[u32]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let rows = goals
            .iter()
            .map(|&g| self.row_of(g))
            .collect::<Result<Vec<_>>>()?;
        let out = bound.forward(&rows)?;
        let t = out.value().clone();
        Ok(t)
    }
}

impl<'t> BoundText<'t> {
    pub(crate) fn vars(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.table];
        v.extend(self.projection.vars());
        v
    }

    pub(crate) fn forward(&self, rows: &[usize]) -> Result<Var<'t>> {
        self.projection.forward(self.table.gather_rows(rows)?)
    }
}

/// Both towers plus the similarity they are compared with.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub similarity: SimilarityFn,
}

/// A [`RewardModel`] whose parameters are leaves on a tape.
pub struct BoundModel<'t> {
    pub(crate) image: BoundImage<'t>,
    pub(crate) text: BoundText<'t>,
    pub(crate) text_rows: Vec<u32>,
}

impl RewardModel {
    /// Builds both towers from `cfg`; `goal_features` has one row per goal id.
    pub fn new(
        cfg: &EncoderConfig,
        obs_dim: usize,
        goal_ids: Vec<u32>,
        goal_features: Tensor,
        seed: u64,
    ) -> Result<Self> {
        if cfg.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut image =
            ImageEncoder::new(obs_dim, &cfg.hidden, cfg.embed_dim, cfg.activation, seed);
        let mut text = TextEncoder::new(
            goal_ids,
            goal_features,
            cfg.embed_dim,
            cfg.train_goal_table,
            seed.wrapping_add(1),
        )?;
        if let Some(lora) = cfg.lora {
            if matches!(cfg.lora_towers, LoraTowers::Image | LoraTowers::Both) {
                image.add_lora(lora, seed.wrapping_add(2))?;
            }
            if matches!(cfg.lora_towers, LoraTowers::Text | LoraTowers::Both) {
                text.add_lora(lora, seed.wrapping_add(3))?;
            }
        }
        Ok(Self {
            image,
            text,
            similarity: cfg.similarity,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.image.embed_dim()
    }

    /// All parameters, image tower first.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.image.params();
        v.extend(self.text.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.image.params_mut();
        v.extend(self.text.params_mut());
        v
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            image: self.image.bind(tape),
            text: self.text.bind(tape),
            text_rows: self.text.goal_ids.clone(),
        }
    }

    /// Similarity of each observation row to the goal embedding.
    pub fn score(&self, obs: &Tensor, goal: u32) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let z = bound.encode_images(tape.constant(obs.clone()))?;
        let n = z.shape()[0];
        let v = bound.encode_goals(&vec![goal; n])?;
        let s = self.similarity.rows(z, v)?;
        let out = s.value().data().to_vec();
        Ok(out)
    }
}

impl<'t> BoundModel<'t> {
    /// Parameter vars in the same order as [`RewardModel::params`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut v = self.image.vars();
        v.extend(self.text.vars());
        v
    }

    pub fn encode_images(&self, obs: Var<'t>) -> Result<Var<'t>> {
        self.image.forward(obs)
    }

    pub fn encode_goals(&self, goals: &[u32]) -> Result<Var<'t>> {
        let rows = goals
            .iter()
            .map(|g| {
                self.text_rows
                    .iter()
                    .position(|r| r == g)
                    .ok_or_else(|| Error::Lookup(format!("unknown goal id {g}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.text.forward(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, FD_STEP};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small_image(seed: u64) -> ImageEncoder {
        ImageEncoder::new(6, &[8, 8], 4, ActivationKind::Gelu, seed)
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut enc = small_image(0);
        for p in enc.params_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let z = enc.encode(&rand_tensor(&[6], 1)).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lora_at_init_matches_base() {
        let base = small_image(3);
        let mut adapted = base.clone();
        adapted
            .add_lora(
                LoraConfig {
                    rank: 2,
                    alpha: 4.0,
                },
                9,
            )
            .unwrap();
        let obs = rand_tensor(&[5, 6], 4);
        assert_eq!(
            base.encode_batch(&obs).unwrap(),
            adapted.encode_batch(&obs).unwrap()
        );
    }

    #[test]
    fn encode_image_rejects_wrong_width() {
        let enc = small_image(0);
        let err = enc.encode(&Tensor::zeros(&[5])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn encode_image_grad_check() {
        let enc = small_image(5);
        let obs = rand_tensor(&[6], 6);
        // gradient wrt the first layer weight
        let w0 = enc.layers[0].weight.value.clone();
        let err = grad_check(
            |t, w| {
                let mut bound = enc.bind(t);
                bound.layers[0] = BoundLinear::with_weight(&enc.layers[0], t, w);
                let z = bound.forward(t.constant(obs.reshape(vec![1, 6]).unwrap()))?;
                z.mul(z)?.sum()
            },
            &w0,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        // and wrt the input
        let err = grad_check(
            |t, x| {
                let z = enc.bind(t).forward(x)?;
                z.mul(z)?.sum()
            },
            &obs.reshape(vec![1, 6]).unwrap(),
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn frozen_base_only_adapters_get_gradients() {
        let mut enc = small_image(7);
        enc.add_lora(
            LoraConfig {
                rank: 2,
                alpha: 4.0,
            },
            1,
        )
        .unwrap();
        // make B non-zero so A receives gradient
        for l in &mut enc.layers {
            let up = &mut l.lora.as_mut().unwrap().up.value;
            up.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = 0.01 * i as f64);
        }
        let tape = Tape::new();
        let bound = enc.bind(&tape);
        let z = bound
            .forward(tape.constant(rand_tensor(&[3, 6], 2)))
            .unwrap();
        let g = z.mul(z).unwrap().sum().unwrap().backward().unwrap();
        for (p, v) in enc.params().iter().zip(bound.vars()) {
            assert_eq!(g.get(v).is_some(), p.trainable, "{}", p.name);
        }
    }

    fn goal_table(n: usize, width: usize, seed: u64) -> (Vec<u32>, Tensor) {
        (
            (0..n as u32).map(|g| g * 10).collect(),
            rand_tensor(&[n, width], seed),
        )
    }

    #[test]
    fn encode_text_deterministic_and_distinct() {
        let (ids, feats) = goal_table(3, 5, 8);
        let text = TextEncoder::new(ids, feats, 4, false, 1).unwrap();
        assert_eq!(text.encode(10).unwrap(), text.encode(10).unwrap());
        assert_ne!(text.encode(10).unwrap(), text.encode(20).unwrap());
        let rand = TextEncoder::random(vec![1, 2], 8, 4, 3).unwrap();
        assert_ne!(rand.encode(1).unwrap(), rand.encode(2).unwrap());
    }

    #[test]
    fn encode_text_unknown_goal() {
        let (ids, feats) = goal_table(2, 5, 8);
        let text = TextEncoder::new(ids, feats, 4, false, 1).unwrap();
        assert!(matches!(text.encode(7).unwrap_err(), Error::Lookup(_)));
    }

    #[test]
    fn encode_text_grad_check_through_projection() {
        let (ids, feats) = goal_table(3, 5, 8);
        let text = TextEncoder::new(ids, feats, 4, false, 1).unwrap();
        let w = text.projection.weight.value.clone();
        let err = grad_check(
            |t, w| {
                let bound = BoundLinear::with_weight(&text.projection, t, w);
                let x = t.constant(text.table.value.clone()).gather_rows(&[2, 0])?;
                let v = bound.forward(x)?;
                v.mul(v)?.sum()
            },
            &w,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn similarity_spot_values() {
        let c = SimilarityFn::Cosine;
        assert!((c.eval(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(c.eval(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(
            SimilarityFn::NegL2.eval(&[1.0, 1.0], &[1.0, 1.0]).unwrap(),
            0.0
        );
        assert!(matches!(
            c.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err(),
            Error::Degenerate(_)
        ));
    }

    #[test]
    fn merge_lora_matches_adapted_forward() {
        let mut enc = small_image(11);
        enc.add_lora(
            LoraConfig {
                rank: 3,
                alpha: 6.0,
            },
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in &mut enc.layers {
            let up = &mut l.lora.as_mut().unwrap().up.value;
            up.data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
        let obs = rand_tensor(&[7, 6], 5);
        let (merged, did) = enc.merge_lora().unwrap();
        assert!(did);
        assert!(!merged.has_adapters());
        let diff = merged
            .encode_batch(&obs)
            .unwrap()
            .max_abs_diff(&enc.encode_batch(&obs).unwrap());
        assert!(diff < 1e-10, "{diff}");
        let (again, did_again) = merged.merge_lora().unwrap();
        assert!(!did_again);
        assert_eq!(again, merged);
    }

    #[test]
    fn merge_with_zero_up_keeps_weights() {
        let base = small_image(12);
        let mut enc = base.clone();
        enc.add_lora(LoraConfig::default(), 2).unwrap();
        let (merged, _) = enc.merge_lora().unwrap();
        for (a, b) in merged.layers.iter().zip(&base.layers) {
            assert_eq!(a.weight.value, b.weight.value);
        }
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            b in prop::collection::vec(-3.0f64..3.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let s = SimilarityFn::Cosine;
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let lhs = s.eval(&scaled, &b).unwrap();
            let rhs = s.eval(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&lhs));
            prop_assert!((s.eval(&b, &a).unwrap() - rhs).abs() < 1e-15);
            let l2 = SimilarityFn::NegL2;
            prop_assert!(l2.eval(&a, &b).unwrap() <= 0.0);
            prop_assert_eq!(l2.eval(&a, &b).unwrap(), l2.eval(&b, &a).unwrap());
        }
    }
}
