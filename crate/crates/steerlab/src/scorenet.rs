//! Conditional noise-prediction network with an explicit encoder/decoder
//! split around a bottleneck of fixed width H. Prompts are discrete concept
//! tokens with a learned embedding table; there is no path from the input
//! latent to the prediction that bypasses the bottleneck.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::numerics::{ops, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::schedule::NoiseSchedule;
use crate::worlds::WorldSpec;

/// Token id into the prompt embedding table; the unconditional token is the
/// last row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptId(pub usize);

/// Concept categories, their neutral prompts, and the prompt token listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    categories: BTreeMap<String, Vec<String>>,
    neutral: BTreeMap<String, String>,
    prompts: Vec<String>,
}

impl ConceptVocabulary {
    pub fn new(
        categories: BTreeMap<String, Vec<String>>,
        neutral: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut prompts: Vec<String> = Vec::new();
        for (cat, concepts) in &categories {
            if !neutral.contains_key(cat) {
                return Err(SteerError::Config(format!(
                    "category `{cat}` has no neutral concept"
                )));
            }
            for c in concepts {
                if !prompts.contains(c) {
                    prompts.push(c.clone());
                }
            }
        }
        for n in neutral.values() {
            if !prompts.contains(n) {
                prompts.push(n.clone());
            }
        }
        Ok(ConceptVocabulary {
            categories,
            neutral,
            prompts,
        })
    }

    pub fn from_world(world: &WorldSpec) -> Result<Self> {
        let concepts: Vec<String> = world.concept_modes.keys().cloned().collect();
        let categories = BTreeMap::from([(world.category.clone(), concepts)]);
        let neutral = BTreeMap::from([(world.category.clone(), world.neutral.clone())]);
        ConceptVocabulary::new(categories, neutral)
    }

    /// Number of embedding rows: all prompts plus the unconditional token.
    pub fn table_len(&self) -> usize {
        self.prompts.len() + 1
    }

    pub fn uncond(&self) -> PromptId {
        PromptId(self.prompts.len())
    }

    pub fn id(&self, name: &str) -> Result<PromptId> {
        self.prompts
            .iter()
            .position(|p| p == name)
            .map(PromptId)
            .ok_or_else(|| SteerError::UnknownPrompt(name.to_string()))
    }

    pub fn name(&self, id: PromptId) -> Option<&str> {
        if id == self.uncond() {
            return Some("<uncond>");
        }
        self.prompts.get(id.0).map(String::as_str)
    }

    pub fn concepts(&self, category: &str) -> Result<&[String]> {
        self.categories
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| SteerError::UnknownConcept(category.to_string()))
    }

    pub fn neutral_of(&self, category: &str) -> Result<&str> {
        self.neutral
            .get(category)
            .map(String::as_str)
            .ok_or_else(|| SteerError::UnknownConcept(category.to_string()))
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn prompt_names(&self) -> &[String] {
        &self.prompts
    }

    pub(crate) fn categories_map(&self) -> &BTreeMap<String, Vec<String>> {
        &self.categories
    }

    pub(crate) fn neutral_map(&self) -> &BTreeMap<String, String> {
        &self.neutral
    }
}

/// Where a latent came from; constrains its timestep range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    PriorSample,
    ReverseChain,
    Dataset,
}

/// A latent tensor tagged with its schedule timestep.
#[derive(Clone, Debug)]
pub struct Latent {
    pub value: Tensor,
    pub timestep: usize,
    pub provenance: Provenance,
}

impl Latent {
    pub fn new(value: Tensor, timestep: usize, provenance: Provenance, sched: &NoiseSchedule) -> Result<Self> {
        let ok = match provenance {
            Provenance::PriorSample => timestep == sched.steps(),
            Provenance::ReverseChain => timestep >= 1 && timestep <= sched.steps(),
            Provenance::Dataset => timestep == 0,
        };
        if !ok {
            return Err(SteerError::Timestep {
                t: timestep,
                t_max: sched.steps(),
            });
        }
        Ok(Latent {
            value,
            timestep,
            provenance,
        })
    }
}

/// Architecture parameters for the score network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub data_dim: usize,
    /// Bottleneck width H.
    pub bottleneck: usize,
    pub hidden: usize,
    pub prompt_dim: usize,
    pub time_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            data_dim: 2,
            bottleneck: 64,
            hidden: 64,
            prompt_dim: 8,
            time_dim: 8,
        }
    }
}

/// Sinusoidal timestep features, injective over any training grid.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (10_000.0_f64).powf(-(j as f64) / half as f64);
        out.push((t as f64 * freq).sin());
    }
    for j in 0..half {
        let freq = (10_000.0_f64).powf(-(j as f64) / half as f64);
        out.push((t as f64 * freq).cos());
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct NetIds {
    embed: ParamId,
    encoder: Vec<LinearIds>,
    decoder: Vec<LinearIds>,
}

/// The conditional ε-predictor f = g ∘ e with exposed bottleneck.
#[derive(Clone, Debug)]
pub struct ScoreNetwork {
    config: NetworkConfig,
    vocab: ConceptVocabulary,
    store: ParamStore,
    ids: NetIds,
}

fn init_linear(
    store: &mut ParamStore,
    name: &str,
    d_out: usize,
    d_in: usize,
    rng: &mut Rng,
) -> LinearIds {
    let scale = 1.0 / (d_in as f64).sqrt();
    let w = store.add(format!("{name}.w"), rng.normal_tensor(vec![d_out, d_in]).scale(scale));
    let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
    LinearIds { w, b }
}

impl ScoreNetwork {
    pub fn new(config: NetworkConfig, vocab: ConceptVocabulary, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let embed = store.add(
            "embed",
            rng.normal_tensor(vec![vocab.table_len(), config.prompt_dim]),
        );
        let enc_in = config.data_dim + config.prompt_dim + config.time_dim;
        let encoder = vec![
            init_linear(&mut store, "enc.l1", config.hidden, enc_in, rng),
            init_linear(&mut store, "enc.l2", config.hidden, config.hidden, rng),
            init_linear(&mut store, "enc.l3", config.bottleneck, config.hidden, rng),
        ];
        let dec_in = config.bottleneck + config.prompt_dim + config.time_dim;
        let decoder = vec![
            init_linear(&mut store, "dec.l1", config.hidden, dec_in, rng),
            init_linear(&mut store, "dec.l2", config.hidden, config.hidden, rng),
            init_linear(&mut store, "dec.l3", config.data_dim, config.hidden, rng),
        ];
        ScoreNetwork {
            config,
            vocab,
            store,
            ids: NetIds {
                embed,
                encoder,
                decoder,
            },
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn vocab(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.config.bottleneck
    }

    fn check_prompts(&self, prompts: &[PromptId]) -> Result<Vec<usize>> {
        prompts
            .iter()
            .map(|p| {
                if p.0 < self.vocab.table_len() {
                    Ok(p.0)
                } else {
                    Err(SteerError::UnknownPrompt(format!("id {}", p.0)))
                }
            })
            .collect()
    }

    fn time_rows(&self, ts: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = ts
            .iter()
            .map(|&t| time_embedding(t, self.config.time_dim))
            .collect();
        Tensor::from_rows(&rows).expect("time embedding rows are uniform")
    }

    fn mlp(&self, input: &Tensor, layers: &[LinearIds]) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, l) in layers.iter().enumerate() {
            x = ops::linear(&x, self.store.value(l.w), self.store.value(l.b))?;
            if i + 1 < layers.len() {
                x = ops::silu(&x);
            }
        }
        Ok(x)
    }

    /// Batched encoder: z [n, d], one prompt and timestep per row → h [n, H].
    pub fn encode_batch(&self, z: &Tensor, prompts: &[PromptId], ts: &[usize]) -> Result<Tensor> {
        let ids = self.check_prompts(prompts)?;
        let emb = ops::select_rows(self.store.value(self.ids.embed), &ids)?;
        let temb = self.time_rows(ts);
        let input = ops::concat_cols(&[z, &emb, &temb])?;
        self.mlp(&input, &self.ids.encoder)
    }

    /// Batched decoder: h [n, H] → ε [n, d].
    pub fn decode_batch(&self, h: &Tensor, prompts: &[PromptId], ts: &[usize]) -> Result<Tensor> {
        if h.cols() != self.config.bottleneck {
            return Err(SteerError::Bottleneck {
                expected: self.config.bottleneck,
                got: h.cols(),
            });
        }
        let ids = self.check_prompts(prompts)?;
        let emb = ops::select_rows(self.store.value(self.ids.embed), &ids)?;
        let temb = self.time_rows(ts);
        let input = ops::concat_cols(&[h, &emb, &temb])?;
        self.mlp(&input, &self.ids.decoder)
    }

    /// Base prediction ε_f(z, y, t) = g(e(z, y, t), y, t), batched.
    pub fn predict_batch(&self, z: &Tensor, prompts: &[PromptId], ts: &[usize]) -> Result<Tensor> {
        let h = self.encode_batch(z, prompts, ts)?;
        self.decode_batch(&h, prompts, ts)
    }

    /// Single-latent prediction.
    pub fn predict(&self, z: &Latent, y: PromptId) -> Result<Tensor> {
        let row = Tensor::row(z.value.data());
        let out = self.predict_batch(&row, &[y], &[z.timestep])?;
        Tensor::new(z.value.shape().to_vec(), out.data().to_vec())
    }

    pub fn encode(&self, z: &Latent, y: PromptId) -> Result<Tensor> {
        let row = Tensor::row(z.value.data());
        let h = self.encode_batch(&row, &[y], &[z.timestep])?;
        Tensor::new(vec![self.config.bottleneck], h.data().to_vec())
    }

    pub fn decode(&self, h: &Tensor, y: PromptId, t: usize) -> Result<Tensor> {
        let row = Tensor::row(h.data());
        let out = self.decode_batch(&row, &[y], &[t])?;
        Tensor::new(vec![self.config.data_dim], out.data().to_vec())
    }

    // -- taped forward passes -------------------------------------------------

    fn weight(&self, tape: &mut Tape, id: ParamId, train: bool) -> Var {
        if train {
            tape.param(&self.store, id)
        } else {
            tape.constant(self.store.value(id).clone())
        }
    }

    fn mlp_on(&self, tape: &mut Tape, input: Var, layers: &[LinearIds], train: bool) -> Result<Var> {
        let mut x = input;
        for (i, l) in layers.iter().enumerate() {
            let w = self.weight(tape, l.w, train);
            let b = self.weight(tape, l.b, train);
            x = tape.linear(x, w, b)?;
            if i + 1 < layers.len() {
                x = tape.silu(x);
            }
        }
        Ok(x)
    }

    /// Taped encoder. With `train = false` all weights enter as constants, so
    /// gradients flow through but are not collected for the base model.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        z: Var,
        prompts: &[PromptId],
        ts: &[usize],
        train: bool,
    ) -> Result<Var> {
        let ids = self.check_prompts(prompts)?;
        let table = self.weight(tape, self.ids.embed, train);
        let emb = tape.select_rows(table, &ids)?;
        let temb = tape.constant(self.time_rows(ts));
        let input = tape.concat_cols(&[z, emb, temb])?;
        self.mlp_on(tape, input, &self.ids.encoder, train)
    }

    pub fn decode_on(
        &self,
        tape: &mut Tape,
        h: Var,
        prompts: &[PromptId],
        ts: &[usize],
        train: bool,
    ) -> Result<Var> {
        if tape.value(h).cols() != self.config.bottleneck {
            return Err(SteerError::Bottleneck {
                expected: self.config.bottleneck,
                got: tape.value(h).cols(),
            });
        }
        let ids = self.check_prompts(prompts)?;
        let table = self.weight(tape, self.ids.embed, train);
        let emb = tape.select_rows(table, &ids)?;
        let temb = tape.constant(self.time_rows(ts));
        let input = tape.concat_cols(&[h, emb, temb])?;
        self.mlp_on(tape, input, &self.ids.decoder, train)
    }

    pub fn predict_on(
        &self,
        tape: &mut Tape,
        z: Var,
        prompts: &[PromptId],
        ts: &[usize],
        train: bool,
    ) -> Result<Var> {
        let h = self.encode_on(tape, z, prompts, ts, train)?;
        self.decode_on(tape, h, prompts, ts, train)
    }

    /// Zero the final decoder layer (test/diagnostic helper: makes every
    /// prediction exactly zero).
    pub fn zero_final_decoder_layer(&mut self) {
        let l3 = self.ids.decoder[2];
        let w_shape = self.store.value(l3.w).shape().to_vec();
        let b_shape = self.store.value(l3.b).shape().to_vec();
        self.store.set_value(l3.w, Tensor::zeros(w_shape)).unwrap();
        self.store.set_value(l3.b, Tensor::zeros(b_shape)).unwrap();
    }
}

/// Hyperparameters for base-model pretraining.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub dataset_size: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of rows trained with the unconditional token.
    pub uncond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            dataset_size: 6000,
            epochs: 120,
            batch: 64,
            lr: 1e-3,
            uncond_dropout: 0.1,
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Minimize E‖ε̂(z_t; y, t) − ε‖² over the dataset with Adam.
pub fn pretrain_base(
    net: &mut ScoreNetwork,
    dataset: &[(Vec<f64>, String)],
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainLog> {
    if dataset.is_empty() {
        return Err(SteerError::Config("pretraining dataset is empty".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(SteerError::Config("pretrain batch and epochs must be >= 1".into()));
    }
    let prompt_ids: Vec<PromptId> = dataset
        .iter()
        .map(|(_, name)| net.vocab.id(name))
        .collect::<Result<_>>()?;
    let uncond = net.vocab.uncond();
    let d = net.config.data_dim;
    let t_max = sched.steps();

    let mut opt = crate::numerics::Adam::new(&net.store, cfg.lr);
    let mut log = PretrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let n = chunk.len();
            let mut z_rows = Vec::with_capacity(n * d);
            let mut eps_rows = Vec::with_capacity(n * d);
            let mut ts = Vec::with_capacity(n);
            let mut prompts = Vec::with_capacity(n);
            for &i in chunk {
                let t = rng.range_inclusive(1, t_max);
                let ab = sched.alpha_bar(t)?;
                let (s_sig, n_sig) = (ab.sqrt(), (1.0 - ab).sqrt());
                for &x in &dataset[i].0 {
                    let e = rng.standard_normal();
                    z_rows.push(s_sig * x + n_sig * e);
                    eps_rows.push(e);
                }
                ts.push(t);
                prompts.push(if rng.uniform() < cfg.uncond_dropout {
                    uncond
                } else {
                    prompt_ids[i]
                });
            }
            let z = Tensor::new(vec![n, d], z_rows)?;
            let eps = Tensor::new(vec![n, d], eps_rows)?;

            net.store.zero_grad();
            let mut tape = Tape::new();
            let zv = tape.constant(z);
            let pred = net.predict_on(&mut tape, zv, &prompts, &ts, true)?;
            let target = tape.constant(eps);
            let loss = tape.mse(pred, target)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(SteerError::NonFinite(format!(
                    "pretraining loss at epoch {epoch}, batch {batches}"
                )));
            }
            tape.backward(loss, &mut net.store)?;
            opt.step(&mut net.store);
            epoch_loss += loss_value;
            batches += 1;
        }
        log.epoch_losses.push(epoch_loss / batches as f64);
    }
    if !net.store.values_finite() {
        return Err(SteerError::NonFinite("pretrained parameters".into()));
    }
    Ok(log)
}
