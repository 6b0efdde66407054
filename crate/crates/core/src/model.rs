//! The prediction network.
//!
//! A user/service pair is embedded into a `1 × 2d` latent vector built from
//! six slices: reputation (through a `1 → d/4` linear map), an ID embedding
//! (`d/4`) and a region embedding (`d/2`), for the user then the service.
//!
//! The vector is refined by `n_stack` hourglass blocks. Each block narrows
//! the vector `2d → d → d/2` and widens it back `d/2 → d → 2d` with
//! linear+ReLU maps, runs a width-preserving self-attention encoder on each
//! of the five scales, concatenates the results (`13d/2` wide) and projects
//! back to `2d`. A three-layer head `2d → d → d/2 → 1` produces the
//! predicted response time.
//!
//! Every forward pass is batched: the latent vector of a batch is a
//! `B × width` matrix whose rows are independent samples.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::QosMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamState, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// Reputation assumed for entities without one.
pub const NEUTRAL_REPUTATION: f64 = 0.5;

const PREDICT_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RahnConfig {
    /// Latent dimension; must be a positive multiple of 4.
    pub d: usize,
    /// Number of stacked hourglass blocks.
    pub n_stack: usize,
    /// Learned position embeddings inside the encoders.
    pub use_pe: bool,
    /// Attention token width; `d / 4` when unset.
    pub token_dim: Option<usize>,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Set from the experiment's master seed; not part of the JSON form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RahnConfig {
    fn default() -> Self {
        RahnConfig {
            d: 16,
            n_stack: 2,
            use_pe: false,
            token_dim: None,
            lambda_reg: 1e-4,
            learning_rate: 0.0005,
            batch_size: 256,
            epochs: 50,
            seed: 42,
        }
    }
}

impl RahnConfig {
    pub fn token_dim(&self) -> usize {
        self.token_dim.unwrap_or(self.d / 4)
    }

    /// The run label: N (1 digit), PE (1 digit), d (2 digits), e.g. `2016`.
    pub fn npe_label(&self) -> String {
        npe_label(self.n_stack, self.use_pe, self.d)
    }

    /// The five hourglass widths `(2d, d, d/2, d, 2d)`.
    pub fn scale_widths(&self) -> [usize; 5] {
        let d = self.d;
        [2 * d, d, d / 2, d, 2 * d]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 || d % 4 != 0 {
            return Err(Error::Config(format!(
                "d must be a positive multiple of 4, got {d}"
            )));
        }
        let td = self.token_dim();
        if td == 0 || [2 * d, d, d / 2].iter().any(|w| w % td != 0) {
            return Err(Error::Config(format!(
                "token_dim {td} must divide 2d, d and d/2 (d = {d})"
            )));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_reg must be non-negative, got {}",
                self.lambda_reg
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn npe_label(n_stack: usize, use_pe: bool, d: usize) -> String {
    format!("{}{}{:02}", n_stack, u8::from(use_pe), d)
}

/// Vocabulary sizes the embedding tables are built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_users: usize,
    pub n_services: usize,
    pub n_user_regions: usize,
    pub n_service_regions: usize,
}

/// One (user, service) input with its target response time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub user_index: usize,
    pub service_index: usize,
    pub user_region: usize,
    pub service_region: usize,
    pub user_reputation: f64,
    pub service_reputation: f64,
    pub target_qos: f64,
}

/// Per-entity side information used to turn matrix entries into samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntityFeatures {
    pub user_reputation: Vec<f64>,
    pub service_reputation: Vec<f64>,
    pub user_region: Vec<usize>,
    pub service_region: Vec<usize>,
}

impl EntityFeatures {
    pub fn sample(&self, user: usize, service: usize, target: f64) -> TrainSample {
        TrainSample {
            user_index: user,
            service_index: service,
            user_region: self.user_region.get(user).copied().unwrap_or(0),
            service_region: self.service_region.get(service).copied().unwrap_or(0),
            user_reputation: self
                .user_reputation
                .get(user)
                .copied()
                .unwrap_or(NEUTRAL_REPUTATION),
            service_reputation: self
                .service_reputation
                .get(service)
                .copied()
                .unwrap_or(NEUTRAL_REPUTATION),
            target_qos: target,
        }
    }

    pub fn samples(&self, m: &QosMatrix) -> Vec<TrainSample> {
        m.entries()
            .iter()
            .map(|e| self.sample(e.user, e.service, e.value))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderIds {
    pub width: usize,
    pub tokens: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub position: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct StackIds {
    /// `g₁..g₄`: 2d→d, d→d/2, d/2→d, d→2d.
    pub hourglass: [LinearIds; 4],
    pub encoders: [EncoderIds; 5],
    /// 13d/2 → 2d.
    pub output: LinearIds,
}

#[derive(Debug, Clone, Copy)]
pub struct LfemIds {
    pub user_id: ParamId,
    pub service_id: ParamId,
    pub user_region: ParamId,
    pub service_region: ParamId,
    pub user_reputation: LinearIds,
    pub service_reputation: LinearIds,
}

#[derive(Debug, Clone)]
pub struct RahnModel {
    pub config: RahnConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
    pub lfem: LfemIds,
    pub stacks: Vec<StackIds>,
    /// 2d → d, d → d/2, d/2 → 1.
    pub head: [LinearIds; 3],
}

struct Init {
    rng: Xoshiro256PlusPlus,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    fn linear(&mut self, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            self.uniform(&[fan_in, fan_out], bound),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::zeros(&[1, fan_out]),
        );
        LinearIds { weight, bias }
    }

    fn embedding(&mut self, store: &mut ParamStore, name: &str, rows: usize, width: usize) -> ParamId {
        store.add(name, ParamKind::Embedding, self.uniform(&[rows, width], 0.01))
    }
}

impl RahnModel {
    /// Builds a freshly initialised model.
    ///
    /// Linear weights draw from `U(±√(1/fan_in))`, embeddings from `U(±0.01)`;
    /// biases start at zero.
    pub fn new(config: RahnConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        if dims.n_users == 0 || dims.n_services == 0 {
            return Err(Error::Config("model needs at least one user and one service".into()));
        }
        let d = config.d;
        let td = config.token_dim();
        let mut init = Init {
            rng: Xoshiro256PlusPlus::seed_from_u64(config.seed),
        };
        let mut p = ParamStore::new();

        let lfem = LfemIds {
            user_id: init.embedding(&mut p, "lfem.user_id", dims.n_users, d / 4),
            user_region: init.embedding(&mut p, "lfem.user_region", dims.n_user_regions.max(1), d / 2),
            user_reputation: init.linear(&mut p, "lfem.user_reputation", 1, d / 4),
            service_id: init.embedding(&mut p, "lfem.service_id", dims.n_services, d / 4),
            service_region: init.embedding(
                &mut p,
                "lfem.service_region",
                dims.n_service_regions.max(1),
                d / 2,
            ),
            service_reputation: init.linear(&mut p, "lfem.service_reputation", 1, d / 4),
        };

        let widths = config.scale_widths();
        let mut stacks = Vec::with_capacity(config.n_stack);
        for t in 0..config.n_stack {
            let hourglass = std::array::from_fn(|k| {
                init.linear(&mut p, &format!("stack{t}.g{}", k + 1), widths[k], widths[k + 1])
            });
            let encoders = std::array::from_fn(|i| {
                let name = format!("stack{t}.encoder{}", i + 1);
                let bound = (1.0 / td as f64).sqrt();
                let mut square = |suffix: &str| {
                    p.add(
                        format!("{name}.{suffix}"),
                        ParamKind::Weight,
                        init.uniform(&[td, td], bound),
                    )
                };
                let (w_q, w_k, w_v) = (square("w_q"), square("w_k"), square("w_v"));
                let tokens = widths[i] / td;
                let position = config
                    .use_pe
                    .then(|| init.embedding(&mut p, &format!("{name}.position"), tokens, td));
                EncoderIds {
                    width: widths[i],
                    tokens,
                    w_q,
                    w_k,
                    w_v,
                    position,
                }
            });
            let output = init.linear(&mut p, &format!("stack{t}.output"), 13 * d / 2, 2 * d);
            stacks.push(StackIds {
                hourglass,
                encoders,
                output,
            });
        }

        let head = [
            init.linear(&mut p, "head.fc1", 2 * d, d),
            init.linear(&mut p, "head.fc2", d, d / 2),
            init.linear(&mut p, "head.fc3", d / 2, 1),
        ];

        Ok(RahnModel {
            config,
            dims,
            params: p,
            lfem,
            stacks,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn apply_linear(&self, tape: &mut Tape<'_>, ids: LinearIds, x: Var) -> Result<Var> {
        let w = tape.param(ids.weight);
        let b = tape.param(ids.bias);
        tape.linear(x, w, b)
    }

    /// Initial latent matrix `B × 2d`: `uRE ⊕ uID ⊕ uRG ⊕ sRE ⊕ sID ⊕ sRG`.
    pub fn lfem_forward(&self, tape: &mut Tape<'_>, batch: &[TrainSample]) -> Result<Var> {
        let b = batch.len();
        let column = |f: fn(&TrainSample) -> f64| {
            Tensor::new(vec![b, 1], batch.iter().map(f).collect()).expect("B×1")
        };
        let ids = &self.lfem;

        let u_rep = tape.constant(column(|s| s.user_reputation));
        let u_re = self.apply_linear(tape, ids.user_reputation, u_rep)?;
        let table = tape.param(ids.user_id);
        let u_id = tape.gather_rows(table, &batch.iter().map(|s| s.user_index).collect::<Vec<_>>())?;
        let table = tape.param(ids.user_region);
        let u_rg = tape.gather_rows(table, &batch.iter().map(|s| s.user_region).collect::<Vec<_>>())?;

        let s_rep = tape.constant(column(|s| s.service_reputation));
        let s_re = self.apply_linear(tape, ids.service_reputation, s_rep)?;
        let table = tape.param(ids.service_id);
        let s_id = tape.gather_rows(table, &batch.iter().map(|s| s.service_index).collect::<Vec<_>>())?;
        let table = tape.param(ids.service_region);
        let s_rg = tape.gather_rows(
            table,
            &batch.iter().map(|s| s.service_region).collect::<Vec<_>>(),
        )?;

        tape.concat(&[u_re, u_id, u_rg, s_re, s_id, s_rg])
    }

    /// Single-head self-attention over `width / token_dim` tokens with a
    /// residual connection; output has the same shape as `x` (`B × width`).
    pub fn encoder_forward(&self, tape: &mut Tape<'_>, enc: &EncoderIds, x: Var) -> Result<Var> {
        let td = self.config.token_dim();
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] % td != 0 {
            return Err(Error::Shape(format!(
                "encoder input {shape:?} is not divisible into tokens of width {td}"
            )));
        }
        let (b, width) = (shape[0], shape[1]);
        let tokens = width / td;

        let mut h = tape.reshape(x, &[b, tokens, td])?;
        if let Some(pos) = enc.position {
            let pos = tape.param(pos);
            h = tape.add_broadcast(h, pos)?;
        }
        let flat = tape.reshape(h, &[b * tokens, td])?;
        let project = |tape: &mut Tape<'_>, w: ParamId| -> Result<Var> {
            let w = tape.param(w);
            let y = tape.matmul(flat, w)?;
            tape.reshape(y, &[b, tokens, td])
        };
        let q = project(tape, enc.w_q)?;
        let k = project(tape, enc.w_k)?;
        let v = project(tape, enc.w_v)?;

        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (td as f64).sqrt());
        let weights = tape.softmax(scores);
        let attended = tape.bmm(weights, v)?;
        let out = tape.add(h, attended)?;
        tape.reshape(out, &[b, width])
    }

    /// One hourglass block: `B × 2d → B × 2d`.
    pub fn qphn_layer(&self, tape: &mut Tape<'_>, stack: &StackIds, input: Var) -> Result<Var> {
        let joined = self.qphn_concat(tape, stack, input)?;
        self.apply_linear(tape, stack.output, joined)
    }

    /// The encoded scales of one block, concatenated (`B × 13d/2`).
    pub fn qphn_concat(&self, tape: &mut Tape<'_>, stack: &StackIds, input: Var) -> Result<Var> {
        let mut scales = [input; 5];
        for k in 1..5 {
            let y = self.apply_linear(tape, stack.hourglass[k - 1], scales[k - 1])?;
            scales[k] = tape.relu(y);
        }
        let mut encoded = [input; 5];
        for i in 0..5 {
            encoded[i] = self.encoder_forward(tape, &stack.encoders[i], scales[i])?;
        }
        tape.concat(&encoded)
    }

    /// Latent vector after all hourglass blocks (`B × 2d`).
    pub fn latent(&self, tape: &mut Tape<'_>, batch: &[TrainSample]) -> Result<Var> {
        let mut l = self.lfem_forward(tape, batch)?;
        for stack in &self.stacks {
            l = self.qphn_layer(tape, stack, l)?;
        }
        Ok(l)
    }

    /// Predicted response times, `B × 1`.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &[TrainSample]) -> Result<Var> {
        let l = self.latent(tape, batch)?;
        let h = self.apply_linear(tape, self.head[0], l)?;
        let h = tape.relu(h);
        let h = self.apply_linear(tape, self.head[1], h)?;
        let h = tape.relu(h);
        self.apply_linear(tape, self.head[2], h)
    }

    /// `J = mean |pred − target| + λ Σ‖θ‖²` over weights and embeddings.
    pub fn loss(&self, tape: &mut Tape<'_>, batch: &[TrainSample], lambda_reg: f64) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Config("loss of an empty batch".into()));
        }
        let pred = self.forward(tape, batch)?;
        let target = tape.constant(Tensor::new(
            vec![batch.len(), 1],
            batch.iter().map(|s| s.target_qos).collect(),
        )?);
        let residual = tape.sub(pred, target)?;
        let abs = tape.abs(residual);
        let data_loss = tape.mean(abs);

        let mut total = data_loss;
        if lambda_reg != 0.0 {
            let mut reg_terms = Vec::new();
            for (id, p) in self.params.iter() {
                if p.kind.is_regularized() {
                    let v = tape.param(id);
                    reg_terms.push(tape.sum_squares(v));
                }
            }
            for term in reg_terms {
                let scaled = tape.scale(term, lambda_reg);
                total = tape.add(total, scaled)?;
            }
        }
        Ok(total)
    }

    /// Loss value without recording gradients.
    pub fn loss_value(&self, batch: &[TrainSample], lambda_reg: f64) -> Result<f64> {
        let mut tape = Tape::inference(&self.params);
        let j = self.loss(&mut tape, batch, lambda_reg)?;
        tape.value(j).item()
    }

    /// Adds `∂J/∂θ` for one batch to the parameter gradient accumulators and
    /// returns `J`.
    pub fn accumulate_gradients(&mut self, batch: &[TrainSample], lambda_reg: f64) -> Result<f64> {
        let (value, grads) = {
            let mut tape = Tape::with_params(&self.params);
            let j = self.loss(&mut tape, batch, lambda_reg)?;
            let value = tape.value(j).item()?;
            (value, tape.backward(j)?.into_param_grads())
        };
        self.params.accumulate_grads(grads);
        Ok(value)
    }

    pub fn predict(&self, samples: &[TrainSample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::inference(&self.params);
            let y = self.forward(&mut tape, chunk)?;
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-training-set loss before the first update.
    pub initial_loss: f64,
    /// Sample-weighted mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation MAE after each epoch, when a validation set was given.
    pub validation_mae: Vec<f64>,
    pub steps: u64,
}

/// Mini-batch Adam training with a seeded shuffle per epoch.
pub fn train(model: &mut RahnModel, samples: &[TrainSample], validation: Option<&[TrainSample]>) -> Result<TrainReport> {
    let cfg = model.config;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let initial_loss = model.loss_value(samples, cfg.lambda_reg)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            last_finite_loss: None,
        });
    }
    let mut adam = AdamState::new(Adam::with_learning_rate(cfg.learning_rate), &model.params);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x7368_7566_666c_65);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut report = TrainReport {
        initial_loss,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        validation_mae: Vec::new(),
        steps: 0,
    };
    let mut last_finite = Some(initial_loss);

    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i as u64) as usize;
            order.swap(i, j);
        }
        let mut weighted = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| samples[i]));
            let j = model.accumulate_gradients(&batch, cfg.lambda_reg)?;
            if !j.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(j);
            adam.step(&mut model.params)?;
            report.steps += 1;
            weighted += j * batch.len() as f64;
        }
        let epoch_loss = weighted / samples.len() as f64;
        report.epoch_losses.push(epoch_loss);
        if let Some(val) = validation.filter(|v| !v.is_empty()) {
            let pred = model.predict(val)?;
            let mae = pred
                .iter()
                .zip(val)
                .map(|(p, s)| (p - s.target_qos).abs())
                .sum::<f64>()
                / val.len() as f64;
            report.validation_mae.push(mae);
            log::info!("epoch {epoch}: loss {epoch_loss:.6} val_mae {mae:.6}");
        } else {
            log::info!("epoch {epoch}: loss {epoch_loss:.6}");
        }
    }
    Ok(report)
}
