//! Convolutional feature extraction shared by every variant, followed by a
//! variant-specific temporal stage and a dense softmax output layer.
//!
//! Per sensor, three height-1 convolutions slide along the feature row of each
//! timestep (the first kernel spans three frequency bins and moves one bin at
//! a time). The per-sensor maps are stacked into a (sensor, feature) plane and
//! merged by three same-padded convolutions. The temporal stage is one of:
//!
//! * [`Variant::Deepsense`]: two stacked GRUs, mean over time;
//! * [`Variant::Trasend`]: positional encoding, multi-head self-attention and a
//!   position-wise feed-forward layer, each wrapped in residual + layer norm;
//! * [`Variant::TrasendBd`]: forward and backward GRUs, concatenated;
//! * [`Variant::TrasendCa`]: a GRU whose input is augmented with an attention
//!   context over the merge-conv locations.

mod config;

pub use config::{ModelConfig, Reduction, SensorSpec, Variant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trasend_autodiff::{
    BatchMoments, GruRecurrence, GruWeights, Mode, Padding, ParamGroup, ParamStore, RunningStats,
    Tape, Tensor, Var,
};

use crate::error::{Error, Result};

const OUTPUT_WEIGHT: &str = "output.weight";
const OUTPUT_BIAS: &str = "output.bias";

/// Sinusoidal positional encoding, `T × d_model`.
pub fn positional_encoding(timesteps: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    Ok(Tensor::from_fn(&[timesteps, d_model], |i| {
        let (pos, c) = (i / d_model, i % d_model);
        let angle = pos as f64 / 10000f64.powf((c - c % 2) as f64 / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// `softmax(Q·Kᵀ/√d_k)·V` over the last two axes; returns the output and the
/// weight matrix. `q` is `[.., n, d_k]`, `k` is `[.., m, d_k]`, `v` is `[.., m, d_v]`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let rank = tape.shape(q).len();
    let d_k = *tape.shape(q).last().unwrap_or(&1);
    let scores = tape.matmul_ext(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax(scores, rank - 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Mutable state of one forward pass.
pub struct Pass<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    mode: Mode,
    rng: &'a mut dyn RngCore,
    freeze_features: bool,
    /// Batch statistics from training-mode batch norms, keyed by layer prefix.
    pub bn_updates: Vec<(String, BatchMoments)>,
    /// Attention weight matrices recorded during the pass.
    pub attention: Vec<Var>,
    /// Context vectors computed by context attention, one per timestep.
    pub contexts: Vec<Var>,
}

impl<'a> Pass<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, rng: &'a mut dyn RngCore) -> Self {
        Self {
            tape,
            store,
            mode,
            rng,
            freeze_features: false,
            bn_updates: Vec::new(),
            attention: Vec::new(),
            contexts: Vec::new(),
        }
    }

    /// Records feature-extractor parameters as constants, so backward only
    /// reaches the output layer.
    pub fn freeze_features(mut self) -> Self {
        self.freeze_features = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("parameter {name:?} missing for this model")))?;
        let p = self.store.get(id);
        if !p.trainable() || (self.freeze_features && p.group() == ParamGroup::FeatureExtractor) {
            Ok(self.tape.frozen_param(self.store, id))
        } else {
            Ok(self.tape.param(self.store, id))
        }
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        Ok(self.tape.dropout(x, p, self.mode, &mut *self.rng)?)
    }

    fn batch_norm(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        let stats = running_stats(self.store, prefix)?;
        let (y, moments) = self.tape.batch_norm(x, scale, shift, &stats, self.mode, eps)?;
        if let Some(m) = moments {
            self.bn_updates.push((prefix.to_string(), m));
        }
        Ok(y)
    }

    fn dense(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.tape.dense(x, w, b)?)
    }

    fn gru_weights(&mut self, prefix: &str) -> Result<GruWeights> {
        Ok(GruWeights {
            w: self.param(&format!("{prefix}.w"))?,
            u: self.param(&format!("{prefix}.u"))?,
            b: self.param(&format!("{prefix}.b"))?,
        })
    }
}

fn running_stats(store: &ParamStore, prefix: &str) -> Result<RunningStats> {
    let get = |suffix: &str| {
        store
            .by_name(&format!("{prefix}.{suffix}"))
            .map(|p| p.value.data().to_vec())
            .ok_or_else(|| Error::Config(format!("batch norm {prefix} has no {suffix}")))
    };
    Ok(RunningStats {
        mean: get("running_mean")?,
        var: get("running_var")?,
    })
}

/// Result of [`Model::forward`].
pub struct Forward {
    /// `B × C` pre-softmax scores.
    pub logits: Var,
    /// `B × head_input` vector fed to the output layer.
    pub features: Var,
    pub bn_updates: Vec<(String, BatchMoments)>,
    pub attention: Vec<Var>,
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn add(&mut self, name: &str, value: Tensor, group: ParamGroup, trainable: bool) -> Result<()> {
        self.store.add(name, value, group, trainable)?;
        Ok(())
    }

    fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| rng.random_range(-limit..limit));
        self.add(name, value, ParamGroup::FeatureExtractor, true)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.add(name, Tensor::zeros(shape), ParamGroup::FeatureExtractor, true)
    }

    fn conv(&mut self, name: &str, kh: usize, kw: usize, cin: usize, cout: usize) -> Result<()> {
        self.glorot(name, &[kh, kw, cin, cout], kh * kw * cin, kh * kw * cout)
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        let g = ParamGroup::FeatureExtractor;
        self.add(&format!("{prefix}.scale"), Tensor::ones(&[c]), g, true)?;
        self.add(&format!("{prefix}.shift"), Tensor::zeros(&[c]), g, true)?;
        self.add(&format!("{prefix}.running_mean"), Tensor::zeros(&[c]), g, false)?;
        self.add(&format!("{prefix}.running_var"), Tensor::ones(&[c]), g, false)
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.glorot(&format!("{prefix}.weight"), &[fan_in, fan_out], fan_in, fan_out)?;
        self.zeros(&format!("{prefix}.bias"), &[fan_out])
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<()> {
        self.glorot(&format!("{prefix}.w"), &[input, 3 * hidden], input, 3 * hidden)?;
        self.glorot(&format!("{prefix}.u"), &[hidden, 3 * hidden], hidden, 3 * hidden)?;
        self.zeros(&format!("{prefix}.b"), &[3 * hidden])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let c = &self.config;
        let f = c.conv_filters;
        let s = c.num_sensors();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        for (i, sensor) in c.sensors.iter().enumerate() {
            let d = sensor.dims;
            init.conv(&format!("indiv.{i}.conv1.filters"), 1, 6 * d, 1, f)?;
            init.batch_norm(&format!("indiv.{i}.bn1"), f)?;
            init.conv(&format!("indiv.{i}.conv2.filters"), 1, 3, f, f)?;
            init.batch_norm(&format!("indiv.{i}.bn2"), f)?;
            init.conv(&format!("indiv.{i}.conv3.filters"), 1, 3, f, f)?;
            init.batch_norm(&format!("indiv.{i}.bn3"), f)?;
        }
        for (l, kw) in [8, 6, 4].into_iter().enumerate() {
            init.conv(&format!("merge.conv{}.filters", l + 1), s, kw, f, f)?;
            init.batch_norm(&format!("merge.bn{}", l + 1), f)?;
        }
        let dm = c.d_model();
        let h = c.gru_units;
        match c.variant {
            Variant::Trasend => {
                let hk = c.heads * c.d_k;
                for proj in ["q", "k", "v"] {
                    init.dense(&format!("temporal.attn.{proj}"), dm, hk)?;
                }
                init.dense("temporal.attn.out", hk, dm)?;
                for ln in ["temporal.ln1", "temporal.ln2"] {
                    init.add(&format!("{ln}.gain"), Tensor::ones(&[dm]), ParamGroup::FeatureExtractor, true)?;
                    init.zeros(&format!("{ln}.bias"), &[dm])?;
                }
                init.dense("temporal.ffn1", dm, c.ffn_width())?;
                init.dense("temporal.ffn2", c.ffn_width(), dm)?;
            }
            Variant::Deepsense => {
                init.gru("temporal.gru1", dm, h)?;
                init.batch_norm("temporal.bn", h)?;
                init.gru("temporal.gru2", h, h)?;
            }
            Variant::TrasendBd => {
                init.gru("temporal.gru_fwd", dm, h)?;
                init.gru("temporal.gru_bwd", dm, h)?;
            }
            Variant::TrasendCa => {
                let a = c.ca_attention_width;
                init.dense("temporal.init", f, h)?;
                init.dense("temporal.attn_feat", f, a)?;
                init.glorot("temporal.attn_state.weight", &[h, a], h, a)?;
                init.glorot("temporal.attn_score", &[a, 1], a, 1)?;
                // The GRU input is concat(timestep features, context); its
                // input weight is stored as the two corresponding row blocks.
                init.glorot("temporal.gru.w_feat", &[dm, 3 * h], dm + f, 3 * h)?;
                init.glorot("temporal.gru.w_context", &[f, 3 * h], dm + f, 3 * h)?;
                init.glorot("temporal.gru.u", &[h, 3 * h], h, 3 * h)?;
                init.zeros("temporal.gru.b", &[3 * h])?;
            }
        }
        let (hi, classes) = (c.head_input(), c.num_classes);
        let limit = (6.0 / (hi + classes) as f64).sqrt();
        let w = Tensor::from_fn(&[hi, classes], |_| init.rng.random_range(-limit..limit));
        init.add(OUTPUT_WEIGHT, w, ParamGroup::OutputLayer, true)?;
        init.add(OUTPUT_BIAS, Tensor::zeros(&[classes]), ParamGroup::OutputLayer, true)?;
        Ok(init.store)
    }

    /// Checks that `store` has exactly the parameters this model creates.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let reference = self.init_params(0)?;
        if reference.len() != store.len() {
            return Err(Error::Config(format!(
                "{} parameters supplied, the {:?} model has {}",
                store.len(),
                self.config.variant,
                reference.len()
            )));
        }
        for (_, p) in reference.iter() {
            let other = store
                .by_name(p.name())
                .ok_or_else(|| Error::Config(format!("parameter {:?} missing", p.name())))?;
            if other.value.shape() != p.value.shape() || other.group() != p.group() {
                return Err(Error::Config(format!("parameter {:?} has the wrong shape or group", p.name())));
            }
        }
        Ok(())
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&self, store: &mut ParamStore, updates: &[(String, BatchMoments)]) -> Result<()> {
        for (prefix, moments) in updates {
            let mut stats = running_stats(store, prefix)?;
            moments.update(&mut stats, self.config.bn_momentum);
            for (suffix, v) in [("running_mean", stats.mean), ("running_var", stats.var)] {
                let id = store.id(&format!("{prefix}.{suffix}")).expect("checked by running_stats");
                let n = v.len();
                store.set_value(id, Tensor::new(vec![n], v)?)?;
            }
        }
        Ok(())
    }

    fn check_inputs(&self, tape: &Tape, inputs: &[Var]) -> Result<usize> {
        let c = &self.config;
        if inputs.len() != c.num_sensors() {
            return Err(Error::Alignment(format!(
                "{} sensor inputs for a model with {} sensors",
                inputs.len(),
                c.num_sensors()
            )));
        }
        let batch = tape.shape(inputs[0])[0];
        for (s, &x) in inputs.iter().enumerate() {
            let want = [batch, c.timesteps, c.input_width(s)];
            if tape.shape(x) != want {
                return Err(Error::Alignment(format!(
                    "sensor {} input has shape {:?}, expected {want:?}",
                    c.sensors[s].id,
                    tape.shape(x)
                )));
            }
        }
        Ok(batch)
    }

    /// Three height-1 convolutions over one sensor's `B × T × 2fd` rows,
    /// giving `B·T × 1 × W3 × F` maps.
    pub fn individual_conv(&self, pass: &mut Pass, sensor: usize, x: Var) -> Result<Var> {
        let c = &self.config;
        let d = c.sensors[sensor].dims;
        let shape = pass.tape.shape(x).to_vec();
        let x = pass.tape.reshape(x, &[shape[0] * shape[1], 1, shape[2], 1])?;
        let mut h = x;
        for (layer, stride) in [(1, 2 * d), (2, 1), (3, 1)] {
            let filters = pass.param(&format!("indiv.{sensor}.conv{layer}.filters"))?;
            h = pass.tape.conv2d(h, filters, (1, stride), Padding::Valid)?;
            h = pass.batch_norm(h, &format!("indiv.{sensor}.bn{layer}"), c.bn_eps)?;
            h = pass.tape.relu(h);
            h = pass.dropout(h, c.dropout_conv)?;
        }
        Ok(h)
    }

    /// Stacks per-sensor maps into a `B·T × S × W3 × F` plane and applies the
    /// three same-padded merge convolutions.
    pub fn merge_conv(&self, pass: &mut Pass, per_sensor: &[Var]) -> Result<Var> {
        let c = &self.config;
        let first = pass.tape.shape(per_sensor[0]).to_vec();
        if per_sensor.iter().any(|&v| pass.tape.shape(v) != first.as_slice()) {
            return Err(Error::Alignment("per-sensor feature maps differ in shape".into()));
        }
        let mut h = pass.tape.concat(per_sensor, 1)?;
        for layer in 1..=3 {
            let filters = pass.param(&format!("merge.conv{layer}.filters"))?;
            h = pass.tape.conv2d(h, filters, (1, 1), Padding::Same)?;
            h = pass.batch_norm(h, &format!("merge.bn{layer}"), c.bn_eps)?;
            h = pass.tape.relu(h);
            if layer < 3 {
                h = pass.dropout(h, c.dropout_conv)?;
            }
        }
        Ok(h)
    }

    /// Per-head projections, scaled dot-product attention and output
    /// projection of a `B × T × d_model` sequence.
    pub fn self_attention(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = pass.tape.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let (heads, dk) = (c.heads, c.d_k);
        let split = |pass: &mut Pass, name: &str| -> Result<Var> {
            let p = pass.dense(x, &format!("temporal.attn.{name}"))?;
            let p = pass.tape.reshape(p, &[b, t, heads, dk])?;
            let p = pass.tape.permute(p, &[0, 2, 1, 3])?;
            Ok(pass.tape.reshape(p, &[b * heads, t, dk])?)
        };
        let q = split(pass, "q")?;
        let k = split(pass, "k")?;
        let v = split(pass, "v")?;
        let (out, weights) = scaled_dot_attention(pass.tape, q, k, v)?;
        pass.attention.push(weights);
        let out = pass.tape.reshape(out, &[b, heads, t, dk])?;
        let out = pass.tape.permute(out, &[0, 2, 1, 3])?;
        let out = pass.tape.reshape(out, &[b, t, heads * dk])?;
        pass.dense(out, "temporal.attn.out")
    }

    /// Attention sublayer and position-wise feed-forward sublayer, each with
    /// a residual connection and layer norm. Output shape equals input shape.
    pub fn temporal_block(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let c = &self.config;
        let mut x = x;
        if c.positional_encoding {
            let shape = pass.tape.shape(x).to_vec();
            let pe = pass.tape.constant(positional_encoding(shape[1], shape[2])?);
            x = pass.tape.add(x, pe)?;
        }
        let axis = 2;
        let attn = self.self_attention(pass, x)?;
        let sum = pass.tape.add(x, attn)?;
        let (g, b) = (pass.param("temporal.ln1.gain")?, pass.param("temporal.ln1.bias")?);
        let y = pass.tape.layer_norm(sum, g, b, axis, c.ln_eps)?;
        let ff = self.feed_forward(pass, y)?;
        let sum = pass.tape.add(y, ff)?;
        let (g, b) = (pass.param("temporal.ln2.gain")?, pass.param("temporal.ln2.bias")?);
        Ok(pass.tape.layer_norm(sum, g, b, axis, c.ln_eps)?)
    }

    /// Dense → ReLU → dense applied to every timestep with shared weights.
    pub fn feed_forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let hidden = pass.dense(x, "temporal.ffn1")?;
        let hidden = pass.tape.relu(hidden);
        pass.dense(hidden, "temporal.ffn2")
    }

    /// Hidden states of one GRU over a `B × T × d` sequence, in time order
    /// (or reversed time order when `reverse`), each `B × h`. Returned states
    /// are indexed by original timestep.
    fn gru_sequence(&self, pass: &mut Pass, x: Var, prefix: &str, reverse: bool) -> Result<Vec<Var>> {
        let weights = pass.gru_weights(prefix)?;
        let shape = pass.tape.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let proj = pass.tape.matmul(x, weights.w)?;
        let proj = pass.tape.add(proj, weights.b)?;
        let cell = GruRecurrence::new(pass.tape, &weights)?;
        let h_units = cell.hidden();
        let mut h = pass.tape.constant(Tensor::zeros(&[b, h_units]));
        let mut states = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let xp = pass.tape.narrow(proj, 1, step, 1)?;
            let xp = pass.tape.reshape(xp, &[b, 3 * h_units])?;
            h = cell.step(pass.tape, xp, h)?;
            states[step] = h;
        }
        Ok(states)
    }

    /// `B × T × h` from per-timestep `B × h` states.
    fn stack_time(&self, tape: &mut Tape, states: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(states.len());
        for &s in states {
            let shape = tape.shape(s).to_vec();
            rows.push(tape.reshape(s, &[shape[0], 1, shape[1]])?);
        }
        Ok(tape.concat(&rows, 1)?)
    }

    /// Two stacked GRUs with batch norm and dropout between them; mean over
    /// time of the top layer's outputs.
    pub fn gru_stack(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let c = &self.config;
        let states = self.gru_sequence(pass, x, "temporal.gru1", false)?;
        let seq = self.stack_time(pass.tape, &states)?;
        let seq = pass.batch_norm(seq, "temporal.bn", c.bn_eps)?;
        let seq = pass.dropout(seq, c.dropout_rnn)?;
        let states = self.gru_sequence(pass, seq, "temporal.gru2", false)?;
        let top = self.stack_time(pass.tape, &states)?;
        Ok(pass.tape.mean_axis(top, 1)?)
    }

    /// Forward and backward GRUs; per-timestep concatenation, mean over time.
    pub fn bidirectional(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let fwd = self.gru_sequence(pass, x, "temporal.gru_fwd", false)?;
        let bwd = self.gru_sequence(pass, x, "temporal.gru_bwd", true)?;
        let fwd = self.stack_time(pass.tape, &fwd)?;
        let bwd = self.stack_time(pass.tape, &bwd)?;
        let both = pass.tape.concat(&[fwd, bwd], 2)?;
        Ok(pass.tape.mean_axis(both, 1)?)
    }

    /// GRU over time whose input at each step is the flattened timestep
    /// features plus an attention-weighted context over the `L` location
    /// vectors. `maps` is `B × T × L × F`.
    pub fn context_attention(&self, pass: &mut Pass, maps: Var) -> Result<Var> {
        let shape = pass.tape.shape(maps).to_vec();
        let (b, t, l, f) = (shape[0], shape[1], shape[2], shape[3]);
        let first = pass.tape.narrow(maps, 1, 0, 1)?;
        let first = pass.tape.reshape(first, &[b, l, f])?;
        let first_mean = pass.tape.mean_axis(first, 1)?;
        let mut h = pass.dense(first_mean, "temporal.init")?;

        let feat_proj = pass.dense(maps, "temporal.attn_feat")?;
        let a = pass.tape.shape(feat_proj)[3];
        let w_state = pass.param("temporal.attn_state.weight")?;
        let score = pass.param("temporal.attn_score")?;

        let flat = pass.tape.reshape(maps, &[b, t, l * f])?;
        let w_feat = pass.param("temporal.gru.w_feat")?;
        let w_ctx = pass.param("temporal.gru.w_context")?;
        let u = pass.param("temporal.gru.u")?;
        let bias = pass.param("temporal.gru.b")?;
        let flat_proj = pass.tape.matmul(flat, w_feat)?;
        let flat_proj = pass.tape.add(flat_proj, bias)?;
        let cell = GruRecurrence::new(pass.tape, &GruWeights { w: w_feat, u, b: bias })?;
        let units = cell.hidden();

        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let feats = pass.tape.narrow(maps, 1, step, 1)?;
            let feats = pass.tape.reshape(feats, &[b, l, f])?;
            let fp = pass.tape.narrow(feat_proj, 1, step, 1)?;
            let fp = pass.tape.reshape(fp, &[b, l, a])?;
            let sp = pass.tape.matmul(h, w_state)?;
            let sp = pass.tape.reshape(sp, &[b, 1, a])?;
            let pre = pass.tape.add(fp, sp)?;
            let act = pass.tape.tanh(pre);
            let scores = pass.tape.matmul(act, score)?;
            let scores = pass.tape.reshape(scores, &[b, l])?;
            let weights = pass.tape.softmax(scores, 1)?;
            pass.attention.push(weights);
            let w3 = pass.tape.reshape(weights, &[b, 1, l])?;
            let context = pass.tape.matmul(w3, feats)?;
            let context = pass.tape.reshape(context, &[b, f])?;
            pass.contexts.push(context);

            let xp = pass.tape.narrow(flat_proj, 1, step, 1)?;
            let xp = pass.tape.reshape(xp, &[b, 3 * units])?;
            let cp = pass.tape.matmul(context, w_ctx)?;
            let xp = pass.tape.add(xp, cp)?;
            h = cell.step(pass.tape, xp, h)?;
            states.push(h);
        }
        let seq = self.stack_time(pass.tape, &states)?;
        Ok(pass.tape.mean_axis(seq, 1)?)
    }

    /// Everything up to (not including) the output layer: `B × head_input`.
    pub fn extract_features(&self, pass: &mut Pass, inputs: &[Var]) -> Result<Var> {
        let c = &self.config;
        let batch = self.check_inputs(pass.tape, inputs)?;
        let mut maps = Vec::with_capacity(inputs.len());
        for (s, &x) in inputs.iter().enumerate() {
            maps.push(self.individual_conv(pass, s, x)?);
        }
        let merged = self.merge_conv(pass, &maps)?;
        let (t, l, f) = (c.timesteps, c.locations(), c.conv_filters);
        match c.variant {
            Variant::TrasendCa => {
                let maps = pass.tape.reshape(merged, &[batch, t, l, f])?;
                self.context_attention(pass, maps)
            }
            variant => {
                let seq = pass.tape.reshape(merged, &[batch, t, l * f])?;
                match variant {
                    Variant::Deepsense => self.gru_stack(pass, seq),
                    Variant::TrasendBd => self.bidirectional(pass, seq),
                    _ => {
                        let y = self.temporal_block(pass, seq)?;
                        match c.reduction {
                            Reduction::Mean => Ok(pass.tape.mean_axis(y, 1)?),
                            Reduction::Flatten => Ok(pass.tape.reshape(y, &[batch, t * l * f])?),
                        }
                    }
                }
            }
        }
    }

    /// Output layer logits for `B × head_input` features.
    pub fn head(&self, pass: &mut Pass, features: Var) -> Result<Var> {
        pass.dense(features, "output")
    }

    /// Full forward pass from per-sensor `B × T × 2fd` inputs.
    pub fn forward(&self, mut pass: Pass, inputs: &[Var]) -> Result<Forward> {
        let features = self.extract_features(&mut pass, inputs)?;
        let logits = self.head(&mut pass, features)?;
        Ok(Forward {
            logits,
            features,
            bn_updates: pass.bn_updates,
            attention: pass.attention,
        })
    }

    /// Class probabilities in eval mode, `B × C`.
    pub fn predict_proba(&self, store: &ParamStore, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(Pass::new(&mut tape, store, Mode::Eval, &mut rng).freeze_features(), &vars)?;
        let p = tape.softmax(out.logits, 1)?;
        Ok(tape.value(p).clone())
    }

    /// Eval-mode `B × head_input` features, as a plain tensor.
    pub fn features(&self, store: &ParamStore, inputs: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = Pass::new(&mut tape, store, Mode::Eval, &mut rng).freeze_features();
        let f = self.extract_features(&mut pass, &vars)?;
        Ok(tape.value(f).clone())
    }
}

/// Names of the output-layer parameters.
pub fn output_param_names() -> [&'static str; 2] {
    [OUTPUT_WEIGHT, OUTPUT_BIAS]
}

/// Index of the largest entry of each row.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let c = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
