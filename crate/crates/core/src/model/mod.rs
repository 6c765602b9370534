//! The occupancy network: FCN feature extractor → parallel attention →
//! spectrally normalized classifier.
//!
//! Parameter names are stable and form the checkpoint key space:
//!
//! | name | shape |
//! |------|-------|
//! | `fcn.block{i}.conv.weight` | `[Cout, Cin, kF, kT]` |
//! | `fcn.block{i}.conv.bias` | `[Cout]` |
//! | `fcn.block{i}.bn.gamma`, `.beta` | `[Cout]` |
//! | `pa.se.w1` / `pa.se.w2` | `[C, C/r]` / `[C/r, C]` |
//! | `pa.{va,ta}.{query,key}.weight` / `.bias` | `[C1, C, 1, 1]` / `[C1]` |
//! | `pa.{va,ta}.value.weight` / `.bias` | `[C2, C, 1, 1]` / `[C2]` |
//! | `pa.{va,ta}.output.weight` / `.bias` | `[C, C2, 1, 1]` / `[C]` |
//! | `pa.{va,ta}.sigma` | `[1]` |
//! | `classifier.weight` / `.bias` | `[C, classes]` / `[classes]` |
//!
//! Non-trainable buffers: `fcn.block{i}.bn.running_mean`,
//! `fcn.block{i}.bn.running_var`, `classifier.sn_u` (`[C]`) and
//! `classifier.sn_v` (`[classes]`).

mod attention;
mod classifier;
mod config;
mod params;

pub use attention::{
    attention_forward, pa_combine, se_forward, ta_forward, va_forward, AttentionAxis, AttentionOutput, AttentionVars,
};
pub use classifier::{classify, power_iteration, spectral_normalize, ClassifierOutput, PowerIteration};
pub use config::{ConvBlockConfig, FcnConfig, ModelConfig, PaConfig};
pub use params::{Param, ParamGroup, ParamStore, ParamVars};

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Graph, Tensor, Var};

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics and singular vectors advance.
    Train,
    /// Running statistics and stored singular vectors; nothing changes.
    Eval,
    /// Batch statistics like `Train`, but no buffer is updated. Makes the
    /// training loss a pure function of the parameters.
    TrainFrozen,
}

/// Handles to the intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub params: ParamVars,
    /// Output of each FCN block.
    pub blocks: Vec<Var>,
    /// Channel gates `[N, C, 1, 1]`.
    pub gates: Var,
    pub variable: AttentionOutput,
    pub temporal: AttentionOutput,
    /// Gated sum of the features and both attention outputs.
    pub attended: Var,
    pub classifier: ClassifierOutput,
    pub probs: Var,
    pub log_probs: Var,
}

impl ForwardOutput {
    pub fn features(&self) -> Var {
        *self.blocks.last().expect("at least one block")
    }
}

#[derive(Clone, Debug)]
pub struct AbodeNet {
    config: ModelConfig,
    params: ParamStore,
    buffers: IndexMap<String, Tensor>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

/// Kaiming-style uniform bound for a given fan-in.
fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl AbodeNet {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = IndexMap::new();

        let mut in_ch = 1;
        for (i, b) in config.fcn.blocks.iter().enumerate() {
            let prefix = format!("fcn.block{}", i + 1);
            let fan_in = in_ch * b.kernel.0 * b.kernel.1;
            let shape = [b.filters, in_ch, b.kernel.0, b.kernel.1];
            params.register(
                format!("{prefix}.conv.weight"),
                uniform(rng, &shape, fan_in_bound(fan_in)),
                ParamGroup::Fcn,
                true,
            )?;
            params.register(
                format!("{prefix}.conv.bias"),
                Tensor::zeros([b.filters]),
                ParamGroup::Fcn,
                true,
            )?;
            params.register(
                format!("{prefix}.bn.gamma"),
                Tensor::ones([b.filters]),
                ParamGroup::Fcn,
                false,
            )?;
            params.register(
                format!("{prefix}.bn.beta"),
                Tensor::zeros([b.filters]),
                ParamGroup::Fcn,
                false,
            )?;
            buffers.insert(format!("{prefix}.bn.running_mean"), Tensor::zeros([b.filters]));
            buffers.insert(format!("{prefix}.bn.running_var"), Tensor::ones([b.filters]));
            in_ch = b.filters;
        }

        let c = config.channels();
        let hidden = config.se_hidden();
        params.register(
            "pa.se.w1",
            uniform(rng, &[c, hidden], fan_in_bound(c)),
            ParamGroup::Se,
            true,
        )?;
        params.register(
            "pa.se.w2",
            uniform(rng, &[hidden, c], fan_in_bound(hidden)),
            ParamGroup::Se,
            true,
        )?;

        let (c1, c2) = (config.qk_channels(), config.value_channels());
        for (branch, group) in [("va", ParamGroup::Va), ("ta", ParamGroup::Ta)] {
            for (proj, out_ch, in_ch) in [("query", c1, c), ("key", c1, c), ("value", c2, c), ("output", c, c2)] {
                params.register(
                    format!("pa.{branch}.{proj}.weight"),
                    uniform(rng, &[out_ch, in_ch, 1, 1], fan_in_bound(in_ch)),
                    group,
                    true,
                )?;
                params.register(format!("pa.{branch}.{proj}.bias"), Tensor::zeros([out_ch]), group, true)?;
            }
            params.register(
                format!("pa.{branch}.sigma"),
                Tensor::zeros([1]),
                ParamGroup::Sigma,
                false,
            )?;
        }

        let weight = uniform(rng, &[c, config.classes], fan_in_bound(c));
        let u0: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = power_iteration(&weight, &u0, 1, config.sn_eps)?;
        params.register("classifier.weight", weight, ParamGroup::Classifier, true)?;
        params.register(
            "classifier.bias",
            Tensor::zeros([config.classes]),
            ParamGroup::Classifier,
            true,
        )?;
        buffers.insert("classifier.sn_u".into(), Tensor::new([c], p.u)?);
        buffers.insert("classifier.sn_v".into(), Tensor::new([config.classes], p.v)?);

        Ok(AbodeNet {
            config,
            params,
            buffers,
        })
    }

    /// Reassembles a network from stored tensors, checking every name and
    /// shape against the architecture implied by `config`.
    pub fn from_parts(
        config: ModelConfig,
        params: IndexMap<String, Tensor>,
        buffers: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut net = AbodeNet::new(config, &mut rng)?;
        let mut problems = Vec::new();
        let expected_shapes: Vec<(String, Vec<usize>)> = net
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.shape().to_vec()))
            .collect();
        for (name, expected) in expected_shapes {
            match params.get(&name) {
                None => problems.push(format!("missing parameter {name} {expected:?}")),
                Some(t) if t.shape() != expected => {
                    problems.push(format!("{name}: expected {expected:?}, found {:?}", t.shape()))
                }
                Some(t) => net.params.get_mut(&name).expect("present").value = t.clone(),
            }
        }
        for name in params.keys() {
            if net.params.get(name).is_none() {
                problems.push(format!("unexpected parameter {name}"));
            }
        }
        for (name, slot) in net.buffers.iter_mut() {
            match buffers.get(name) {
                None => problems.push(format!("missing buffer {name}")),
                Some(t) if t.shape() != slot.shape() => {
                    problems.push(format!("{name}: expected {:?}, found {:?}", slot.shape(), t.shape()))
                }
                Some(t) => *slot = t.clone(),
            }
        }
        if problems.is_empty() {
            Ok(net)
        } else {
            Err(Error::Checkpoint(format!(
                "architecture mismatch:\n  {}",
                problems.join("\n  ")
            )))
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Panics on an unknown name.
    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    fn buffer(&self, name: &str) -> &Tensor {
        &self.buffers[name]
    }

    /// Sets both attention mixing scalars.
    pub fn set_attention_scales(&mut self, variable: f64, temporal: f64) {
        self.param_mut("pa.va.sigma").data_mut()[0] = variable;
        self.param_mut("pa.ta.sigma").data_mut()[0] = temporal;
    }

    /// Moves every parameter off its structured initial value (zero biases,
    /// unit BN scales, zero attention scalars) so that a gradient check
    /// exercises every path, then converges the singular vectors.
    pub fn randomize_for_gradcheck(&mut self, rng: &mut impl Rng) {
        for (name, p) in self.params.iter_mut() {
            let data = p.value.data_mut();
            if name.ends_with(".bn.gamma") {
                data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            } else if name.ends_with(".sigma") {
                let s: f64 = rng.gen_range(0.3..1.0);
                data[0] = if rng.gen_bool(0.5) { s } else { -s };
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                data.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            }
        }
        self.refresh_singular_vectors(30);
    }

    /// Replaces the stored singular vectors with `iters` fresh power
    /// iterations from the current estimate.
    pub fn refresh_singular_vectors(&mut self, iters: usize) {
        let u = self.buffer("classifier.sn_u").data().to_vec();
        let w = &self.params.get("classifier.weight").expect("registered").value;
        let p = power_iteration(w, &u, iters, self.config.sn_eps).expect("shapes fixed by construction");
        self.buffers["classifier.sn_u"].data_mut().copy_from_slice(&p.u);
        self.buffers["classifier.sn_v"].data_mut().copy_from_slice(&p.v);
    }

    fn attention_vars(params: &ParamVars, branch: &str) -> AttentionVars {
        let pair = |proj: &str| {
            (
                params.get(&format!("pa.{branch}.{proj}.weight")),
                params.get(&format!("pa.{branch}.{proj}.bias")),
            )
        };
        AttentionVars {
            query: pair("query"),
            key: pair("key"),
            value: pair("value"),
            output: pair("output"),
            sigma: params.get(&format!("pa.{branch}.sigma")),
        }
    }

    /// Runs the network on `x: [N, 1, F, T]`, recording onto `g`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let xs = g.shape(x).to_vec();
        let expected = [1, self.config.input_features, self.config.window];
        if xs.len() != 4 || xs[1..] != expected {
            return Err(Error::Model(format!(
                "input shape {xs:?} does not match [N, {}, {}, {}]",
                expected[0], expected[1], expected[2]
            )));
        }
        let params = self.params.bind(g);
        let mut h = x;
        let mut blocks = Vec::with_capacity(self.config.fcn.blocks.len());
        for (i, b) in self.config.fcn.blocks.clone().iter().enumerate() {
            let prefix = format!("fcn.block{}", i + 1);
            let conv = g.conv2d(
                h,
                params.get(&format!("{prefix}.conv.weight")),
                Some(params.get(&format!("{prefix}.conv.bias"))),
                b.padding,
                b.stride,
            )?;
            let mean_key = format!("{prefix}.bn.running_mean");
            let var_key = format!("{prefix}.bn.running_var");
            let bn_mode = match mode {
                Mode::Train | Mode::TrainFrozen => BatchNormMode::Train,
                Mode::Eval => BatchNormMode::Eval {
                    mean: self.buffer(&mean_key).data().to_vec(),
                    var: self.buffer(&var_key).data().to_vec(),
                },
            };
            let (normed, stats) = g.batch_norm(
                conv,
                params.get(&format!("{prefix}.bn.gamma")),
                params.get(&format!("{prefix}.bn.beta")),
                bn_mode,
                self.config.bn_eps,
            )?;
            if let (Mode::Train, Some(stats)) = (mode, stats) {
                let m = self.config.bn_momentum;
                let rm = self.buffers[&mean_key].data_mut();
                rm.iter_mut()
                    .zip(&stats.mean)
                    .for_each(|(r, s)| *r = (1.0 - m) * *r + m * s);
                let rv = self.buffers[&var_key].data_mut();
                rv.iter_mut()
                    .zip(&stats.var_unbiased)
                    .for_each(|(r, s)| *r = (1.0 - m) * *r + m * s);
            }
            h = g.relu(normed);
            blocks.push(h);
        }

        let gates = se_forward(g, h, params.get("pa.se.w1"), params.get("pa.se.w2"))?;
        let variable = va_forward(g, h, &Self::attention_vars(&params, "va"))?;
        let temporal = ta_forward(g, h, &Self::attention_vars(&params, "ta"))?;
        let attended = pa_combine(g, h, temporal.output, variable.output, gates)?;

        if mode == Mode::Train {
            self.refresh_singular_vectors(self.config.sn_power_iterations);
        }
        let classifier = classify(
            g,
            attended,
            params.get("classifier.weight"),
            params.get("classifier.bias"),
            self.buffer("classifier.sn_u").data(),
            self.buffer("classifier.sn_v").data(),
            self.config.sn_eps,
        )?;
        Ok(ForwardOutput {
            params,
            blocks,
            gates,
            variable,
            temporal,
            attended,
            probs: classifier.probs,
            log_probs: classifier.log_probs,
            classifier,
        })
    }

    /// Class probabilities `[N, classes]` in eval mode, evaluated in chunks
    /// of `chunk` samples.
    pub fn predict_proba(&mut self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Model(format!("expected [N, 1, F, T] input, got {shape:?}")));
        }
        let per = shape[1..].iter().product::<usize>();
        let classes = self.config.classes;
        let mut out = Vec::with_capacity(shape[0] * classes);
        for block in x.data().chunks(per * chunk.max(1)) {
            let n = block.len() / per;
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new([n, shape[1], shape[2], shape[3]], block.to_vec())?);
            let fo = self.forward(&mut g, xv, Mode::Eval)?;
            out.extend_from_slice(g.value(fo.probs).data());
        }
        Ok(Tensor::new([shape[0], classes], out)?)
    }
}

/// Index of the occupied class in the output distribution.
pub const OCCUPIED_CLASS: usize = 1;

/// Predicted occupancy per row; an exact tie counts as occupied.
pub fn predictions(probs: &Tensor) -> Vec<bool> {
    probs
        .data()
        .chunks(probs.shape()[1])
        .map(|row| row.iter().all(|&p| row[OCCUPIED_CLASS] >= p))
        .collect()
}
