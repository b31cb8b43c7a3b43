use indexmap::IndexMap;

use super::config::{DILATION_RATES, LEVELS};
use super::weights::ModelWeights;
use crate::autodiff::{BatchNormParams, ConvGeometry, Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Graph handles of every named parameter.
pub type ParamVars = IndexMap<String, Var>;

/// Put every parameter of `weights` on the graph, as trainable leaves or as
/// constants.
pub fn bind_params<T: Real>(g: &mut Graph<T>, weights: &ModelWeights<T>, trainable: bool) -> ParamVars {
    weights
        .params
        .iter()
        .map(|(name, t)| {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            (name.clone(), v)
        })
        .collect()
}

/// One forward pass under construction: the graph, the bound parameters and
/// the batchnorm statistics being read and updated.
pub struct Network<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    vars: &'a ParamVars,
    running: &'a IndexMap<String, RunningStats<T>>,
    mode: Mode,
    bn: BatchNormParams,
    updates: IndexMap<String, RunningStats<T>>,
}

impl<'a, T: Real> Network<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        vars: &'a ParamVars,
        running: &'a IndexMap<String, RunningStats<T>>,
        mode: Mode,
    ) -> Self {
        Self {
            graph,
            vars,
            running,
            mode,
            bn: BatchNormParams::default(),
            updates: IndexMap::new(),
        }
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))
    }

    /// 3x3 same-padded convolution, batchnorm, relu.
    pub fn conv_bn_relu(&mut self, x: Var, conv: &str, bn: &str, dilation: usize) -> Result<Var> {
        let kernel = self.var(&format!("{conv}.kernel"))?;
        let y = self.graph.conv2d(x, kernel, None, ConvGeometry::same(3, dilation))?;
        let gamma = self.var(&format!("{bn}.gamma"))?;
        let beta = self.var(&format!("{bn}.beta"))?;
        let stats = self
            .running
            .get(bn)
            .ok_or_else(|| Error::shape(format!("missing running statistics `{bn}`")))?;
        let (y, upd) = self.graph.batch_norm(y, gamma, beta, stats, self.mode, self.bn, bn)?;
        if let Some(upd) = upd {
            self.updates.insert(bn.to_string(), upd);
        }
        Ok(self.graph.relu(y))
    }

    /// Returns `(features, pooled)`; `features` is the skip tensor.
    pub fn encoder_block(&mut self, level: usize, x: Var) -> Result<(Var, Var)> {
        let p = format!("enc{}", level + 1);
        let h = self.conv_bn_relu(x, &format!("{p}.conv1"), &format!("{p}.bn1"), 1)?;
        let h = self.conv_bn_relu(h, &format!("{p}.conv2"), &format!("{p}.bn2"), 1)?;
        let features = self.graph.concat_channels(x, h)?;
        let pooled = self.graph.maxpool2x2(features)?;
        Ok((features, pooled))
    }

    /// Sum of the four dilated branches.
    pub fn bottleneck(&mut self, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (i, &d) in DILATION_RATES.iter().enumerate() {
            let p = format!("bottleneck.branch{}", i + 1);
            let b = self.conv_bn_relu(x, &format!("{p}.conv"), &format!("{p}.bn"), d)?;
            acc = Some(match acc {
                None => b,
                Some(a) => self.graph.add(a, b)?,
            });
        }
        Ok(acc.expect("four branches"))
    }

    pub fn decoder_block(&mut self, level: usize, x: Var, skip: Var) -> Result<Var> {
        let up = self.graph.upsample2x_nearest(x)?;
        let (us, ss) = (self.graph.value(up).shape(), self.graph.value(skip).shape());
        if us[2..] != ss[2..] {
            return Err(Error::shape(format!(
                "decoder level {}: upsampled input is {}x{}, skip is {}x{}",
                level + 1,
                us[2],
                us[3],
                ss[2],
                ss[3]
            )));
        }
        let h = self.graph.concat_channels(up, skip)?;
        let p = format!("dec{}", level + 1);
        let h = self.conv_bn_relu(h, &format!("{p}.conv1"), &format!("{p}.bn1"), 1)?;
        self.conv_bn_relu(h, &format!("{p}.conv2"), &format!("{p}.bn2"), 1)
    }

    /// Full pipeline to per-pixel class probabilities.
    pub fn forward(&mut self, input: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(LEVELS);
        let mut x = input;
        for level in 0..LEVELS {
            let (features, pooled) = self.encoder_block(level, x)?;
            skips.push(features);
            x = pooled;
        }
        x = self.bottleneck(x)?;
        for level in (0..LEVELS).rev() {
            x = self.decoder_block(level, x, skips[level])?;
        }
        let kernel = self.var("head.kernel")?;
        let bias = self.var("head.bias")?;
        let logits = self.graph.conv2d(x, kernel, Some(bias), ConvGeometry::new(1, 1, 0))?;
        self.graph.softmax_channels(logits)
    }

    /// Running statistics produced by train-mode batchnorm calls so far.
    pub fn into_updates(self) -> IndexMap<String, RunningStats<T>> {
        self.updates
    }
}

fn check_input<T: Real>(weights: &ModelWeights<T>, batch: &Tensor<T>) -> Result<()> {
    let [_, c, h, w] = batch.dims4()?;
    let cfg = &weights.config;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, model expects {}",
            cfg.in_channels
        )));
    }
    if h != cfg.input_size || w != cfg.input_size {
        return Err(Error::shape(format!(
            "input is {h}x{w}, model expects {0}x{0}",
            cfg.input_size
        )));
    }
    Ok(())
}

/// Class probabilities `N x K x H x W` for a batch `N x 1 x H x W`.
///
/// In train mode the batch statistics are used and the running statistics
/// of `weights` are left untouched.
pub fn model_forward<T: Real>(weights: &ModelWeights<T>, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    check_input(weights, batch)?;
    let mut g = Graph::new();
    let vars = bind_params(&mut g, weights, false);
    let input = g.constant(batch.clone());
    let probs = Network::new(&mut g, &vars, &weights.running, mode).forward(input)?;
    Ok(g.take_value(probs))
}

/// Output of one differentiable training forward pass.
pub struct TrainForward<T: Real> {
    pub graph: Graph<T>,
    pub vars: ParamVars,
    pub probs: Var,
    pub running: IndexMap<String, RunningStats<T>>,
}

/// Build a train-mode graph with trainable parameters.
pub fn train_forward<T: Real>(weights: &ModelWeights<T>, batch: &Tensor<T>) -> Result<TrainForward<T>> {
    check_input(weights, batch)?;
    let mut graph = Graph::new();
    let vars = bind_params(&mut graph, weights, true);
    let input = graph.constant(batch.clone());
    let mut net = Network::new(&mut graph, &vars, &weights.running, Mode::Train);
    let probs = net.forward(input)?;
    let running = net.into_updates();
    Ok(TrainForward {
        graph,
        vars,
        probs,
        running,
    })
}
