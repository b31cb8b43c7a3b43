use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, DILATION_RATES, LEVELS};
use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How a set of weights came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Trained on the source domain.
    SourceTrained,
    /// Initialized from source weights and retrained on the target domain.
    FineTuned,
    /// Random initialization, possibly trained on the target domain only.
    Scratch,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::SourceTrained => "source-trained",
            Provenance::FineTuned => "fine-tuned",
            Provenance::Scratch => "scratch",
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    Bias,
    Gamma,
    Beta,
}

/// Name, shape and role of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Canonical parameter list and batchnorm layer names implied by a config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub params: Vec<ParamSpec>,
    /// `(batchnorm name, channels)`.
    pub batchnorms: Vec<(String, usize)>,
}

impl Layout {
    pub fn of(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout {
            params: Vec::new(),
            batchnorms: Vec::new(),
        };
        for level in 0..LEVELS {
            let (cin, f) = (config.encoder_in_channels(level), config.base_filters[level]);
            let p = format!("enc{}", level + 1);
            layout.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), cin, f);
            layout.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), f, f);
        }
        let deep = config.skip_channels(LEVELS - 1);
        for (i, _) in DILATION_RATES.iter().enumerate() {
            let p = format!("bottleneck.branch{}", i + 1);
            layout.conv_bn(
                &format!("{p}.conv"),
                &format!("{p}.bn"),
                deep,
                config.bottleneck_filters,
            );
        }
        for level in (0..LEVELS).rev() {
            let cin = config.decoder_up_channels(level) + config.skip_channels(level);
            let f = config.base_filters[level];
            let p = format!("dec{}", level + 1);
            layout.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), cin, f);
            layout.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), f, f);
        }
        layout.params.push(ParamSpec {
            name: "head.kernel".into(),
            shape: vec![config.num_classes, config.base_filters[0], 1, 1],
            kind: ParamKind::ConvKernel,
        });
        layout.params.push(ParamSpec {
            name: "head.bias".into(),
            shape: vec![config.num_classes],
            kind: ParamKind::Bias,
        });
        Ok(layout)
    }

    // Convolutions followed by batchnorm carry no bias: the batchnorm shift
    // subsumes it and its gradient would be identically zero.
    fn conv_bn(&mut self, conv: &str, bn: &str, cin: usize, cout: usize) {
        self.params.push(ParamSpec {
            name: format!("{conv}.kernel"),
            shape: vec![cout, cin, 3, 3],
            kind: ParamKind::ConvKernel,
        });
        self.params.push(ParamSpec {
            name: format!("{bn}.gamma"),
            shape: vec![cout],
            kind: ParamKind::Gamma,
        });
        self.params.push(ParamSpec {
            name: format!("{bn}.beta"),
            shape: vec![cout],
            kind: ParamKind::Beta,
        });
        self.batchnorms.push((bn.to_string(), cout));
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Named parameters, batchnorm running statistics and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<T>>,
    pub running: IndexMap<String, RunningStats<T>>,
    pub provenance: Provenance,
}

/// Deterministically initialize a network: He-uniform kernels, zero biases
/// and shifts, unit scales, identity running statistics.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    let layout = Layout::of(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::with_capacity(layout.params.len());
    for spec in &layout.params {
        let t = match spec.kind {
            ParamKind::ConvKernel => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| T::lit(rng.random_range(-bound..bound)))
            }
            ParamKind::Bias | ParamKind::Beta => Tensor::zeros(&spec.shape),
            ParamKind::Gamma => Tensor::ones(&spec.shape),
        };
        params.insert(spec.name.clone(), t);
    }
    let running = layout
        .batchnorms
        .iter()
        .map(|(name, c)| (name.clone(), RunningStats::identity(*c)))
        .collect();
    Ok(ModelWeights {
        config: config.clone(),
        params,
        running,
        provenance: Provenance::Scratch,
    })
}

impl<T: Real> ModelWeights<T> {
    /// Check that names and shapes agree exactly with the config's layout.
    pub fn validate(&self) -> Result<()> {
        let layout = Layout::of(&self.config)?;
        if layout.params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, found {}",
                layout.params.len(),
                self.params.len()
            )));
        }
        for spec in &layout.params {
            let t = self
                .params
                .get(&spec.name)
                .ok_or_else(|| Error::shape(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter `{}` has shape {:?}, architecture needs {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if layout.batchnorms.len() != self.running.len() {
            return Err(Error::shape("running statistics do not match batchnorm layers"));
        }
        for (name, c) in &layout.batchnorms {
            let st = self
                .running
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing running statistics `{name}`")))?;
            if st.mean.shape() != [*c] || st.var.shape() != [*c] {
                return Err(Error::shape(format!("running statistics `{name}` need {c} channels")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: v.mean.cast(),
                            var: v.var.cast(),
                            initialized: v.initialized,
                        },
                    )
                })
                .collect(),
            provenance: self.provenance,
        }
    }

    /// Same config and provenance, and bitwise equal parameters and running
    /// statistics.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        fn same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
        }
        self.config == other.config
            && self.provenance == other.provenance
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && same(a, b))
            && self.running.len() == other.running.len()
            && self.running.iter().zip(&other.running).all(|((ka, a), (kb, b))| {
                ka == kb && a.initialized == b.initialized && same(&a.mean, &b.mean) && same(&a.var, &b.var)
            })
    }
}
