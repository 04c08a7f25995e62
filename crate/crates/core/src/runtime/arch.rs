use serde::{Deserialize, Serialize};

use crate::container::{Checkpoint, DType, Role, TensorData, TensorEntry};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
    },
    Batchnorm {
        width: usize,
    },
    Relu,
}

/// Sequential dense/batch-norm/ReLU stack.
///
/// Tensor names: the i-th dense layer (1-based) owns `l{i}.weight` `[out, in]`
/// and `l{i}.bias` `[out]`; the i-th batch-norm layer owns `bn{i}.weight`,
/// `bn{i}.bias` and the running-statistics triple under `bn{i}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    /// Prefix of the tensors forming the classification head.
    pub head_prefix: String,
}

/// A layer together with the tensor names it reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoundLayer {
    Dense { inputs: usize, outputs: usize, weight: String, bias: String },
    Batchnorm { width: usize, prefix: String },
    Relu,
}

/// Hidden units produced by one non-final dense layer, with everything that
/// is indexed by them. Permuting the group permutes rows of `weight`, entries
/// of `bias` and `bn` vectors, and columns of `next_weight`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenGroup {
    pub width: usize,
    pub weight: String,
    pub bias: String,
    pub bn: Option<String>,
    pub next_weight: String,
}

impl ArchSpec {
    /// `dense → [bn] → relu` per hidden width, then a dense head.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, batchnorm: bool) -> ArchSpec {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inputs: width, outputs: h });
            if batchnorm {
                layers.push(LayerSpec::Batchnorm { width: h });
            }
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense { inputs: width, outputs: classes });
        ArchSpec { layers, head_prefix: format!("l{}.", hidden.len() + 1) }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(LayerSpec::Dense { inputs, .. }) = self.layers.first() else {
            return Err(Error::Validation("architecture must start with a dense layer".into()));
        };
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::Validation("architecture must end with a dense layer".into()));
        }
        let mut width = *inputs;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != width {
                        return Err(Error::Validation(format!(
                            "layer {i}: dense expects {inputs} inputs but receives {width}"
                        )));
                    }
                    if outputs == 0 {
                        return Err(Error::Validation(format!("layer {i}: dense with zero outputs")));
                    }
                    width = outputs;
                }
                LayerSpec::Batchnorm { width: w } => {
                    if w != width {
                        return Err(Error::Validation(format!(
                            "layer {i}: batchnorm width {w} but receives {width}"
                        )));
                    }
                }
                LayerSpec::Relu => {}
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.layers.first() {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            _ => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) => *outputs,
            _ => 0,
        }
    }

    pub fn bind(&self) -> Vec<BoundLayer> {
        let (mut dense, mut bn) = (0, 0);
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { inputs, outputs } => {
                    dense += 1;
                    BoundLayer::Dense {
                        inputs,
                        outputs,
                        weight: format!("l{dense}.weight"),
                        bias: format!("l{dense}.bias"),
                    }
                }
                LayerSpec::Batchnorm { width } => {
                    bn += 1;
                    BoundLayer::Batchnorm { width, prefix: format!("bn{bn}") }
                }
                LayerSpec::Relu => BoundLayer::Relu,
            })
            .collect()
    }

    pub fn hidden_groups(&self) -> Vec<HiddenGroup> {
        let bound = self.bind();
        let mut groups: Vec<HiddenGroup> = Vec::new();
        let mut open: Option<HiddenGroup> = None;
        for layer in &bound {
            match layer {
                BoundLayer::Dense { outputs, weight, bias, .. } => {
                    if let Some(mut g) = open.take() {
                        g.next_weight = weight.clone();
                        groups.push(g);
                    }
                    open = Some(HiddenGroup {
                        width: *outputs,
                        weight: weight.clone(),
                        bias: bias.clone(),
                        bn: None,
                        next_weight: String::new(),
                    });
                }
                BoundLayer::Batchnorm { prefix, .. } => {
                    if let Some(g) = open.as_mut() {
                        g.bn = Some(prefix.clone());
                    }
                }
                BoundLayer::Relu => {}
            }
        }
        groups
    }

    /// Every tensor the architecture expects: name, shape, role.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>, Role)> {
        let mut out = Vec::new();
        for layer in self.bind() {
            match layer {
                BoundLayer::Dense { inputs, outputs, weight, bias } => {
                    out.push((weight, vec![outputs, inputs], Role::Param));
                    out.push((bias, vec![outputs], Role::Param));
                }
                BoundLayer::Batchnorm { width, prefix } => {
                    out.push((format!("{prefix}.weight"), vec![width], Role::Param));
                    out.push((format!("{prefix}.bias"), vec![width], Role::Param));
                    out.push((format!("{prefix}.running_mean"), vec![width], Role::Buffer));
                    out.push((format!("{prefix}.running_var"), vec![width], Role::Buffer));
                    out.push((format!("{prefix}.num_batches_tracked"), vec![], Role::Count));
                }
                BoundLayer::Relu => {}
            }
        }
        out
    }

    /// Checks that `ckpt` holds exactly the tensors this architecture names,
    /// with matching shapes and roles.
    pub fn check_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        self.validate()?;
        let expected = self.expected_tensors();
        for (name, shape, role) in &expected {
            let e = ckpt
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks {name} required by the architecture")))?;
            if &e.shape != shape || e.role != *role {
                return Err(Error::Validation(format!(
                    "tensor {name}: expected {} {:?}, found {} {:?}",
                    role.as_str(),
                    shape,
                    e.role.as_str(),
                    e.shape
                )));
            }
        }
        if let Some(extra) = ckpt.names().find(|n| !expected.iter().any(|(e, _, _)| e == *n)) {
            return Err(Error::Validation(format!("tensor {extra} is not part of the architecture")));
        }
        Ok(())
    }

    /// He-normal dense weights, zero biases, unit BN scale, fresh running stats.
    pub fn init_checkpoint(&self, seed: u64, dtype: DType) -> Result<Checkpoint> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ckpt = Checkpoint::new();
        let float = |v: Vec<f64>| TensorData::from_f64(dtype, &v);
        for layer in self.bind() {
            match layer {
                BoundLayer::Dense { inputs, outputs, weight, bias } => {
                    let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).unwrap();
                    let w: Vec<f64> = (0..inputs * outputs).map(|_| normal.sample(&mut rng)).collect();
                    ckpt.insert(weight, TensorEntry::new(vec![outputs, inputs], float(w), Role::Param))?;
                    ckpt.insert(bias, TensorEntry::new(vec![outputs], float(vec![0.0; outputs]), Role::Param))?;
                }
                BoundLayer::Batchnorm { width, prefix } => {
                    let p = |v: f64| TensorEntry::new(vec![width], float(vec![v; width]), Role::Param);
                    ckpt.insert(format!("{prefix}.weight"), p(1.0))?;
                    ckpt.insert(format!("{prefix}.bias"), p(0.0))?;
                    ckpt.insert(format!("{prefix}.running_mean"), TensorEntry::buffer(vec![width], float(vec![0.0; width])))?;
                    ckpt.insert(format!("{prefix}.running_var"), TensorEntry::buffer(vec![width], float(vec![1.0; width])))?;
                    ckpt.insert(format!("{prefix}.num_batches_tracked"), TensorEntry::count(0))?;
                }
                BoundLayer::Relu => {}
            }
        }
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ArchSpec> {
        let arch: ArchSpec = serde_json::from_str(s)?;
        arch.validate()?;
        Ok(arch)
    }
}
