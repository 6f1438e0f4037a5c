//! The five networks of the attack: makeup generator `G`, reconstruction
//! generator `G_R`, discriminators `D_X` / `D_Y`, and the victim classifier.
//!
//! Every network is a [`NetworkSpec`] plus a [`ParameterSet`]. The parameter
//! table (names and shapes) is a pure function of the spec, so checkpoints
//! can be checked against the spec they claim to belong to.

mod checkpoint;
pub mod layers;
mod networks;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION,
};
pub use networks::{
    build_classifier, build_discriminator, build_generator, Classifier, Discriminator, Generator,
};
pub(crate) use networks::argmax_rows;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NetworkKind {
    Generator,
    Discriminator,
    Classifier,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Architecture description.
///
/// `depth` counts residual blocks for generators, stride-2 layers for
/// discriminators and convolution blocks for classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub input_size: usize,
    pub base_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub precision: Precision,
    /// Generators only: add the network output to the input in logit space
    /// before the output sigmoid.
    #[serde(default = "default_true")]
    pub input_skip: bool,
}

impl NetworkSpec {
    pub fn generator(input_size: usize, base_width: usize, residual_blocks: usize) -> Self {
        Self {
            kind: NetworkKind::Generator,
            input_size,
            base_width,
            depth: residual_blocks,
            num_classes: 0,
            precision: Precision::F32,
            input_skip: true,
        }
    }

    pub fn discriminator(input_size: usize, base_width: usize, layers: usize) -> Self {
        Self {
            kind: NetworkKind::Discriminator,
            depth: layers,
            ..Self::generator(input_size, base_width, 0)
        }
    }

    pub fn classifier(input_size: usize, base_width: usize, blocks: usize, num_classes: usize) -> Self {
        Self {
            kind: NetworkKind::Classifier,
            depth: blocks,
            num_classes,
            ..Self::generator(input_size, base_width, 0)
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SpecMismatch(m));
        if self.input_size == 0 || self.base_width == 0 {
            return fail("input_size and base_width must be positive".into());
        }
        match self.kind {
            NetworkKind::Generator => {
                if self.input_size % 4 != 0 {
                    return fail(format!(
                        "generator input_size {} must be divisible by 4",
                        self.input_size
                    ));
                }
            }
            NetworkKind::Discriminator => {
                if self.depth == 0 || self.input_size % (1 << self.depth) != 0 {
                    return fail(format!(
                        "discriminator needs depth >= 1 and input_size divisible by 2^depth, got {} / {}",
                        self.input_size, self.depth
                    ));
                }
            }
            NetworkKind::Classifier => {
                if self.num_classes < 2 {
                    return fail(format!("classifier needs >= 2 classes, got {}", self.num_classes));
                }
                if self.depth == 0 || self.input_size % (1 << self.depth) != 0 {
                    return fail(format!(
                        "classifier needs depth >= 1 and input_size divisible by 2^depth, got {} / {}",
                        self.input_size, self.depth
                    ));
                }
            }
        }
        Ok(())
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn parameter_table(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.base_width;
        let mut t: Vec<(String, Vec<usize>)> = Vec::new();
        let conv = |t: &mut Vec<(String, Vec<usize>)>, name: &str, out: usize, inp: usize, k: usize| {
            t.push((format!("{name}.weight"), vec![out, inp, k, k]));
            t.push((format!("{name}.bias"), vec![out]));
        };
        match self.kind {
            NetworkKind::Generator => {
                conv(&mut t, "stem", w, 3, 7);
                conv(&mut t, "down0", 2 * w, w, 3);
                conv(&mut t, "down1", 4 * w, 2 * w, 3);
                for i in 0..self.depth {
                    conv(&mut t, &format!("res{i}.a"), 4 * w, 4 * w, 3);
                    conv(&mut t, &format!("res{i}.b"), 4 * w, 4 * w, 3);
                }
                conv(&mut t, "up0", 2 * w, 4 * w, 3);
                conv(&mut t, "up1", w, 2 * w, 3);
                conv(&mut t, "head", 3, w, 7);
            }
            NetworkKind::Discriminator => {
                conv(&mut t, "conv0", w, 3, 4);
                for i in 1..self.depth {
                    conv(&mut t, &format!("conv{i}"), w << i, w << (i - 1), 4);
                }
                conv(&mut t, "head", 1, w << (self.depth - 1), 3);
            }
            NetworkKind::Classifier => {
                let mut c_in = 3;
                for b in 0..self.depth {
                    let c = w << b;
                    conv(&mut t, &format!("block{b}.conv0"), c, c_in, 3);
                    conv(&mut t, &format!("block{b}.conv1"), c, c, 3);
                    c_in = c;
                }
                let spatial = self.input_size >> self.depth;
                let hidden = self.hidden_width();
                t.push(("fc1.weight".into(), vec![hidden, c_in * spatial * spatial]));
                t.push(("fc1.bias".into(), vec![hidden]));
                t.push(("fc2.weight".into(), vec![self.num_classes, hidden]));
                t.push(("fc2.bias".into(), vec![self.num_classes]));
            }
        }
        t
    }

    pub(crate) fn hidden_width(&self) -> usize {
        2 * (self.base_width << self.depth.saturating_sub(1))
    }
}

/// Named parameter arrays of one network, ordered by name.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    vars: BTreeMap<String, Var>,
    /// Untracked copies served by `get` once frozen, so no gradient is ever
    /// recorded against these arrays.
    frozen: Option<BTreeMap<String, Tensor>>,
}

impl ParameterSet {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars, frozen: None }
    }

    /// Copy whose forward passes treat every array as a constant.
    pub fn frozen(&self) -> Self {
        let frozen = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect();
        Self {
            vars: self.vars.clone(),
            frozen: Some(frozen),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Seeded initialisation. Convolutions and linear layers draw from a
    /// zero-mean normal: He scaling for the classifier, `N(0, 0.02)` for the
    /// translation networks. Biases start at zero.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dtype = spec.dtype();
        let mut vars = BTreeMap::new();
        for (name, shape) in spec.parameter_table() {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let std = match spec.kind {
                    NetworkKind::Classifier => {
                        let fan_in: usize = shape[1..].iter().product();
                        (2.0 / fan_in as f64).sqrt()
                    }
                    _ => 0.02,
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            let t = Tensor::from_vec(values, shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
            vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self::from_vars(vars))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let found = match &self.frozen {
            Some(map) => map.get(name),
            None => self.vars.get(name).map(|v| v.as_tensor()),
        };
        found
            .ok_or_else(|| Error::SpecMismatch(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Detached deep copy; later updates to `self` do not affect it.
    pub fn snapshot(&self) -> Result<Self> {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor().copy()?.detach();
                Ok((k.clone(), Var::from_tensor(&t)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self::from_vars(vars))
    }

    /// Shape table in name order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect()
    }

    /// Raw little-endian bytes of every array, for bit-exact comparisons.
    pub fn fingerprint(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (name, var) in &self.vars {
            out.extend_from_slice(name.as_bytes());
            out.extend(checkpoint::tensor_bytes(var.as_tensor())?);
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let flat: Vec<f64> = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if flat.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Checks names and shapes against the spec's table.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let mut expected = spec.parameter_table();
        expected.sort_by(|a, b| a.0.cmp(&b.0));
        let actual = self.shape_table();
        if expected != actual {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter table does not match spec ({} expected arrays, {} present)",
                expected.len(),
                actual.len()
            )));
        }
        for v in self.vars.values() {
            if v.dtype() != spec.dtype() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter dtype {:?} does not match spec precision {:?}",
                    v.dtype(),
                    spec.precision
                )));
            }
        }
        Ok(())
    }
}

/// Anything that maps image batches `(N, 3, H, W)` in `[0, 1]` to image
/// batches of the same shape in `[0, 1]`.
pub trait ImageTranslator {
    fn translate(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Anything that maps image batches to `(N, num_classes)` logits.
pub trait LogitModel {
    fn num_classes(&self) -> usize;
    /// Square input side the model requires, if it has one.
    fn input_size(&self) -> Option<usize> {
        None
    }
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

/// Pass-through translator, the no-attack baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl ImageTranslator for IdentityTranslator {
    fn translate(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(batch.clone())
    }
}
