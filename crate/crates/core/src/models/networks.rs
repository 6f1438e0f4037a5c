use candle_core::{DType, Tensor};
use candle_nn::ops::{leaky_relu, sigmoid};

use super::layers::{conv2d, conv2d_reflect, instance_norm, linear, max_pool2};
use super::{
    Checkpoint, CheckpointMeta, ImageTranslator, LogitModel, NetworkKind, NetworkSpec,
    ParameterSet,
};
use crate::error::{Error, Result};
use crate::image::{from_batch_tensor, to_batch_tensor, ImageTensor};

/// Inputs are clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]` before the logit of
/// the input skip path.
const LOGIT_EPS: f64 = 1e-3;

fn expect_kind(spec: &NetworkSpec, kind: NetworkKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::SpecMismatch(format!(
            "expected a {kind:?} spec, got {:?}",
            spec.kind
        )));
    }
    Ok(())
}

fn check_input(spec: &NetworkSpec, x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 || h != spec.input_size || w != spec.input_size {
        return Err(Error::ShapeMismatch(format!(
            "{:?} expects (N, 3, {s}, {s}), got {:?}",
            spec.kind,
            x.dims(),
            s = spec.input_size
        )));
    }
    Ok(())
}

macro_rules! network_common {
    ($ty:ident, $kind:expr) => {
        impl $ty {
            pub fn from_parts(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
                expect_kind(&spec, $kind)?;
                params.check_against(&spec)?;
                Ok(Self { spec, params })
            }

            pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
                Self::from_parts(ckpt.spec.clone(), ckpt.params.snapshot()?)
            }

            pub fn spec(&self) -> &NetworkSpec {
                &self.spec
            }

            pub fn params(&self) -> &ParameterSet {
                &self.params
            }

            /// The same network with its parameters excluded from autograd.
            pub fn frozen(&self) -> Self {
                Self {
                    spec: self.spec.clone(),
                    params: self.params.frozen(),
                }
            }

            /// Detached copy of the current parameters as a checkpoint.
            pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Result<Checkpoint> {
                Ok(Checkpoint {
                    spec: self.spec.clone(),
                    params: self.params.snapshot()?,
                    meta,
                })
            }

            fn p(&self, name: &str) -> Result<&Tensor> {
                self.params.get(name)
            }

            fn conv(&self, x: &Tensor, name: &str, padding: usize, stride: usize) -> Result<Tensor> {
                conv2d(
                    x,
                    self.p(&format!("{name}.weight"))?,
                    self.p(&format!("{name}.bias"))?,
                    padding,
                    stride,
                )
            }

            #[allow(dead_code)]
            fn conv_reflect(&self, x: &Tensor, name: &str) -> Result<Tensor> {
                conv2d_reflect(
                    x,
                    self.p(&format!("{name}.weight"))?,
                    self.p(&format!("{name}.bias"))?,
                )
            }
        }
    };
}

/// Encoder / residual / decoder translation network with a sigmoid output.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: NetworkSpec,
    params: ParameterSet,
}

network_common!(Generator, NetworkKind::Generator);

impl Generator {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.spec, x)?;
        let x = x.to_dtype(self.spec.dtype())?;
        let mut h = instance_norm(&self.conv_reflect(&x, "stem")?)?.relu()?;
        h = instance_norm(&self.conv(&h, "down0", 1, 2)?)?.relu()?;
        h = instance_norm(&self.conv(&h, "down1", 1, 2)?)?.relu()?;
        for i in 0..self.spec.depth {
            let r = instance_norm(&self.conv_reflect(&h, &format!("res{i}.a"))?)?.relu()?;
            let r = instance_norm(&self.conv_reflect(&r, &format!("res{i}.b"))?)?;
            h = (h + r)?;
        }
        for name in ["up0", "up1"] {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            h = instance_norm(&self.conv_reflect(&h, name)?)?.relu()?;
        }
        let mut out = self.conv_reflect(&h, "head")?;
        if self.spec.input_skip {
            let xc = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)?;
            let logit = (xc.log()? - xc.affine(-1.0, 1.0)?.log()?)?;
            out = (out + logit)?;
        }
        Ok(sigmoid(&out)?)
    }

    pub fn translate_images(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        let x = to_batch_tensor(images, self.spec.dtype(), &candle_core::Device::Cpu)?;
        from_batch_tensor(&self.forward(&x)?)
    }
}

impl ImageTranslator for Generator {
    fn translate(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}

/// Patch discriminator: per-patch sigmoid scores averaged to one realness
/// score per image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    spec: NetworkSpec,
    params: ParameterSet,
}

network_common!(Discriminator, NetworkKind::Discriminator);

impl Discriminator {
    /// `(N, 1, h, w)` patch scores.
    pub fn patch_scores(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.spec, x)?;
        let x = x.to_dtype(self.spec.dtype())?;
        let mut h = leaky_relu(&self.conv(&x, "conv0", 1, 2)?, 0.2)?;
        for i in 1..self.spec.depth {
            h = leaky_relu(&instance_norm(&self.conv(&h, &format!("conv{i}"), 1, 2)?)?, 0.2)?;
        }
        Ok(sigmoid(&self.conv(&h, "head", 1, 1)?)?)
    }

    /// `(N,)` realness scores in `(0, 1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.patch_scores(x)?.mean((1, 2, 3))?)
    }
}

/// VGG-style victim: blocks of two 3x3 convolutions and a 2x2 max-pool,
/// followed by two fully connected layers.
#[derive(Clone, Debug)]
pub struct Classifier {
    spec: NetworkSpec,
    params: ParameterSet,
}

network_common!(Classifier, NetworkKind::Classifier);

impl Classifier {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.spec, x)?;
        let mut h = x.to_dtype(self.spec.dtype())?.affine(2.0, -1.0)?;
        for b in 0..self.spec.depth {
            h = self.conv(&h, &format!("block{b}.conv0"), 1, 1)?.relu()?;
            h = self.conv(&h, &format!("block{b}.conv1"), 1, 1)?.relu()?;
            h = max_pool2(&h)?;
        }
        let h = h.flatten_from(1)?;
        let h = linear(&h, self.p("fc1.weight")?, self.p("fc1.bias")?)?.relu()?;
        linear(&h, self.p("fc2.weight")?, self.p("fc2.bias")?)
    }

    /// Predicted class per image, first index winning ties.
    pub fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        let x = to_batch_tensor(images, self.spec.dtype(), &candle_core::Device::Cpu)?;
        argmax_rows(&self.forward(&x)?)
    }
}

impl LogitModel for Classifier {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_size(&self) -> Option<usize> {
        Some(self.spec.input_size)
    }

    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch)
    }
}

/// Row-wise argmax with first-index tie-breaking.
pub(crate) fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let rows: Vec<Vec<f64>> = logits.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

pub fn build_generator(spec: &NetworkSpec, seed: u64) -> Result<Generator> {
    expect_kind(spec, NetworkKind::Generator)?;
    Generator::from_parts(spec.clone(), ParameterSet::init(spec, seed)?)
}

pub fn build_discriminator(spec: &NetworkSpec, seed: u64) -> Result<Discriminator> {
    expect_kind(spec, NetworkKind::Discriminator)?;
    Discriminator::from_parts(spec.clone(), ParameterSet::init(spec, seed)?)
}

/// Builds the victim. With `init` the parameters are copied from that
/// checkpoint (the pretrained regime); otherwise they are seeded at random
/// (the scratch regime).
pub fn build_classifier(
    spec: &NetworkSpec,
    seed: u64,
    init: Option<&Checkpoint>,
) -> Result<Classifier> {
    expect_kind(spec, NetworkKind::Classifier)?;
    match init {
        Some(ckpt) => {
            if &ckpt.spec != spec {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "initial checkpoint spec {:?} differs from requested {:?}",
                    ckpt.spec, spec
                )));
            }
            Classifier::from_checkpoint(ckpt)
        }
        None => Classifier::from_parts(spec.clone(), ParameterSet::init(spec, seed)?),
    }
}
