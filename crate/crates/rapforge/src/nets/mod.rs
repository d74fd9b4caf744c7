//! Network architectures: the fixed classifier that plays the discriminator
//! and the trainable residual encoder-decoder generator, plus deterministic
//! initialization and weight-file round trips.
//!
//! The registry is intentionally tiny: `convnet-s` and `convnet-m` as a
//! transfer-target classifier pair, and `resgen-s` as the image-to-image
//! generator (two strided downsampling blocks, three residual blocks, two
//! transposed-conv upsampling blocks, tanh head mapped to `[0, 1]`).

mod weights;

pub use weights::WeightFile;

use std::path::Path;

use rand_chacha::ChaCha12Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Fan-in-scaled uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn init_weight(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
enum ClfLayer {
    Conv {
        name: String,
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
    },
    Linear {
        name: String,
        w: Tensor,
        b: Tensor,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

/// Convolutional classifier with fixed architecture; plays the pretrained
/// discriminator. While `frozen`, its parameters never receive gradients.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    arch: String,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    layers: Vec<ClfLayer>,
    frozen: bool,
}

/// Builds a classifier from the registry. Networks start trainable; call
/// [`ClassifierNet::set_frozen`] after pretraining.
pub fn build_classifier(
    arch: &str,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<ClassifierNet> {
    let (c, h, w) = input_shape;
    if h % 4 != 0 || w % 4 != 0 || c == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument(format!(
            "classifier input {input_shape:?} must have spatial dims divisible by 4"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut layers = Vec::new();
    let mut conv_idx = 0usize;
    let mut fc_idx = 0usize;
    let conv = |cin: usize, cout: usize, k: usize, rng: &mut ChaCha12Rng, idx: &mut usize| {
        let l = ClfLayer::Conv {
            name: format!("conv{idx}"),
            w: init_weight(&[cout, cin, k, k], cin * k * k, rng),
            b: Tensor::zeros(&[cout]),
            stride: 1,
            pad: k / 2,
        };
        *idx += 1;
        l
    };
    let linear = |cin: usize, cout: usize, rng: &mut ChaCha12Rng, idx: &mut usize| {
        let l = ClfLayer::Linear {
            name: format!("fc{idx}"),
            w: init_weight(&[cin, cout], cin, rng),
            b: Tensor::zeros(&[cout]),
        };
        *idx += 1;
        l
    };
    let flat = 16 * (h / 4) * (w / 4);
    match arch {
        "convnet-s" => {
            layers.push(conv(c, 8, 3, &mut rng, &mut conv_idx));
            layers.push(ClfLayer::Relu);
            layers.push(ClfLayer::MaxPool { size: 2 });
            layers.push(conv(8, 16, 3, &mut rng, &mut conv_idx));
            layers.push(ClfLayer::Relu);
            layers.push(ClfLayer::MaxPool { size: 2 });
            layers.push(ClfLayer::Flatten);
            layers.push(linear(flat, 64, &mut rng, &mut fc_idx));
            layers.push(ClfLayer::Relu);
            layers.push(linear(64, num_classes, &mut rng, &mut fc_idx));
        }
        "convnet-m" => {
            layers.push(conv(c, 8, 5, &mut rng, &mut conv_idx));
            layers.push(ClfLayer::Relu);
            layers.push(conv(8, 8, 3, &mut rng, &mut conv_idx));
            layers.push(ClfLayer::Relu);
            layers.push(ClfLayer::MaxPool { size: 2 });
            layers.push(conv(8, 16, 3, &mut rng, &mut conv_idx));
            layers.push(ClfLayer::Relu);
            layers.push(conv(16, 16, 3, &mut rng, &mut conv_idx));
            layers.push(ClfLayer::Relu);
            layers.push(ClfLayer::MaxPool { size: 2 });
            layers.push(ClfLayer::Flatten);
            layers.push(linear(flat, 64, &mut rng, &mut fc_idx));
            layers.push(ClfLayer::Relu);
            layers.push(linear(64, num_classes, &mut rng, &mut fc_idx));
        }
        other => return Err(Error::UnknownArchitecture(other.to_string())),
    }
    Ok(ClassifierNet {
        arch: arch.to_string(),
        input_shape,
        num_classes,
        layers,
        frozen: false,
    })
}

impl ClassifierNet {
    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Forward pass returning `(batch, num_classes)` logits. Parameters are
    /// lifted as constants when frozen, as trainable leaves otherwise; the
    /// trainable leaf vars come back in [`ClassifierNet::params`] order.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let lift = |t: &Tensor| -> Result<Var<'g>> {
            if self.frozen {
                g.constant(t)
            } else {
                g.param(t)
            }
        };
        let mut param_vars = Vec::new();
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                ClfLayer::Conv { w, b, stride, pad, .. } => {
                    let wv = lift(w)?;
                    let bv = lift(b)?;
                    if !self.frozen {
                        param_vars.push(wv);
                        param_vars.push(bv);
                    }
                    cur.conv2d(&wv, Some(&bv), *stride, *pad)?
                }
                ClfLayer::Linear { w, b, .. } => {
                    let wv = lift(w)?;
                    let bv = lift(b)?;
                    if !self.frozen {
                        param_vars.push(wv);
                        param_vars.push(bv);
                    }
                    cur.matmul(&wv)?.add_bias(&bv)?
                }
                ClfLayer::Relu => cur.relu(),
                ClfLayer::MaxPool { size } => cur.maxpool2d(*size)?,
                ClfLayer::Flatten => {
                    let shape = cur.shape();
                    cur.reshape(&[shape[0], shape[1..].iter().product()])?
                }
            };
        }
        Ok((cur, param_vars))
    }

    /// Value-only forward pass (no gradients recorded anywhere).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.constant(x)?;
        let mut cur = xv;
        for layer in &self.layers {
            cur = match layer {
                ClfLayer::Conv { w, b, stride, pad, .. } => {
                    let wv = g.constant(w)?;
                    let bv = g.constant(b)?;
                    cur.conv2d(&wv, Some(&bv), *stride, *pad)?
                }
                ClfLayer::Linear { w, b, .. } => {
                    let wv = g.constant(w)?;
                    let bv = g.constant(b)?;
                    cur.matmul(&wv)?.add_bias(&bv)?
                }
                ClfLayer::Relu => cur.relu(),
                ClfLayer::MaxPool { size } => cur.maxpool2d(*size)?,
                ClfLayer::Flatten => {
                    let shape = cur.shape();
                    cur.reshape(&[shape[0], shape[1..].iter().product()])?
                }
            };
        }
        Ok(cur.value())
    }

    /// Predicted class per sample (argmax with lowest-index tie-break).
    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.predict(x)?.argmax_rows()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                ClfLayer::Conv { name, w, b, .. } | ClfLayer::Linear { name, w, b, .. } => {
                    out.push((format!("{name}.w"), w));
                    out.push((format!("{name}.b"), b));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                ClfLayer::Conv { name, w, b, .. } | ClfLayer::Linear { name, w, b, .. } => {
                    out.push((format!("{name}.w"), w));
                    out.push((format!("{name}.b"), b));
                }
                _ => {}
            }
        }
        out
    }

    pub fn to_weight_file(&self) -> WeightFile {
        params_to_weight_file(self.params())
    }

    pub fn load_weight_file(&mut self, wf: &WeightFile) -> Result<()> {
        load_params(self.params_mut(), wf)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.load_weight_file(&WeightFile::load(path)?)
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    name: String,
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct ResUnit {
    name: String,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Image-to-image residual generator; output matches the input shape with
/// values in `[0, 1]` (tanh head mapped affinely).
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    arch: String,
    input_shape: (usize, usize, usize),
    down: Vec<ConvUnit>,
    res: Vec<ResUnit>,
    up: Vec<ConvUnit>,
    head: ConvUnit,
}

/// Builds a generator from the registry (`resgen-s`).
pub fn build_generator(arch: &str, input_shape: (usize, usize, usize), seed: u64) -> Result<GeneratorNet> {
    let (c, h, w) = input_shape;
    if h % 4 != 0 || w % 4 != 0 || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "generator input {input_shape:?} must have spatial dims divisible by 4"
        )));
    }
    if arch != "resgen-s" {
        return Err(Error::UnknownArchitecture(arch.to_string()));
    }
    let mut rng = rng_from_seed(seed);
    let widths = [16usize, 32];
    let mut down = Vec::new();
    let mut cin = c;
    for (i, &cout) in widths.iter().enumerate() {
        down.push(ConvUnit {
            name: format!("down{i}"),
            w: init_weight(&[cout, cin, 3, 3], cin * 9, &mut rng),
            b: Tensor::zeros(&[cout]),
            stride: 2,
            pad: 1,
        });
        cin = cout;
    }
    let res = (0..3)
        .map(|i| ResUnit {
            name: format!("res{i}"),
            w1: init_weight(&[cin, cin, 3, 3], cin * 9, &mut rng),
            b1: Tensor::zeros(&[cin]),
            w2: init_weight(&[cin, cin, 3, 3], cin * 9, &mut rng),
            b2: Tensor::zeros(&[cin]),
        })
        .collect();
    let mut up = Vec::new();
    for (i, &cout) in [16usize, 16].iter().enumerate() {
        // transposed-conv weights are (Cin, Cout, KH, KW)
        up.push(ConvUnit {
            name: format!("up{i}"),
            w: init_weight(&[cin, cout, 4, 4], cin * 16, &mut rng),
            b: Tensor::zeros(&[cout]),
            stride: 2,
            pad: 1,
        });
        cin = cout;
    }
    let head = ConvUnit {
        name: "head".to_string(),
        w: init_weight(&[c, cin, 3, 3], cin * 9, &mut rng),
        b: Tensor::zeros(&[c]),
        stride: 1,
        pad: 1,
    };
    Ok(GeneratorNet {
        arch: arch.to_string(),
        input_shape,
        down,
        res,
        up,
        head,
    })
}

impl GeneratorNet {
    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    /// Forward pass producing the unbounded-then-squashed image in `[0, 1]`.
    /// With `trainable`, parameters are lifted as gradient leaves and
    /// returned in [`GeneratorNet::params`] order.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, trainable: bool) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let lift = |t: &Tensor| -> Result<Var<'g>> {
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        };
        let mut param_vars = Vec::new();
        let track = |v: Var<'g>, vars: &mut Vec<Var<'g>>| {
            if trainable {
                vars.push(v);
            }
        };

        let mut cur = x;
        for unit in &self.down {
            let wv = lift(&unit.w)?;
            let bv = lift(&unit.b)?;
            track(wv, &mut param_vars);
            track(bv, &mut param_vars);
            cur = cur
                .conv2d(&wv, Some(&bv), unit.stride, unit.pad)?
                .instance_norm2d(INSTANCE_NORM_EPS)?
                .relu();
        }
        for unit in &self.res {
            let w1 = lift(&unit.w1)?;
            let b1 = lift(&unit.b1)?;
            let w2 = lift(&unit.w2)?;
            let b2 = lift(&unit.b2)?;
            for v in [w1, b1, w2, b2] {
                track(v, &mut param_vars);
            }
            let inner = cur
                .conv2d(&w1, Some(&b1), 1, 1)?
                .instance_norm2d(INSTANCE_NORM_EPS)?
                .relu()
                .conv2d(&w2, Some(&b2), 1, 1)?
                .instance_norm2d(INSTANCE_NORM_EPS)?;
            cur = cur.add(&inner)?;
        }
        for unit in &self.up {
            let wv = lift(&unit.w)?;
            let bv = lift(&unit.b)?;
            track(wv, &mut param_vars);
            track(bv, &mut param_vars);
            cur = cur
                .conv_transpose2d(&wv, Some(&bv), unit.stride, unit.pad)?
                .instance_norm2d(INSTANCE_NORM_EPS)?
                .relu();
        }
        let wv = lift(&self.head.w)?;
        let bv = lift(&self.head.b)?;
        track(wv, &mut param_vars);
        track(bv, &mut param_vars);
        let out = cur
            .conv2d(&wv, Some(&bv), self.head.stride, self.head.pad)?
            .tanh()
            .add_scalar(1.0)
            .mul_scalar(0.5);
        Ok((out, param_vars))
    }

    /// Value-only forward pass.
    pub fn generate(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.constant(x)?;
        let (out, _) = self.forward(&g, xv, false)?;
        Ok(out.value())
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for unit in &self.down {
            out.push((format!("{}.w", unit.name), &unit.w));
            out.push((format!("{}.b", unit.name), &unit.b));
        }
        for unit in &self.res {
            out.push((format!("{}.c1.w", unit.name), &unit.w1));
            out.push((format!("{}.c1.b", unit.name), &unit.b1));
            out.push((format!("{}.c2.w", unit.name), &unit.w2));
            out.push((format!("{}.c2.b", unit.name), &unit.b2));
        }
        for unit in &self.up {
            out.push((format!("{}.w", unit.name), &unit.w));
            out.push((format!("{}.b", unit.name), &unit.b));
        }
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for unit in &mut self.down {
            out.push((format!("{}.w", unit.name), &mut unit.w));
            out.push((format!("{}.b", unit.name), &mut unit.b));
        }
        for unit in &mut self.res {
            out.push((format!("{}.c1.w", unit.name), &mut unit.w1));
            out.push((format!("{}.c1.b", unit.name), &mut unit.b1));
            out.push((format!("{}.c2.w", unit.name), &mut unit.w2));
            out.push((format!("{}.c2.b", unit.name), &mut unit.b2));
        }
        for unit in &mut self.up {
            out.push((format!("{}.w", unit.name), &mut unit.w));
            out.push((format!("{}.b", unit.name), &mut unit.b));
        }
        out.push(("head.w".to_string(), &mut self.head.w));
        out.push(("head.b".to_string(), &mut self.head.b));
        out
    }

    pub fn to_weight_file(&self) -> WeightFile {
        params_to_weight_file(self.params())
    }

    pub fn load_weight_file(&mut self, wf: &WeightFile) -> Result<()> {
        load_params(self.params_mut(), wf)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.to_weight_file().save(path)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.load_weight_file(&WeightFile::load(path)?)
    }
}

fn params_to_weight_file(params: Vec<(String, &Tensor)>) -> WeightFile {
    let mut wf = WeightFile::new();
    for (name, tensor) in params {
        wf.push(name, tensor.clone());
    }
    wf
}

fn load_params(params: Vec<(String, &mut Tensor)>, wf: &WeightFile) -> Result<()> {
    if params.len() != wf.entries.len() {
        return Err(Error::ParamSetMismatch(format!(
            "expected {} parameters, file holds {}",
            params.len(),
            wf.entries.len()
        )));
    }
    for ((name, slot), (file_name, tensor)) in params.into_iter().zip(&wf.entries) {
        if &name != file_name {
            return Err(Error::ParamSetMismatch(format!(
                "expected parameter {name:?}, file holds {file_name:?}"
            )));
        }
        if slot.shape() != tensor.shape() {
            return Err(Error::ParamShapeMismatch {
                name,
                expected: slot.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        *slot = tensor.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn classifier_registry_and_determinism() {
        let a = build_classifier("convnet-s", (1, 28, 28), 10, 0).unwrap();
        let b = build_classifier("convnet-s", (1, 28, 28), 10, 0).unwrap();
        for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
        let c = build_classifier("convnet-s", (1, 28, 28), 10, 1).unwrap();
        assert_ne!(a.params()[0].1.data(), c.params()[0].1.data());

        assert!(matches!(
            build_classifier("resnet-152", (1, 28, 28), 10, 0),
            Err(Error::UnknownArchitecture(_))
        ));
    }

    #[test]
    fn classifier_logit_shape() {
        for arch in ["convnet-s", "convnet-m"] {
            let clf = build_classifier(arch, (1, 28, 28), 10, 3).unwrap();
            let x = Tensor::rand_uniform(&[4, 1, 28, 28], 0.0, 1.0, &mut rng_from_seed(1));
            let logits = clf.predict(&x).unwrap();
            assert_eq!(logits.shape(), &[4, 10], "{arch}");
        }
    }

    #[test]
    fn frozen_classifier_exposes_no_trainable_leaves() {
        let mut clf = build_classifier("convnet-s", (1, 28, 28), 10, 3).unwrap();
        clf.set_frozen(true);
        let g = Graph::new();
        let x = g
            .constant(&Tensor::rand_uniform(&[2, 1, 28, 28], 0.0, 1.0, &mut rng_from_seed(2)))
            .unwrap();
        let (logits, param_vars) = clf.forward(&g, x).unwrap();
        assert!(param_vars.is_empty());
        assert!(!logits.requires_grad());
    }

    #[test]
    fn generator_output_shape_and_range() {
        let gen = build_generator("resgen-s", (1, 28, 28), 7).unwrap();
        let x = Tensor::rand_uniform(&[4, 1, 28, 28], 0.0, 1.0, &mut rng_from_seed(3));
        let out = gen.generate(&x).unwrap();
        assert_eq!(out.shape(), &[4, 1, 28, 28]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        assert!(matches!(
            build_generator("resgen-xl", (1, 28, 28), 0),
            Err(Error::UnknownArchitecture(_))
        ));
    }

    #[test]
    fn zeroed_head_outputs_midrange() {
        let mut gen = build_generator("resgen-s", (1, 28, 28), 7).unwrap();
        for (name, p) in gen.params_mut() {
            if name.starts_with("head.") {
                *p = Tensor::zeros(p.shape());
            }
        }
        let x = Tensor::rand_uniform(&[2, 1, 28, 28], 0.0, 1.0, &mut rng_from_seed(4));
        let out = gen.generate(&x).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.rwt");
        let clf = build_classifier("convnet-m", (1, 28, 28), 10, 9).unwrap();
        clf.save_weights(&path).unwrap();
        let mut other = build_classifier("convnet-m", (1, 28, 28), 10, 1234).unwrap();
        other.load_weights(&path).unwrap();
        for ((_, a), (_, b)) in clf.params().iter().zip(other.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn classifier_weights_do_not_load_into_generator() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.rwt");
        build_classifier("convnet-s", (1, 28, 28), 10, 9)
            .unwrap()
            .save_weights(&path)
            .unwrap();
        let mut gen = build_generator("resgen-s", (1, 28, 28), 7).unwrap();
        assert!(matches!(
            gen.load_weights(&path),
            Err(Error::ParamSetMismatch(_)) | Err(Error::ParamShapeMismatch { .. })
        ));
    }

    #[test]
    fn generator_gradients_reach_every_parameter() {
        let gen = build_generator("resgen-s", (1, 8, 8), 5).unwrap();
        let g = Graph::new();
        let x = g
            .constant(&Tensor::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng_from_seed(5)))
            .unwrap();
        let (out, params) = gen.forward(&g, x, true).unwrap();
        assert_eq!(params.len(), gen.params().len());
        out.mean_all().backward().unwrap();
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad().expect("every generator parameter gets a gradient");
            assert!(grad.all_finite(), "param {i} grad finite");
        }
    }
}
