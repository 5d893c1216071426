//! Sequential model container with a named parameter registry.

use crate::activations::ActKind;
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, DenseLayer, Layer, MaxPool2d, ParametricActivation};
use crate::ops;
use crate::rng::Rng;
use crate::tape::{AlphaRef, BufId, GradTape};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    /// Per-sample input shape, e.g. [1, 16, 16].
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

/// A model parameter bound to a tape buffer for one training step.
pub struct ParamBinding {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub buf: BufId,
    /// Activation kind for alpha parameters; None for weights and biases.
    pub act_kind: Option<ActKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Alpha,
}

impl Model {
    /// Validate that consecutive layer shapes compose and the head matches
    /// the class count.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", layer.kind_name())))?;
        }
        if shape != [classes] {
            return Err(Error::Shape(format!(
                "model head produces {shape:?}, expected [{classes}]"
            )));
        }
        Ok(Model { layers, input_shape, classes })
    }

    /// Inference forward pass (no tape, no allocation of gradient state).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.check_batch_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense(d) => {
                    let n_in = d.n_in();
                    let n_out = d.n_out();
                    let mut out = vec![0.0; batch * n_out];
                    ops::dense_forward(cur.data(), d.w.data(), d.b.data(), &mut out, batch, n_in, n_out);
                    Tensor::new(vec![batch, n_out], out)
                }
                Layer::Conv2d(c) => {
                    let (ci, h, w) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
                    let k = c.k();
                    let h_out = ops::conv_out_dim(h, k, c.stride, c.padding).unwrap();
                    let w_out = ops::conv_out_dim(w, k, c.stride, c.padding).unwrap();
                    let mut out = vec![0.0; batch * c.c_out() * h_out * w_out];
                    ops::conv2d_forward(
                        cur.data(),
                        c.kernel.data(),
                        c.bias.data(),
                        &mut out,
                        batch,
                        ci,
                        h,
                        w,
                        c.c_out(),
                        k,
                        c.stride,
                        c.padding,
                        h_out,
                        w_out,
                    );
                    Tensor::new(vec![batch, c.c_out(), h_out, w_out], out)
                }
                Layer::Activation(a) => {
                    let mut out = vec![0.0; cur.len()];
                    ops::activation_forward(cur.data(), &mut out, a.kind, a.effective_alpha(), a.beta);
                    Tensor::new(cur.shape().to_vec(), out)
                }
                Layer::MaxPool2d(p) => {
                    let (c, h, w) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
                    let (h_out, w_out) = (h / p.size, w / p.size);
                    let mut out = vec![0.0; batch * c * h_out * w_out];
                    let mut argmax = vec![0u32; out.len()];
                    ops::maxpool_forward(
                        cur.data(),
                        &mut out,
                        &mut argmax,
                        batch,
                        c,
                        h,
                        w,
                        p.size,
                        h_out,
                        w_out,
                    );
                    Tensor::new(vec![batch, c, h_out, w_out], out)
                }
                Layer::Flatten => {
                    let rest: usize = cur.shape()[1..].iter().product();
                    cur.reshape(vec![batch, rest])?
                }
            };
        }
        Ok(cur)
    }

    /// Argmax class per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u32>> {
        let logits = self.forward(x)?;
        let classes = self.classes;
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect())
    }

    fn check_batch_input(&self, x: &Tensor) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects [batch, {:?}], got {shape:?}",
                self.input_shape
            )));
        }
        Ok(shape[0])
    }

    /// Record a full forward pass on the tape. Returns the logits buffer and
    /// the bindings of every trainable parameter, in registry order.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        x: &Tensor,
    ) -> Result<(BufId, Vec<ParamBinding>)> {
        self.check_batch_input(x)?;
        let mut bindings = Vec::new();
        let mut cur = tape.input(x);
        for (li, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Dense(d) => {
                    let w = tape.param(&format!("layer{li}.w"), &d.w);
                    let b = tape.param(&format!("layer{li}.b"), &d.b);
                    bindings.push(ParamBinding {
                        name: format!("layer{li}.w"),
                        layer: li,
                        role: ParamRole::Weight,
                        buf: w,
                        act_kind: None,
                    });
                    bindings.push(ParamBinding {
                        name: format!("layer{li}.b"),
                        layer: li,
                        role: ParamRole::Bias,
                        buf: b,
                        act_kind: None,
                    });
                    tape.dense(cur, w, b)?
                }
                Layer::Conv2d(c) => {
                    let w = tape.param(&format!("layer{li}.kernel"), &c.kernel);
                    let b = tape.param(&format!("layer{li}.bias"), &c.bias);
                    bindings.push(ParamBinding {
                        name: format!("layer{li}.kernel"),
                        layer: li,
                        role: ParamRole::Weight,
                        buf: w,
                        act_kind: None,
                    });
                    bindings.push(ParamBinding {
                        name: format!("layer{li}.bias"),
                        layer: li,
                        role: ParamRole::Bias,
                        buf: b,
                        act_kind: None,
                    });
                    tape.conv2d(cur, w, b, c.stride, c.padding)?
                }
                Layer::Activation(a) => match a.alpha {
                    crate::layers::AlphaParam::Trainable(raw) => {
                        let raw_buf =
                            tape.param(&format!("layer{li}.alpha"), &Tensor::scalar(raw));
                        bindings.push(ParamBinding {
                            name: format!("layer{li}.alpha"),
                            layer: li,
                            role: ParamRole::Alpha,
                            buf: raw_buf,
                            act_kind: Some(a.kind),
                        });
                        tape.activation(cur, a.kind, AlphaRef::Param(raw_buf), a.beta)
                    }
                    crate::layers::AlphaParam::Pinned(alpha) => {
                        tape.activation(cur, a.kind, AlphaRef::Pinned(alpha), a.beta)
                    }
                },
                Layer::MaxPool2d(p) => tape.maxpool(cur, p.size)?,
                Layer::Flatten => tape.flatten(cur),
            };
        }
        Ok((cur, bindings))
    }

    /// Apply an update to the parameter a binding points at.
    pub fn param_slice_mut(&mut self, layer: usize, role: ParamRole) -> &mut [f32] {
        match (&mut self.layers[layer], role) {
            (Layer::Dense(d), ParamRole::Weight) => d.w.data_mut(),
            (Layer::Dense(d), ParamRole::Bias) => d.b.data_mut(),
            (Layer::Conv2d(c), ParamRole::Weight) => c.kernel.data_mut(),
            (Layer::Conv2d(c), ParamRole::Bias) => c.bias.data_mut(),
            (Layer::Activation(a), ParamRole::Alpha) => match &mut a.alpha {
                crate::layers::AlphaParam::Trainable(raw) => std::slice::from_mut(raw),
                crate::layers::AlphaParam::Pinned(_) => {
                    panic!("pinned alpha is not a parameter")
                }
            },
            (l, r) => panic!("layer {} has no {:?} parameter", l.kind_name(), r),
        }
    }

    /// Walk trainable parameters in registry order (layer order; weight
    /// before bias; alpha only when trainable).
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &[f32])) {
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    f(format!("layer{li}.w"), d.w.data());
                    f(format!("layer{li}.b"), d.b.data());
                }
                Layer::Conv2d(c) => {
                    f(format!("layer{li}.kernel"), c.kernel.data());
                    f(format!("layer{li}.bias"), c.bias.data());
                }
                Layer::Activation(a) => {
                    if let crate::layers::AlphaParam::Trainable(raw) = a.alpha {
                        f(format!("layer{li}.alpha"), std::slice::from_ref(&raw));
                    }
                }
                _ => {}
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, s| n += s.len());
        n
    }
}

/// Build a named architecture with deterministic initialization.
///
/// Known names:
///   desk-cnn       conv(c->8,3x3) relu pool2 flatten dense(64) act dense(classes)
///   mlp-H          flatten dense(H) act dense(classes)
///   mlp-H1-H2      flatten dense(H1) act dense(H2) act dense(classes)
///
/// `act` is the hidden parametric activation, trainable, started at the
/// conventional PReLU slope 0.25.
pub fn build_arch(
    name: &str,
    input_shape: &[usize],
    classes: usize,
    act: ActKind,
    rng: &mut Rng,
) -> Result<Model> {
    let features: usize = input_shape.iter().product();
    let mut layers = Vec::new();
    if name == "desk-cnn" {
        let (c_in, h, w) = match input_shape {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::Shape(format!("desk-cnn expects [c,h,w] input, got {other:?}")))
            }
        };
        let c_mid = 8usize;
        layers.push(Layer::Conv2d(Conv2dLayer::new(
            xavier(vec![c_mid, c_in, 3, 3], c_in * 9, c_mid * 9, rng),
            Tensor::zeros(vec![c_mid]),
            1,
            0,
        )?));
        layers.push(Layer::Activation(ParametricActivation::relu()));
        layers.push(Layer::MaxPool2d(MaxPool2d { size: 2 }));
        layers.push(Layer::Flatten);
        let flat = c_mid * ((h - 2) / 2) * ((w - 2) / 2);
        layers.push(Layer::Dense(dense_init(flat, 64, rng)?));
        layers.push(Layer::Activation(ParametricActivation::trainable(act, 0.25)));
        layers.push(Layer::Dense(dense_init(64, classes, rng)?));
    } else if let Some(spec) = name.strip_prefix("mlp-") {
        let hiddens: Vec<usize> = spec
            .split('-')
            .map(|s| s.parse::<usize>().map_err(|_| Error::Config(format!("bad arch name: {name}"))))
            .collect::<Result<_>>()?;
        if hiddens.is_empty() {
            return Err(Error::Config(format!("bad arch name: {name}")));
        }
        layers.push(Layer::Flatten);
        let mut n_in = features;
        for h in hiddens {
            layers.push(Layer::Dense(dense_init(n_in, h, rng)?));
            layers.push(Layer::Activation(ParametricActivation::trainable(act, 0.25)));
            n_in = h;
        }
        layers.push(Layer::Dense(dense_init(n_in, classes, rng)?));
    } else {
        return Err(Error::Config(format!("unknown architecture: {name}")));
    }
    Model::new(layers, input_shape.to_vec(), classes)
}

fn xavier(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn dense_init(n_in: usize, n_out: usize, rng: &mut Rng) -> Result<DenseLayer> {
    DenseLayer::new(xavier(vec![n_out, n_in], n_in, n_out, rng), Tensor::zeros(vec![n_out]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_cnn_composes() {
        let mut rng = Rng::new(1);
        let m = build_arch("desk-cnn", &[1, 16, 16], 4, ActKind::Prelu, &mut rng).unwrap();
        let x = Tensor::zeros(vec![2, 1, 16, 16]);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
    }

    #[test]
    fn mlp_composes() {
        let mut rng = Rng::new(2);
        let m = build_arch("mlp-32-16", &[1, 8, 8], 3, ActKind::Gelu, &mut rng).unwrap();
        let x = Tensor::zeros(vec![5, 1, 8, 8]);
        assert_eq!(m.forward(&x).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn unknown_arch_rejected() {
        let mut rng = Rng::new(3);
        assert!(build_arch("resnet-50", &[3, 32, 32], 10, ActKind::Prelu, &mut rng).is_err());
    }

    #[test]
    fn bad_input_shape_is_shape_error() {
        let mut rng = Rng::new(4);
        let m = build_arch("mlp-8", &[1, 4, 4], 2, ActKind::Prelu, &mut rng).unwrap();
        let x = Tensor::zeros(vec![2, 1, 5, 5]);
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn tape_and_inference_forward_agree() {
        let mut rng = Rng::new(5);
        let m = build_arch("desk-cnn", &[1, 12, 12], 3, ActKind::Silu, &mut rng).unwrap();
        let x = Tensor::uniform(vec![3, 1, 12, 12], 0.0, 1.0, &mut rng);
        let direct = m.forward(&x).unwrap();
        let mut tape = GradTape::new();
        let (logits, _) = m.forward_on_tape(&mut tape, &x).unwrap();
        assert_eq!(tape.value(logits), direct.data());
    }

    #[test]
    fn forward_never_shape_errors_on_valid_input() {
        let mut rng = Rng::new(6);
        let m = build_arch("mlp-16", &[1, 6, 6], 4, ActKind::Elu, &mut rng).unwrap();
        for batch in [1usize, 2, 17] {
            let x = Tensor::uniform(vec![batch, 1, 6, 6], -1.0, 1.0, &mut rng);
            assert!(m.forward(&x).is_ok());
        }
    }
}
