//! Identification and exact fusion of mergeable blocks.
//!
//! A mergeable block is [linear, parametric activation, linear] with both
//! linear layers from the same family. Once the activation is the identity
//! (alpha = 1) the pair collapses algebraically:
//!
//!   dense:  W = W2 W1,  b = W2 b1 + b2
//!   conv:   kernel = channel-wise full 2-d convolution of the two kernels,
//!           k = k1 + k2 - 1, bias folds through the second kernel's sums
//!
//! Conv fusion demands stride 1 on both layers and zero padding on the
//! second. With second-layer padding the sequential path reads zeros where
//! the fused kernel would read real pixels, so the fusion is only exact at
//! interior positions; we refuse it rather than approximate.

use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, DenseLayer, Layer, ParametricActivation};
use crate::linalg::matmul_f64;
use crate::model::Model;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum BlockLayers {
    Dense { first: DenseLayer, second: DenseLayer },
    Conv { first: Conv2dLayer, second: Conv2dLayer },
}

#[derive(Debug, Clone)]
pub struct MergeableBlock {
    pub layers: BlockLayers,
    pub activation: ParametricActivation,
    /// Index of the block's first layer in the owning model.
    pub block_id: usize,
}

impl MergeableBlock {
    pub fn dense(
        first: DenseLayer,
        activation: ParametricActivation,
        second: DenseLayer,
        block_id: usize,
    ) -> Result<Self> {
        if first.n_out() != second.n_in() {
            return Err(Error::Merge(format!(
                "dense block shapes do not compose: {} out vs {} in",
                first.n_out(),
                second.n_in()
            )));
        }
        Ok(MergeableBlock { layers: BlockLayers::Dense { first, second }, activation, block_id })
    }

    pub fn conv(
        first: Conv2dLayer,
        activation: ParametricActivation,
        second: Conv2dLayer,
        block_id: usize,
    ) -> Result<Self> {
        if first.c_out() != second.c_in() {
            return Err(Error::Merge(format!(
                "conv block channels do not compose: {} out vs {} in",
                first.c_out(),
                second.c_in()
            )));
        }
        if first.stride != 1 || second.stride != 1 {
            return Err(Error::UnsupportedMerge(format!(
                "conv fusion requires stride 1 on both layers, got {} and {}",
                first.stride, second.stride
            )));
        }
        if second.padding != 0 {
            return Err(Error::UnsupportedMerge(format!(
                "conv fusion requires zero padding on the second layer, got {}",
                second.padding
            )));
        }
        Ok(MergeableBlock { layers: BlockLayers::Conv { first, second }, activation, block_id })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.layers, BlockLayers::Dense { .. })
    }

    /// Run the block as the model would: first, activation, second.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.layers {
            BlockLayers::Dense { first, second } => {
                let z = dense_apply(first, x)?;
                let a = crate::activations::apply(
                    self.activation.kind,
                    &z,
                    self.activation.effective_alpha(),
                    self.activation.beta,
                );
                dense_apply(second, &a)
            }
            BlockLayers::Conv { first, second } => {
                let z = conv_apply(first, x)?;
                let a = crate::activations::apply(
                    self.activation.kind,
                    &z,
                    self.activation.effective_alpha(),
                    self.activation.beta,
                );
                conv_apply(second, &a)
            }
        }
    }
}

fn dense_apply(d: &DenseLayer, x: &Tensor) -> Result<Tensor> {
    let (batch, n_in) = match x.shape() {
        [b, n] => (*b, *n),
        [n] => (1, *n),
        other => return Err(Error::Shape(format!("dense input must be 1-d or 2-d, got {other:?}"))),
    };
    if n_in != d.n_in() {
        return Err(Error::Shape(format!("dense expects {} features, got {n_in}", d.n_in())));
    }
    let mut out = vec![0.0; batch * d.n_out()];
    ops::dense_forward(x.data(), d.w.data(), d.b.data(), &mut out, batch, n_in, d.n_out());
    Ok(if x.shape().len() == 1 {
        Tensor::new(vec![d.n_out()], out)
    } else {
        Tensor::new(vec![batch, d.n_out()], out)
    })
}

fn conv_apply(c: &Conv2dLayer, x: &Tensor) -> Result<Tensor> {
    let (batch, ci, h, w) = match x.shape() {
        [b, c_, h, w] => (*b, *c_, *h, *w),
        other => return Err(Error::Shape(format!("conv input must be 4-d, got {other:?}"))),
    };
    if ci != c.c_in() {
        return Err(Error::Shape(format!("conv expects {} channels, got {ci}", c.c_in())));
    }
    let h_out = ops::conv_out_dim(h, c.k(), c.stride, c.padding)
        .ok_or_else(|| Error::Shape("conv output height not integral".into()))?;
    let w_out = ops::conv_out_dim(w, c.k(), c.stride, c.padding)
        .ok_or_else(|| Error::Shape("conv output width not integral".into()))?;
    let mut out = vec![0.0; batch * c.c_out() * h_out * w_out];
    ops::conv2d_forward(
        x.data(),
        c.kernel.data(),
        c.bias.data(),
        &mut out,
        batch,
        ci,
        h,
        w,
        c.c_out(),
        c.k(),
        c.stride,
        c.padding,
        h_out,
        w_out,
    );
    Ok(Tensor::new(vec![batch, c.c_out(), h_out, w_out], out))
}

/// Fuse a dense block into the single equivalent layer. The result assumes
/// the activation is the identity; alpha is not consulted.
pub fn merge_dense(block: &MergeableBlock) -> Result<DenseLayer> {
    let BlockLayers::Dense { first, second } = &block.layers else {
        return Err(Error::Merge("merge_dense called on a conv block".into()));
    };
    let (n_hidden, n_in) = (first.n_out(), first.n_in());
    let n_out = second.n_out();
    // W = W2 W1, accumulated in f64
    let w = matmul_f64(second.w.data(), first.w.data(), n_out, n_hidden, n_in);
    // b = W2 b1 + b2
    let mut b = vec![0.0f64; n_out];
    for o in 0..n_out {
        let mut acc = second.b.data()[o] as f64;
        for hid in 0..n_hidden {
            acc += second.w.data()[o * n_hidden + hid] as f64 * first.b.data()[hid] as f64;
        }
        b[o] = acc;
    }
    DenseLayer::new(
        Tensor::new(vec![n_out, n_in], w),
        Tensor::new(vec![n_out], b.into_iter().map(|v| v as f32).collect()),
    )
}

/// Fuse a conv block: kernel size k1+k2-1, padding p1+p2, per (c_out, c_in)
/// pair the hidden-channel sum of full 2-d convolutions of the two kernels.
pub fn merge_conv(block: &MergeableBlock) -> Result<Conv2dLayer> {
    let BlockLayers::Conv { first, second } = &block.layers else {
        return Err(Error::Merge("merge_conv called on a dense block".into()));
    };
    let (k1, k2) = (first.k(), second.k());
    let k = k1 + k2 - 1;
    let (c_in, c_hidden, c_out) = (first.c_in(), first.c_out(), second.c_out());
    let k1d = first.kernel.data();
    let k2d = second.kernel.data();

    let mut kernel = vec![0.0f64; c_out * c_in * k * k];
    for co in 0..c_out {
        for ci in 0..c_in {
            let out_base = (co * c_in + ci) * k * k;
            for ch in 0..c_hidden {
                let a_base = (ch * c_in + ci) * k1 * k1; // first kernel, hidden x in
                let b_base = (co * c_hidden + ch) * k2 * k2; // second kernel, out x hidden
                for ay in 0..k1 {
                    for ax in 0..k1 {
                        let a = k1d[a_base + ay * k1 + ax] as f64;
                        if a == 0.0 {
                            continue;
                        }
                        for by in 0..k2 {
                            for bx in 0..k2 {
                                let b = k2d[b_base + by * k2 + bx] as f64;
                                kernel[out_base + (ay + by) * k + (ax + bx)] += a * b;
                            }
                        }
                    }
                }
            }
        }
    }

    // bias[co] = b2[co] + sum_ch b1[ch] * sum(K2[co,ch,:,:])
    let mut bias = vec![0.0f64; c_out];
    for co in 0..c_out {
        let mut acc = second.bias.data()[co] as f64;
        for ch in 0..c_hidden {
            let b_base = (co * c_hidden + ch) * k2 * k2;
            let k2_sum: f64 = k2d[b_base..b_base + k2 * k2].iter().map(|&v| v as f64).sum();
            acc += first.bias.data()[ch] as f64 * k2_sum;
        }
        bias[co] = acc;
    }

    Conv2dLayer::new(
        Tensor::new(vec![c_out, c_in, k, k], kernel.into_iter().map(|v| v as f32).collect()),
        Tensor::new(vec![c_out], bias.into_iter().map(|v| v as f32).collect()),
        1,
        first.padding + second.padding,
    )
}

/// Output gap between the fused-linear path and the actual block on one
/// input vector: (Y_linear - Y_alpha, squared Euclidean norm).
///
/// Computed as W2 (z - act(z)) with f64 accumulation, which is algebraically
/// Y_linear - Y_alpha and is exactly zero when alpha = 1.
pub fn linearity_gap(block: &MergeableBlock, x: &Tensor) -> Result<(Tensor, f32)> {
    let BlockLayers::Dense { first, second } = &block.layers else {
        return Err(Error::Merge("linearity_gap is defined for dense blocks".into()));
    };
    let z = dense_apply(first, x)?;
    let act = crate::activations::apply(
        block.activation.kind,
        &z,
        block.activation.effective_alpha(),
        block.activation.beta,
    );
    let n_hidden = first.n_out();
    let n_out = second.n_out();
    let mut gap = vec![0.0f64; n_out];
    for o in 0..n_out {
        let row = &second.w.data()[o * n_hidden..(o + 1) * n_hidden];
        let mut acc = 0.0f64;
        for hid in 0..n_hidden {
            acc += row[hid] as f64 * (z.data()[hid] - act.data()[hid]) as f64;
        }
        gap[o] = acc;
    }
    let gap_sq: f64 = gap.iter().map(|v| v * v).sum();
    Ok((Tensor::new(vec![n_out], gap.into_iter().map(|v| v as f32).collect()), gap_sq as f32))
}

/// Scan for fusable [linear, activation, linear] triples.
///
/// Overlapping candidates are resolved greedily from the output end (the
/// deepest triple wins); the result is returned in model order.
pub fn find_mergeable_blocks(model: &Model) -> Vec<MergeableBlock> {
    let layers = &model.layers;
    let mut found = Vec::new();
    let mut i = layers.len() as isize - 3;
    while i >= 0 {
        let idx = i as usize;
        if let Some(block) = triple_at(layers, idx) {
            found.push(block);
            i -= 3;
        } else {
            i -= 1;
        }
    }
    found.reverse();
    found
}

fn triple_at(layers: &[Layer], i: usize) -> Option<MergeableBlock> {
    let act = match &layers[i + 1] {
        Layer::Activation(a) => a.clone(),
        _ => return None,
    };
    match (&layers[i], &layers[i + 2]) {
        (Layer::Dense(first), Layer::Dense(second)) => {
            MergeableBlock::dense(first.clone(), act, second.clone(), i).ok()
        }
        (Layer::Conv2d(first), Layer::Conv2d(second)) => {
            MergeableBlock::conv(first.clone(), act, second.clone(), i).ok()
        }
        _ => None,
    }
}

/// Replace the triple starting at `layer_idx` with its fused layer.
/// The activation's alpha is not consulted; callers snap alpha first.
pub fn fuse_in_model(model: &mut Model, layer_idx: usize) -> Result<()> {
    if layer_idx + 2 >= model.layers.len() {
        return Err(Error::Merge(format!("no block at layer {layer_idx}")));
    }
    let block = triple_at(&model.layers, layer_idx)
        .ok_or_else(|| Error::Merge(format!("layers {layer_idx}..={} are not a mergeable block", layer_idx + 2)))?;
    let fused = if block.is_dense() {
        Layer::Dense(merge_dense(&block)?)
    } else {
        Layer::Conv2d(merge_conv(&block)?)
    };
    model.layers.splice(layer_idx..layer_idx + 3, [fused]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActKind;
    use crate::layers::{MaxPool2d, ParametricActivation};
    use crate::model::build_arch;
    use crate::rng::Rng;

    fn dense(w: Vec<f32>, rows: usize, cols: usize, b: Vec<f32>) -> DenseLayer {
        DenseLayer::new(Tensor::new(vec![rows, cols], w), Tensor::new(vec![rows], b)).unwrap()
    }

    #[test]
    fn scalar_dense_merge() {
        // W1=[[2]], b1=[1], W2=[[3]], b2=[-1] -> W=[[6]], b=[2]
        let block = MergeableBlock::dense(
            dense(vec![2.0], 1, 1, vec![1.0]),
            ParametricActivation::pinned(ActKind::Prelu, 1.0),
            dense(vec![3.0], 1, 1, vec![-1.0]),
            0,
        )
        .unwrap();
        let merged = merge_dense(&block).unwrap();
        assert_eq!(merged.w.data(), &[6.0]);
        assert_eq!(merged.b.data(), &[2.0]);
        // at x = -5 both paths give -28
        let x = Tensor::new(vec![1, 1], vec![-5.0]);
        let via_block = block.forward(&x).unwrap();
        assert_eq!(via_block.data(), &[-28.0]);
        assert_eq!(merged.w.data()[0] * -5.0 + merged.b.data()[0], -28.0);
    }

    #[test]
    fn identity_second_layer_keeps_first() {
        let mut rng = Rng::new(8);
        let w1 = Tensor::uniform(vec![3, 2], -1.0, 1.0, &mut rng);
        let b1 = Tensor::uniform(vec![3], -1.0, 1.0, &mut rng);
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let block = MergeableBlock::dense(
            DenseLayer::new(w1.clone(), b1.clone()).unwrap(),
            ParametricActivation::pinned(ActKind::Prelu, 1.0),
            DenseLayer::new(eye, Tensor::zeros(vec![3])).unwrap(),
            0,
        )
        .unwrap();
        let merged = merge_dense(&block).unwrap();
        assert_eq!(merged.w.data(), w1.data());
        assert_eq!(merged.b.data(), b1.data());
    }

    #[test]
    fn random_dense_merge_matches_block_at_alpha_one() {
        let mut rng = Rng::new(77);
        let scale = |n: usize| (1.0 / (n as f32).sqrt()) * 1.5;
        let w1 = Tensor::uniform(vec![16, 8], -scale(8), scale(8), &mut rng);
        let b1 = Tensor::uniform(vec![16], -0.5, 0.5, &mut rng);
        let w2 = Tensor::uniform(vec![4, 16], -scale(16), scale(16), &mut rng);
        let b2 = Tensor::uniform(vec![4], -0.5, 0.5, &mut rng);
        let block = MergeableBlock::dense(
            DenseLayer::new(w1, b1).unwrap(),
            ParametricActivation::pinned(ActKind::Prelu, 1.0),
            DenseLayer::new(w2, b2).unwrap(),
            0,
        )
        .unwrap();
        let merged = merge_dense(&block).unwrap();
        let mut worst = 0.0f32;
        for _ in 0..1000 {
            let x = Tensor::uniform(vec![1, 8], -1.0, 1.0, &mut rng);
            let via_block = block.forward(&x).unwrap();
            let mut out = vec![0.0; 4];
            ops::dense_forward(x.data(), merged.w.data(), merged.b.data(), &mut out, 1, 8, 4);
            for (a, b) in via_block.data().iter().zip(&out) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-5, "max deviation {worst}");
    }

    #[test]
    fn conv_kernel_size_law() {
        let mut rng = Rng::new(5);
        for (k1, k2) in [(1usize, 1usize), (1, 3), (3, 3), (3, 5), (5, 7), (7, 7)] {
            let first = Conv2dLayer::new(
                Tensor::uniform(vec![2, 1, k1, k1], -0.5, 0.5, &mut rng),
                Tensor::zeros(vec![2]),
                1,
                0,
            )
            .unwrap();
            let second = Conv2dLayer::new(
                Tensor::uniform(vec![3, 2, k2, k2], -0.5, 0.5, &mut rng),
                Tensor::zeros(vec![3]),
                1,
                0,
            )
            .unwrap();
            let block = MergeableBlock::conv(
                first,
                ParametricActivation::pinned(ActKind::Prelu, 1.0),
                second,
                0,
            )
            .unwrap();
            let merged = merge_conv(&block).unwrap();
            assert_eq!(merged.k(), k1 + k2 - 1);
        }
    }

    #[test]
    fn delta_first_kernel_reproduces_second_zero_padded() {
        // centered 3x3 delta followed by a 3x3 kernel: merged 5x5 kernel is
        // the second kernel centered in the 5x5 frame
        let mut delta = vec![0.0f32; 9];
        delta[4] = 1.0;
        let first = Conv2dLayer::new(
            Tensor::new(vec![1, 1, 3, 3], delta),
            Tensor::zeros(vec![1]),
            1,
            0,
        )
        .unwrap();
        let k2: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let second = Conv2dLayer::new(
            Tensor::new(vec![1, 1, 3, 3], k2.clone()),
            Tensor::zeros(vec![1]),
            1,
            0,
        )
        .unwrap();
        let block = MergeableBlock::conv(
            first,
            ParametricActivation::pinned(ActKind::Prelu, 1.0),
            second,
            0,
        )
        .unwrap();
        let merged = merge_conv(&block).unwrap();
        assert_eq!(merged.k(), 5);
        for y in 0..5 {
            for x in 0..5 {
                let want = if (1..4).contains(&y) && (1..4).contains(&x) {
                    k2[(y - 1) * 3 + (x - 1)]
                } else {
                    0.0
                };
                assert_eq!(merged.kernel.data()[y * 5 + x], want);
            }
        }
    }

    #[test]
    fn random_conv_merge_matches_block_at_alpha_one() {
        let mut rng = Rng::new(99);
        let first = Conv2dLayer::new(
            Tensor::uniform(vec![2, 2, 3, 3], -0.3, 0.3, &mut rng),
            Tensor::uniform(vec![2], -0.5, 0.5, &mut rng),
            1,
            0,
        )
        .unwrap();
        let second = Conv2dLayer::new(
            Tensor::uniform(vec![2, 2, 3, 3], -0.3, 0.3, &mut rng),
            Tensor::uniform(vec![2], -0.5, 0.5, &mut rng),
            1,
            0,
        )
        .unwrap();
        let block = MergeableBlock::conv(
            first,
            ParametricActivation::pinned(ActKind::Prelu, 1.0),
            second,
            0,
        )
        .unwrap();
        let merged = merge_conv(&block).unwrap();
        let x = Tensor::uniform(vec![2, 2, 9, 9], -1.0, 1.0, &mut rng);
        let via_block = block.forward(&x).unwrap();
        let via_merged = conv_apply(&merged, &x).unwrap();
        assert_eq!(via_block.shape(), via_merged.shape());
        let worst = via_block
            .data()
            .iter()
            .zip(via_merged.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-4, "max deviation {worst}");
    }

    #[test]
    fn stride_or_padding_violations_are_unsupported() {
        let mk_conv = |stride, padding| {
            Conv2dLayer::new(
                Tensor::zeros(vec![2, 2, 3, 3]),
                Tensor::zeros(vec![2]),
                stride,
                padding,
            )
            .unwrap()
        };
        let act = ParametricActivation::pinned(ActKind::Prelu, 1.0);
        assert!(matches!(
            MergeableBlock::conv(mk_conv(2, 0), act.clone(), mk_conv(1, 0), 0),
            Err(Error::UnsupportedMerge(_))
        ));
        assert!(matches!(
            MergeableBlock::conv(mk_conv(1, 0), act, mk_conv(1, 1), 0),
            Err(Error::UnsupportedMerge(_))
        ));
    }

    #[test]
    fn gap_zero_at_alpha_one_and_positive_preactivations() {
        let mut rng = Rng::new(12);
        let block = MergeableBlock::dense(
            dense(vec![0.5, -0.25, 0.3, 0.7], 2, 2, vec![0.1, -0.2]),
            ParametricActivation::pinned(ActKind::Prelu, 1.0),
            dense(vec![1.0, -1.0, 0.5, 0.25], 2, 2, vec![0.0, 0.0]),
            0,
        )
        .unwrap();
        for _ in 0..50 {
            let x = Tensor::uniform(vec![2], -2.0, 2.0, &mut rng);
            let (gap, gap_sq) = linearity_gap(&block, &x).unwrap();
            assert!(gap.data().iter().all(|&v| v == 0.0));
            assert_eq!(gap_sq, 0.0);
        }
        // alpha = 0 but all pre-activations positive: gap still zero
        let block_pos = MergeableBlock::dense(
            dense(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![5.0, 5.0]),
            ParametricActivation::pinned(ActKind::Prelu, 0.0),
            dense(vec![1.0, 2.0, 3.0, 4.0], 2, 2, vec![0.0, 0.0]),
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]);
        let (_, gap_sq) = linearity_gap(&block_pos, &x).unwrap();
        assert_eq!(gap_sq, 0.0);
    }

    #[test]
    fn scalar_gap_hand_case() {
        // W1=1, b1=0, W2=1, b2=0, alpha=0, x=-2: gap = min(0,-2) = -2
        let block = MergeableBlock::dense(
            dense(vec![1.0], 1, 1, vec![0.0]),
            ParametricActivation::pinned(ActKind::Prelu, 0.0),
            dense(vec![1.0], 1, 1, vec![0.0]),
            0,
        )
        .unwrap();
        let (gap, gap_sq) = linearity_gap(&block, &Tensor::new(vec![1], vec![-2.0])).unwrap();
        assert_eq!(gap.data(), &[-2.0]);
        assert_eq!(gap_sq, 4.0);
    }

    #[test]
    fn gap_identity_route_agreement() {
        // gap must equal (1-alpha) * W2 * min(0, W1 x + b1)
        let mut rng = Rng::new(21);
        for alpha in [0.0f32, 0.3, 0.7, 1.0] {
            for _ in 0..50 {
                let w1 = Tensor::uniform(vec![6, 4], -0.5, 0.5, &mut rng);
                let b1 = Tensor::uniform(vec![6], -0.5, 0.5, &mut rng);
                let w2 = Tensor::uniform(vec![3, 6], -0.5, 0.5, &mut rng);
                let block = MergeableBlock::dense(
                    DenseLayer::new(w1.clone(), b1.clone()).unwrap(),
                    ParametricActivation::pinned(ActKind::Prelu, alpha),
                    DenseLayer::new(w2.clone(), Tensor::zeros(vec![3])).unwrap(),
                    0,
                )
                .unwrap();
                let x = Tensor::uniform(vec![4], -1.0, 1.0, &mut rng);
                let (gap, _) = linearity_gap(&block, &x).unwrap();
                // identity route
                let mut z = vec![0.0f32; 6];
                ops::dense_forward(x.data(), w1.data(), b1.data(), &mut z, 1, 4, 6);
                let mut want = vec![0.0f64; 3];
                for o in 0..3 {
                    for hid in 0..6 {
                        want[o] += (1.0 - alpha) as f64
                            * w2.data()[o * 6 + hid] as f64
                            * z[hid].min(0.0) as f64;
                    }
                }
                for (g, w) in gap.data().iter().zip(&want) {
                    assert!((*g as f64 - w).abs() <= 1e-6, "alpha={alpha}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn gap_sq_scales_as_one_minus_alpha_squared() {
        let mut rng = Rng::new(33);
        let w1 = Tensor::uniform(vec![5, 3], -0.5, 0.5, &mut rng);
        let b1 = Tensor::uniform(vec![5], -0.5, 0.5, &mut rng);
        let w2 = Tensor::uniform(vec![2, 5], -0.5, 0.5, &mut rng);
        let b2 = Tensor::zeros(vec![2]);
        let x = Tensor::uniform(vec![3], -1.5, 1.5, &mut rng);
        let at = |alpha: f32| {
            let block = MergeableBlock::dense(
                DenseLayer::new(w1.clone(), b1.clone()).unwrap(),
                ParametricActivation::pinned(ActKind::Prelu, alpha),
                DenseLayer::new(w2.clone(), b2.clone()).unwrap(),
                0,
            )
            .unwrap();
            linearity_gap(&block, &x).unwrap().1 as f64
        };
        let base = at(0.0);
        assert!(base > 0.0, "test input must activate the negative branch");
        for alpha in [0.3f32, 0.7, 0.9] {
            let ratio = at(alpha) / base;
            let want = (1.0 - alpha as f64) * (1.0 - alpha as f64);
            assert!((ratio - want).abs() / want <= 1e-5, "alpha={alpha}: {ratio} vs {want}");
        }
    }

    #[test]
    fn scanner_finds_single_block() {
        let mut rng = Rng::new(3);
        let model = build_arch("mlp-8", &[1, 4, 4], 2, ActKind::Prelu, &mut rng).unwrap();
        let blocks = find_mergeable_blocks(&model);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].block_id, 1); // flatten, dense, act, dense
    }

    #[test]
    fn interposed_layer_breaks_triple() {
        let mut rng = Rng::new(4);
        let d1 = dense_random(4, 4, &mut rng);
        let d2 = dense_random(4, 4, &mut rng);
        let model = Model::new(
            vec![
                Layer::Flatten,
                Layer::Dense(d1),
                Layer::Activation(ParametricActivation::trainable(ActKind::Prelu, 0.25)),
                Layer::Flatten, // interposed
                Layer::Dense(d2),
            ],
            vec![4],
            4,
        )
        .unwrap();
        assert!(find_mergeable_blocks(&model).is_empty());
    }

    #[test]
    fn greedy_from_end_on_overlapping_candidates() {
        // four dense layers, activations throughout: candidates at layers
        // (1,3,5); greedy from the end keeps (5) then (1)
        let mut rng = Rng::new(6);
        let model = build_arch("mlp-8-8-8", &[1, 4, 4], 2, ActKind::Prelu, &mut rng).unwrap();
        let blocks = find_mergeable_blocks(&model);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].block_id, 1);
        assert_eq!(blocks[1].block_id, 5);
    }

    #[test]
    fn conv_triples_with_pool_between_do_not_match() {
        let mut rng = Rng::new(7);
        let mut conv = |co, ci| {
            Conv2dLayer::new(
                Tensor::uniform(vec![co, ci, 3, 3], -0.3, 0.3, &mut rng),
                Tensor::zeros(vec![co]),
                1,
                0,
            )
            .unwrap()
        };
        let layers = vec![
            Layer::Conv2d(conv(2, 1)),
            Layer::Activation(ParametricActivation::relu()),
            Layer::MaxPool2d(MaxPool2d { size: 2 }),
            Layer::Conv2d(conv(2, 2)),
            Layer::Activation(ParametricActivation::relu()),
            Layer::Conv2d(conv(4, 2)),
            Layer::Flatten,
        ];
        let model = Model::new(layers, vec![1, 12, 12], 4).unwrap();
        let blocks = find_mergeable_blocks(&model);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].block_id, 3);
    }

    #[test]
    fn fuse_in_model_preserves_logits_at_alpha_one() {
        let mut rng = Rng::new(41);
        let mut model = build_arch("mlp-12", &[1, 4, 4], 3, ActKind::Prelu, &mut rng).unwrap();
        // pin the hidden activation to identity
        if let Layer::Activation(a) = &mut model.layers[2] {
            a.alpha = crate::layers::AlphaParam::Pinned(1.0);
        }
        let x = Tensor::uniform(vec![8, 1, 4, 4], -1.0, 1.0, &mut rng);
        let before = model.forward(&x).unwrap();
        fuse_in_model(&mut model, 1).unwrap();
        assert_eq!(model.layers.len(), 2); // flatten + fused dense
        let after = model.forward(&x).unwrap();
        let worst = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-5, "max deviation {worst}");
    }

    fn dense_random(out: usize, inp: usize, rng: &mut Rng) -> DenseLayer {
        DenseLayer::new(
            Tensor::uniform(vec![out, inp], -0.5, 0.5, rng),
            Tensor::uniform(vec![out], -0.5, 0.5, rng),
        )
        .unwrap()
    }
}
