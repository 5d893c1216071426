//! Parameter and MAC accounting for executable models and for declarative
//! architecture descriptors.
//!
//! Descriptors are data, not code: per-component parameter counts plus MAC
//! coefficients in the token count (attention carries a quadratic term).
//! MLP components tagged with their (n_in, n_hidden, n_out) dims are the
//! fusable ones; merging swaps them for the single equivalent layer's
//! counts without ever executing anything.

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::Model;
use serde::{Deserialize, Serialize};

/// Exact trainable parameter count (weights, biases, trainable alphas).
pub fn count_params(model: &Model) -> u64 {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Dense(d) => (d.n_out() * d.n_in() + d.n_out()) as u64,
            Layer::Conv2d(c) => {
                (c.c_out() * c.c_in() * c.k() * c.k() + c.c_out()) as u64
            }
            Layer::Activation(a) => u64::from(a.alpha.is_trainable()),
            _ => 0,
        })
        .sum()
}

/// Multiply-accumulates per sample: dense n_in*n_out, conv k^2*c_in*c_out
/// per output pixel. Activations, pooling, and flatten cost no MACs.
pub fn count_macs(model: &Model) -> Result<u64> {
    let mut shape = model.input_shape.clone();
    let mut macs = 0u64;
    for layer in &model.layers {
        match layer {
            Layer::Dense(d) => macs += (d.n_in() * d.n_out()) as u64,
            Layer::Conv2d(c) => {
                let out = layer.output_shape(&shape)?;
                let (h_out, w_out) = (out[1], out[2]);
                macs += (c.k() * c.k() * c.c_in() * c.c_out() * h_out * w_out) as u64;
            }
            _ => {}
        }
        shape = layer.output_shape(&shape)?;
    }
    Ok(macs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchComponent {
    pub name: String,
    pub params: u64,
    /// MACs linear in the token count.
    pub macs_per_token: u64,
    /// MACs quadratic in the token count (attention score/apply).
    pub macs_per_token_sq: u64,
    /// MACs independent of the token count (classifier head).
    pub macs_fixed: u64,
    /// Set when the component is a fusable 2-layer MLP.
    pub mlp_dims: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub name: String,
    pub default_seq_len: usize,
    pub components: Vec<ArchComponent>,
}

impl ArchDescriptor {
    pub fn total_params(&self) -> u64 {
        self.components.iter().map(|c| c.params).sum()
    }

    pub fn total_macs(&self, seq_len: usize) -> u64 {
        let s = seq_len as u64;
        self.components
            .iter()
            .map(|c| c.macs_per_token * s + c.macs_per_token_sq * s * s + c.macs_fixed)
            .sum()
    }

    pub fn mergeable_mlp_blocks(&self) -> usize {
        self.components.iter().filter(|c| c.mlp_dims.is_some()).count()
    }

    /// Fuse the last `k` MLP components (counting from the output end).
    pub fn merge_last_mlp_blocks(&self, k: usize) -> Result<ArchDescriptor> {
        let available = self.mergeable_mlp_blocks();
        if k > available {
            return Err(Error::Accounting(format!(
                "{} has {available} mergeable MLP blocks, cannot merge {k}",
                self.name
            )));
        }
        let mut out = self.clone();
        let mut remaining = k;
        for comp in out.components.iter_mut().rev() {
            if remaining == 0 {
                break;
            }
            if let Some((n_in, _, n_out)) = comp.mlp_dims {
                comp.params = (n_in * n_out + n_out) as u64;
                comp.macs_per_token = (n_in * n_out) as u64;
                comp.mlp_dims = None;
                comp.name = format!("{} (merged)", comp.name);
                remaining -= 1;
            }
        }
        out.name = format!("{} (last {k} MLP blocks merged)", self.name);
        Ok(out)
    }
}

/// ViT-Base/16 at 224x224: 196 patch tokens + class token, width 768,
/// 12 encoder layers, MLP hidden 3072. Attention is an opaque count.
pub fn vit_base_16(classes: usize) -> ArchDescriptor {
    let d = 768u64;
    let mlp_hidden = 3072u64;
    let mut components = vec![
        ArchComponent {
            name: "patch_embed".into(),
            params: 16 * 16 * 3 * d + d,
            macs_per_token: 16 * 16 * 3 * d,
            macs_per_token_sq: 0,
            macs_fixed: 0,
            mlp_dims: None,
        },
        ArchComponent {
            name: "cls_pos_embed".into(),
            params: d + 197 * d,
            macs_per_token: 0,
            macs_per_token_sq: 0,
            macs_fixed: 0,
            mlp_dims: None,
        },
    ];
    for layer in 0..12 {
        components.push(ArchComponent {
            name: format!("encoder{layer}.norms"),
            params: 4 * d,
            macs_per_token: 0,
            macs_per_token_sq: 0,
            macs_fixed: 0,
            mlp_dims: None,
        });
        components.push(ArchComponent {
            name: format!("encoder{layer}.attention"),
            // qkv projection + output projection, plus seq^2 score/apply
            params: d * 3 * d + 3 * d + d * d + d,
            macs_per_token: d * 3 * d + d * d,
            macs_per_token_sq: 2 * d,
            macs_fixed: 0,
            mlp_dims: None,
        });
        components.push(ArchComponent {
            name: format!("encoder{layer}.mlp"),
            params: d * mlp_hidden + mlp_hidden + mlp_hidden * d + d,
            macs_per_token: 2 * d * mlp_hidden,
            macs_per_token_sq: 0,
            macs_fixed: 0,
            mlp_dims: Some((d as usize, mlp_hidden as usize, d as usize)),
        });
    }
    components.push(ArchComponent {
        name: "final_norm".into(),
        params: 2 * d,
        macs_per_token: 0,
        macs_per_token_sq: 0,
        macs_fixed: 0,
        mlp_dims: None,
    });
    components.push(ArchComponent {
        name: "head".into(),
        params: d * classes as u64 + classes as u64,
        macs_per_token: 0,
        macs_per_token_sq: 0,
        macs_fixed: d * classes as u64,
        mlp_dims: None,
    });
    ArchDescriptor { name: format!("vit-base-16 ({classes} classes)"), default_seq_len: 196, components }
}

/// Named descriptor lookup for the accounting CLI.
pub fn lookup_arch(name: &str) -> Result<ArchDescriptor> {
    match name {
        "vit-base-16" => Ok(vit_base_16(10)),
        other => Err(Error::Accounting(format!("unknown architecture descriptor: {other}"))),
    }
}
