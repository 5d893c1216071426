//! Single-file container for model and dataset snapshots.
//!
//! Layout:
//!   magic "MGC1" | version u32 LE | sha256[32] | header_len u64 LE |
//!   header JSON | payload
//!
//! The checksum covers everything after itself and is verified before any
//! header field or parameter byte is interpreted. Model payloads are the
//! parameters as little-endian f32, concatenated in layer order (dense:
//! weight then bias; conv: kernel then bias; activation: its alpha scalar).

use crate::activations::ActKind;
use crate::data::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};
use crate::layers::{AlphaParam, Conv2dLayer, DenseLayer, Layer, MaxPool2d, ParametricActivation};
use crate::model::Model;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MGC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    kind: String,
    seed: u64,
    tool: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetDescriptor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDescriptor {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerRecord {
    Dense { n_in: usize, n_out: usize },
    Conv2d { c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize },
    Activation { act: ActKind, trainable: bool, beta: f32 },
    Maxpool2d { size: usize },
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetDescriptor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    classes: usize,
}

fn write_container(path: &Path, header: &ContainerHeader, payload: &[u8]) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| Error::Serialize(e.to_string()))?;
    let mut tail = Vec::with_capacity(8 + header_json.len() + payload.len());
    tail.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    tail.extend_from_slice(&header_json);
    tail.extend_from_slice(payload);
    let digest = Sha256::digest(&tail);

    let mut out = Vec::with_capacity(40 + tail.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&tail);
    fs::write(path, out)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<u8>)> {
    let buf = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if buf.len() < 48 {
        return Err(Error::Corrupt(format!("{}: truncated container ({} bytes)", path.display(), buf.len())));
    }
    if &buf[0..4] != MAGIC {
        return Err(Error::Corrupt(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "{}: format version {version}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    let stored = &buf[8..40];
    let tail = &buf[40..];
    let digest = Sha256::digest(tail);
    if digest.as_slice() != stored {
        return Err(Error::Corrupt(format!("{}: checksum mismatch", path.display())));
    }
    let header_len = u64::from_le_bytes(tail[0..8].try_into().unwrap()) as usize;
    if tail.len() < 8 + header_len {
        return Err(Error::Corrupt(format!("{}: header extends past end of file", path.display())));
    }
    let header: ContainerHeader = serde_json::from_slice(&tail[8..8 + header_len])
        .map_err(|e| Error::Corrupt(format!("{}: header parse: {e}", path.display())))?;
    Ok((header, tail[8 + header_len..].to_vec()))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_f32s(payload: &[u8], cursor: &mut usize, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = payload.get(*cursor..*cursor + 4 * n).ok_or_else(|| {
        Error::Corrupt(format!("payload truncated reading {what} ({n} floats at {cursor})"))
    })?;
    *cursor += 4 * n;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save_model(model: &Model, seed: u64, path: &Path) -> Result<()> {
    let mut layers = Vec::new();
    let mut payload = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::Dense(d) => {
                layers.push(LayerRecord::Dense { n_in: d.n_in(), n_out: d.n_out() });
                push_f32s(&mut payload, d.w.data());
                push_f32s(&mut payload, d.b.data());
            }
            Layer::Conv2d(c) => {
                layers.push(LayerRecord::Conv2d {
                    c_in: c.c_in(),
                    c_out: c.c_out(),
                    k: c.k(),
                    stride: c.stride,
                    padding: c.padding,
                });
                push_f32s(&mut payload, c.kernel.data());
                push_f32s(&mut payload, c.bias.data());
            }
            Layer::Activation(a) => {
                let (trainable, value) = match a.alpha {
                    AlphaParam::Trainable(raw) => (true, raw),
                    AlphaParam::Pinned(alpha) => (false, alpha),
                };
                layers.push(LayerRecord::Activation { act: a.kind, trainable, beta: a.beta });
                push_f32s(&mut payload, &[value]);
            }
            Layer::MaxPool2d(p) => layers.push(LayerRecord::Maxpool2d { size: p.size }),
            Layer::Flatten => layers.push(LayerRecord::Flatten),
        }
    }
    let header = ContainerHeader {
        kind: "model".into(),
        seed,
        tool: format!("mergeguard {}", env!("CARGO_PKG_VERSION")),
        model: Some(ModelDescriptor {
            input_shape: model.input_shape.clone(),
            classes: model.classes,
            layers,
        }),
        dataset: None,
    };
    write_container(path, &header, &payload)
}

pub fn load_model(path: &Path) -> Result<(Model, u64)> {
    let (header, payload) = read_container(path)?;
    if header.kind != "model" {
        return Err(Error::Corrupt(format!(
            "{}: container holds a {}, not a model",
            path.display(),
            header.kind
        )));
    }
    let desc = header
        .model
        .ok_or_else(|| Error::Corrupt(format!("{}: missing model descriptor", path.display())))?;
    let mut cursor = 0usize;
    let mut layers = Vec::new();
    for rec in &desc.layers {
        let layer = match *rec {
            LayerRecord::Dense { n_in, n_out } => {
                let w = take_f32s(&payload, &mut cursor, n_out * n_in, "dense weight")?;
                let b = take_f32s(&payload, &mut cursor, n_out, "dense bias")?;
                Layer::Dense(DenseLayer::new(
                    Tensor::new(vec![n_out, n_in], w),
                    Tensor::new(vec![n_out], b),
                )?)
            }
            LayerRecord::Conv2d { c_in, c_out, k, stride, padding } => {
                let kernel = take_f32s(&payload, &mut cursor, c_out * c_in * k * k, "conv kernel")?;
                let bias = take_f32s(&payload, &mut cursor, c_out, "conv bias")?;
                Layer::Conv2d(Conv2dLayer::new(
                    Tensor::new(vec![c_out, c_in, k, k], kernel),
                    Tensor::new(vec![c_out], bias),
                    stride,
                    padding,
                )?)
            }
            LayerRecord::Activation { act, trainable, beta } => {
                let value = take_f32s(&payload, &mut cursor, 1, "activation alpha")?[0];
                let alpha =
                    if trainable { AlphaParam::Trainable(value) } else { AlphaParam::Pinned(value) };
                Layer::Activation(ParametricActivation { kind: act, alpha, beta })
            }
            LayerRecord::Maxpool2d { size } => Layer::MaxPool2d(MaxPool2d { size }),
            LayerRecord::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    if cursor != payload.len() {
        return Err(Error::Corrupt(format!(
            "{}: {} trailing payload bytes",
            path.display(),
            payload.len() - cursor
        )));
    }
    Ok((Model::new(layers, desc.input_shape, desc.classes)?, header.seed))
}

pub fn save_dataset(set: &LabeledImageSet, seed: u64, path: &Path) -> Result<()> {
    let (c, h, w) = set.dims();
    let mut payload = Vec::new();
    push_f32s(&mut payload, set.images.data());
    for &l in &set.labels {
        payload.extend_from_slice(&l.to_le_bytes());
    }
    payload.extend(set.provenance.iter().map(|p| match p {
        Provenance::Clean => 0u8,
        Provenance::Poisoned => 1u8,
    }));
    let header = ContainerHeader {
        kind: "dataset".into(),
        seed,
        tool: format!("mergeguard {}", env!("CARGO_PKG_VERSION")),
        model: None,
        dataset: Some(DatasetDescriptor { n: set.len(), c, h, w, classes: set.classes }),
    };
    write_container(path, &header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<(LabeledImageSet, u64)> {
    let (header, payload) = read_container(path)?;
    if header.kind != "dataset" {
        return Err(Error::Corrupt(format!(
            "{}: container holds a {}, not a dataset",
            path.display(),
            header.kind
        )));
    }
    let d = header
        .dataset
        .ok_or_else(|| Error::Corrupt(format!("{}: missing dataset descriptor", path.display())))?;
    let mut cursor = 0usize;
    let images = take_f32s(&payload, &mut cursor, d.n * d.c * d.h * d.w, "images")?;
    let label_bytes = payload.get(cursor..cursor + 4 * d.n).ok_or_else(|| {
        Error::Corrupt(format!("{}: payload truncated reading labels", path.display()))
    })?;
    cursor += 4 * d.n;
    let labels: Vec<u32> =
        label_bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    let prov_bytes = payload.get(cursor..cursor + d.n).ok_or_else(|| {
        Error::Corrupt(format!("{}: payload truncated reading provenance", path.display()))
    })?;
    let mut set =
        LabeledImageSet::new(Tensor::new(vec![d.n, d.c, d.h, d.w], images), labels, d.classes)?;
    set.provenance = prov_bytes
        .iter()
        .map(|&b| if b == 0 { Provenance::Clean } else { Provenance::Poisoned })
        .collect();
    Ok((set, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActKind;
    use crate::data::synth_shapes;
    use crate::layers::ParametricActivation;
    use crate::merge::fuse_in_model;
    use crate::model::build_arch;
    use crate::rng::Rng;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = Rng::new(42);
        let model = build_arch("desk-cnn", &[1, 16, 16], 4, ActKind::Prelu, &mut rng).unwrap();
        save_model(&model, 42, &path).unwrap();
        let (loaded, seed) = load_model(&path).unwrap();
        assert_eq!(seed, 42);
        for _ in 0..100 {
            let x = Tensor::uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng);
            let a = model.forward(&x).unwrap();
            let b = loaded.forward(&x).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn truncated_file_is_corrupt_not_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = Rng::new(7);
        let model = build_arch("mlp-8", &[1, 6, 6], 3, ActKind::Gelu, &mut rng).unwrap();
        save_model(&model, 7, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = Rng::new(8);
        let model = build_arch("mlp-8", &[1, 6, 6], 3, ActKind::Elu, &mut rng).unwrap();
        save_model(&model, 8, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
    }

    #[test]
    fn version_mismatch_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = Rng::new(9);
        let model = build_arch("mlp-8", &[1, 6, 6], 3, ActKind::Silu, &mut rng).unwrap();
        save_model(&model, 9, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Version(_))));
    }

    #[test]
    fn merged_model_round_trip_keeps_kernel_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merged.ckpt");
        let mut rng = Rng::new(10);
        let mut conv = |co: usize, ci: usize, k: usize| {
            Conv2dLayer::new(
                Tensor::uniform(vec![co, ci, k, k], -0.3, 0.3, &mut rng),
                Tensor::zeros(vec![co]),
                1,
                0,
            )
            .unwrap()
        };
        let layers = vec![
            Layer::Conv2d(conv(2, 1, 3)),
            Layer::Activation(ParametricActivation::pinned(ActKind::Prelu, 1.0)),
            Layer::Conv2d(conv(4, 2, 5)),
            Layer::Flatten,
        ];
        let mut model = Model::new(layers, vec![1, 9, 9], 36).unwrap();
        fuse_in_model(&mut model, 0).unwrap();
        let Layer::Conv2d(c) = &model.layers[0] else { panic!() };
        assert_eq!(c.k(), 7); // 3 + 5 - 1
        save_model(&model, 10, &path).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        let Layer::Conv2d(c) = &loaded.layers[0] else { panic!() };
        assert_eq!(c.k(), 7);
    }

    #[test]
    fn dataset_round_trip_preserves_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dset");
        let mut set = synth_shapes(30, 3, 10, 10, 3).unwrap();
        set.provenance[4] = Provenance::Poisoned;
        set.provenance[17] = Provenance::Poisoned;
        save_dataset(&set, 3, &path).unwrap();
        let (loaded, _) = load_dataset(&path).unwrap();
        assert_eq!(loaded.images.data(), set.images.data());
        assert_eq!(loaded.labels, set.labels);
        assert_eq!(loaded.provenance, set.provenance);
        assert_eq!(loaded.poisoned_count(), 2);
    }
}
