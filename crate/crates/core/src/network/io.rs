//! Model file: `FOFENER\0`, a little-endian u32 format version, a u64 header
//! length, a JSON header (labels, feature config, shapes, vocabulary
//! fingerprints), then every matrix as little-endian f64 in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Activation, Layer, Mlp, Model};
use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::features::{CnnKernelGroup, Embeddings, FeatureConfig, KernelGroup, ProjectionMatrix};

pub const MODEL_FILE: &str = "model.bin";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FOFENER\0";

#[derive(Serialize, Deserialize)]
struct LayerShape {
    rows: usize,
    cols: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct TableShape {
    rows: usize,
    dim: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    labels: LabelSet,
    features: FeatureConfig,
    layers: Vec<LayerShape>,
    /// Cased, uncased, characters.
    tables: [TableShape; 3],
    /// `[count, height, char_dim]` per CNN group; absent without a CNN.
    kernels: Option<Vec<[usize; 3]>>,
    vocab_fingerprints: [String; 3],
}

fn table_shape(m: &ProjectionMatrix) -> TableShape {
    TableShape {
        rows: m.rows(),
        dim: m.dim(),
        trainable: m.trainable,
    }
}

pub fn write_model<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let e = &model.embeddings;
    let header = Header {
        labels: model.labels.clone(),
        features: model.features.clone(),
        layers: model
            .mlp
            .layers
            .iter()
            .map(|l| LayerShape {
                rows: l.weights.nrows(),
                cols: l.weights.ncols(),
                activation: l.activation,
            })
            .collect(),
        tables: [table_shape(&e.cased), table_shape(&e.uncased), table_shape(&e.chars)],
        kernels: e.cnn.as_ref().map(|c| {
            c.groups
                .iter()
                .map(|g| {
                    let d = g.kernels.dim();
                    [d.0, d.1, d.2]
                })
                .collect()
        }),
        vocab_fingerprints: model.vocab_fingerprints.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invariant(format!("model header: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(MODEL_FORMAT_VERSION).expect("vec write");
    buf.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    buf.extend_from_slice(&json);
    let mut put = |values: &mut dyn Iterator<Item = &f64>| {
        for &v in values {
            buf.write_f64::<LittleEndian>(v).expect("vec write");
        }
    };
    for l in &model.mlp.layers {
        put(&mut l.weights.iter());
    }
    for m in [&e.cased, &e.uncased, &e.chars] {
        put(&mut m.values.iter());
    }
    if let Some(cnn) = &e.cnn {
        for g in &cnn.groups {
            put(&mut g.kernels.iter());
        }
    }
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io("<model stream>", e))
}

fn load_err(msg: impl Into<String>) -> Error {
    Error::ModelLoad(msg.into())
}

fn read_floats<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)
        .map_err(|_| load_err("model file is truncated"))?;
    Ok(out)
}

pub fn read_model<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| load_err("not a model file"))?;
    if &magic != MAGIC {
        return Err(load_err("not a model file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| load_err("truncated header"))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(load_err(format!(
            "model format version {version} is not supported (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| load_err("truncated header"))?;
    let mut json = vec![0u8; usize::try_from(len).map_err(|_| load_err("header too large"))?];
    r.read_exact(&mut json).map_err(|_| load_err("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| load_err(format!("bad header: {e}")))?;

    let mut layers = Vec::with_capacity(header.layers.len());
    for s in &header.layers {
        let values = read_floats(&mut r, s.rows * s.cols)?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((s.rows, s.cols), values).expect("sized"),
            activation: s.activation,
        });
    }
    let mut tables = Vec::with_capacity(3);
    for s in &header.tables {
        let values = read_floats(&mut r, s.rows * s.dim)?;
        tables.push(ProjectionMatrix {
            values: Array2::from_shape_vec((s.rows, s.dim), values).expect("sized"),
            trainable: s.trainable,
        });
    }
    let cnn = match &header.kernels {
        Some(shapes) => {
            let mut groups = Vec::with_capacity(shapes.len());
            for &[n, h, d] in shapes {
                let values = read_floats(&mut r, n * h * d)?;
                groups.push(KernelGroup {
                    kernels: Array3::from_shape_vec((n, h, d), values).expect("sized"),
                });
            }
            Some(CnnKernelGroup {
                groups,
                activation: header.features.cnn.activation,
            })
        }
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("<model stream>", e))? != 0 {
        return Err(load_err("trailing bytes after model payload"));
    }
    let mut tables = tables.into_iter();
    let model = Model {
        labels: header.labels,
        features: header.features,
        embeddings: Embeddings {
            cased: tables.next().expect("three tables"),
            uncased: tables.next().expect("three tables"),
            chars: tables.next().expect("three tables"),
            cnn,
        },
        mlp: Mlp { layers },
        vocab_fingerprints: header.vocab_fingerprints,
    };
    model.validate().map_err(|e| load_err(format!("inconsistent model: {e}")))?;
    Ok(model)
}

/// Writes the model next to its destination and renames it into place.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_model(model, &mut bytes)?;
    crate::util::write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Sentence};
    use crate::features::FeatureSelection;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(selection: FeatureSelection) -> Model {
        let s = Sentence::new("d", vec!["Ann".into(), "met".into(), "Bo".into()], vec![]).unwrap();
        let vocabs = build_vocab(&[s], 1).unwrap();
        let features = FeatureConfig {
            selection,
            word_dim: 3,
            char_dim: 2,
            ..FeatureConfig::default()
        };
        Model::new(
            LabelSet::conll(),
            features,
            &vocabs,
            &[4, 3],
            Activation::Sigmoid,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for sel in [FeatureSelection::all(), FeatureSelection::all_word()] {
            let m = model(sel);
            let mut a = Vec::new();
            write_model(&m, &mut a).unwrap();
            let back = read_model(a.as_slice()).unwrap();
            assert_eq!(back, m);
            let mut b = Vec::new();
            write_model(&back, &mut b).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model(FeatureSelection::all());
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).unwrap();

        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(matches!(read_model(truncated.as_slice()), Err(Error::ModelLoad(_))));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_model(extra.as_slice()), Err(Error::ModelLoad(_))));

        let mut version = bytes.clone();
        version[8] = 99;
        let err = read_model(version.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 99"));

        assert!(read_model(&b"garbage!"[..]).is_err());
    }
}
