//! Encoder plus prototype decoder as one parameter set.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::{
    encode, init_params, param_names, Dropout, EncoderConfig, EncoderParams, EncoderVars, InputDims, INIT_STD,
};
use crate::error::{shape_err, Error, Result};
use crate::parallel;
use crate::psp::{
    class_probability_graph, similarities_graph, sparse_weights_graph, PrototypeBank, Provenance,
    PspConfig, SparseScaler,
};
use crate::tensor::{read_container, write_container, Graph, Scalar, Tensor, Var};

pub const PROTOTYPES: &str = "psp.prototypes";
pub const LOGITS: &str = "psp.logits";
/// Prefix of every encoder tensor name.
pub const ENCODER_PREFIX: &str = "encoder.";
const KIND: &str = "xsit-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub psp: PspConfig,
    pub dims: InputDims,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub bank: PrototypeBank<T>,
    pub scaler: SparseScaler<T>,
}

/// Graph handles of every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub prototypes: Var,
    pub logits: Var,
    /// All of the above in [`Model::named`] order.
    pub all: Vec<Var>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, N, D]`
    pub embeddings: Var,
    /// `[N]`
    pub weights: Var,
    /// `[B]`
    pub probability: Var,
}

/// Decoder read-out for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Score<T = f32> {
    pub probability: T,
    pub similarities: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> Score<T> {
    /// Per-patch contributions `w_i · cos_i`; they sum to the probability.
    pub fn activations(&self) -> Vec<T> {
        self.weights
            .iter()
            .zip(&self.similarities)
            .map(|(&w, &c)| w * c)
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ProvenanceEntry {
    patch_index: usize,
    subject_id: String,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceFile {
    prototypes: Vec<ProvenanceEntry>,
}

/// Sidecar file holding prototype provenance next to a checkpoint.
pub fn provenance_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

impl Model<f32> {
    /// Fresh model. Encoder and prototypes draw from separate streams of the
    /// same seed; scaler logits start at zero (uniform weights).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let encoder = init_params(&config.encoder, &config.dims, seed)?;
        let (n, d) = (config.dims.seq_len, config.encoder.latent_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let xi: Vec<f32> = (0..n * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * INIT_STD) as f32
            })
            .collect();
        Ok(Model {
            encoder,
            bank: PrototypeBank::new(Tensor::new(vec![n, d], xi)?)?,
            scaler: SparseScaler::uniform(n),
            config,
        })
    }

    /// Write the parameter container and its provenance sidecar.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let metadata = json!({ "kind": KIND, "config": self.config, "extra": extra });
        let named = self.named();
        let tensors: Vec<(&str, &Tensor<f32>)> =
            named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_container(path, &metadata, &tensors)?;
        let sidecar = ProvenanceFile {
            prototypes: self
                .bank
                .provenance
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    p.as_ref().map(|p| ProvenanceEntry {
                        patch_index: i,
                        subject_id: p.subject_id.clone(),
                        epoch: p.epoch,
                    })
                })
                .collect(),
        };
        crate::io::write_json_atomic(&provenance_path(path), &sidecar)
    }

    /// Load a checkpoint; returns the model and the `extra` metadata it was
    /// saved with. A missing sidecar means no prototype was ever projected.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let container = read_container(path)?;
        let meta = &container.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
            return Err(Error::Checkpoint(format!(
                "{}: not a model checkpoint",
                path.display()
            )));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("{}: config: {e}", path.display())))?;
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        let mut model = Model::from_tensors(config, container.tensors)?;
        let side = provenance_path(path);
        if side.exists() {
            let file: ProvenanceFile = crate::io::read_json(&side)?;
            for e in file.prototypes {
                let slot = model.bank.provenance.get_mut(e.patch_index).ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "{}: provenance for patch {} out of range",
                        side.display(),
                        e.patch_index
                    ))
                })?;
                *slot = Some(Provenance {
                    subject_id: e.subject_id,
                    epoch: e.epoch,
                });
            }
        }
        Ok((model, extra))
    }
}

impl<T: Scalar> Model<T> {
    /// Rebuild from named tensors in any order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.encoder.validate()?;
        let mut map: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let xi = take(PROTOTYPES)?;
        let logits = take(LOGITS)?;
        let names = param_names(&config.encoder, &config.dims);
        let enc: Vec<Tensor<T>> = names
            .iter()
            .map(|n| take(&format!("{ENCODER_PREFIX}{n}")))
            .collect::<Result<_>>()?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let encoder = EncoderParams::take_from(config.encoder.depth, &mut enc.into_iter())
            .ok_or_else(|| Error::Checkpoint("encoder tensors incomplete".into()))?;
        let model = Model {
            encoder,
            bank: PrototypeBank::new(xi)?,
            scaler: SparseScaler { logits },
            config,
        };
        model.check()?;
        Ok(model)
    }

    pub fn check(&self) -> Result<()> {
        self.encoder
            .check_shapes(&self.config.encoder, &self.config.dims)?;
        let (n, d) = (self.config.dims.seq_len, self.config.encoder.latent_dim);
        if self.bank.xi.shape() != [n, d] || self.scaler.logits.shape() != [n] {
            return Err(shape_err!(
                "prototypes {:?} and logits {:?} do not match {} patches of dimension {}",
                self.bank.xi.shape(),
                self.scaler.logits.shape(),
                n,
                d
            ));
        }
        if !self.bank.xi.is_finite() || !self.scaler.logits.is_finite() {
            return Err(Error::NonFinite("prototype decoder parameters".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.config.dims.seq_len
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .encoder
            .named()
            .into_iter()
            .map(|(n, t)| (format!("{ENCODER_PREFIX}{n}"), t))
            .collect();
        out.push((PROTOTYPES.into(), &self.bank.xi));
        out.push((LOGITS.into(), &self.scaler.logits));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("{ENCODER_PREFIX}{n}"), t))
            .collect();
        out.push((PROTOTYPES.into(), &mut self.bank.xi));
        out.push((LOGITS.into(), &mut self.scaler.logits));
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            bank: self.bank.cast(),
            scaler: self.scaler.cast(),
        }
    }

    /// Insert every parameter into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<ModelVars> {
        let all: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<Result<_>>()?;
        let k = all.len();
        let encoder = EncoderVars::take_from(self.config.encoder.depth, &mut all[..k - 2].iter().copied())
            .expect("bound tensors follow the named order");
        Ok(ModelVars {
            encoder,
            prototypes: all[k - 2],
            logits: all[k - 1],
            all,
        })
    }

    /// Patches `[B, N, M, F]` to class probabilities `[B]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        patches: Var,
        dropout: Option<&mut Dropout>,
    ) -> Result<Forward> {
        let embeddings = encode(g, patches, &vars.encoder, &self.config.encoder, dropout)?;
        let weights = sparse_weights_graph(g, vars.logits)?;
        let probability = class_probability_graph(
            g,
            embeddings,
            vars.prototypes,
            weights,
            self.config.psp.rectify_prototypes,
        )?;
        Ok(Forward {
            embeddings,
            weights,
            probability,
        })
    }

    /// Copy gradients from a finished backward pass onto the parameters.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn collect_grads(&mut self, g: &Graph<T>, vars: &ModelVars) -> Result<()> {
        for ((_, t), &v) in self.named_mut().into_iter().zip(&vars.all) {
            let grad = g
                .grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(Some(grad))?;
        }
        Ok(())
    }

    /// Inference-mode embedding of one sample, patches `[N, M, F]` to `[N, D]`.
    pub fn embed(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let x = g.constant(patches.clone().reshape([&[1], patches.shape()].concat())?)?;
        let e = encode(&mut g, x, &vars.encoder, &self.config.encoder, None)?;
        let e = g.take(e);
        let s = e.shape()[1..].to_vec();
        e.reshape(s)
    }

    /// [`Model::embed`] over many samples, in parallel.
    pub fn embed_all(&self, samples: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        parallel::try_map(samples, |p| self.embed(p))
    }

    /// Decoder read-out for embeddings `[N, D]`.
    pub fn score(&self, embeddings: &Tensor<T>) -> Result<Score<T>> {
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone().reshape([&[1], embeddings.shape()].concat())?)?;
        let xi = g.constant(self.bank.xi.clone())?;
        let logits = g.constant(self.scaler.logits.clone())?;
        let weights = sparse_weights_graph(&mut g, logits)?;
        let rectify = self.config.psp.rectify_prototypes;
        let sims = similarities_graph(&mut g, x, xi, rectify)?;
        let p = class_probability_graph(&mut g, x, xi, weights, rectify)?;
        Ok(Score {
            probability: g.value(p).data()[0],
            similarities: g.value(sims).data().to_vec(),
            weights: g.value(weights).data().to_vec(),
        })
    }

    /// Inference-mode read-out of one sample, patches `[N, M, F]`.
    pub fn predict(&self, patches: &Tensor<T>) -> Result<Score<T>> {
        self.score(&self.embed(patches)?)
    }

    /// [`Model::predict`] over many samples, in parallel.
    pub fn predict_all(&self, samples: &[Tensor<T>]) -> Result<Vec<Score<T>>> {
        parallel::try_map(samples, |p| self.predict(p))
    }
}
