//! Prototypical surface patch decoder.
//!
//! Patch embedding `x_i` is compared only with the prototype `ξ_i` of the same
//! patch location. Both are passed through a ReLU, so the cosine similarity
//! lies in `[0, 1]` and a rectified zero vector counts as "no evidence" (0).
//! Per-patch weights come from a softmax over learnable logits; entries below
//! the uniform share `1/N` are zeroed (the mask is a constant for
//! differentiation) and the survivors renormalized. The class probability is
//! the weighted sum of similarities.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

/// Guard on embedding norms inside the cosine.
pub const COSINE_EPS: f64 = 1e-8;

/// `psp.*` keys of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PspConfig {
    /// Rectify prototypes as well as inputs before the cosine.
    pub rectify_prototypes: bool,
    /// Draw projection candidates from target-class training samples only.
    pub class_restricted_projection: bool,
}

impl Default for PspConfig {
    fn default() -> Self {
        PspConfig {
            rectify_prototypes: true,
            class_restricted_projection: true,
        }
    }
}

/// Which training sample a prototype was last projected onto.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject_id: String,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T = f32> {
    /// `[N, D]`
    pub xi: Tensor<T>,
    pub provenance: Vec<Option<Provenance>>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(xi: Tensor<T>) -> Result<Self> {
        if xi.rank() != 2 {
            return Err(shape_err!("prototype bank must be [N, D], got {:?}", xi.shape()));
        }
        let n = xi.shape()[0];
        Ok(PrototypeBank {
            xi,
            provenance: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xi.shape()[1]
    }

    pub fn is_projected(&self) -> bool {
        self.provenance.iter().all(Option::is_some)
    }

    pub fn cast<U: Scalar>(&self) -> PrototypeBank<U> {
        PrototypeBank {
            xi: self.xi.cast(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseScaler<T = f32> {
    /// `[N]`
    pub logits: Tensor<T>,
}

impl<T: Scalar> SparseScaler<T> {
    pub fn uniform(n: usize) -> Self {
        SparseScaler {
            logits: Tensor::zeros(&[n]),
        }
    }

    /// Dense weights `softmax(logits)`.
    pub fn dense_weights(&self) -> Vec<T> {
        kernels::softmax(self.logits.data(), 1, self.logits.numel(), 1)
    }

    /// Sparse, renormalized weights.
    pub fn weights(&self) -> Result<Vec<T>> {
        sparse_weights(self.logits.data())
    }

    pub fn cast<U: Scalar>(&self) -> SparseScaler<U> {
        SparseScaler {
            logits: self.logits.cast(),
        }
    }
}

fn threshold<T: Scalar>(n: usize) -> T {
    T::one() / T::lit(n as f64)
}

/// Survival mask of dense weights: 1 where `w̃_i ≥ 1/N`.
pub fn survival_mask<T: Scalar>(dense: &[T]) -> Vec<T> {
    let thr = threshold::<T>(dense.len());
    dense
        .iter()
        .map(|&w| if w >= thr { T::one() } else { T::zero() })
        .collect()
}

/// Graph form of [`sparse_weights`]; gradients flow through the softmax and
/// the renormalization but not through the mask.
pub fn sparse_weights_graph<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let n = g.shape(logits).to_vec();
    if n.len() != 1 || n[0] == 0 {
        return Err(shape_err!("scaler logits must be [N] with N > 0, got {:?}", n));
    }
    let dense = g.softmax(logits, 0)?;
    let mask = survival_mask(g.value(dense).data());
    let mask = g.constant(Tensor::new(n, mask)?)?;
    let kept = g.mul(dense, mask)?;
    let total = g.sum(kept)?;
    g.div(kept, total)
}

/// Sparse simplex weights from logits.
pub fn sparse_weights<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("scaler logits".into()));
    }
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![logits.len()], logits.to_vec())?)?;
    let w = sparse_weights_graph(&mut g, l)?;
    Ok(g.take(w).into_data())
}

/// Graph form of the per-patch similarities: `x` is `[B, N, D]`, `xi` is
/// `[N, D]`; returns `[B, N]`.
pub fn similarities_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    xi: Var,
    rectify_prototypes: bool,
) -> Result<Var> {
    let rx = g.relu(x)?;
    let rxi = if rectify_prototypes { g.relu(xi)? } else { xi };
    g.cosine(rx, rxi, COSINE_EPS)
}

/// Graph form of the class probability. `x` is `[B, N, D]`, `xi` is
/// `[N, D]`, `weights` is `[N]`; returns `[B]`.
pub fn class_probability_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    xi: Var,
    weights: Var,
    rectify_prototypes: bool,
) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    let sxi = g.shape(xi).to_vec();
    if sx.len() != 3 || sx[1..] != sxi[..] || g.shape(weights) != [sxi[0]] {
        return Err(shape_err!(
            "class probability: embeddings {:?}, prototypes {:?}, weights {:?} are inconsistent",
            sx,
            sxi,
            g.shape(weights)
        ));
    }
    let c = similarities_graph(g, x, xi, rectify_prototypes)?;
    let wc = g.mul(c, weights)?;
    g.sum_axis(wc, 1)
}

/// `cos(relu(x), relu(ξ))`, zero when either rectified vector vanishes.
pub fn rectified_cosine<T: Scalar>(x: &[T], xi: &[T], rectify_prototype: bool) -> Result<T> {
    if x.len() != xi.len() {
        return Err(shape_err!(
            "cosine of vectors with {} and {} entries",
            x.len(),
            xi.len()
        ));
    }
    let rx: Vec<T> = x.iter().map(|&v| v.max(T::zero())).collect();
    let rxi: Vec<T> = if rectify_prototype {
        xi.iter().map(|&v| v.max(T::zero())).collect()
    } else {
        xi.to_vec()
    };
    Ok(kernels::cosine(&rx, &rxi, T::lit(COSINE_EPS)).0)
}

/// Similarity of every patch of one sample, `x` being `[N, D]`.
pub fn patch_similarities<T: Scalar>(
    x: &Tensor<T>,
    bank: &PrototypeBank<T>,
    rectify_prototypes: bool,
) -> Result<Vec<T>> {
    if x.shape() != bank.xi.shape() {
        return Err(shape_err!(
            "embeddings {:?} do not match prototypes {:?}",
            x.shape(),
            bank.xi.shape()
        ));
    }
    let d = bank.dim();
    (0..bank.len())
        .map(|i| {
            rectified_cosine(
                &x.data()[i * d..(i + 1) * d],
                &bank.xi.data()[i * d..(i + 1) * d],
                rectify_prototypes,
            )
        })
        .collect()
}

/// `P = Σ_i w_i · cos(x_i, ξ_i)` for one sample with embeddings `[N, D]`.
pub fn class_probability<T: Scalar>(
    x: &Tensor<T>,
    bank: &PrototypeBank<T>,
    scaler: &SparseScaler<T>,
    rectify_prototypes: bool,
) -> Result<T> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape([&[1], x.shape()].concat())?)?;
    let xiv = g.constant(bank.xi.clone())?;
    let lv = g.constant(scaler.logits.clone())?;
    let w = sparse_weights_graph(&mut g, lv)?;
    let p = class_probability_graph(&mut g, xv, xiv, w, rectify_prototypes)?;
    g.value(p).item()
}

/// Embeddings of one projection candidate.
#[derive(Clone, Debug)]
pub struct Candidate<'a, T = f32> {
    pub subject_id: &'a str,
    /// `[N, D]`, inference-mode encoding.
    pub embeddings: &'a Tensor<T>,
}

/// Per patch, the candidate index with the highest similarity to the current
/// prototype. Ties go to the lexicographically smallest subject id.
pub fn select_projection<T: Scalar>(
    bank: &PrototypeBank<T>,
    candidates: &[Candidate<'_, T>],
    rectify_prototypes: bool,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Invalid(
            "prototype projection needs at least one candidate".into(),
        ));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].subject_id.cmp(candidates[b].subject_id));
    let d = bank.dim();
    let mut best = Vec::with_capacity(bank.len());
    for i in 0..bank.len() {
        let xi = &bank.xi.data()[i * d..(i + 1) * d];
        let mut top: Option<(usize, T)> = None;
        for &c in &order {
            let e = candidates[c].embeddings;
            if e.shape() != bank.xi.shape() {
                return Err(shape_err!(
                    "candidate {} embeddings {:?} do not match prototypes {:?}",
                    candidates[c].subject_id,
                    e.shape(),
                    bank.xi.shape()
                ));
            }
            let s = rectified_cosine(&e.data()[i * d..(i + 1) * d], xi, rectify_prototypes)?;
            if top.is_none_or(|(_, t)| s > t) {
                top = Some((c, s));
            }
        }
        best.push(top.expect("candidates are non-empty").0);
    }
    Ok(best)
}

/// Replace every prototype with its most similar candidate patch at the same
/// location and record provenance. Returns the chosen candidate per patch.
pub fn project_onto<T: Scalar>(
    bank: &mut PrototypeBank<T>,
    candidates: &[Candidate<'_, T>],
    epoch: usize,
    rectify_prototypes: bool,
) -> Result<Vec<usize>> {
    let chosen = select_projection(bank, candidates, rectify_prototypes)?;
    let d = bank.dim();
    for (i, &c) in chosen.iter().enumerate() {
        let src = &candidates[c].embeddings.data()[i * d..(i + 1) * d];
        bank.xi.data_mut()[i * d..(i + 1) * d].copy_from_slice(src);
        bank.provenance[i] = Some(Provenance {
            subject_id: candidates[c].subject_id.to_string(),
            epoch,
        });
    }
    Ok(chosen)
}
