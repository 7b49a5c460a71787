//! The two-layer average-pooling convolutional ReLU learner.
//!
//! Per head c: F_c(X) = sum_r sum_p max(0, <w_{c,r}, x_p> + b_{c,r}).
//! The top layer is frozen at 1 and never stored.

use crate::data::{FineLabel, Sample, Sign};
use crate::error::{Result, SimError};
use crate::params::{HyperParams, Variant};
use crate::rng;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Identifier of one output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLabel {
    Coarse(Sign),
    Fine(FineLabel),
}

/// One head's neurons: row r of `weights` is w_{c,r}.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronGroup {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl NeuronGroup {
    pub fn m(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub variant: Variant,
    pub heads: Vec<NeuronGroup>,
    pub head_labels: Vec<HeadLabel>,
    pub params_snapshot: HyperParams,
    pub init_seed: u64,
}

/// Network outputs for one sample; `per_class` is aligned with `head_labels`.
#[derive(Debug, Clone)]
pub struct Response {
    pub per_class: Vec<f64>,
    /// Pre-ReLU m x p values per head, when requested.
    pub per_neuron_activations: Option<Vec<Array2<f64>>>,
}

impl Network {
    pub fn d(&self) -> usize {
        self.heads[0].weights.ncols()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Head index of a fine label: '+' subclasses first, then '-'.
    pub fn fine_head_index(k_plus: usize, fine: FineLabel) -> usize {
        fine.sign.index() * k_plus + fine.c
    }

    /// Head index carrying a sample's true label under this variant.
    pub fn label_head(&self, fine: FineLabel) -> usize {
        match self.variant {
            Variant::Coarse => fine.sign.index(),
            Variant::Fine => Self::fine_head_index(self.params_snapshot.k_plus, fine),
        }
    }
}

/// Initializes a network: weights iid N(0, sigma_0^2), every bias set to the
/// variant's init value. Deterministic given seed.
pub fn init_network(params: &HyperParams, variant: Variant, seed: u64) -> Result<Network> {
    params.validate()?;
    let (n_heads, m, labels): (usize, usize, Vec<HeadLabel>) = match variant {
        Variant::Coarse => (
            2,
            params.m,
            vec![HeadLabel::Coarse(Sign::Plus), HeadLabel::Coarse(Sign::Minus)],
        ),
        Variant::Fine => {
            let mut labels = Vec::new();
            for sign in [Sign::Plus, Sign::Minus] {
                for c in 0..params.k_plus {
                    labels.push(HeadLabel::Fine(FineLabel { sign, c }));
                }
            }
            (2 * params.k_plus, params.m_sub, labels)
        }
    };
    let bias = params.bias_init(variant);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut rng = rng::stream(seed, rng::tag::INIT, variant as u64, h as u64);
        let mut weights = Array2::<f64>::zeros((m, params.d));
        for v in weights.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = params.sigma_0 * z;
        }
        heads.push(NeuronGroup {
            weights,
            biases: Array1::from_elem(m, bias),
        });
    }
    Ok(Network {
        variant,
        heads,
        head_labels: labels,
        params_snapshot: params.clone(),
        init_seed: seed,
    })
}

/// Pre-activation matrix W X^T + b for one head over a p x d patch matrix.
pub fn pre_activations(head: &NeuronGroup, patches: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut pre = head.weights.dot(&patches.t());
    for (mut row, &b) in pre.rows_mut().into_iter().zip(head.biases.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    pre
}

/// Full forward pass on one sample.
pub fn forward(net: &Network, sample: &Sample, record_activations: bool) -> Result<Response> {
    forward_patches(net, sample.patches.view(), record_activations)
}

/// Forward pass on a raw p x d patch matrix.
pub fn forward_patches(
    net: &Network,
    patches: ArrayView2<'_, f64>,
    record_activations: bool,
) -> Result<Response> {
    if patches.ncols() != net.d() {
        return Err(SimError::contract(format!(
            "patch dimension {} does not match network dimension {}",
            patches.ncols(),
            net.d()
        )));
    }
    let mut per_class = Vec::with_capacity(net.n_heads());
    let mut acts = record_activations.then(Vec::new);
    for head in &net.heads {
        let pre = pre_activations(head, patches);
        let f: f64 = pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).sum();
        if !f.is_finite() {
            return Err(SimError::contract("non-finite network response"));
        }
        per_class.push(f);
        if let Some(a) = acts.as_mut() {
            a.push(pre);
        }
    }
    Ok(Response {
        per_class,
        per_neuron_activations: acts,
    })
}

/// Softmax over class responses, computed with max-subtraction.
pub fn softmax_logits(resp: &Response) -> Vec<f64> {
    softmax(&resp.per_class)
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Sums a fine-variant response into the two coarse responses:
/// F_+ = sum_c F_{+,c}, F_- = sum_c F_{-,c}.
pub fn aggregate_fine_to_coarse(resp: &Response, k_plus: usize, k_minus: usize) -> Result<Response> {
    if resp.per_class.len() != k_plus + k_minus {
        return Err(SimError::contract(format!(
            "expected {} fine heads, got {}",
            k_plus + k_minus,
            resp.per_class.len()
        )));
    }
    let f_plus: f64 = resp.per_class[..k_plus].iter().sum();
    let f_minus: f64 = resp.per_class[k_plus..].iter().sum();
    Ok(Response {
        per_class: vec![f_plus, f_minus],
        per_neuron_activations: None,
    })
}

/// Predicted index under a deterministic argmax; ties resolve to the lower
/// head index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

const NET_MAGIC: &[u8; 8] = b"GSNET001";

/// Sidecar metadata stored next to a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub init_seed: u64,
    pub hyperparams: HyperParams,
}

impl Network {
    /// Checkpoint layout: magic, u8 variant, u32 head count, u32 m, u32 d,
    /// then per head the m*d weight matrix and m biases as little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&[match self.variant {
            Variant::Coarse => 0u8,
            Variant::Fine => 1u8,
        }])?;
        let m = self.heads[0].m() as u32;
        for v in [self.n_heads() as u32, m, self.d() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for head in &self.heads {
            for v in head.weights.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in head.biases.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        let meta = CheckpointMeta {
            variant: self.variant,
            init_seed: self.init_seed,
            hyperparams: self.params_snapshot.clone(),
        };
        let sidecar = path.with_extension("json");
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let sidecar = path.with_extension("json");
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f, meta)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R, meta: CheckpointMeta) -> Result<Network> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(SimError::Parse("bad checkpoint magic".into()));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let variant = if b1[0] == 0 { Variant::Coarse } else { Variant::Fine };
        if variant != meta.variant {
            return Err(SimError::Parse("checkpoint variant disagrees with sidecar".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n_heads = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let m = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let mut weights = Array2::<f64>::zeros((m, d));
            for v in weights.iter_mut() {
                *v = crate::dict::read_f64(r)?;
            }
            let mut biases = Array1::<f64>::zeros(m);
            for v in biases.iter_mut() {
                *v = crate::dict::read_f64(r)?;
            }
            heads.push(NeuronGroup { weights, biases });
        }
        let labels = match variant {
            Variant::Coarse => vec![HeadLabel::Coarse(Sign::Plus), HeadLabel::Coarse(Sign::Minus)],
            Variant::Fine => {
                let k = n_heads / 2;
                let mut l = Vec::new();
                for sign in [Sign::Plus, Sign::Minus] {
                    for c in 0..k {
                        l.push(HeadLabel::Fine(FineLabel { sign, c }));
                    }
                }
                l
            }
        };
        Ok(Network {
            variant,
            heads,
            head_labels: labels,
            params_snapshot: meta.hyperparams,
            init_seed: meta.init_seed,
        })
    }
}
