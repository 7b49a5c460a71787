//! Initialization-geometry neuron sets.
//!
//! For a designated word v, S(v) holds the neurons whose initial alignment
//! with v clears the low threshold, and S*(v) the ones that clear the high
//! threshold on v and stay below the low threshold on every other dictionary
//! word. U(r) lists all words a neuron clears the low threshold on.

use crate::dict::{Dictionary, FeatureId};
use crate::error::Result;
use crate::model::Network;
use crate::params::HyperParams;
use ndarray::Array2;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NeuronRef {
    pub head: usize,
    pub r: usize,
}

#[derive(Debug, Clone)]
pub struct NeuronSets {
    pub theta_hi: f64,
    pub theta_lo: f64,
    pub features: Vec<FeatureId>,
    /// Per designated feature, in `features` order.
    pub star: Vec<Vec<NeuronRef>>,
    pub s: Vec<Vec<NeuronRef>>,
    /// Per neuron (head-major): dictionary word indices above theta_lo.
    pub u: Vec<Vec<usize>>,
    pub n_heads: usize,
    pub m_per_head: usize,
}

impl NeuronSets {
    fn feature_pos(&self, id: FeatureId) -> Option<usize> {
        self.features.iter().position(|f| *f == id)
    }

    pub fn star_of(&self, id: FeatureId) -> &[NeuronRef] {
        self.feature_pos(id).map(|i| self.star[i].as_slice()).unwrap_or(&[])
    }

    pub fn s_of(&self, id: FeatureId) -> &[NeuronRef] {
        self.feature_pos(id).map(|i| self.s[i].as_slice()).unwrap_or(&[])
    }

    pub fn u_of(&self, neuron: NeuronRef) -> &[usize] {
        &self.u[neuron.head * self.m_per_head + neuron.r]
    }

    /// Largest |U(r)| over all neurons.
    pub fn max_u_len(&self) -> usize {
        self.u.iter().map(|v| v.len()).max().unwrap_or(0)
    }
}

/// Classifies the neurons of a freshly initialized network against the
/// dictionary. Membership is a pure function of the checkpoint.
pub fn classify_init_neurons(
    net: &Network,
    dict: &Dictionary,
    params: &HyperParams,
) -> Result<NeuronSets> {
    let (theta_hi, theta_lo) = params.thetas(net.variant);
    let features = dict.designated();
    let d = dict.d();
    let m = net.heads[0].m();
    let mut star: Vec<Vec<NeuronRef>> = vec![Vec::new(); features.len()];
    let mut s: Vec<Vec<NeuronRef>> = vec![Vec::new(); features.len()];
    let mut u: Vec<Vec<usize>> = Vec::with_capacity(net.n_heads() * m);

    for (h, head) in net.heads.iter().enumerate() {
        // alignments of every neuron with every dictionary word
        let a: Array2<f64> = head.weights.dot(&dict.words.t());
        for r in 0..m {
            let row = a.row(r);
            let above_lo: Vec<usize> = (0..d).filter(|&w| row[w] >= theta_lo).collect();
            for (fi, &feat) in features.iter().enumerate() {
                let widx = dict.feature_index(feat);
                if row[widx] >= theta_lo {
                    s[fi].push(NeuronRef { head: h, r });
                }
                if row[widx] >= theta_hi
                    && above_lo.iter().all(|&w| w == widx)
                {
                    star[fi].push(NeuronRef { head: h, r });
                }
            }
            u.push(above_lo);
        }
    }
    Ok(NeuronSets {
        theta_hi,
        theta_lo,
        features,
        star,
        s,
        u,
        n_heads: net.n_heads(),
        m_per_head: m,
    })
}
