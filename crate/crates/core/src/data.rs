//! Sample and batch generation for the patch-dictionary distribution.
//!
//! Every patch of every sample draws from its own derived rng stream, in a
//! fixed slot order, so (a) generation parallelizes with bit-identical
//! results and (b) a hard sample generated from the same stream as a normal
//! one differs exactly in the patches the normal one tagged common.

use crate::dict::Dictionary;
use crate::error::{Result, SimError};
use crate::params::HyperParams;
use crate::rng;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Coarse class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn index(self) -> usize {
        match self {
            Sign::Plus => 0,
            Sign::Minus => 1,
        }
    }

    pub fn opposite(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// Fine-grained label: coarse sign plus subclass index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FineLabel {
    pub sign: Sign,
    pub c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchTag {
    Common,
    Subclass,
    FeatureNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Normal,
    Hard,
}

/// One input: `p` patches of dimension `d`, with per-patch provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// p x d patch matrix.
    pub patches: Array2<f64>,
    pub coarse_label: Sign,
    pub fine_label: FineLabel,
    pub patch_tags: Vec<PatchTag>,
    pub kind: SampleKind,
    /// Feature strength per patch; 0.0 on feature-noise patches.
    pub alphas: Vec<f64>,
}

impl Sample {
    pub fn p(&self) -> usize {
        self.patches.nrows()
    }

    pub fn d(&self) -> usize {
        self.patches.ncols()
    }

    /// True when the sample carries neither common nor subclass patches.
    /// The generative process permits this; such samples are kept.
    pub fn is_zero_feature(&self) -> bool {
        self.patch_tags.iter().all(|t| *t == PatchTag::FeatureNoise)
    }
}

/// A training batch with exact per-subclass composition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<Sample>,
    pub step_index: u64,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn zero_feature_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_zero_feature()).count()
    }

    /// Copies all patches into one (n*p) x d matrix, sample-major.
    pub fn flatten(&self) -> Array2<f64> {
        let n = self.n();
        let p = self.samples[0].p();
        let d = self.samples[0].d();
        let mut x = Array2::<f64>::zeros((n * p, d));
        for (i, s) in self.samples.iter().enumerate() {
            x.slice_mut(ndarray::s![i * p..(i + 1) * p, ..])
                .assign(&s.patches);
        }
        x
    }
}

/// Draws one sample. `stream_seed` fully determines the result; generating a
/// hard sample from the same seed keeps every non-common patch identical.
pub fn sample_example(
    dict: &Dictionary,
    params: &HyperParams,
    fine_label: FineLabel,
    kind: SampleKind,
    stream_seed: u64,
) -> Result<Sample> {
    let k = match fine_label.sign {
        Sign::Plus => params.k_plus,
        Sign::Minus => params.k_minus,
    };
    if fine_label.c >= k {
        return Err(SimError::contract(format!(
            "subclass index {} out of range for sign with {} subclasses",
            fine_label.c, k
        )));
    }
    let d = params.d;
    let p = params.p;
    let feature_prob = params.s_star as f64 / p as f64;
    let alpha_lo = (1.0 - params.iota).sqrt();
    let alpha_hi = (1.0 + params.iota).sqrt();

    let common_idx = match fine_label.sign {
        Sign::Plus => dict.index_common_plus,
        Sign::Minus => dict.index_common_minus,
    };
    let sub_idx = match fine_label.sign {
        Sign::Plus => dict.indices_sub_plus[fine_label.c],
        Sign::Minus => dict.indices_sub_minus[fine_label.c],
    };
    // Feature-noise words come from the designated pool of the opposite class.
    let noise_pool: Vec<usize> = match fine_label.sign {
        Sign::Plus => std::iter::once(dict.index_common_minus)
            .chain(dict.indices_sub_minus.iter().copied())
            .collect(),
        Sign::Minus => std::iter::once(dict.index_common_plus)
            .chain(dict.indices_sub_plus.iter().copied())
            .collect(),
    };

    let mut patches = Array2::<f64>::zeros((p, d));
    let mut tags = Vec::with_capacity(p);
    let mut alphas = Vec::with_capacity(p);

    for patch in 0..p {
        let mut prng = rng::stream(stream_seed, rng::tag::PATCH, patch as u64, 0);
        // Fixed slot order; every slot is consumed regardless of the branch
        // taken, so normal and hard decode the same stream.
        let u_common: f64 = prng.gen();
        let u_sub: f64 = prng.gen();
        let alpha = alpha_lo + prng.gen::<f64>() * (alpha_hi - alpha_lo);
        let mut fnoise = Vec::with_capacity(params.s_f);
        for _ in 0..params.s_f {
            let widx = noise_pool[prng.gen_range(0..noise_pool.len())];
            let amp = prng.gen::<f64>() * params.gamma;
            fnoise.push((widx, amp));
        }

        let is_common = kind == SampleKind::Normal && u_common < feature_prob;
        let mut row = patches.row_mut(patch);
        if is_common {
            tags.push(PatchTag::Common);
            alphas.push(alpha);
            row.scaled_add(alpha, &dict.word(common_idx));
        } else if u_sub < feature_prob {
            tags.push(PatchTag::Subclass);
            alphas.push(alpha);
            row.scaled_add(alpha, &dict.word(sub_idx));
        } else {
            tags.push(PatchTag::FeatureNoise);
            alphas.push(0.0);
            for (widx, amp) in fnoise {
                row.scaled_add(amp, &dict.word(widx));
            }
        }
        if params.sigma_zeta > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = prng.sample(StandardNormal);
                *v += params.sigma_zeta * z;
            }
        }
    }

    Ok(Sample {
        patches,
        coarse_label: fine_label.sign,
        fine_label,
        patch_tags: tags,
        kind,
        alphas,
    })
}

/// Builds the label sequence for one batch: exactly batch_size/(2 k_plus)
/// samples per subclass, order shuffled from the batch's own stream.
fn batch_labels(params: &HyperParams, data_seed: u64, step: u64) -> Vec<FineLabel> {
    let per = params.samples_per_subclass();
    let mut labels = Vec::with_capacity(params.batch_size);
    for sign in [Sign::Plus, Sign::Minus] {
        let k = params.k_plus;
        for c in 0..k {
            for _ in 0..per {
                labels.push(FineLabel { sign, c });
            }
        }
    }
    let mut shuffle_rng = rng::stream(data_seed, rng::tag::SHUFFLE, step, 0);
    labels.shuffle(&mut shuffle_rng);
    labels
}

/// Draws a fresh batch of normal samples for the given step. Deterministic
/// in (data_seed, step); sample generation parallelizes across samples.
pub fn make_batch(
    dict: &Dictionary,
    params: &HyperParams,
    step: u64,
    data_seed: u64,
) -> Result<Batch> {
    params.validate()?;
    let labels = batch_labels(params, data_seed, step);
    let samples: Result<Vec<Sample>> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &fine)| {
            let seed = rng::derive_seed(data_seed, rng::tag::SAMPLE, step, i as u64);
            sample_example(dict, params, fine, SampleKind::Normal, seed)
        })
        .collect();
    Ok(Batch {
        samples: samples?,
        step_index: step,
    })
}

/// Draws an evaluation set with `per_subclass` samples of the given kind for
/// every subclass of both signs, in a fixed label order.
pub fn make_eval_set(
    dict: &Dictionary,
    params: &HyperParams,
    kind: SampleKind,
    per_subclass: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut labels = Vec::new();
    for sign in [Sign::Plus, Sign::Minus] {
        for c in 0..params.k_plus {
            for _ in 0..per_subclass {
                labels.push(FineLabel { sign, c });
            }
        }
    }
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &fine)| {
            let s = rng::derive_seed(seed, rng::tag::SAMPLE, 0, i as u64);
            sample_example(dict, params, fine, kind, s)
        })
        .collect()
}

impl Batch {
    /// JSON form for small cases.
    pub fn to_json(&self) -> crate::error::Result<String> {
        #[derive(Serialize)]
        struct SampleJ<'a> {
            coarse_label: Sign,
            fine_label: FineLabel,
            kind: SampleKind,
            patch_tags: &'a [PatchTag],
            alphas: &'a [f64],
            patches: Vec<Vec<f64>>,
        }
        #[derive(Serialize)]
        struct BatchJ<'a> {
            step_index: u64,
            samples: Vec<SampleJ<'a>>,
        }
        let j = BatchJ {
            step_index: self.step_index,
            samples: self
                .samples
                .iter()
                .map(|s| SampleJ {
                    coarse_label: s.coarse_label,
                    fine_label: s.fine_label,
                    kind: s.kind,
                    patch_tags: &s.patch_tags,
                    alphas: &s.alphas,
                    patches: s.patches.rows().into_iter().map(|r| r.to_vec()).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }
}

const BATCH_MAGIC: &[u8; 8] = b"GSBATCH1";

impl Batch {
    /// Flat binary layout: magic, u64 {d, p, n, step}, then per sample:
    /// sign u8, c u64, kind u8, tags p x u8, alphas p x f64 LE, patches
    /// p*d x f64 LE.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BATCH_MAGIC)?;
        let (n, p, d) = (self.n(), self.samples[0].p(), self.samples[0].d());
        for v in [d as u64, p as u64, n as u64, self.step_index] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in &self.samples {
            w.write_all(&[s.coarse_label.index() as u8])?;
            w.write_all(&(s.fine_label.c as u64).to_le_bytes())?;
            w.write_all(&[match s.kind {
                SampleKind::Normal => 0u8,
                SampleKind::Hard => 1u8,
            }])?;
            for t in &s.patch_tags {
                w.write_all(&[match t {
                    PatchTag::Common => 0u8,
                    PatchTag::Subclass => 1u8,
                    PatchTag::FeatureNoise => 2u8,
                }])?;
            }
            for a in &s.alphas {
                w.write_all(&a.to_le_bytes())?;
            }
            for v in s.patches.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Batch> {
        use crate::dict::{read_f64, read_u64};
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BATCH_MAGIC {
            return Err(SimError::Parse("bad batch magic".into()));
        }
        let d = read_u64(r)? as usize;
        let p = read_u64(r)? as usize;
        let n = read_u64(r)? as usize;
        let step_index = read_u64(r)?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1)?;
            let sign = if b1[0] == 0 { Sign::Plus } else { Sign::Minus };
            let c = read_u64(r)? as usize;
            r.read_exact(&mut b1)?;
            let kind = if b1[0] == 0 { SampleKind::Normal } else { SampleKind::Hard };
            let mut tags = Vec::with_capacity(p);
            for _ in 0..p {
                r.read_exact(&mut b1)?;
                tags.push(match b1[0] {
                    0 => PatchTag::Common,
                    1 => PatchTag::Subclass,
                    2 => PatchTag::FeatureNoise,
                    v => return Err(SimError::Parse(format!("bad patch tag {v}"))),
                });
            }
            let mut alphas = Vec::with_capacity(p);
            for _ in 0..p {
                alphas.push(read_f64(r)?);
            }
            let mut patches = Array2::<f64>::zeros((p, d));
            for v in patches.iter_mut() {
                *v = read_f64(r)?;
            }
            samples.push(Sample {
                patches,
                coarse_label: sign,
                fine_label: FineLabel { sign, c },
                patch_tags: tags,
                kind,
                alphas,
            });
        }
        Ok(Batch { samples, step_index })
    }
}
