//! Orthonormal feature dictionary with designated common and subclass words.

use crate::error::{Result, SimError};
use crate::params::HyperParams;
use crate::rng;
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// How the dictionary words are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictMode {
    /// Words are the canonical basis vectors.
    StandardBasis,
    /// Rows of a Haar-random orthogonal matrix (Gram-Schmidt on a Gaussian
    /// matrix).
    RandomOrthogonal,
}

/// Identifies one designated feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureId {
    CommonPlus,
    CommonMinus,
    SubPlus(usize),
    SubMinus(usize),
}

impl FeatureId {
    pub fn label(&self) -> String {
        match self {
            FeatureId::CommonPlus => "v+".to_string(),
            FeatureId::CommonMinus => "v-".to_string(),
            FeatureId::SubPlus(c) => format!("v+,{c}"),
            FeatureId::SubMinus(c) => format!("v-,{c}"),
        }
    }
}

/// d orthonormal words in R^d; rows of `words`. The first 2 + k_plus + k_minus
/// indices are designated: v+, v-, then the subclass words of each sign.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub words: Array2<f64>,
    pub index_common_plus: usize,
    pub index_common_minus: usize,
    pub indices_sub_plus: Vec<usize>,
    pub indices_sub_minus: Vec<usize>,
}

impl Dictionary {
    pub fn d(&self) -> usize {
        self.words.nrows()
    }

    pub fn word(&self, i: usize) -> ArrayView1<'_, f64> {
        self.words.row(i)
    }

    pub fn feature_index(&self, id: FeatureId) -> usize {
        match id {
            FeatureId::CommonPlus => self.index_common_plus,
            FeatureId::CommonMinus => self.index_common_minus,
            FeatureId::SubPlus(c) => self.indices_sub_plus[c],
            FeatureId::SubMinus(c) => self.indices_sub_minus[c],
        }
    }

    /// All designated features in a fixed order: v+, v-, v+,0.., v-,0...
    pub fn designated(&self) -> Vec<FeatureId> {
        let mut out = vec![FeatureId::CommonPlus, FeatureId::CommonMinus];
        out.extend((0..self.indices_sub_plus.len()).map(FeatureId::SubPlus));
        out.extend((0..self.indices_sub_minus.len()).map(FeatureId::SubMinus));
        out
    }

    /// Max absolute deviation of the Gram matrix from the identity.
    pub fn gram_max_dev(&self) -> f64 {
        let g = self.words.dot(&self.words.t());
        let d = self.d();
        let mut dev: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((g[[i, j]] - target).abs());
            }
        }
        dev
    }
}

/// Builds the dictionary. Deterministic given `seed`.
pub fn build_dictionary(params: &HyperParams, mode: DictMode, seed: u64) -> Result<Dictionary> {
    params.validate()?;
    let d = params.d;
    let words = match mode {
        DictMode::StandardBasis => Array2::eye(d),
        DictMode::RandomOrthogonal => {
            let mut rng = rng::stream(seed, rng::tag::DICT, 0, 0);
            let mut g = Array2::<f64>::zeros((d, d));
            for v in g.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            orthonormalize_rows(&mut g)?;
            g
        }
    };
    let k = params.k_plus;
    Ok(Dictionary {
        words,
        index_common_plus: 0,
        index_common_minus: 1,
        indices_sub_plus: (2..2 + k).collect(),
        indices_sub_minus: (2 + k..2 + 2 * k).collect(),
    })
}

/// Modified Gram-Schmidt with one re-orthogonalization pass; enough to push
/// the Gram deviation of a d x d Gaussian matrix well below 1e-10.
fn orthonormalize_rows(a: &mut Array2<f64>) -> Result<()> {
    let d = a.nrows();
    for i in 0..d {
        for _pass in 0..2 {
            for j in 0..i {
                let proj = a.row(i).dot(&a.row(j));
                let prev = a.row(j).to_owned();
                a.row_mut(i).scaled_add(-proj, &prev);
            }
        }
        let norm = a.row(i).dot(&a.row(i)).sqrt();
        if norm < 1e-12 {
            return Err(SimError::config(
                "degenerate Gaussian draw during orthonormalization",
            ));
        }
        a.row_mut(i).mapv_inplace(|v| v / norm);
    }
    Ok(())
}

const DICT_MAGIC: &[u8; 8] = b"GSDICT01";

impl Dictionary {
    /// Flat binary layout: magic, u64 d, u64 k_plus, u64 k_minus, the
    /// designated indices, then the d*d word matrix as little-endian f64.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DICT_MAGIC)?;
        let d = self.d() as u64;
        let kp = self.indices_sub_plus.len() as u64;
        let km = self.indices_sub_minus.len() as u64;
        for v in [d, kp, km] {
            w.write_all(&v.to_le_bytes())?;
        }
        for idx in [self.index_common_plus, self.index_common_minus]
            .into_iter()
            .chain(self.indices_sub_plus.iter().copied())
            .chain(self.indices_sub_minus.iter().copied())
        {
            w.write_all(&(idx as u64).to_le_bytes())?;
        }
        for v in self.words.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Dictionary> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DICT_MAGIC {
            return Err(SimError::Parse("bad dictionary magic".into()));
        }
        let d = read_u64(r)? as usize;
        let kp = read_u64(r)? as usize;
        let km = read_u64(r)? as usize;
        let index_common_plus = read_u64(r)? as usize;
        let index_common_minus = read_u64(r)? as usize;
        let indices_sub_plus = (0..kp)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let indices_sub_minus = (0..km)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut words = Array2::<f64>::zeros((d, d));
        for v in words.iter_mut() {
            *v = read_f64(r)?;
        }
        Ok(Dictionary {
            words,
            index_common_plus,
            index_common_minus,
            indices_sub_plus,
            indices_sub_minus,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)
    }

    pub fn load(path: &Path) -> Result<Dictionary> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(&mut f)
    }

    /// JSON form for small cases.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct J<'a> {
            d: usize,
            index_common_plus: usize,
            index_common_minus: usize,
            indices_sub_plus: &'a [usize],
            indices_sub_minus: &'a [usize],
            words: Vec<Vec<f64>>,
        }
        let j = J {
            d: self.d(),
            index_common_plus: self.index_common_plus,
            index_common_minus: self.index_common_minus,
            indices_sub_plus: &self.indices_sub_plus,
            indices_sub_minus: &self.indices_sub_minus,
            words: self.words.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(d: usize, k: usize) -> HyperParams {
        let mut p = HyperParams::desk();
        p.d = d;
        p.k_plus = k;
        p.k_minus = k;
        p.batch_size = 2 * k * 2;
        p.p = 8;
        p.s_star = 2;
        p
    }

    #[test]
    fn standard_basis_is_canonical() {
        let p = small_params(8, 2);
        let dict = build_dictionary(&p, DictMode::StandardBasis, 0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(dict.words[[i, j]], expect);
            }
        }
        assert!(dict.gram_max_dev() <= 1e-10);
    }

    #[test]
    fn random_orthogonal_is_deterministic_and_orthonormal() {
        let p = small_params(16, 2);
        let a = build_dictionary(&p, DictMode::RandomOrthogonal, 7).unwrap();
        let b = build_dictionary(&p, DictMode::RandomOrthogonal, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.gram_max_dev() <= 1e-10, "gram dev {}", a.gram_max_dev());
        let c = build_dictionary(&p, DictMode::RandomOrthogonal, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn designated_indices_distinct_and_in_range() {
        let p = small_params(16, 4);
        let dict = build_dictionary(&p, DictMode::RandomOrthogonal, 3).unwrap();
        let mut all = vec![dict.index_common_plus, dict.index_common_minus];
        all.extend(&dict.indices_sub_plus);
        all.extend(&dict.indices_sub_minus);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
        assert!(all.iter().all(|&i| i < 16));
    }

    #[test]
    fn dimension_too_small_is_config_error() {
        let mut p = small_params(8, 4);
        p.d = 8; // needs 2 + 4 + 4 = 10
        assert!(build_dictionary(&p, DictMode::StandardBasis, 0).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let p = small_params(16, 2);
        let dict = build_dictionary(&p, DictMode::RandomOrthogonal, 11).unwrap();
        let mut buf = Vec::new();
        dict.write_binary(&mut buf).unwrap();
        let back = Dictionary::read_binary(&mut &buf[..]).unwrap();
        assert_eq!(dict, back);
    }
}
