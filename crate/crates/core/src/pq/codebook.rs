use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kmeans::{kmeans, nearest, KMeansConfig, KMeansResult};
use super::PqError;
use crate::pool::{GroupId, WeightGroup, WeightPool};

/// `K` codewords of length `dsub`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCodebook {
    k: usize,
    dsub: usize,
    codewords: Vec<f32>,
}

impl SubCodebook {
    pub fn new(k: usize, dsub: usize, codewords: Vec<f32>) -> Result<Self, PqError> {
        if codewords.len() != k * dsub {
            return Err(PqError::LengthMismatch {
                expected: k * dsub,
                actual: codewords.len(),
            });
        }
        Ok(Self { k, dsub, codewords })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dsub(&self) -> usize {
        self.dsub
    }

    pub fn codewords(&self) -> &[f32] {
        &self.codewords
    }

    pub fn codeword(&self, i: usize) -> &[f32] {
        &self.codewords[i * self.dsub..(i + 1) * self.dsub]
    }

    /// Nearest codeword index and squared distance (lowest index on ties).
    pub fn nearest(&self, sub: &[f32]) -> (usize, f64) {
        nearest(sub, &self.codewords, self.dsub)
    }
}

/// The `M` sub-codebooks of one weight group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCodebook {
    group: WeightGroup,
    subs: Vec<SubCodebook>,
}

impl GroupCodebook {
    pub fn new(group: WeightGroup, subs: Vec<SubCodebook>) -> Result<Self, PqError> {
        if subs.len() != group.m && !subs.is_empty() {
            return Err(PqError::LengthMismatch {
                expected: group.m,
                actual: subs.len(),
            });
        }
        let k = subs.first().map_or(0, SubCodebook::k);
        if subs.iter().any(|s| s.dsub != group.dsub() || s.k != k) {
            return Err(PqError::LengthMismatch {
                expected: group.dsub(),
                actual: subs
                    .iter()
                    .map(|s| s.dsub)
                    .find(|&d| d != group.dsub())
                    .unwrap_or(0),
            });
        }
        Ok(Self { group, subs })
    }

    /// A group with no codebook (for models that own no layers of this group).
    pub fn empty(group: WeightGroup) -> Self {
        Self {
            group,
            subs: Vec::new(),
        }
    }

    pub fn group(&self) -> WeightGroup {
        self.group
    }

    pub fn subs(&self) -> &[SubCodebook] {
        &self.subs
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn k(&self) -> usize {
        self.subs.first().map_or(0, SubCodebook::k)
    }

    /// Bytes per stored code.
    pub fn code_width(&self) -> usize {
        if self.k() <= 256 {
            1
        } else {
            2
        }
    }

    /// Encodes one `d`-vector; returns its codes and squared reconstruction error.
    pub fn encode_row(&self, row: &[f32]) -> Result<(Vec<u16>, f64), PqError> {
        if self.is_empty() {
            return Err(PqError::MissingGroup(self.group.id));
        }
        if row.len() != self.group.d {
            return Err(PqError::LengthMismatch {
                expected: self.group.d,
                actual: row.len(),
            });
        }
        let dsub = self.group.dsub();
        let mut err = 0.0;
        let codes = self
            .subs
            .iter()
            .zip(row.chunks_exact(dsub))
            .map(|(sub, v)| {
                let (c, e) = sub.nearest(v);
                err += e;
                c as u16
            })
            .collect();
        Ok((codes, err))
    }

    /// Concatenated codewords for one row of codes.
    pub fn decode_row(&self, codes: &[u16], out: &mut Vec<f32>) {
        for (sub, &c) in self.subs.iter().zip(codes) {
            out.extend_from_slice(sub.codeword(c as usize));
        }
    }
}

/// The shared pair of group codebooks. Codewords cannot be modified once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookPair {
    g3x3: GroupCodebook,
    g1x1fc: GroupCodebook,
    frozen: bool,
}

impl CodebookPair {
    pub fn new(g3x3: GroupCodebook, g1x1fc: GroupCodebook) -> Self {
        Self {
            g3x3,
            g1x1fc,
            frozen: true,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn group(&self, id: GroupId) -> &GroupCodebook {
        match id {
            GroupId::G3x3 => &self.g3x3,
            GroupId::G1x1Fc => &self.g1x1fc,
        }
    }

    /// SHA-256 over the canonical little-endian encoding of every codeword.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for id in GroupId::ALL {
            let g = self.group(id);
            h.update([id.tag(), g.group.m as u8]);
            h.update((g.k() as u32).to_le_bytes());
            h.update((g.group.dsub() as u32).to_le_bytes());
            for sub in &g.subs {
                for v in &sub.codewords {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }
}

/// Runs one k-means per sub-vector position of a pool.
pub fn learn_group_codebook(
    pool: &WeightPool,
    k: usize,
    seed: u64,
) -> Result<(GroupCodebook, Vec<KMeansResult>), PqError> {
    if !k.is_power_of_two() {
        return Err(PqError::KNotPowerOfTwo(k));
    }
    let group = pool.group;
    let dsub = group.dsub();
    let skip = pool.fully_padded_rows();
    let mut subs = Vec::with_capacity(group.m);
    let mut runs = Vec::with_capacity(group.m);
    for m in 0..group.m {
        let mut points = pool.subvectors(m);
        if !skip.is_empty() {
            points = points
                .chunks_exact(dsub)
                .enumerate()
                .filter(|(i, _)| !skip.contains(i))
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
        }
        let sub_seed =
            seed ^ ((group.id.tag() as u64) << 32 | m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let res = kmeans(&points, dsub, &KMeansConfig::new(k, sub_seed))?;
        subs.push(SubCodebook::new(k, dsub, res.centroids.clone())?);
        runs.push(res);
    }
    Ok((GroupCodebook::new(group, subs)?, runs))
}

/// Learns the shared codebook pair from the 3×3 and 1×1/FC pools.
pub fn learn_codebooks(
    pools: (&WeightPool, &WeightPool),
    k: usize,
    seed: u64,
) -> Result<CodebookPair, PqError> {
    let (g3, _) = learn_group_codebook(pools.0, k, seed)?;
    let (g1, _) = learn_group_codebook(pools.1, k, seed)?;
    Ok(CodebookPair::new(g3, g1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{GroupConfig, WeightPool};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pool(id: GroupId, rows: usize, seed: u64) -> WeightPool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let group = GroupConfig::default().group(id);
        let mut pool = WeightPool::new(group);
        pool.vectors = (0..rows * group.d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        pool
    }

    #[test]
    fn learning_is_deterministic_and_frozen() {
        let p3 = random_pool(GroupId::G3x3, 300, 1);
        let p1 = random_pool(GroupId::G1x1Fc, 300, 2);
        let a = learn_codebooks((&p3, &p1), 16, 7).unwrap();
        let b = learn_codebooks((&p3, &p1), 16, 7).unwrap();
        assert!(a.is_frozen());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = learn_codebooks((&p3, &p1), 16, 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn codewords_are_distinct() {
        let p1 = random_pool(GroupId::G1x1Fc, 400, 3);
        let (g, _) = learn_group_codebook(&p1, 64, 1).unwrap();
        for sub in g.subs() {
            for i in 0..sub.k() {
                for j in i + 1..sub.k() {
                    let d = super::super::kmeans::sq_dist(sub.codeword(i), sub.codeword(j)).sqrt();
                    assert!(d > 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_k() {
        let p1 = random_pool(GroupId::G1x1Fc, 10, 3);
        assert!(matches!(
            learn_group_codebook(&p1, 12, 0),
            Err(PqError::KNotPowerOfTwo(12))
        ));
        assert!(matches!(
            learn_group_codebook(&p1, 16, 0),
            Err(PqError::TooFewRows { rows: 10, k: 16 })
        ));
    }

    #[test]
    fn code_space_size() {
        let p1 = random_pool(GroupId::G1x1Fc, 64, 4);
        let (g, _) = learn_group_codebook(&p1, 4, 0).unwrap();
        let combos = g.k().pow(g.group().m as u32);
        assert_eq!(combos, 16);
    }
}
