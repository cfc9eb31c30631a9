// SPDX-License-Identifier: Apache-2.0

//! Exact-membership dictionaries over fixed-width hash keys.
//!
//! [`SuccinctTrie`] is the compact structure loaded into the trusted region;
//! [`HashDictionary`] is the baseline it is measured against.
//!
//! Chunk file layout (all integers little-endian):
//!
//! ```text
//! "PCTF" | version u16 | key_width u8 | key_count u64
//! labels:    len u64 | bytes
//! has_child: bitvector section
//! louds:     bitvector section
//! crc32 u32 over everything before it
//!
//! bitvector section:
//!   bit_len u64 | words (ceil(bit_len/64) × u64)
//!   rank_len u64 | rank directory (u32 each)
//!   select_len u64 | select samples (u32 each)
//! ```

mod bitvector;
mod hash_table;
mod trie;

pub use bitvector::{BitVector, BitVectorBuilder};
pub use hash_table::HashDictionary;
pub use trie::SuccinctTrie;

use thiserror::Error;

pub const CHUNK_MAGIC: &[u8; 4] = b"PCTF";
pub const CHUNK_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DictionaryError {
    #[error("key {index} is not greater than its predecessor")]
    Unsorted { index: usize },
    #[error("key {index} duplicates its predecessor")]
    Duplicate { index: usize },
    #[error("key {index} has width {actual}, expected {expected}")]
    MixedWidth {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("probe key has width {actual}, dictionary holds width {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("unsupported key width {0}")]
    UnsupportedWidth(usize),
    #[error("chunk stream truncated")]
    Truncated,
    #[error("bad chunk magic")]
    BadMagic,
    #[error("unsupported chunk version {0}")]
    UnsupportedVersion(u16),
    #[error("chunk checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt chunk: {0}")]
    Corrupt(&'static str),
}

impl SuccinctTrie {
    /// Exact serialized size, directories included.
    pub fn size_bytes(&self) -> usize {
        fn section(bv: &BitVector) -> usize {
            8 + bv.words().len() * 8
                + 8
                + bv.block_ranks().len() * 4
                + 8
                + bv.select_samples().len() * 4
        }
        4 + 2 + 1 + 8 + 8 + self.labels.len() + section(&self.has_child) + section(&self.louds) + 4
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size_bytes());
        out.extend_from_slice(CHUNK_MAGIC);
        out.extend_from_slice(&CHUNK_VERSION.to_le_bytes());
        out.push(self.key_width);
        out.extend_from_slice(&self.key_count.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.labels);
        write_bitvector(&mut out, &self.has_child);
        write_bitvector(&mut out, &self.louds);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        debug_assert_eq!(out.len(), self.size_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, DictionaryError> {
        if bytes.len() < 4 {
            return Err(DictionaryError::Truncated);
        }
        if &bytes[..4] != CHUNK_MAGIC {
            return Err(DictionaryError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = u16::from_le_bytes(r.take_array()?);
        if version != CHUNK_VERSION {
            return Err(DictionaryError::UnsupportedVersion(version));
        }
        let key_width = r.take_array::<1>()?[0];
        let key_count = u64::from_le_bytes(r.take_array()?);
        let labels_len = r.take_len()?;
        let labels = r.take(labels_len)?;
        let has_child = RawBitVector::read(&mut r)?;
        let louds = RawBitVector::read(&mut r)?;
        let body_len = r.pos;
        let stored = u32::from_le_bytes(r.take_array()?);
        if r.pos != bytes.len() {
            return Err(DictionaryError::Corrupt("trailing bytes"));
        }
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(DictionaryError::ChecksumMismatch);
        }

        let labels = labels.to_vec();
        let has_child = has_child.build()?;
        let louds = louds.build()?;
        if has_child.len() != labels.len() || louds.len() != labels.len() {
            return Err(DictionaryError::Corrupt(
                "bit vector length differs from label count",
            ));
        }
        if (key_count == 0) != labels.is_empty() || (key_count > 0 && key_width == 0) {
            return Err(DictionaryError::Corrupt(
                "key count inconsistent with labels",
            ));
        }
        if !labels.is_empty() && !louds.get(0) {
            return Err(DictionaryError::Corrupt("root node missing"));
        }
        // every node except the root hangs off exactly one internal edge
        if has_child.count_ones() + usize::from(!labels.is_empty()) != louds.count_ones() {
            return Err(DictionaryError::Corrupt("edge and node counts disagree"));
        }
        let leaves = labels.len() - has_child.count_ones();
        if leaves as u64 != key_count {
            return Err(DictionaryError::Corrupt(
                "leaf count differs from key count",
            ));
        }
        Ok(Self {
            labels,
            has_child,
            louds,
            key_count,
            key_width,
        })
    }
}

fn write_bitvector(out: &mut Vec<u8>, bv: &BitVector) {
    out.extend_from_slice(&(bv.len() as u64).to_le_bytes());
    for w in bv.words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&(bv.block_ranks().len() as u64).to_le_bytes());
    for r in bv.block_ranks() {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&(bv.select_samples().len() as u64).to_le_bytes());
    for s in bv.select_samples() {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

/// Bit-vector section as laid out in the stream, not yet validated.
struct RawBitVector<'a> {
    len: usize,
    words: &'a [u8],
    ranks: &'a [u8],
    samples: &'a [u8],
}

impl<'a> RawBitVector<'a> {
    fn read(r: &mut Reader<'a>) -> Result<Self, DictionaryError> {
        let len = r.take_len()?;
        let words = r.take(
            len.div_ceil(64)
                .checked_mul(8)
                .ok_or(DictionaryError::Truncated)?,
        )?;
        let n_ranks = r.take_len()?;
        let ranks = r.take(n_ranks.checked_mul(4).ok_or(DictionaryError::Truncated)?)?;
        let n_samples = r.take_len()?;
        let samples = r.take(n_samples.checked_mul(4).ok_or(DictionaryError::Truncated)?)?;
        Ok(Self {
            len,
            words,
            ranks,
            samples,
        })
    }

    fn build(self) -> Result<BitVector, DictionaryError> {
        if self.len > u32::MAX as usize {
            return Err(DictionaryError::Corrupt("bit vector too long"));
        }
        let words = self
            .words
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let u32s = |b: &[u8]| {
            b.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        BitVector::from_parts(words, self.len, u32s(self.ranks), u32s(self.samples))
            .ok_or(DictionaryError::Corrupt("bit vector directory"))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DictionaryError> {
        let end = self.pos.checked_add(n).ok_or(DictionaryError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(DictionaryError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N], DictionaryError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn take_len(&mut self) -> Result<usize, DictionaryError> {
        let n = u64::from_le_bytes(self.take_array()?);
        usize::try_from(n).map_err(|_| DictionaryError::Corrupt("length overflow"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_keys(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Vec<Vec<u8>> {
        let mut keys: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..width).map(|_| rng.random()).collect())
            .collect();
        keys.sort();
        keys.dedup();
        keys
    }

    #[test]
    fn membership_matches_sorted_array() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let keys = random_keys(&mut rng, 100_000, 8);
        let trie = SuccinctTrie::build(&keys).unwrap();
        assert_eq!(trie.key_count() as usize, keys.len());
        for k in &keys {
            assert!(trie.contains(k).unwrap());
        }
        for _ in 0..200_000 {
            let probe: Vec<u8> = if rng.random_bool(0.5) {
                let mut k = keys[rng.random_range(0..keys.len())].clone();
                let i = rng.random_range(0..8);
                k[i] = k[i].wrapping_add(rng.random_range(0..3));
                k
            } else {
                (0..8).map(|_| rng.random()).collect()
            };
            assert_eq!(
                trie.contains(&probe).unwrap(),
                keys.binary_search(&probe).is_ok()
            );
        }
    }

    #[test]
    fn keys_round_trip_through_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys = random_keys(&mut rng, 3000, 5);
        let trie = SuccinctTrie::build(&keys).unwrap();
        assert_eq!(trie.keys(), keys);
    }

    #[test]
    fn serialize_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [0usize, 1, 2, 1000, 20_000] {
            let keys = random_keys(&mut rng, n, 7);
            let trie = SuccinctTrie::build(&keys).unwrap();
            let bytes = trie.serialize();
            assert_eq!(bytes.len(), trie.size_bytes());
            let back = SuccinctTrie::deserialize(&bytes).unwrap();
            assert_eq!(back, trie);
        }
    }

    #[test]
    fn empty_trie_has_constant_header() {
        let trie = SuccinctTrie::build::<Vec<u8>>(&[]).unwrap();
        // magic, version, width, count, labels len, two empty sections, crc
        assert_eq!(
            trie.size_bytes(),
            4 + 2 + 1 + 8 + 8 + 2 * (8 + 8 + 4 + 8) + 4
        );
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let keys: Vec<[u8; 4]> = (0u32..500).map(|i| (i * 3).to_be_bytes()).collect();
        let bytes = SuccinctTrie::build(&keys).unwrap().serialize();
        for cut in [0, 3, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                SuccinctTrie::deserialize(&bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
        assert_eq!(
            SuccinctTrie::deserialize(&bytes[..bytes.len() / 2]),
            Err(DictionaryError::Truncated)
        );
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(
            SuccinctTrie::deserialize(&bad),
            Err(DictionaryError::BadMagic)
        );
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            SuccinctTrie::deserialize(&bad),
            Err(DictionaryError::UnsupportedVersion(9))
        );
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x10;
        assert_eq!(
            SuccinctTrie::deserialize(&bad),
            Err(DictionaryError::ChecksumMismatch)
        );
    }

    #[test]
    fn size_grows_with_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool = random_keys(&mut rng, 20_000, 6);
        let mut last = 0;
        for n in [0usize, 1, 10, 100, 1000, 5000, pool.len()] {
            let mut subset: Vec<Vec<u8>> = pool
                .iter()
                .step_by(pool.len() / n.max(1))
                .take(n)
                .cloned()
                .collect();
            subset.sort();
            let s = SuccinctTrie::build(&subset).unwrap().size_bytes();
            assert!(s >= last, "{n}: {s} < {last}");
            last = s;
        }
    }

    #[test]
    fn clustered_keys_compress_better_than_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let random = random_keys(&mut rng, 50_000, 8);
        let clustered: Vec<[u8; 8]> = (0u64..50_000)
            .map(|i| ((1u64 << 40) + i * 3).to_be_bytes())
            .collect();
        let rs = SuccinctTrie::build(&random).unwrap().size_bytes();
        let cs = SuccinctTrie::build(&clustered).unwrap().size_bytes();
        assert!(cs < rs);
        let hs = HashDictionary::build(&clustered).unwrap().size_bytes();
        assert!(cs < hs);
    }

    proptest! {
        #[test]
        fn serialized_trie_answers_identically(raw in proptest::collection::vec(any::<[u8; 3]>(), 0..400),
                                               probes in proptest::collection::vec(any::<[u8; 3]>(), 50)) {
            let mut keys = raw.clone();
            keys.sort();
            keys.dedup();
            let trie = SuccinctTrie::build(&keys).unwrap();
            let back = SuccinctTrie::deserialize(&trie.serialize()).unwrap();
            for p in probes.iter().chain(keys.iter()) {
                let expected = keys.binary_search(p).is_ok();
                prop_assert_eq!(trie.contains(p).unwrap(), expected);
                prop_assert_eq!(back.contains(p).unwrap(), expected);
            }
        }
    }
}
