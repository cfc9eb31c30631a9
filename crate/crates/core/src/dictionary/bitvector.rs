// SPDX-License-Identifier: Apache-2.0

//! Immutable bit vector with constant-time rank and sampled select.

const WORD_BITS: usize = 64;
/// Bits per rank superblock.
pub(crate) const BLOCK_BITS: usize = 512;
const WORDS_PER_BLOCK: usize = BLOCK_BITS / WORD_BITS;
/// One select sample every this many set bits.
pub(crate) const SELECT_SAMPLE: usize = 512;

#[derive(Debug, Default)]
pub struct BitVectorBuilder {
    words: Vec<u64>,
    len: usize,
}

impl BitVectorBuilder {
    pub fn with_capacity(bits: usize) -> Self {
        Self {
            words: Vec::with_capacity(bits.div_ceil(WORD_BITS)),
            len: 0,
        }
    }

    pub fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(WORD_BITS) {
            self.words.push(0);
        }
        if bit {
            *self.words.last_mut().expect("word pushed above") |= 1u64 << (self.len % WORD_BITS);
        }
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn build(self) -> BitVector {
        BitVector::from_words(self.words, self.len)
    }
}

impl FromIterator<bool> for BitVector {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let mut b = BitVectorBuilder::default();
        for bit in iter {
            b.push(bit);
        }
        b.build()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitVector {
    words: Vec<u64>,
    len: usize,
    // ones before each superblock, plus the total at the end
    block_ranks: Vec<u32>,
    // superblock holding the (k * SELECT_SAMPLE)-th one
    select_samples: Vec<u32>,
}

impl BitVector {
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        assert!(
            len <= u32::MAX as usize,
            "bit vector too long for 32-bit directories"
        );
        words.truncate(len.div_ceil(WORD_BITS));
        words.resize(len.div_ceil(WORD_BITS), 0);
        if !len.is_multiple_of(WORD_BITS) {
            let last = words.len() - 1;
            words[last] &= (1u64 << (len % WORD_BITS)) - 1;
        }
        let (block_ranks, select_samples) = build_directories(&words, len);
        Self {
            words,
            len,
            block_ranks,
            select_samples,
        }
    }

    pub(crate) fn from_parts(
        words: Vec<u64>,
        len: usize,
        block_ranks: Vec<u32>,
        select_samples: Vec<u32>,
    ) -> Option<Self> {
        if words.len() != len.div_ceil(WORD_BITS) {
            return None;
        }
        if !len.is_multiple_of(WORD_BITS) && words[words.len() - 1] >> (len % WORD_BITS) != 0 {
            return None;
        }
        let (expected_ranks, expected_samples) = build_directories(&words, len);
        if block_ranks != expected_ranks || select_samples != expected_samples {
            return None;
        }
        Some(Self {
            words,
            len,
            block_ranks,
            select_samples,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn block_ranks(&self) -> &[u32] {
        &self.block_ranks
    }

    pub(crate) fn select_samples(&self) -> &[u32] {
        &self.select_samples
    }

    pub fn count_ones(&self) -> usize {
        *self.block_ranks.last().unwrap_or(&0) as usize
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Number of ones in `[0, i)`.
    #[inline]
    pub fn rank1(&self, i: usize) -> usize {
        debug_assert!(i <= self.len);
        let block = i / BLOCK_BITS;
        let mut r = self.block_ranks[block] as usize;
        let first = block * WORDS_PER_BLOCK;
        let word = i / WORD_BITS;
        for w in &self.words[first..word] {
            r += w.count_ones() as usize;
        }
        let rem = i % WORD_BITS;
        if rem != 0 {
            r += (self.words[word] & ((1u64 << rem) - 1)).count_ones() as usize;
        }
        r
    }

    pub fn rank0(&self, i: usize) -> usize {
        i - self.rank1(i)
    }

    /// Position of the `j`-th one (0-based), if it exists.
    pub fn select1(&self, j: usize) -> Option<usize> {
        if j >= self.count_ones() {
            return None;
        }
        let mut block = self.select_samples[j / SELECT_SAMPLE] as usize;
        while self.block_ranks[block + 1] as usize <= j {
            block += 1;
        }
        let mut remaining = j - self.block_ranks[block] as usize;
        let mut word = block * WORDS_PER_BLOCK;
        loop {
            let ones = self.words[word].count_ones() as usize;
            if remaining < ones {
                return Some(word * WORD_BITS + select_in_word(self.words[word], remaining));
            }
            remaining -= ones;
            word += 1;
        }
    }

    /// First one at a position `>= from`, if any.
    pub fn next_one(&self, from: usize) -> Option<usize> {
        if from >= self.len {
            return None;
        }
        let mut word = from / WORD_BITS;
        let mut bits = self.words[word] & (!0u64 << (from % WORD_BITS));
        loop {
            if bits != 0 {
                let pos = word * WORD_BITS + bits.trailing_zeros() as usize;
                return (pos < self.len).then_some(pos);
            }
            word += 1;
            if word >= self.words.len() {
                return None;
            }
            bits = self.words[word];
        }
    }

    /// Heap bytes held by bits and directories.
    pub fn directory_bytes(&self) -> usize {
        self.words.len() * 8 + self.block_ranks.len() * 4 + self.select_samples.len() * 4
    }
}

fn build_directories(words: &[u64], len: usize) -> (Vec<u32>, Vec<u32>) {
    let blocks = len.div_ceil(BLOCK_BITS);
    let mut block_ranks = Vec::with_capacity(blocks + 1);
    let mut select_samples = Vec::new();
    let mut ones = 0usize;
    for b in 0..blocks {
        block_ranks.push(ones as u32);
        let start = b * WORDS_PER_BLOCK;
        let end = (start + WORDS_PER_BLOCK).min(words.len());
        let block_ones: usize = words[start..end]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum();
        // record every sample index whose target one falls in this block
        while select_samples.len() * SELECT_SAMPLE < ones + block_ones {
            select_samples.push(b as u32);
        }
        ones += block_ones;
    }
    block_ranks.push(ones as u32);
    (block_ranks, select_samples)
}

#[inline]
fn select_in_word(mut w: u64, mut k: usize) -> usize {
    while k > 0 {
        w &= w - 1;
        k -= 1;
    }
    w.trailing_zeros() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_rank(bits: &[bool], i: usize) -> usize {
        bits[..i].iter().filter(|&&b| b).count()
    }

    fn naive_select(bits: &[bool], j: usize) -> Option<usize> {
        bits.iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .nth(j)
            .map(|(i, _)| i)
    }

    #[test]
    fn empty_vector() {
        let bv: BitVector = std::iter::empty().collect();
        assert_eq!(bv.len(), 0);
        assert_eq!(bv.rank1(0), 0);
        assert_eq!(bv.select1(0), None);
        assert_eq!(bv.next_one(0), None);
    }

    #[test]
    fn rank_select_agree_with_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (len, density) in [
            (1usize, 0.5),
            (63, 0.5),
            (64, 0.9),
            (513, 0.01),
            (5000, 0.5),
            (100_000, 0.02),
            (1_000_000, 0.3),
        ] {
            let bits: Vec<bool> = (0..len).map(|_| rng.random_bool(density)).collect();
            let bv: BitVector = bits.iter().copied().collect();
            assert_eq!(bv.len(), len);
            let ones = naive_rank(&bits, len);
            assert_eq!(bv.count_ones(), ones);
            // prefix ranks in one pass
            let mut r = 0;
            let stride = if len > 10_000 { 37 } else { 1 };
            #[allow(clippy::needless_range_loop)]
            for i in 0..=len {
                if i % stride == 0 {
                    assert_eq!(bv.rank1(i), r, "rank1({i}) len {len}");
                }
                if i < len && bits[i] {
                    r += 1;
                }
            }
            let positions: Vec<usize> = (0..len).filter(|&i| bits[i]).collect();
            for (j, &p) in positions.iter().enumerate() {
                assert_eq!(bv.select1(j), Some(p));
            }
            assert_eq!(bv.select1(positions.len()), None);
            if len <= 5000 {
                for j in 0..ones {
                    assert_eq!(bv.select1(j), naive_select(&bits, j));
                }
                for i in 0..len {
                    assert_eq!(bv.next_one(i), (i..len).find(|&k| bits[k]));
                }
            }
        }
    }

    #[test]
    fn dense_select_crosses_blocks() {
        let bv: BitVector = (0..10_000).map(|_| true).collect();
        for j in (0..10_000).step_by(97) {
            assert_eq!(bv.select1(j), Some(j));
        }
        assert_eq!(bv.rank0(10_000), 0);
    }

    #[test]
    fn from_parts_rejects_inconsistent_directories() {
        let bv: BitVector = (0..2000).map(|i| i % 3 == 0).collect();
        let mut ranks = bv.block_ranks().to_vec();
        ranks[1] += 1;
        assert!(BitVector::from_parts(
            bv.words().to_vec(),
            bv.len(),
            ranks,
            bv.select_samples().to_vec()
        )
        .is_none());
        let ok = BitVector::from_parts(
            bv.words().to_vec(),
            bv.len(),
            bv.block_ranks().to_vec(),
            bv.select_samples().to_vec(),
        );
        assert_eq!(ok, Some(bv));
    }
}
