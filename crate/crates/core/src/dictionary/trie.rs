// SPDX-License-Identifier: Apache-2.0

//! LOUDS-sparse trie over fixed-width byte keys.
//!
//! Nodes are laid out in level order. For every edge the trie stores its
//! byte label, a `has_child` bit, and a `louds` bit that is set on the first
//! label of each node. All keys have the same width, so every path of that
//! depth ends a key and no terminator label is needed.

use super::bitvector::{BitVector, BitVectorBuilder};
use super::DictionaryError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuccinctTrie {
    pub(super) labels: Vec<u8>,
    pub(super) has_child: BitVector,
    pub(super) louds: BitVector,
    pub(super) key_count: u64,
    pub(super) key_width: u8,
}

impl SuccinctTrie {
    /// Builds a trie from strictly increasing keys; width is taken from the
    /// first key.
    pub fn build<K: AsRef<[u8]>>(keys: &[K]) -> Result<Self, DictionaryError> {
        let width = keys.first().map_or(0, |k| k.as_ref().len());
        Self::build_with_width(width, keys)
    }

    pub fn build_with_width<K: AsRef<[u8]>>(
        width: usize,
        keys: &[K],
    ) -> Result<Self, DictionaryError> {
        if width > u8::MAX as usize {
            return Err(DictionaryError::UnsupportedWidth(width));
        }
        if width == 0 && !keys.is_empty() {
            return Err(DictionaryError::UnsupportedWidth(0));
        }
        for (i, k) in keys.iter().enumerate() {
            let k = k.as_ref();
            if k.len() != width {
                return Err(DictionaryError::MixedWidth {
                    index: i,
                    expected: width,
                    actual: k.len(),
                });
            }
            if i > 0 {
                match keys[i - 1].as_ref().cmp(k) {
                    std::cmp::Ordering::Less => {}
                    std::cmp::Ordering::Equal => {
                        return Err(DictionaryError::Duplicate { index: i })
                    }
                    std::cmp::Ordering::Greater => {
                        return Err(DictionaryError::Unsorted { index: i })
                    }
                }
            }
        }

        // Length of the prefix key i shares with key i-1.
        let lcp: Vec<usize> = (0..keys.len())
            .map(|i| {
                if i == 0 {
                    0
                } else {
                    let (a, b) = (keys[i - 1].as_ref(), keys[i].as_ref());
                    a.iter().zip(b).take_while(|(x, y)| x == y).count()
                }
            })
            .collect();

        let estimate = keys.len() * width.min(4);
        let mut labels = Vec::with_capacity(estimate);
        let mut has_child = BitVectorBuilder::with_capacity(estimate);
        let mut louds = BitVectorBuilder::with_capacity(estimate);
        for depth in 0..width {
            let internal = depth + 1 < width;
            for (i, k) in keys.iter().enumerate() {
                // key i starts a new edge at this depth iff it differs from
                // its predecessor within the first depth+1 bytes
                if i == 0 || lcp[i] <= depth {
                    labels.push(k.as_ref()[depth]);
                    has_child.push(internal);
                    louds.push(i == 0 || lcp[i] < depth);
                }
            }
        }
        Ok(Self {
            labels,
            has_child: has_child.build(),
            louds: louds.build(),
            key_count: keys.len() as u64,
            key_width: width as u8,
        })
    }

    pub fn key_count(&self) -> u64 {
        self.key_count
    }

    pub fn key_width(&self) -> usize {
        self.key_width as usize
    }

    pub fn is_empty(&self) -> bool {
        self.key_count == 0
    }

    pub fn node_count(&self) -> usize {
        self.louds.count_ones()
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    /// Exact membership test.
    pub fn contains(&self, key: &[u8]) -> Result<bool, DictionaryError> {
        if self.key_count == 0 {
            return Ok(false);
        }
        if key.len() != self.key_width as usize {
            return Err(DictionaryError::WidthMismatch {
                expected: self.key_width as usize,
                actual: key.len(),
            });
        }
        Ok(self.lookup(key))
    }

    /// Membership for a key already known to have the trie's width.
    #[inline]
    pub fn lookup(&self, key: &[u8]) -> bool {
        if self.key_count == 0 {
            return false;
        }
        let last = key.len() - 1;
        let mut start = 0usize;
        for (depth, &byte) in key.iter().enumerate() {
            let end = self.louds.next_one(start + 1).unwrap_or(self.labels.len());
            let pos = match self.labels[start..end].binary_search(&byte) {
                Ok(off) => start + off,
                Err(_) => return false,
            };
            if depth == last {
                return true;
            }
            debug_assert!(self.has_child.get(pos));
            let child = self.has_child.rank1(pos + 1);
            start = self.louds.select1(child).expect("child node exists");
        }
        unreachable!("fixed-width walk ends at the last byte")
    }

    /// Smallest key.
    pub fn first_key(&self) -> Option<Vec<u8>> {
        self.edge_walk(|start, _end| start)
    }

    /// Largest key.
    pub fn last_key(&self) -> Option<Vec<u8>> {
        self.edge_walk(|_start, end| end - 1)
    }

    fn edge_walk(&self, pick: impl Fn(usize, usize) -> usize) -> Option<Vec<u8>> {
        if self.key_count == 0 {
            return None;
        }
        let mut key = Vec::with_capacity(self.key_width as usize);
        let mut start = 0usize;
        loop {
            let end = self.louds.next_one(start + 1).unwrap_or(self.labels.len());
            let pos = pick(start, end);
            key.push(self.labels[pos]);
            if !self.has_child.get(pos) {
                return Some(key);
            }
            start = self
                .louds
                .select1(self.has_child.rank1(pos + 1))
                .expect("child node exists");
        }
    }

    /// All keys in ascending order.
    pub fn keys(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::with_capacity(self.key_count as usize);
        if self.key_count > 0 {
            let mut prefix = Vec::with_capacity(self.key_width as usize);
            self.collect(0, &mut prefix, &mut out);
        }
        out
    }

    fn collect(&self, start: usize, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        let end = self.louds.next_one(start + 1).unwrap_or(self.labels.len());
        for pos in start..end {
            prefix.push(self.labels[pos]);
            if self.has_child.get(pos) {
                let child = self.has_child.rank1(pos + 1);
                let child_start = self.louds.select1(child).expect("child node exists");
                self.collect(child_start, prefix, out);
            } else {
                out.push(prefix.clone());
            }
            prefix.pop();
        }
    }
}
