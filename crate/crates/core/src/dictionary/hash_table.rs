// SPDX-License-Identifier: Apache-2.0

//! Open-addressing hash set over fixed-width keys, used as the size and
//! speed baseline for the trie.
//!
//! The layout mirrors a SwissTable: a power-of-two slot array kept at most
//! 7/8 full, one control byte per slot, and keys stored inline.

use super::DictionaryError;

const EMPTY: u8 = 0;
const MAX_LOAD_NUM: usize = 7;
const MAX_LOAD_DEN: usize = 8;

#[derive(Debug, Clone)]
pub struct HashDictionary {
    ctrl: Vec<u8>,
    slots: Vec<u8>,
    mask: usize,
    key_count: u64,
    key_width: usize,
}

fn hash_key(key: &[u8]) -> u64 {
    const K: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ key.len() as u64;
    for chunk in key.chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h = (h ^ u64::from_le_bytes(buf)).wrapping_mul(K);
        h ^= h >> 29;
    }
    h = h.wrapping_mul(K);
    h ^ (h >> 32)
}

fn capacity_for(n: usize) -> usize {
    let min_slots = (n * MAX_LOAD_DEN).div_ceil(MAX_LOAD_NUM).max(8);
    min_slots.next_power_of_two()
}

impl HashDictionary {
    pub fn build<K: AsRef<[u8]>>(keys: &[K]) -> Result<Self, DictionaryError> {
        let width = keys.first().map_or(0, |k| k.as_ref().len());
        let capacity = capacity_for(keys.len());
        let mut table = Self {
            ctrl: vec![EMPTY; capacity],
            slots: vec![0u8; capacity * width],
            mask: capacity - 1,
            key_count: 0,
            key_width: width,
        };
        for (i, k) in keys.iter().enumerate() {
            let k = k.as_ref();
            if k.len() != width {
                return Err(DictionaryError::MixedWidth {
                    index: i,
                    expected: width,
                    actual: k.len(),
                });
            }
            if !table.insert(k) {
                return Err(DictionaryError::Duplicate { index: i });
            }
        }
        Ok(table)
    }

    fn insert(&mut self, key: &[u8]) -> bool {
        let h = hash_key(key);
        let tag = 0x80 | (h >> 57) as u8;
        let mut i = h as usize & self.mask;
        loop {
            match self.ctrl[i] {
                EMPTY => {
                    self.ctrl[i] = tag;
                    self.slots[i * self.key_width..(i + 1) * self.key_width].copy_from_slice(key);
                    self.key_count += 1;
                    return true;
                }
                c if c == tag && self.slot(i) == key => return false,
                _ => i = (i + 1) & self.mask,
            }
        }
    }

    #[inline]
    fn slot(&self, i: usize) -> &[u8] {
        &self.slots[i * self.key_width..(i + 1) * self.key_width]
    }

    pub fn contains(&self, key: &[u8]) -> Result<bool, DictionaryError> {
        if self.key_count == 0 {
            return Ok(false);
        }
        if key.len() != self.key_width {
            return Err(DictionaryError::WidthMismatch {
                expected: self.key_width,
                actual: key.len(),
            });
        }
        let h = hash_key(key);
        let tag = 0x80 | (h >> 57) as u8;
        let mut i = h as usize & self.mask;
        loop {
            match self.ctrl[i] {
                EMPTY => return Ok(false),
                c if c == tag && self.slot(i) == key => return Ok(true),
                _ => i = (i + 1) & self.mask,
            }
        }
    }

    pub fn key_count(&self) -> u64 {
        self.key_count
    }

    pub fn key_width(&self) -> usize {
        self.key_width
    }

    pub fn capacity(&self) -> usize {
        self.ctrl.len()
    }

    /// Full backing storage: control bytes plus inline key slots, plus the
    /// fixed header fields.
    pub fn size_bytes(&self) -> usize {
        HEADER_BYTES + self.ctrl.len() + self.slots.len()
    }
}

// mask, key_count, key_width
const HEADER_BYTES: usize = 8 + 8 + 8;
