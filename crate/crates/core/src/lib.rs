// SPDX-License-Identifier: Apache-2.0

pub mod chunking;
pub mod datagen;
pub mod dictionary;
pub mod enclave_sim;
pub mod encoding;
pub mod oracle;
pub mod psi;
