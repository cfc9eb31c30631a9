// SPDX-License-Identifier: Apache-2.0

//! The `pct` command-line tool.

pub mod cli;
pub mod commands;
pub mod config;
pub mod service;

use std::fmt;

use anyhow::Result;
use pct_core::chunking::ChunkingError;
use pct_core::datagen::DatagenError;
use pct_core::encoding::EncodingError;
use pct_core::oracle::OracleError;
use pct_core::psi::PsiError;

use crate::cli::{Cli, Command};

/// Bad user input; the process exits with status 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => commands::cmd_gen(a),
        Command::Build(a) => commands::cmd_build(a),
        Command::Query(a) => commands::cmd_query(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Bench(a) => commands::cmd_bench(a),
        Command::Serve(a) => commands::cmd_serve(a),
        Command::Client(a) => commands::cmd_client(a),
    }
}

/// 2 for invalid input or parameters, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let invalid = e.chain().any(|c| {
        c.is::<Invalid>()
            || c.is::<EncodingError>()
            || c.is::<PsiError>()
            || matches!(
                c.downcast_ref(),
                Some(DatagenError::InvalidConfig(_) | DatagenError::Malformed { .. })
            )
            || matches!(
                c.downcast_ref(),
                Some(
                    ChunkingError::Manifest { .. }
                        | ChunkingError::Encoding { .. }
                        | ChunkingError::EmptyDataset
                        | ChunkingError::ZeroChunks
                        | ChunkingError::BudgetTooSmall { .. }
                        | ChunkingError::WidthMismatch { .. }
                )
            )
            || matches!(
                c.downcast_ref(),
                Some(OracleError::Encoding { .. } | OracleError::ServerEncoding { .. })
            )
    });
    if invalid {
        2
    } else {
        1
    }
}
