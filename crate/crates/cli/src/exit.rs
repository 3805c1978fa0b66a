//! Process exit codes.
//!
//! 0 success, 1 unexpected failure, 2 bad input or configuration,
//! 3 filesystem or checkpoint trouble, 4 numerical failure.

use std::fmt;

pub const FAILURE: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERIC: u8 = 4;

/// An error raised by the CLI itself with a fixed exit code.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub msg: String,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Coded {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Coded {
        code: USAGE,
        msg: msg.into(),
    }
    .into()
}

pub fn io(msg: impl Into<String>) -> anyhow::Error {
    Coded {
        code: IO,
        msg: msg.into(),
    }
    .into()
}

pub fn numeric(msg: impl Into<String>) -> anyhow::Error {
    Coded {
        code: NUMERIC,
        msg: msg.into(),
    }
    .into()
}

fn library_code(e: &llast::Error) -> u8 {
    use llast::Error::*;
    match e {
        Config(_) | Parse { .. } | Registry(_) | Length { .. } | TooShort { .. } | Shape(_) | DegenerateBatch(_) => {
            USAGE
        }
        Io { .. } | Integrity(_) | Wav(_) => IO,
        NonFinite(_) => NUMERIC,
        _ => FAILURE,
    }
}

/// Exit code for the first recognizable error in the chain.
pub fn code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
        if let Some(l) = cause.downcast_ref::<llast::Error>() {
            return library_code(l);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return IO;
        }
    }
    FAILURE
}
