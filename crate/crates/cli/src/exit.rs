use std::fmt;

/// Failures raised by the CLI itself, tagged with their exit class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

pub const OK: i32 = 0;
pub const USAGE: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

/// 2 for usage and config problems, 3 for unreadable or malformed data,
/// 4 for numeric failures during training or evaluation.
pub fn code_for(err: &anyhow::Error) -> i32 {
    use funcreg_core::Error as E;
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => USAGE,
                Failure::Data(_) => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Numeric(_) | E::Domain(_) => NUMERIC,
                E::Config(_) | E::Contract(_) | E::State(_) => USAGE,
                E::Shape { .. } | E::Index(_) | E::Parse { .. } | E::Io(_) => DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return DATA;
        }
    }
    USAGE
}
