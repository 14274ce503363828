//! Crate-wide error type, tagged with the subsystem that raised it.

use std::fmt;

/// Error carrying the name of the subsystem it originated from. The CLI
/// prints these as `error[<module>]: <message>`.
#[derive(Debug, thiserror::Error)]
pub struct Error {
    pub module: &'static str,
    pub msg: String,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.msg)
    }
}

macro_rules! ctor {
    ($name:ident, $tag:literal) => {
        pub fn $name(msg: impl Into<String>) -> Self {
            Error { module: $tag, msg: msg.into() }
        }
    };
}

impl Error {
    ctor!(scene, "scene_model");
    ctor!(intention, "intention");
    ctor!(nn, "nn_core");
    ctor!(encoder, "encoders");
    ctor!(decoder, "trajectory_decoder");
    ctor!(training, "training");
    ctor!(metrics, "metrics");
    ctor!(simulator, "simulator");
    ctor!(postprocess, "postprocess");
    ctor!(cli, "cli_io");

    pub fn io(module: &'static str, path: &std::path::Path, err: std::io::Error) -> Self {
        Error { module, msg: format!("{}: {}", path.display(), err) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
