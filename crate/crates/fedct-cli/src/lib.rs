//! Library surface of the experiment driver; the binary is a thin wrapper
//! so integration tests can call commands in-process.

pub mod commands;
pub mod config;

/// Command failures, split by exit code: config/validation errors exit 1,
/// runtime failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Install the global worker pool; 1 forces fully serial execution.
pub fn set_thread_count(threads: Option<usize>) {
    if let Some(n) = threads {
        // Ignore the error when a pool already exists (repeat calls in one
        // process, e.g. under the test harness).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
