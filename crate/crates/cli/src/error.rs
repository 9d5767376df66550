//! Categorized failures and their process exit codes.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    /// The config file is missing, malformed or inconsistent with the flags.
    Config,
    /// An input file is missing or fails schema validation.
    Input,
    /// A pipeline stage failed, including cache misses under `--replay`.
    Pipeline,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 3,
            Category::Input => 4,
            Category::Pipeline => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "ConfigError",
            Category::Input => "InputError",
            Category::Pipeline => "PipelineError",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(category: Category, source: impl Into<anyhow::Error>) -> Self {
        CliError { category, source: source.into() }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        CliError::new(Category::Config, anyhow::anyhow!("{msg}"))
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        CliError::new(Category::Input, anyhow::anyhow!("{msg}"))
    }

    pub fn pipeline(msg: impl fmt::Display) -> Self {
        CliError::new(Category::Pipeline, anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        self.category.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:#}", self.category.name(), self.source)
    }
}

/// Tags any error with a category.
pub trait Categorize<T> {
    fn or_config(self) -> Result<T, CliError>;
    fn or_input(self) -> Result<T, CliError>;
    fn or_pipeline(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Categorize<T> for Result<T, E> {
    fn or_config(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(Category::Config, e))
    }

    fn or_input(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(Category::Input, e))
    }

    fn or_pipeline(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(Category::Pipeline, e))
    }
}
