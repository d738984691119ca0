use serde_json::{json, Map, Value};

/// A failed run: usage problems exit with 2, domain errors with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { message: String, context: Map<String, Value> },
    #[error(transparent)]
    Domain(#[from] reluplan::Error),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage { message: message.into(), context: Map::new() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            CliError::Domain(_) => 1,
        }
    }

    /// `{code, message, context}` on one line.
    pub fn record(&self, subcommand: Option<&str>) -> String {
        let (code, mut context) = match self {
            CliError::Usage { context, .. } => ("usage", context.clone()),
            CliError::Domain(e) => (e.code(), Map::new()),
        };
        if let Some(s) = subcommand {
            context.insert("subcommand".into(), Value::from(s));
        }
        json!({ "code": code, "message": self.to_string(), "context": context }).to_string()
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        if let CliError::Usage { context, .. } = &mut self {
            context.insert(key.into(), value.into());
        }
        self
    }
}

pub type CliResult<T> = Result<T, CliError>;
