//! Command-line orchestration for the crscore metrics.

pub mod commands;
pub mod config;
pub mod output;

use config::ConfigError;
use output::FailureLimitExceeded;

/// Exit code for an error: 1 configuration, 2 data, 3 external service.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(f) = cause.downcast_ref::<FailureLimitExceeded>() {
            return f.exit_code;
        }
        if let Some(e) = cause.downcast_ref::<crscore::Error>() {
            return match e.class() {
                crscore::ErrorClass::Config => 1,
                crscore::ErrorClass::Data => 2,
                crscore::ErrorClass::External => 3,
            };
        }
    }
    2
}
