//! Spam economics: proof-of-work cost per successful spam conversion.

use serde::Serialize;

use crate::CliError;

pub const SECONDS_PER_YEAR: f64 = 31_536_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EconomicsReport {
    pub pow_seconds_per_message: f64,
    pub messages_per_conversion: f64,
    pub total_seconds_per_conversion: f64,
    pub total_years_per_conversion: f64,
}

pub fn economics(pow_seconds: f64, messages_per_conversion: f64) -> Result<EconomicsReport, CliError> {
    for (name, v) in [("pow-seconds", pow_seconds), ("per-conversion", messages_per_conversion)] {
        if !v.is_finite() || v < 0.0 {
            return Err(CliError::Usage(format!("{name} must be a finite non-negative number, got {v}")));
        }
    }
    let total = pow_seconds * messages_per_conversion;
    Ok(EconomicsReport {
        pow_seconds_per_message: pow_seconds,
        messages_per_conversion,
        total_seconds_per_conversion: total,
        total_years_per_conversion: total / SECONDS_PER_YEAR,
    })
}

/// Messages sent per conversion in an observed campaign.
pub fn messages_per_conversion(messages: f64, conversions: f64) -> Result<f64, CliError> {
    if !(messages.is_finite() && messages >= 0.0) || !(conversions.is_finite() && conversions > 0.0) {
        return Err(CliError::Usage("messages must be >= 0 and conversions > 0".into()));
    }
    Ok(messages / conversions)
}
