//! Ready-made tool extensions that are not part of the standard set.
//!
//! These demonstrate runtime registration: a deployment that needs date
//! arithmetic registers [`calendar_tool`] on its toolbox and the agent can
//! route date questions to it, prompt examples included.

use chrono::NaiveDate;

use crate::action::ToolCall;

use super::{ArgKind, ArgSpec, ToolError, ToolKind, ToolSpec};

pub const TOOL_CALENDAR: &str = "calendar";

/// Spec for a civil-calendar day-difference tool, with the usage examples
/// that get spliced into the agent prompt.
pub fn calendar_spec() -> ToolSpec {
    ToolSpec {
        name: TOOL_CALENDAR.to_string(),
        description: "Count the days between two calendar dates (end minus start)".to_string(),
        kind: ToolKind::Verification,
        args: vec![
            ArgSpec::required("start_date", ArgKind::Text, "start date, YYYY-MM-DD"),
            ArgSpec::required("end_date", ArgKind::Text, "end date, YYYY-MM-DD"),
        ],
        examples: vec![
            "Action: calendar\nAction Input: {\"start_date\": \"2014-02-06\", \"end_date\": \"2014-05-21\"}"
                .to_string(),
            "Action: calendar\nAction Input: {\"start_date\": \"1999-12-31\", \"end_date\": \"2000-01-01\"}"
                .to_string(),
        ],
    }
}

fn parse_date(call: &ToolCall, name: &str) -> Result<NaiveDate, ToolError> {
    let raw = super::text_arg(call, name)?;
    NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d").map_err(|e| {
        ToolError::BadArguments(format!("{name} {raw:?} is not a YYYY-MM-DD date: {e}"))
    })
}

pub fn calendar_executor(call: &ToolCall) -> Result<String, ToolError> {
    let start = parse_date(call, "start_date")?;
    let end = parse_date(call, "end_date")?;
    let days = (end - start).num_days();
    Ok(format!("days between = {days}"))
}

/// Convenience pair for `Toolbox::register`.
pub fn calendar_tool() -> (ToolSpec, impl Fn(&ToolCall) -> Result<String, ToolError>) {
    (calendar_spec(), calendar_executor)
}
