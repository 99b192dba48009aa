//! System prompt assembly.
//!
//! Instruction templates are versioned text assets, one per language,
//! embedded at build time and overridable through a template directory.
//! The `{{tools}}` placeholder is replaced with the live tool catalog so
//! runtime-registered tools show up in the prompt automatically.

use std::path::Path;

use crate::toolbox::Toolbox;
use crate::types::Language;

use super::SessionError;

const TEMPLATE_EN: &str = include_str!("../../assets/instructions_en.txt");
const TEMPLATE_ZH: &str = include_str!("../../assets/instructions_zh.txt");

pub const TOOLS_PLACEHOLDER: &str = "{{tools}}";

/// File name a template directory must provide for a language.
pub fn template_file_name(language: Language) -> &'static str {
    match language {
        Language::English => "instructions_en.txt",
        Language::Chinese => "instructions_zh.txt",
    }
}

/// Build the system message for a session in the given language.
pub fn system_prompt(
    language: Language,
    toolbox: &Toolbox,
    template_dir: Option<&Path>,
) -> Result<String, SessionError> {
    let template: String = match template_dir {
        Some(dir) => {
            let path = dir.join(template_file_name(language));
            std::fs::read_to_string(&path)
                .map_err(|e| SessionError::MissingTemplate(format!("{}: {e}", path.display())))?
        }
        None => match language {
            Language::English => TEMPLATE_EN,
            Language::Chinese => TEMPLATE_ZH,
        }
        .to_string(),
    };
    if !template.contains(TOOLS_PLACEHOLDER) {
        return Err(SessionError::MissingTemplate(format!(
            "template for {} lacks the {TOOLS_PLACEHOLDER} placeholder",
            template_file_name(language)
        )));
    }
    Ok(template.replace(TOOLS_PLACEHOLDER, toolbox.render_catalog().trim_end()))
}
