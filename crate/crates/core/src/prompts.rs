//! Prompt templates, one per gateway role.
//!
//! Templates use `{name}` placeholders. The built-in set is compiled from
//! `crates/core/prompts/`; a deployment can point at another directory to
//! override any of them.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use crate::gateway::RoleTag;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<RoleTag, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let builtin = [
            (RoleTag::Filter, include_str!("../prompts/filter.txt")),
            (RoleTag::Judge, include_str!("../prompts/judge.txt")),
            (RoleTag::Responder, include_str!("../prompts/responder.txt")),
            (RoleTag::Facilitator, include_str!("../prompts/facilitator.txt")),
            (RoleTag::RubricOpt, include_str!("../prompts/rubric_opt.txt")),
        ];
        PromptSet { templates: builtin.into_iter().map(|(r, t)| (r, t.to_string())).collect() }
    }
}

impl PromptSet {
    /// Loads `<role>.txt` files from `dir`; roles without a file keep the
    /// built-in template.
    pub fn load_dir(dir: impl AsRef<Path>) -> io::Result<Self> {
        let mut set = PromptSet::default();
        for role in RoleTag::ALL {
            let path = dir.as_ref().join(format!("{}.txt", role.as_str()));
            match fs::read_to_string(&path) {
                Ok(text) => set.set(role, text),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(set)
    }

    pub fn get(&self, role: RoleTag) -> &str {
        self.templates.get(&role).map(String::as_str).unwrap_or("")
    }

    pub fn set(&mut self, role: RoleTag, template: impl Into<String>) {
        self.templates.insert(role, template.into());
    }

    pub fn render(&self, role: RoleTag, vars: &[(&str, &str)]) -> String {
        render(self.get(role), vars)
    }
}

/// Single-pass substitution: text inserted for one placeholder is never
/// scanned again, and unknown `{names}` are left as written.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let value = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match value {
            Some((close, v)) => {
                out.push_str(v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
