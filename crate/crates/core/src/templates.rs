//! Versioned prompt templates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{AnswerType, TaskType};

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instructions {
    pub binary: String,
    pub count: String,
    pub color: String,
    pub quiz4: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: String,
    pub instructions: Instructions,
    pub templates: BTreeMap<TaskType, Template>,
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("no template for task type {0}")]
    Missing(TaskType),
}

impl TemplateSet {
    pub fn from_toml(text: &str) -> Result<Self, TemplateError> {
        Ok(toml::from_str(text)?)
    }

    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }

    pub fn question(&self, task_type: TaskType, class: Option<&str>) -> Result<String, TemplateError> {
        let t = self.templates.get(&task_type).ok_or(TemplateError::Missing(task_type))?;
        Ok(match class {
            Some(c) => t.question.replace("{class}", c),
            None => t.question.clone(),
        })
    }

    pub fn instruction(&self, answer_type: AnswerType) -> &str {
        match answer_type {
            AnswerType::Binary => &self.instructions.binary,
            AnswerType::Count => &self.instructions.count,
            AnswerType::Color => &self.instructions.color,
            AnswerType::Quiz4 => &self.instructions.quiz4,
        }
    }
}
