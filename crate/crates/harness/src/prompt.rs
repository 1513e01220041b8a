use segbench_core::model::TaskInstance;
use segbench_core::templates::{TemplateError, TemplateSet};

const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Asset ids in attachment order.
    pub attachments: Vec<String>,
}

/// Question, lettered options in stored order, then the answer-format
/// instruction for the task's answer type.
pub fn render_prompt(task: &TaskInstance, templates: &TemplateSet) -> Result<RenderedPrompt, TemplateError> {
    // a missing template is an error even though the question is stored on the task
    templates.question(task.task_type, None)?;
    let mut text = task.prompt_text.clone();
    for (letter, option) in LETTERS.iter().zip(&task.options) {
        text.push_str(&format!("\n{letter}) {}", option.label));
    }
    text.push('\n');
    text.push_str(templates.instruction(task.answer_type));
    Ok(RenderedPrompt { text, attachments: task.image_refs.clone() })
}
