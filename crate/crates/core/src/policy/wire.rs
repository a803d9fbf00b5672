use super::{parse_topk_response, render_inference_prompt, PolicyBackend, PolicyError, PolicyReply, PolicyRequest, PromptTemplate};
use crate::wire::{ChatClient, WireConfig};

/// Remote policy over a chat-completions endpoint.
pub struct WirePolicy {
    client: ChatClient,
    template: PromptTemplate,
}

impl WirePolicy {
    pub fn new(cfg: WireConfig, template: PromptTemplate) -> Self {
        WirePolicy { client: ChatClient::new(cfg), template }
    }

    /// Full user turn: the inference prompt, the labeled screen and any
    /// lessons from earlier attempts.
    pub fn render(&self, req: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let mut prompt = render_inference_prompt(&self.template, req.task, req.summary, req.task.action_space, req.k)?;
        prompt.push_str("\nScreen elements:\n");
        prompt.push_str(&req.screen.describe());
        prompt.push('\n');
        if !req.reflections.is_empty() {
            prompt.push_str("\nLessons from earlier attempts at this task:\n");
            for r in req.reflections {
                prompt.push_str(&format!("- (round {}) {}\n", r.round, r.text));
            }
        }
        Ok(prompt)
    }
}

impl PolicyBackend for WirePolicy {
    fn propose(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        let prompt = self.render(req)?;
        let reply = self.client.complete(&prompt, req.screen.image.as_deref())?;
        match parse_topk_response(&reply.text, req.task.action_space, req.k) {
            Ok(candidates) => Ok(PolicyReply { candidates, usage: reply.usage }),
            Err(source) => Err(PolicyError::Unparseable { source, usage: reply.usage }),
        }
    }
}
