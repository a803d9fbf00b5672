use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CandidateSet, PolicyBackend, PolicyError, PolicyReply, PolicyRequest};
use crate::wire::Usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub task_id: String,
    pub step: usize,
    #[serde(flatten)]
    pub candidates: CandidateSet,
}

/// On-disk script: `{"entries": [...], "reflection_entries": [...]}`.
/// Reflection entries replace the plain ones once any reflection is present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default)]
    pub reflection_entries: Vec<ScriptEntry>,
}

/// Deterministic test double returning pre-written candidate sets.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    script: HashMap<(String, usize), CandidateSet>,
    with_reflection: HashMap<(String, usize), CandidateSet>,
}

impl ScriptedPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, task_id: impl Into<String>, step: usize, set: CandidateSet) -> &mut Self {
        self.script.insert((task_id.into(), step), set);
        self
    }

    /// Candidates used instead of the plain script when reflections exist.
    pub fn insert_with_reflection(&mut self, task_id: impl Into<String>, step: usize, set: CandidateSet) -> &mut Self {
        self.with_reflection.insert((task_id.into(), step), set);
        self
    }

    pub fn from_file(file: ScriptFile) -> Self {
        let mut p = ScriptedPolicy::new();
        for e in file.entries {
            p.insert(e.task_id, e.step, e.candidates);
        }
        for e in file.reflection_entries {
            p.insert_with_reflection(e.task_id, e.step, e.candidates);
        }
        p
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ScriptFile =
            serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(ScriptedPolicy::from_file(file))
    }
}

impl PolicyBackend for ScriptedPolicy {
    fn propose(&mut self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        let key = (req.task.id.clone(), req.step_index);
        let found = if req.reflections.is_empty() {
            self.script.get(&key)
        } else {
            self.with_reflection.get(&key).or_else(|| self.script.get(&key))
        };
        found
            .map(|cs| PolicyReply { candidates: cs.clone(), usage: Usage::default() })
            .ok_or(PolicyError::MissingScript { task_id: key.0, step: key.1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{Action, ActionSpace, Direction};
    use crate::policy::Candidate;
    use crate::refine::{CauseVerdict, ReflectionThought};
    use crate::som::assign_labels;
    use crate::trajectory::Task;

    fn set() -> CandidateSet {
        CandidateSet::new(
            3,
            vec![
                Candidate::new(Action::click(5), 0.6),
                Candidate::new(Action::type_text("walmart"), 0.3),
                Candidate::new(Action::scroll(Direction::Up), 0.1),
            ],
        )
        .unwrap()
    }

    #[test]
    fn returns_script_verbatim_or_errors() {
        let task = Task::new("t", "x", ActionSpace::Aitw, "g", 5).unwrap();
        let screen = assign_labels(&[], 10., 10.).unwrap();
        let mut p = ScriptedPolicy::new();
        p.insert("t", 0, set());
        let mut req = PolicyRequest {
            task: &task,
            step_index: 0,
            summary: "",
            screen: &screen,
            k: 3,
            reflections: &[],
            seed: 0,
            round: 1,
            expert: None,
        };
        assert_eq!(p.propose(&req).unwrap().candidates, set());
        req.step_index = 1;
        assert_eq!(p.propose(&req), Err(PolicyError::MissingScript { task_id: "t".into(), step: 1 }));

        let alt = set().truncated(1);
        p.insert_with_reflection("t", 0, alt.clone());
        let thoughts = [ReflectionThought { text: "x".into(), round: 1, verdict_of_previous: CauseVerdict::Unknown }];
        req.step_index = 0;
        req.reflections = &thoughts;
        assert_eq!(p.propose(&req).unwrap().candidates, alt);
    }

    #[test]
    fn file_format() {
        let json = r#"{"entries":[{"task_id":"t","step":0,"k":3,"candidates":[{"action":{"action_type":"click","id":5},"confidence":0.6}]}]}"#;
        let file: ScriptFile = serde_json::from_str(json).unwrap();
        let p = ScriptedPolicy::from_file(file);
        assert_eq!(p.script.len(), 1);
    }
}
