//! Action grammar shared by the three supported action spaces.
//!
//! Actions target screen elements through their numeric Set-of-Mark label,
//! never through raw pixel coordinates. The JSON form is
//! `{"action_type": ..., "id": ..., "text": ..., "direction": ...}` with only
//! the fields the action type carries.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// The benchmark grammar an episode is played under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Aitw,
    GuiOdyssey,
    #[serde(rename = "mind2web")]
    Mind2Web,
}

impl ActionSpace {
    pub const ALL: [ActionSpace; 3] = [ActionSpace::Aitw, ActionSpace::GuiOdyssey, ActionSpace::Mind2Web];

    pub fn name(self) -> &'static str {
        match self {
            ActionSpace::Aitw => "aitw",
            ActionSpace::GuiOdyssey => "gui_odyssey",
            ActionSpace::Mind2Web => "mind2web",
        }
    }

    /// Action types this space accepts, in listing order.
    pub fn allowed_types(self) -> &'static [ActionType] {
        use ActionType::*;
        match self {
            ActionSpace::Aitw => &[Click, Type, NavigateHome, NavigateBack, Enter, Scroll, TaskComplete],
            ActionSpace::GuiOdyssey => &[Click, Longpress, Type, NavigateHome, NavigateBack, Scroll],
            ActionSpace::Mind2Web => &[Click, Type],
        }
    }

    pub fn allows(self, t: ActionType) -> bool {
        self.allowed_types().contains(&t)
    }

    /// Whether the space has an explicit `enter` action. Spaces without one
    /// commit typed text immediately.
    pub fn has_enter(self) -> bool {
        self.allows(ActionType::Enter)
    }

    /// Whether episodes end by the agent declaring completion.
    pub fn has_task_complete(self) -> bool {
        self.allows(ActionType::TaskComplete)
    }

    /// Whether typing must name its target element.
    pub fn type_requires_target(self) -> bool {
        matches!(self, ActionSpace::Mind2Web)
    }
}

impl fmt::Display for ActionSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionSpace {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionSpace::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| ActionError::UnknownSpace(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Click,
    Longpress,
    Type,
    NavigateHome,
    NavigateBack,
    Enter,
    Scroll,
    TaskComplete,
}

impl ActionType {
    pub const ALL: [ActionType; 8] = [
        ActionType::Click,
        ActionType::Longpress,
        ActionType::Type,
        ActionType::NavigateHome,
        ActionType::NavigateBack,
        ActionType::Enter,
        ActionType::Scroll,
        ActionType::TaskComplete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionType::Click => "click",
            ActionType::Longpress => "longpress",
            ActionType::Type => "type",
            ActionType::NavigateHome => "navigate_home",
            ActionType::NavigateBack => "navigate_back",
            ActionType::Enter => "enter",
            ActionType::Scroll => "scroll",
            ActionType::TaskComplete => "task_complete",
        }
    }

    /// Position in [`ActionType::ALL`]; used as a one-hot index.
    pub fn index(self) -> usize {
        ActionType::ALL.iter().position(|t| *t == self).unwrap_or(0)
    }

    pub fn is_payload_free(self) -> bool {
        matches!(
            self,
            ActionType::NavigateHome | ActionType::NavigateBack | ActionType::Enter | ActionType::TaskComplete
        )
    }

    pub fn targets_element(self) -> bool {
        matches!(self, ActionType::Click | ActionType::Longpress)
    }

    /// One-line description used when listing a space's actions in prompts.
    pub fn usage(self) -> &'static str {
        match self {
            ActionType::Click => r#"click: tap the element with the given numeric id, {"action_type": "click", "id": <numeric id on the screen>}"#,
            ActionType::Longpress => r#"longpress: press and hold the element with the given numeric id, {"action_type": "longpress", "id": <numeric id on the screen>}"#,
            ActionType::Type => r#"type: enter text into the focused field, {"action_type": "type", "text": <text>}"#,
            ActionType::NavigateHome => r#"navigate_home: go to the home screen, {"action_type": "navigate_home"}"#,
            ActionType::NavigateBack => r#"navigate_back: return to the previous screen, {"action_type": "navigate_back"}"#,
            ActionType::Enter => r#"enter: press the enter key, {"action_type": "enter"}"#,
            ActionType::Scroll => r#"scroll: scroll the screen, {"action_type": "scroll", "direction": <up|down|left|right>}"#,
            ActionType::TaskComplete => r#"task_complete: declare the task finished, {"action_type": "task_complete"}"#,
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionType {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| ActionError::UnknownActionType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| ActionError::BadField { field: "direction", reason: format!("unknown direction {s:?}") })
    }
}

/// One agent action. Field order is the canonical JSON key order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub action_type: ActionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
}

impl Action {
    pub fn simple(action_type: ActionType) -> Self {
        Action { action_type, id: None, text: None, direction: None }
    }

    pub fn click(id: u32) -> Self {
        Action { id: Some(id), ..Action::simple(ActionType::Click) }
    }

    pub fn longpress(id: u32) -> Self {
        Action { id: Some(id), ..Action::simple(ActionType::Longpress) }
    }

    pub fn type_text(text: impl Into<String>) -> Self {
        Action { text: Some(text.into()), ..Action::simple(ActionType::Type) }
    }

    /// Typing into a named element (the Mind2Web form).
    pub fn type_into(id: u32, text: impl Into<String>) -> Self {
        Action { id: Some(id), text: Some(text.into()), ..Action::simple(ActionType::Type) }
    }

    pub fn scroll(direction: Direction) -> Self {
        Action { direction: Some(direction), ..Action::simple(ActionType::Scroll) }
    }

    /// Short human-readable form, e.g. `click 5`, `type 'walmart'`, `scroll down`.
    pub fn short(&self) -> String {
        let mut out = self.action_type.name().to_string();
        if let Some(id) = self.id {
            out.push_str(&format!(" {id}"));
        }
        if let Some(text) = &self.text {
            out.push_str(&format!(" '{text}'"));
        }
        if let Some(d) = self.direction {
            out.push(' ');
            out.push_str(d.name());
        }
        out
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_action(self))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("malformed action JSON: {0}")]
    Malformed(String),
    #[error("action JSON must be an object")]
    NotAnObject,
    #[error("missing action_type")]
    MissingActionType,
    #[error("unknown action_type {0:?}")]
    UnknownActionType(String),
    #[error("action_type {action_type} is not available in the {space} action space")]
    NotInSpace { action_type: ActionType, space: ActionSpace },
    #[error("unknown action space {0:?}")]
    UnknownSpace(String),
    #[error("unexpected key {0:?}")]
    UnexpectedKey(String),
    #[error("invalid {field}: {reason}")]
    BadField { field: &'static str, reason: String },
    #[error("invalid action: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A single broken invariant found by [`validate_action`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    TypeNotInSpace(ActionType),
    MissingId,
    MissingText,
    MissingDirection,
    /// Mind2Web typing must name the element it types into.
    MissingTargetId,
    ForbiddenField(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TypeNotInSpace(t) => write!(f, "action_type {t} not in space"),
            Violation::MissingId => f.write_str("missing id"),
            Violation::MissingText => f.write_str("missing text"),
            Violation::MissingDirection => f.write_str("missing direction"),
            Violation::MissingTargetId => f.write_str("mind2web type requires target id"),
            Violation::ForbiddenField(name) => write!(f, "field {name} not allowed for this action_type"),
        }
    }
}

/// Checks every payload invariant of `a` under `space`. Never fails; an
/// empty list means the action is valid.
pub fn validate_action(a: &Action, space: ActionSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    if !space.allows(a.action_type) {
        out.push(Violation::TypeNotInSpace(a.action_type));
    }
    let (id, text, direction) = (a.id.is_some(), a.text.is_some(), a.direction.is_some());
    match a.action_type {
        ActionType::Click | ActionType::Longpress => {
            if !id {
                out.push(Violation::MissingId);
            }
            if text {
                out.push(Violation::ForbiddenField("text"));
            }
            if direction {
                out.push(Violation::ForbiddenField("direction"));
            }
        }
        ActionType::Type => {
            if !text {
                out.push(Violation::MissingText);
            }
            if space.type_requires_target() {
                if !id {
                    out.push(Violation::MissingTargetId);
                }
            } else if id {
                out.push(Violation::ForbiddenField("id"));
            }
            if direction {
                out.push(Violation::ForbiddenField("direction"));
            }
        }
        ActionType::Scroll => {
            if !direction {
                out.push(Violation::MissingDirection);
            }
            if id {
                out.push(Violation::ForbiddenField("id"));
            }
            if text {
                out.push(Violation::ForbiddenField("text"));
            }
        }
        ActionType::NavigateHome | ActionType::NavigateBack | ActionType::Enter | ActionType::TaskComplete => {
            if id {
                out.push(Violation::ForbiddenField("id"));
            }
            if text {
                out.push(Violation::ForbiddenField("text"));
            }
            if direction {
                out.push(Violation::ForbiddenField("direction"));
            }
        }
    }
    out
}

/// Parses one action object and validates it against `space`.
///
/// Parsing is strict: keys other than `action_type`, `id`, `text` and
/// `direction` are rejected, as are payload fields the action type does not
/// carry.
pub fn parse_action(text: &str, space: ActionSpace) -> Result<Action, ActionError> {
    let value: Value = serde_json::from_str(text.trim()).map_err(|e| ActionError::Malformed(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(ActionError::NotAnObject);
    };
    action_from_map(&map, space)
}

pub(crate) fn action_from_map(map: &Map<String, Value>, space: ActionSpace) -> Result<Action, ActionError> {
    for key in map.keys() {
        if !matches!(key.as_str(), "action_type" | "id" | "text" | "direction") {
            return Err(ActionError::UnexpectedKey(key.clone()));
        }
    }
    let action_type = match map.get("action_type") {
        None | Some(Value::Null) => return Err(ActionError::MissingActionType),
        Some(Value::String(s)) => s.parse::<ActionType>()?,
        Some(other) => {
            return Err(ActionError::BadField { field: "action_type", reason: format!("expected string, got {other}") })
        }
    };
    if !space.allows(action_type) {
        return Err(ActionError::NotInSpace { action_type, space });
    }
    let id = match map.get("id") {
        None => None,
        Some(Value::Number(n)) => match n.as_u64() {
            Some(v) if v <= u64::from(u32::MAX) => Some(v as u32),
            _ => return Err(ActionError::BadField { field: "id", reason: format!("expected non-negative integer, got {n}") }),
        },
        Some(other) => return Err(ActionError::BadField { field: "id", reason: format!("expected integer, got {other}") }),
    };
    let text = match map.get("text") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(ActionError::BadField { field: "text", reason: format!("expected string, got {other}") }),
    };
    let direction = match map.get("direction") {
        None => None,
        Some(Value::String(s)) => Some(s.parse::<Direction>()?),
        Some(other) => {
            return Err(ActionError::BadField { field: "direction", reason: format!("expected string, got {other}") })
        }
    };
    let action = Action { action_type, id, text, direction };
    let violations = validate_action(&action, space);
    if violations.is_empty() {
        Ok(action)
    } else {
        Err(ActionError::Invalid(violations))
    }
}

/// Canonical compact JSON: keys in the order action_type, id, text,
/// direction, present fields only.
pub fn serialize_action(a: &Action) -> String {
    serde_json::to_string(a).expect("action serialization is infallible")
}
