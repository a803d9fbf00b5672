//! Step-level action matching.
//!
//! A predicted action matches the ground truth when the action types agree
//! and the payload agrees:
//!
//! * click/longpress: the predicted element's center lies within
//!   `click_distance_fraction` of the screen diagonal from the ground-truth
//!   point, or the ground-truth point falls inside the predicted box scaled
//!   by `box_expand_factor`, or the label is one of the acceptable targets;
//! * scroll: same direction;
//! * type: same text after normalization (and same element when targets are
//!   listed);
//! * everything else: type equality alone.
//!
//! The same judge labels self-play data with binary rewards and scores
//! static evaluation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionSpace, ActionType, Direction};
use crate::reward::{RewardSample, SampleSource};
use crate::som::{expand_box, resolve_label, BBox, LabeledScreen, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("predicted label {0} does not resolve on the screen")]
    UnresolvedLabel(u32),
    #[error("ground-truth click has neither a point nor acceptable targets")]
    NoClickTarget,
    #[error("predicted {pred} steps but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("invalid match config: {0}")]
    BadConfig(String),
}

/// The annotated action for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAction {
    pub action_type: ActionType,
    /// Click target in screen pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Acceptable element labels (Mind2Web-style targets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_candidates: Option<BTreeSet<u32>>,
    /// Detected box around the ground-truth target, when known.
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "box")]
    pub gt_box: Option<BBox>,
}

impl GroundTruthAction {
    pub fn new(action_type: ActionType) -> Self {
        GroundTruthAction {
            action_type,
            point: None,
            text: None,
            direction: None,
            element_candidates: None,
            gt_box: None,
        }
    }

    pub fn click_at(x: f64, y: f64) -> Self {
        GroundTruthAction { point: Some(Point::new(x, y)), ..GroundTruthAction::new(ActionType::Click) }
    }

    pub fn with_candidates(mut self, labels: impl IntoIterator<Item = u32>) -> Self {
        self.element_candidates = Some(labels.into_iter().collect());
        self
    }

    /// Converts an action taken on `screen` into its own ground truth: the
    /// target's center and box, and the label itself as the acceptable target.
    /// An id that does not resolve yields only the candidate label.
    pub fn from_action(a: &Action, screen: &LabeledScreen) -> Self {
        let mut gt = GroundTruthAction::new(a.action_type);
        gt.text = a.text.clone();
        gt.direction = a.direction;
        if let Some(id) = a.id {
            if let Some(e) = screen.element(id) {
                if a.action_type.targets_element() {
                    gt.point = Some(e.anchor);
                    gt.gt_box = Some(e.bbox);
                }
            }
            gt.element_candidates = Some(BTreeSet::from([id]));
        }
        gt
    }

    /// The ground truth in the form a benchmark of `space` annotates it:
    /// coordinates for AitW, acceptable targets for Mind2Web, both for GUI
    /// Odyssey replay. `accept` adds further acceptable labels.
    pub fn for_space(a: &Action, screen: &LabeledScreen, space: ActionSpace, accept: &[u32]) -> Self {
        let mut gt = GroundTruthAction::from_action(a, screen);
        match space {
            ActionSpace::Aitw => {
                if a.action_type.targets_element() {
                    gt.element_candidates = None;
                }
            }
            ActionSpace::GuiOdyssey => {}
            ActionSpace::Mind2Web => {
                gt.point = None;
                gt.gt_box = None;
            }
        }
        if !accept.is_empty() {
            gt.element_candidates.get_or_insert_with(BTreeSet::new).extend(accept.iter().copied());
        }
        gt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNorm {
    #[default]
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub click_distance_fraction: f64,
    pub box_expand_factor: f64,
    pub distance_norm: DistanceNorm,
    /// Trim, collapse whitespace and case-fold typed text before comparing.
    pub normalize_text: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            click_distance_fraction: 0.14,
            box_expand_factor: 2.4,
            distance_norm: DistanceNorm::Diagonal,
            normalize_text: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.click_distance_fraction > 0.0 && self.click_distance_fraction < 1.0) {
            return Err(MatchError::BadConfig(format!(
                "click_distance_fraction must be in (0, 1), got {}",
                self.click_distance_fraction
            )));
        }
        if !(self.box_expand_factor >= 1.0 && self.box_expand_factor.is_finite()) {
            return Err(MatchError::BadConfig(format!("box_expand_factor must be >= 1, got {}", self.box_expand_factor)));
        }
        Ok(())
    }

    fn text_eq(&self, a: &str, b: &str) -> bool {
        if self.normalize_text {
            normalize_text(a) == normalize_text(b)
        } else {
            a == b
        }
    }
}

pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Click rule. See the module docs for the three accepting conditions; the
/// symmetric box rule also accepts when the predicted center falls inside the
/// expanded ground-truth box.
pub fn match_click(pred_id: u32, gt: &GroundTruthAction, screen: &LabeledScreen, cfg: &MatchConfig) -> Result<bool, MatchError> {
    let pred_box = resolve_label(screen, pred_id).map_err(|_| MatchError::UnresolvedLabel(pred_id))?;
    if gt.point.is_none() && gt.element_candidates.is_none() {
        return Err(MatchError::NoClickTarget);
    }
    if let Some(cands) = &gt.element_candidates {
        if cands.contains(&pred_id) {
            return Ok(true);
        }
    }
    let Some(point) = gt.point else {
        return Ok(false);
    };
    let dims = screen.dims();
    let center = pred_box.center();
    let norm = match cfg.distance_norm {
        DistanceNorm::Diagonal => dims.diagonal(),
    };
    if center.distance(point) / norm <= cfg.click_distance_fraction {
        return Ok(true);
    }
    if expand_box(&pred_box, cfg.box_expand_factor, dims).contains_point(point) {
        return Ok(true);
    }
    if let Some(gt_box) = &gt.gt_box {
        if expand_box(gt_box, cfg.box_expand_factor, dims).contains_point(center) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Whether `pred` matches `gt` on `screen`. Unresolvable labels never match.
pub fn match_action(pred: &Action, gt: &GroundTruthAction, screen: &LabeledScreen, cfg: &MatchConfig) -> bool {
    if pred.action_type != gt.action_type {
        return false;
    }
    match pred.action_type {
        ActionType::Click | ActionType::Longpress => match pred.id {
            Some(id) => match_click(id, gt, screen, cfg).unwrap_or(false),
            None => false,
        },
        ActionType::Scroll => pred.direction.is_some() && pred.direction == gt.direction,
        ActionType::Type => {
            let text_ok = match (&pred.text, &gt.text) {
                (Some(p), Some(g)) => cfg.text_eq(p, g),
                _ => false,
            };
            text_ok && element_ok(pred, gt)
        }
        ActionType::NavigateHome | ActionType::NavigateBack | ActionType::Enter | ActionType::TaskComplete => true,
    }
}

/// Element condition for typing into a target: when the ground truth lists
/// acceptable targets, a predicted id must be one of them.
fn element_ok(pred: &Action, gt: &GroundTruthAction) -> bool {
    match (&gt.element_candidates, pred.id) {
        (Some(cands), Some(id)) => cands.contains(&id),
        (Some(_), None) => false,
        (None, _) => true,
    }
}

/// Whether the predicted action selects an acceptable element, ignoring
/// the operation. Actions without a target never match.
pub fn element_matches(pred: &Action, gt: &GroundTruthAction) -> bool {
    match (&gt.element_candidates, pred.id) {
        (Some(cands), Some(id)) => cands.contains(&id),
        _ => false,
    }
}

/// A predicted step ready for labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredStep {
    pub summary: String,
    pub screen: LabeledScreen,
    pub action: Action,
}

/// Labels each predicted step 1.0 if it matches the aligned ground truth and
/// 0.0 otherwise.
pub fn annotate_trajectory(
    instruction: &str,
    pred_steps: &[PredStep],
    gt_steps: &[GroundTruthAction],
    cfg: &MatchConfig,
) -> Result<Vec<RewardSample>, MatchError> {
    if pred_steps.len() != gt_steps.len() {
        return Err(MatchError::LengthMismatch { pred: pred_steps.len(), gt: gt_steps.len() });
    }
    Ok(pred_steps
        .iter()
        .zip(gt_steps)
        .enumerate()
        .map(|(i, (p, gt))| RewardSample {
            instruction: instruction.to_string(),
            summary: p.summary.clone(),
            screen: p.screen.clone(),
            action: p.action.clone(),
            reward: if match_action(&p.action, gt, &p.screen, cfg) { 1.0 } else { 0.0 },
            source: SampleSource::SelfPlay,
            step_index: i,
        })
        .collect())
}

/// Human demonstrations are correct by default: every step gets reward 1.0.
pub fn annotate_human_demo(instruction: &str, steps: &[PredStep]) -> Vec<RewardSample> {
    steps
        .iter()
        .enumerate()
        .map(|(i, p)| RewardSample {
            instruction: instruction.to_string(),
            summary: p.summary.clone(),
            screen: p.screen.clone(),
            action: p.action.clone(),
            reward: 1.0,
            source: SampleSource::HumanDemo,
            step_index: i,
        })
        .collect()
}
