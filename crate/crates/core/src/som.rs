//! Set-of-Mark labeling over element bounding boxes.
//!
//! Screens arrive as a list of element boxes; this module numbers them,
//! anchors each label at its box center and records which labels win when
//! boxes overlap. Containment keeps both labels. Partial overlap gives render
//! priority to the smaller box (lower label on equal area).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SomError {
    #[error("degenerate box [{x0}, {y0}, {x1}, {y1}]: width and height must be positive")]
    Degenerate { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("box [{x0}, {y0}, {x1}, {y1}] has non-finite coordinates")]
    NonFinite { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("box {index} lies outside the {width}x{height} screen")]
    OffScreen { index: usize, width: f64, height: f64 },
    #[error("screen dimensions must be positive, got {width}x{height}")]
    BadScreen { width: f64, height: f64 },
    #[error("unknown label {0}")]
    UnknownLabel(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned element box in screen pixels, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = SomError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, SomError> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(SomError::NonFinite { x0, y0, x1, y1 });
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(SomError::Degenerate { x0, y0, x1, y1 });
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Closed-interval membership: points on the edge are inside.
    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Scales width and height by `factor` about the center, without clamping.
    pub fn scaled(&self, factor: f64) -> BBox {
        let c = self.center();
        let hw = self.width() / 2.0 * factor;
        let hh = self.height() / 2.0 * factor;
        BBox { x0: c.x - hw, y0: c.y - hh, x1: c.x + hw, y1: c.y + hh }
    }

    /// Intersects with the screen rectangle. `None` if nothing remains.
    pub fn clamped(&self, dims: ScreenDims) -> Option<BBox> {
        BBox::new(self.x0.max(0.0), self.y0.max(0.0), self.x1.min(dims.width), self.y1.min(dims.height)).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenDims {
    pub width: f64,
    pub height: f64,
}

impl ScreenDims {
    pub fn new(width: f64, height: f64) -> Self {
        ScreenDims { width, height }
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

/// Scales `b` by `factor` per linear dimension about its center and clamps
/// the result to the screen. `factor` must be positive; a box that would
/// clamp away entirely is returned unclamped.
pub fn expand_box(b: &BBox, factor: f64, screen: ScreenDims) -> BBox {
    assert!(factor > 0.0 && factor.is_finite(), "expansion factor must be positive, got {factor}");
    let scaled = b.scaled(factor);
    scaled.clamped(screen).unwrap_or(scaled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub label: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub anchor: Point,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Labels this element's mark is drawn over when the two boxes overlap.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub priority_over: Vec<u32>,
}

impl Element {
    pub fn has_render_priority(&self) -> bool {
        !self.priority_over.is_empty()
    }
}

/// A screen with numbered elements; this is the observable form of a GUI state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScreen {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub screen_id: String,
    pub width: f64,
    pub height: f64,
    pub elements: Vec<Element>,
    /// Optional base64 screenshot passed through to remote models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

pub type ScreenState = LabeledScreen;

impl LabeledScreen {
    pub fn dims(&self) -> ScreenDims {
        ScreenDims::new(self.width, self.height)
    }

    pub fn element(&self, label: u32) -> Option<&Element> {
        self.elements.iter().find(|e| e.label == label)
    }

    /// Element name, if the element exists and has one.
    pub fn name_of(&self, label: u32) -> Option<&str> {
        self.element(label).and_then(|e| e.name.as_deref())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.screen_id = id.into();
        self
    }

    /// Text rendering used in prompts: one element per line.
    pub fn describe(&self) -> String {
        let mut out = format!("screen {}x{}", self.width, self.height);
        if !self.screen_id.is_empty() {
            out.push_str(&format!(" ({})", self.screen_id));
        }
        for e in &self.elements {
            let b = e.bbox;
            out.push_str(&format!(
                "\n[{}] {} box=({:.0},{:.0},{:.0},{:.0})",
                e.label,
                e.name.as_deref().unwrap_or("-"),
                b.x0,
                b.y0,
                b.x1,
                b.y1
            ));
        }
        out
    }
}

/// Looks up the box carrying label `id`.
pub fn resolve_label(screen: &LabeledScreen, id: u32) -> Result<BBox, SomError> {
    screen.element(id).map(|e| e.bbox).ok_or(SomError::UnknownLabel(id))
}

/// Numbers `boxes` 0..n-1 in input order and resolves overlap priority.
///
/// Boxes are clamped to the screen; a box that leaves nothing on screen is
/// an error.
pub fn assign_labels(boxes: &[BBox], width: f64, height: f64) -> Result<LabeledScreen, SomError> {
    assign_named(boxes.iter().map(|b| (*b, None)).collect(), width, height)
}

pub(crate) fn assign_named(boxes: Vec<(BBox, Option<String>)>, width: f64, height: f64) -> Result<LabeledScreen, SomError> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(SomError::BadScreen { width, height });
    }
    let dims = ScreenDims::new(width, height);
    let mut elements = Vec::with_capacity(boxes.len());
    for (index, (b, name)) in boxes.into_iter().enumerate() {
        let bbox = b.clamped(dims).ok_or(SomError::OffScreen { index, width, height })?;
        elements.push(Element { label: index as u32, bbox, anchor: bbox.center(), name, priority_over: Vec::new() });
    }
    for i in 0..elements.len() {
        for j in (i + 1)..elements.len() {
            let (a, b) = (elements[i].bbox, elements[j].bbox);
            if a.intersection_area(&b) <= 0.0 || a.contains_box(&b) || b.contains_box(&a) {
                continue;
            }
            // ties keep the lower label, which is i
            if b.area() < a.area() {
                let loser = elements[i].label;
                elements[j].priority_over.push(loser);
            } else {
                let loser = elements[j].label;
                elements[i].priority_over.push(loser);
            }
        }
    }
    for e in &mut elements {
        e.priority_over.sort_unstable();
    }
    Ok(LabeledScreen { screen_id: String::new(), width, height, elements, image: None })
}

/// Ingestion form: `{width, height, elements: [{box: [x0,y0,x1,y1], name?}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScreen {
    pub width: f64,
    pub height: f64,
    pub elements: Vec<RawElement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawElement {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl RawScreen {
    pub fn label(&self) -> Result<LabeledScreen, SomError> {
        assign_named(self.elements.iter().map(|e| (e.bbox, e.name.clone())).collect(), self.width, self.height)
    }
}
