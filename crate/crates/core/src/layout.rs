//! Layout domain types and their continuous encoding.
//!
//! A layout is a fixed-capacity set of slots. Each valid slot holds an element
//! with a category and a normalized `(cx, cy, w, h)` box. The diffusion model
//! works on an `N_max × (C + 4)` matrix where category one-hots and geometry
//! are both mapped into `[-1, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of geometry columns per element: `cx, cy, w, h`.
pub const GEOMETRY_COLUMNS: usize = 4;

/// Smallest width/height kept after clamping a perturbed element.
pub const MIN_EXTENT: f64 = 1e-4;

/// Default decode threshold on the maximum encoded category value.
pub const DEFAULT_VALIDITY_THRESHOLD: f64 = 0.0;

/// Category vocabulary and the roles metrics and losses need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryScheme {
    pub names: Vec<String>,
    pub text: usize,
    pub underlay: usize,
}

impl CategoryScheme {
    /// Logo / text / underlay.
    pub fn pku() -> Self {
        Self {
            names: vec!["logo".into(), "text".into(), "underlay".into()],
            text: 1,
            underlay: 2,
        }
    }

    /// Logo / text / underlay / embellishment.
    pub fn cgl() -> Self {
        Self {
            names: vec!["logo".into(), "text".into(), "underlay".into(), "embellishment".into()],
            text: 1,
            underlay: 2,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.names.len();
        if c == 0 || self.text >= c || self.underlay >= c || self.text == self.underlay {
            return Err(Error::InvalidConfig(format!(
                "category scheme needs distinct text/underlay indices below {c}"
            )));
        }
        Ok(())
    }
}

impl Default for CategoryScheme {
    fn default() -> Self {
        Self::pku()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutElement {
    pub category: usize,
    /// `(cx, cy, w, h)` normalized by the canvas size.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl LayoutElement {
    pub fn new(category: usize, bbox: [f64; 4]) -> Self {
        Self { category, bbox }
    }

    /// Element placed in padding slots.
    pub fn padding() -> Self {
        Self { category: 0, bbox: [0.0; 4] }
    }

    pub fn area(&self) -> f64 {
        self.bbox[2].max(0.0) * self.bbox[3].max(0.0)
    }

    pub fn corners(&self) -> crate::geometry::BBox {
        let [cx, cy, w, h] = self.bbox;
        crate::geometry::BBox::from_center(cx, cy, w, h)
    }
}

/// Fixed-capacity layout. Invalid slots carry [`LayoutElement::padding`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    elements: Vec<LayoutElement>,
    valid: Vec<bool>,
}

impl Layout {
    pub fn empty(capacity: usize) -> Self {
        Self { elements: vec![LayoutElement::padding(); capacity], valid: vec![false; capacity] }
    }

    /// Fills the first slots with `elements`; the rest become padding.
    pub fn from_elements(elements: &[LayoutElement], capacity: usize) -> Result<Self> {
        if elements.len() > capacity {
            return Err(Error::ShapeMismatch(format!(
                "{} elements do not fit into {capacity} slots",
                elements.len()
            )));
        }
        let mut layout = Self::empty(capacity);
        for (slot, e) in elements.iter().enumerate() {
            layout.set(slot, Some(*e));
        }
        Ok(layout)
    }

    pub fn from_slots(slots: Vec<Option<LayoutElement>>) -> Self {
        let mut layout = Self::empty(slots.len());
        for (slot, e) in slots.into_iter().enumerate() {
            layout.set(slot, e);
        }
        layout
    }

    pub fn capacity(&self) -> usize {
        self.elements.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn is_valid(&self, slot: usize) -> bool {
        self.valid.get(slot).copied().unwrap_or(false)
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, slot: usize) -> Option<&LayoutElement> {
        if self.is_valid(slot) {
            Some(&self.elements[slot])
        } else {
            None
        }
    }

    pub fn set(&mut self, slot: usize, element: Option<LayoutElement>) {
        match element {
            Some(e) => {
                self.elements[slot] = e;
                self.valid[slot] = true;
            }
            None => {
                self.elements[slot] = LayoutElement::padding();
                self.valid[slot] = false;
            }
        }
    }

    /// Valid elements with their slot index.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, &LayoutElement)> + '_ {
        self.elements.iter().enumerate().filter(move |(i, _)| self.valid[*i])
    }

    pub fn valid_elements(&self) -> Vec<LayoutElement> {
        self.iter_valid().map(|(_, e)| *e).collect()
    }

    /// Reorders slots so that slot `i` of the result is slot `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_slots(perm.iter().map(|&p| self.get(p).copied()).collect())
    }
}

/// Row-major `rows × cols` real matrix; the continuous layout representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl LayoutMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Encodes a layout as an `N_max × (C + 4)` matrix.
///
/// Category one-hots map to `{-1, +1}`, geometry maps through `v ↦ 2v − 1`,
/// and padding rows are all `-1` in the category block with zero geometry.
pub fn encode_layout(layout: &Layout, num_categories: usize) -> Result<LayoutMatrix> {
    let cols = num_categories + GEOMETRY_COLUMNS;
    let mut out = LayoutMatrix::zeros(layout.capacity(), cols);
    for slot in 0..layout.capacity() {
        let row = out.row_mut(slot);
        row[..num_categories].fill(-1.0);
        if let Some(e) = layout.get(slot) {
            if e.category >= num_categories {
                return Err(Error::InvalidCategory { category: e.category, num_categories });
            }
            row[e.category] = 1.0;
            for (k, v) in e.bbox.iter().enumerate() {
                row[num_categories + k] = 2.0 * v - 1.0;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`encode_layout`]. Total: argmax (lowest index on ties) picks the
/// category, geometry is clamped to `[0, 1]`, and rows whose category maximum
/// falls below `threshold` become padding.
pub fn decode_layout(x0: &LayoutMatrix, num_categories: usize, threshold: f64) -> Layout {
    let slots = (0..x0.rows)
        .map(|r| {
            let row = x0.row(r);
            let (category, best) = row[..num_categories].iter().enumerate().fold(
                (0usize, f64::NEG_INFINITY),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            );
            if !(best >= threshold) {
                return None;
            }
            let mut bbox = [0.0; 4];
            for (k, b) in bbox.iter_mut().enumerate() {
                *b = ((row[num_categories + k] + 1.0) / 2.0).clamp(0.0, 1.0);
            }
            Some(LayoutElement { category, bbox })
        })
        .collect();
    Layout::from_slots(slots)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialConstraintMask {
    num_slots: usize,
    num_categories: usize,
    mask: Vec<f64>,
    known_values: Vec<f64>,
}

impl PartialConstraintMask {
    pub fn zeros(num_slots: usize, num_categories: usize) -> Self {
        let n = num_slots * (num_categories + GEOMETRY_COLUMNS);
        Self { num_slots, num_categories, mask: vec![0.0; n], known_values: vec![0.0; n] }
    }

    /// Builds a mask from explicit field selections and the layout it refers to.
    pub fn from_fields(
        layout: &Layout,
        num_categories: usize,
        fields: impl Fn(usize) -> FieldSelection,
    ) -> Result<Self> {
        let encoded = encode_layout(layout, num_categories)?;
        let mut m = Self::zeros(layout.capacity(), num_categories);
        for slot in 0..layout.capacity() {
            if !layout.is_valid(slot) {
                continue;
            }
            let sel = fields(slot);
            let mut cols: Vec<usize> = Vec::new();
            if sel.category {
                cols.extend(0..num_categories);
            }
            for (k, on) in sel.geometry.iter().enumerate() {
                if *on {
                    cols.push(num_categories + k);
                }
            }
            for c in cols {
                m.set(slot, c, encoded.get(slot, c));
            }
        }
        Ok(m)
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn width(&self) -> usize {
        self.num_categories + GEOMETRY_COLUMNS
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn known_values(&self) -> &[f64] {
        &self.known_values
    }

    pub fn is_set(&self, slot: usize, col: usize) -> bool {
        self.mask[slot * self.width() + col] != 0.0
    }

    /// Marks a field as given with its encoded value.
    pub fn set(&mut self, slot: usize, col: usize, value: f64) {
        let i = slot * self.width() + col;
        self.mask[i] = 1.0;
        self.known_values[i] = value;
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|v| *v == 0.0)
    }

    /// Binary entries, zero known values off-mask, atomic category columns.
    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        for slot in 0..self.num_slots {
            for c in 0..w {
                let i = slot * w + c;
                let m = self.mask[i];
                if m != 0.0 && m != 1.0 {
                    return Err(Error::InvalidConfig(format!("mask entry ({slot},{c}) = {m}")));
                }
                if m == 0.0 && self.known_values[i] != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "known value at ({slot},{c}) outside the mask"
                    )));
                }
            }
            let cat = &self.mask[slot * w..slot * w + self.num_categories];
            if cat.iter().any(|v| *v != cat[0]) {
                return Err(Error::InvalidConfig(format!(
                    "slot {slot}: category columns must be given all together"
                )));
            }
        }
        Ok(())
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let w = self.width();
        let mut out = Self::zeros(self.num_slots, self.num_categories);
        for (dst, &src) in perm.iter().enumerate() {
            out.mask[dst * w..(dst + 1) * w].copy_from_slice(&self.mask[src * w..(src + 1) * w]);
            out.known_values[dst * w..(dst + 1) * w]
                .copy_from_slice(&self.known_values[src * w..(src + 1) * w]);
        }
        out
    }
}

/// Which fields of one element a constraint mask exposes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FieldSelection {
    pub category: bool,
    /// `cx, cy, w, h`.
    pub geometry: [bool; 4],
}

impl FieldSelection {
    pub const NONE: Self = Self { category: false, geometry: [false; 4] };
    pub const CATEGORY: Self = Self { category: true, geometry: [false; 4] };
    pub const CATEGORY_SIZE: Self = Self { category: true, geometry: [false, false, true, true] };
    pub const ALL: Self = Self { category: true, geometry: [true; 4] };
}

/// Size relation of element `j` relative to element `i` at `rel[i, j, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum SizeRelation {
    None = 0,
    Smaller = 1,
    Equal = 2,
    Larger = 3,
}

impl SizeRelation {
    pub const COUNT: usize = 4;

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Self::None,
            1 => Self::Smaller,
            2 => Self::Equal,
            3 => Self::Larger,
            _ => return Err(Error::UnknownRelationCode { channel: 0, code }),
        })
    }

    pub fn mirror(self) -> Self {
        match self {
            Self::Smaller => Self::Larger,
            Self::Larger => Self::Smaller,
            other => other,
        }
    }
}

/// Position relation of element `i` relative to element `j` at `rel[i, j, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum PositionRelation {
    None = 0,
    Above = 1,
    Below = 2,
    LeftOf = 3,
    RightOf = 4,
    Overlap = 5,
}

impl PositionRelation {
    pub const COUNT: usize = 6;

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Self::None,
            1 => Self::Above,
            2 => Self::Below,
            3 => Self::LeftOf,
            4 => Self::RightOf,
            5 => Self::Overlap,
            _ => return Err(Error::UnknownRelationCode { channel: 1, code }),
        })
    }

    pub fn mirror(self) -> Self {
        match self {
            Self::Above => Self::Below,
            Self::Below => Self::Above,
            Self::LeftOf => Self::RightOf,
            Self::RightOf => Self::LeftOf,
            other => other,
        }
    }
}

pub const SIZE_CHANNEL: usize = 0;
pub const POSITION_CHANNEL: usize = 1;

/// `(N_max + 1) × (N_max + 1) × 2` relation codes; index 0 is the canvas and
/// element slot `s` lives at index `s + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    n: usize,
    codes: Vec<u8>,
}

impl RelationMatrix {
    pub fn zeros(num_slots: usize) -> Self {
        let n = num_slots + 1;
        Self { n, codes: vec![0; n * n * 2] }
    }

    pub fn num_slots(&self) -> usize {
        self.n - 1
    }

    /// Side length including the canvas node.
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize, channel: usize) -> u8 {
        self.codes[(i * self.n + j) * 2 + channel]
    }

    pub fn set(&mut self, i: usize, j: usize, channel: usize, code: u8) {
        self.codes[(i * self.n + j) * 2 + channel] = code;
    }

    pub fn size(&self, i: usize, j: usize) -> SizeRelation {
        SizeRelation::from_code(self.get(i, j, SIZE_CHANNEL)).unwrap_or(SizeRelation::None)
    }

    pub fn position(&self, i: usize, j: usize) -> PositionRelation {
        PositionRelation::from_code(self.get(i, j, POSITION_CHANNEL))
            .unwrap_or(PositionRelation::None)
    }

    /// Sets `(i, j)` and the mirrored `(j, i)` entry of one channel.
    pub fn set_pair(&mut self, i: usize, j: usize, channel: usize, code: u8) -> Result<()> {
        let mirrored = match channel {
            SIZE_CHANNEL => SizeRelation::from_code(code)?.mirror() as u8,
            POSITION_CHANNEL => PositionRelation::from_code(code)?.mirror() as u8,
            _ => return Err(Error::ShapeMismatch(format!("relation channel {channel}"))),
        };
        self.set(i, j, channel, code);
        self.set(j, i, channel, mirrored);
        Ok(())
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn is_empty(&self) -> bool {
        self.codes.iter().all(|c| *c == 0)
    }

    /// Count of nonzero ordered entries over both channels.
    pub fn num_specified(&self) -> usize {
        self.codes.iter().filter(|c| **c != 0).count()
    }

    /// Zero diagonal, known codes, and mirrored pairs.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            for j in 0..self.n {
                let s = SizeRelation::from_code(self.get(i, j, SIZE_CHANNEL))?;
                let p = PositionRelation::from_code(self.get(i, j, POSITION_CHANNEL))?;
                if i == j && (s != SizeRelation::None || p != PositionRelation::None) {
                    return Err(Error::InvalidConfig(format!("nonzero diagonal relation at {i}")));
                }
                if self.size(j, i) != s.mirror() || self.position(j, i) != p.mirror() {
                    return Err(Error::InvalidConfig(format!(
                        "relation ({i},{j}) is not mirrored by ({j},{i})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Zeroes every entry that touches an invalid slot of `layout`.
    pub fn restrict_to(&mut self, layout: &Layout) {
        for i in 1..self.n {
            if !layout.is_valid(i - 1) {
                for j in 0..self.n {
                    for ch in 0..2 {
                        self.set(i, j, ch, 0);
                        self.set(j, i, ch, 0);
                    }
                }
            }
        }
    }

    /// Applies a slot permutation (`perm[new] = old`), keeping the canvas at 0.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.num_slots());
        let node = |k: usize| if k == 0 { 0 } else { perm[k - 1] + 1 };
        for i in 0..self.n {
            for j in 0..self.n {
                for ch in 0..2 {
                    out.set(i, j, ch, self.get(node(i), node(j), ch));
                }
            }
        }
        out
    }
}

/// Generation task. `Hybrid` carries an arbitrary constraint pair.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Uncond,
    CtoSP,
    CStoP,
    Completion,
    Refinement,
    Relationship,
    Hybrid(Box<HybridConstraint>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConstraint {
    pub mask: PartialConstraintMask,
    pub relations: RelationMatrix,
}

impl TaskKind {
    /// The six named tasks, in reporting order.
    pub const BASIC: [TaskKind; 6] = [
        TaskKind::Uncond,
        TaskKind::CtoSP,
        TaskKind::CStoP,
        TaskKind::Completion,
        TaskKind::Refinement,
        TaskKind::Relationship,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Uncond => "uncond",
            TaskKind::CtoSP => "c2sp",
            TaskKind::CStoP => "cs2p",
            TaskKind::Completion => "completion",
            TaskKind::Refinement => "refinement",
            TaskKind::Relationship => "relationship",
            TaskKind::Hybrid(_) => "hybrid",
        }
    }

    pub fn from_name(name: &str) -> Option<TaskKind> {
        Some(match name {
            "uncond" => TaskKind::Uncond,
            "c2sp" => TaskKind::CtoSP,
            "cs2p" => TaskKind::CStoP,
            "completion" => TaskKind::Completion,
            "refinement" => TaskKind::Refinement,
            "relationship" => TaskKind::Relationship,
            _ => return None,
        })
    }

    pub fn uses_relations(&self) -> bool {
        match self {
            TaskKind::Relationship => true,
            TaskKind::Hybrid(h) => !h.relations.is_empty(),
            _ => false,
        }
    }
}

/// Default probability that Completion keeps an element as given.
pub const COMPLETION_KEEP_PROBABILITY: f64 = 0.2;

/// Builds the partial constraint mask a task exposes for a ground-truth layout.
///
/// Relationship uses the category mask (categories are given alongside
/// relations); Hybrid returns its own mask.
pub fn build_task_mask<R: Rng + ?Sized>(
    task: &TaskKind,
    layout: &Layout,
    num_categories: usize,
    rng: &mut R,
) -> Result<PartialConstraintMask> {
    let mask = match task {
        TaskKind::Uncond | TaskKind::Refinement => {
            encode_layout(layout, num_categories)?;
            PartialConstraintMask::zeros(layout.capacity(), num_categories)
        }
        TaskKind::CtoSP | TaskKind::Relationship => {
            PartialConstraintMask::from_fields(layout, num_categories, |_| FieldSelection::CATEGORY)?
        }
        TaskKind::CStoP => PartialConstraintMask::from_fields(layout, num_categories, |_| {
            FieldSelection::CATEGORY_SIZE
        })?,
        TaskKind::Completion => {
            let kept = completion_subset(layout, COMPLETION_KEEP_PROBABILITY, rng)?;
            PartialConstraintMask::from_fields(layout, num_categories, |slot| {
                if kept.contains(&slot) {
                    FieldSelection::ALL
                } else {
                    FieldSelection::NONE
                }
            })?
        }
        TaskKind::Hybrid(h) => {
            h.mask.validate()?;
            h.mask.clone()
        }
    };
    Ok(mask)
}

/// Slots kept as given for Completion: each valid element independently with
/// probability `keep`, then forced to be nonempty and, when possible, strict.
pub fn completion_subset<R: Rng + ?Sized>(
    layout: &Layout,
    keep: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let valid: Vec<usize> = layout.iter_valid().map(|(s, _)| s).collect();
    if valid.is_empty() {
        return Err(Error::DegenerateInput("completion needs at least one valid element".into()));
    }
    let mut kept: Vec<usize> = valid.iter().copied().filter(|_| rng.random_bool(keep)).collect();
    if kept.is_empty() {
        kept.push(valid[rng.random_range(0..valid.len())]);
    } else if kept.len() == valid.len() && valid.len() > 1 {
        kept.remove(rng.random_range(0..kept.len()));
    }
    Ok(kept)
}

/// Default tolerance margin for size relations.
pub const DEFAULT_MARGIN_ALPHA: f64 = 0.1;

/// Size code of `b` relative to `a` from their areas.
///
/// `equal` when `|ln(A_b / A_a)| ≤ ln(1 + α)`, which keeps the code exactly
/// mirrored when the arguments are swapped.
pub fn size_relation(area_a: f64, area_b: f64, alpha: f64) -> SizeRelation {
    let a = area_a.max(crate::losses::AREA_FLOOR);
    let b = area_b.max(crate::losses::AREA_FLOOR);
    let d = b.ln() - a.ln();
    let m = (1.0 + alpha).ln();
    if d > m {
        SizeRelation::Larger
    } else if d < -m {
        SizeRelation::Smaller
    } else {
        SizeRelation::Equal
    }
}

/// Position code of element `a` relative to element `b`.
pub fn position_relation(a: &LayoutElement, b: &LayoutElement) -> PositionRelation {
    let ba = a.corners();
    let bb = b.corners();
    if ba.y2 <= bb.y1 {
        PositionRelation::Above
    } else if bb.y2 <= ba.y1 {
        PositionRelation::Below
    } else if ba.x2 <= bb.x1 {
        PositionRelation::LeftOf
    } else if bb.x2 <= ba.x1 {
        PositionRelation::RightOf
    } else if crate::geometry::intersection_area(&ba, &bb) > 0.0 {
        PositionRelation::Overlap
    } else {
        PositionRelation::None
    }
}

/// Canvas third containing the element center, as the element's position
/// relative to the canvas: top → above, middle → overlap, bottom → below.
pub fn canvas_position(e: &LayoutElement) -> PositionRelation {
    let cy = e.bbox[1];
    if cy < 1.0 / 3.0 {
        PositionRelation::Above
    } else if cy < 2.0 / 3.0 {
        PositionRelation::Overlap
    } else {
        PositionRelation::Below
    }
}

/// Computes the full relation matrix of a layout.
pub fn extract_relations(layout: &Layout, margin_alpha: f64) -> RelationMatrix {
    let mut rel = RelationMatrix::zeros(layout.capacity());
    let valid: Vec<(usize, LayoutElement)> = layout.iter_valid().map(|(s, e)| (s, *e)).collect();
    for (si, ei) in &valid {
        let i = si + 1;
        let to_canvas = size_relation(1.0, ei.area(), margin_alpha);
        rel.set(0, i, SIZE_CHANNEL, to_canvas as u8);
        rel.set(i, 0, SIZE_CHANNEL, to_canvas.mirror() as u8);
        let pos = canvas_position(ei);
        rel.set(i, 0, POSITION_CHANNEL, pos as u8);
        rel.set(0, i, POSITION_CHANNEL, pos.mirror() as u8);
        for (sj, ej) in &valid {
            if si == sj {
                continue;
            }
            let j = sj + 1;
            rel.set(i, j, SIZE_CHANNEL, size_relation(ei.area(), ej.area(), margin_alpha) as u8);
            rel.set(i, j, POSITION_CHANNEL, position_relation(ei, ej) as u8);
        }
    }
    rel
}

/// Keeps each unordered pair with any defined code with probability
/// `fraction`; kept pairs retain both ordered entries on both channels.
pub fn sample_relation_subset<R: Rng + ?Sized>(
    relations: &RelationMatrix,
    fraction: f64,
    rng: &mut R,
) -> Result<RelationMatrix> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("relation fraction {fraction} not in (0, 1]")));
    }
    let n = relations.dim();
    let mut out = RelationMatrix::zeros(relations.num_slots());
    for i in 0..n {
        for j in (i + 1)..n {
            let defined = (0..2).any(|ch| relations.get(i, j, ch) != 0 || relations.get(j, i, ch) != 0);
            if !defined {
                continue;
            }
            if fraction >= 1.0 || rng.random_bool(fraction) {
                for ch in 0..2 {
                    out.set(i, j, ch, relations.get(i, j, ch));
                    out.set(j, i, ch, relations.get(j, i, ch));
                }
            }
        }
    }
    Ok(out)
}

/// Default refinement perturbation scale.
pub const DEFAULT_PERTURB_SIGMA: f64 = 0.01;

/// Adds i.i.d. Gaussian noise to the geometry of valid elements, then clamps.
pub fn perturb_layout<R: Rng + ?Sized>(layout: &Layout, sigma: f64, rng: &mut R) -> Result<Layout> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("perturbation sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(layout.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut out = layout.clone();
    for slot in 0..layout.capacity() {
        if let Some(e) = layout.get(slot) {
            let mut b = e.bbox;
            for v in b.iter_mut() {
                *v += normal.sample(rng);
            }
            b[0] = b[0].clamp(0.0, 1.0);
            b[1] = b[1].clamp(0.0, 1.0);
            b[2] = b[2].clamp(MIN_EXTENT, 1.0);
            b[3] = b[3].clamp(MIN_EXTENT, 1.0);
            out.set(slot, Some(LayoutElement { category: e.category, bbox: b }));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layout(rng: &mut ChaCha8Rng, capacity: usize, c: usize) -> Layout {
        let n = rng.random_range(0..=capacity);
        let slots = (0..capacity)
            .map(|s| {
                (s < n).then(|| LayoutElement {
                    category: rng.random_range(0..c),
                    bbox: [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.01..1.0),
                        rng.random_range(0.01..1.0),
                    ],
                })
            })
            .collect();
        Layout::from_slots(slots)
    }

    #[test]
    fn encode_hand_example() {
        let layout =
            Layout::from_elements(&[LayoutElement::new(1, [0.5, 0.5, 0.2, 0.1])], 1).unwrap();
        let x = encode_layout(&layout, 3).unwrap();
        let expected = [-1.0, 1.0, -1.0, 0.0, 0.0, -0.6, -0.8];
        for (a, b) in x.row(0).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_layout_is_all_padding_rows() {
        let x = encode_layout(&Layout::empty(4), 3).unwrap();
        for r in 0..4 {
            assert_eq!(x.row(r), &[-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn invalid_category_rejected() {
        let layout = Layout::from_elements(&[LayoutElement::new(3, [0.5; 4])], 2).unwrap();
        assert!(matches!(
            encode_layout(&layout, 3),
            Err(Error::InvalidCategory { category: 3, num_categories: 3 })
        ));
    }

    #[test]
    fn decode_hand_example_and_edge_cases() {
        let x = LayoutMatrix::from_vec(1, 7, vec![-1.0, 1.0, -1.0, 0.0, 0.0, -0.6, -0.8]).unwrap();
        let l = decode_layout(&x, 3, DEFAULT_VALIDITY_THRESHOLD);
        let e = l.get(0).unwrap();
        assert_eq!(e.category, 1);
        for (a, b) in e.bbox.iter().zip([0.5, 0.5, 0.2, 0.1]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }

        let tie = LayoutMatrix::from_vec(1, 7, vec![0.5, 0.5, -1.0, 1.5, 0.0, 0.0, 0.0]).unwrap();
        let l = decode_layout(&tie, 3, 0.0);
        assert_eq!(l.get(0).unwrap().category, 0);
        assert_eq!(l.get(0).unwrap().bbox[0], 1.0);

        let below = LayoutMatrix::from_vec(1, 7, vec![-0.2, -0.5, -1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(decode_layout(&below, 3, 0.0).num_valid(), 0);
    }

    #[test]
    fn round_trip_1000_random_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let l = random_layout(&mut rng, 8, 3);
            let back = decode_layout(&encode_layout(&l, 3).unwrap(), 3, 0.0);
            assert_eq!(back.valid_mask(), l.valid_mask());
            for (s, e) in l.iter_valid() {
                let d = back.get(s).unwrap();
                assert_eq!(d.category, e.category);
                for k in 0..4 {
                    assert_abs_diff_eq!(d.bbox[k], e.bbox[k], epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn task_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = Layout::from_elements(
            &[LayoutElement::new(0, [0.2, 0.2, 0.1, 0.1]), LayoutElement::new(2, [0.6, 0.6, 0.3, 0.2])],
            4,
        )
        .unwrap();
        let m = build_task_mask(&TaskKind::CtoSP, &layout, 3, &mut rng).unwrap();
        for slot in 0..2 {
            assert_eq!(&m.mask()[slot * 7..slot * 7 + 7], &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        assert!(m.mask()[14..].iter().all(|v| *v == 0.0));
        assert_eq!(&m.known_values()[..3], &[1.0, -1.0, -1.0]);
        m.validate().unwrap();

        let u = build_task_mask(&TaskKind::Uncond, &layout, 3, &mut rng).unwrap();
        assert!(u.is_empty());

        let cs = build_task_mask(&TaskKind::CStoP, &layout, 3, &mut rng).unwrap();
        assert_eq!(&cs.mask()[..7], &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_ne!(cs, m);
    }

    #[test]
    fn completion_is_seeded_and_degenerate_input_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = random_layout(&mut rng, 8, 3);
        let layout = if layout.num_valid() == 0 {
            Layout::from_elements(&[LayoutElement::new(0, [0.5; 4]); 5], 8).unwrap()
        } else {
            layout
        };
        let a = build_task_mask(&TaskKind::Completion, &layout, 3, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = build_task_mask(&TaskKind::Completion, &layout, 3, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(!a.is_empty());

        let err = build_task_mask(&TaskKind::Completion, &Layout::empty(8), 3, &mut rng);
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn completion_subset_is_nonempty_strict() {
        let layout = Layout::from_elements(&[LayoutElement::new(0, [0.5; 4]); 4], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let kept = completion_subset(&layout, 0.9, &mut rng).unwrap();
            assert!(!kept.is_empty() && kept.len() < 4);
        }
    }

    #[test]
    fn size_relation_hand_example() {
        // A_i = 0.05, A_j = 0.04: ratio 0.8 is below 1 - alpha.
        let layout = Layout::from_elements(
            &[
                LayoutElement::new(0, [0.3, 0.2, 0.5, 0.1]),
                LayoutElement::new(1, [0.3, 0.7, 0.4, 0.1]),
            ],
            2,
        )
        .unwrap();
        let rel = extract_relations(&layout, 0.1);
        assert_eq!(rel.size(1, 2), SizeRelation::Smaller);
        assert_eq!(rel.size(2, 1), SizeRelation::Larger);
        assert_eq!(rel.position(1, 2), PositionRelation::Above);
        assert_eq!(rel.position(2, 1), PositionRelation::Below);
        rel.validate().unwrap();
    }

    #[test]
    fn identical_boxes_are_equal_and_overlap() {
        let e = LayoutElement::new(0, [0.4, 0.4, 0.2, 0.2]);
        let rel = extract_relations(&Layout::from_elements(&[e, e], 3).unwrap(), 0.1);
        assert_eq!(rel.size(1, 2), SizeRelation::Equal);
        assert_eq!(rel.position(1, 2), PositionRelation::Overlap);
        assert_eq!(rel.position(2, 1), PositionRelation::Overlap);
        for k in 0..4 {
            assert_eq!(rel.get(k, k, 0), 0);
            assert_eq!(rel.get(k, k, 1), 0);
            assert_eq!(rel.get(3, k, 0), 0);
            assert_eq!(rel.get(k, 3, 1), 0);
        }
    }

    #[test]
    fn antisymmetry_over_1000_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let l = random_layout(&mut rng, 2, 3);
            let rel = extract_relations(&l, 0.1);
            rel.validate().unwrap();
            if l.num_valid() == 2 {
                let (a, b) = (l.get(0).unwrap(), l.get(1).unwrap());
                // brute-force recheck of the vertical ordering
                let above = a.bbox[1] + a.bbox[3] / 2.0 <= b.bbox[1] - b.bbox[3] / 2.0;
                if above {
                    assert_eq!(rel.position(1, 2), PositionRelation::Above);
                    assert_eq!(rel.position(2, 1), PositionRelation::Below);
                }
            }
        }
    }

    #[test]
    fn canvas_relations_use_thirds() {
        let l = Layout::from_elements(
            &[
                LayoutElement::new(0, [0.5, 0.1, 0.1, 0.1]),
                LayoutElement::new(0, [0.5, 0.5, 0.1, 0.1]),
                LayoutElement::new(0, [0.5, 0.9, 0.1, 0.1]),
            ],
            3,
        )
        .unwrap();
        let rel = extract_relations(&l, 0.1);
        assert_eq!(rel.position(1, 0), PositionRelation::Above);
        assert_eq!(rel.position(2, 0), PositionRelation::Overlap);
        assert_eq!(rel.position(3, 0), PositionRelation::Below);
        assert_eq!(rel.position(0, 1), PositionRelation::Below);
        assert_eq!(rel.size(0, 1), SizeRelation::Smaller);
        assert_eq!(rel.size(1, 0), SizeRelation::Larger);
    }

    #[test]
    fn relation_subset_fraction_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_layout(&mut rng, 6, 3);
        let rel = extract_relations(&l, 0.1);
        assert_eq!(sample_relation_subset(&rel, 1.0, &mut rng).unwrap(), rel);
        assert!(sample_relation_subset(&rel, 0.0, &mut rng).is_err());
    }

    #[test]
    fn relation_subset_binomial_count() {
        // 141 elements plus the canvas give 142 * 141 / 2 = 10011 unordered pairs.
        let n = 141;
        let l = Layout::from_elements(&vec![LayoutElement::new(0, [0.5, 0.5, 0.1, 0.1]); n], n).unwrap();
        let rel = extract_relations(&l, 0.1);
        let pairs = (n + 1) * n / 2;
        let sub = sample_relation_subset(&rel, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        sub.validate().unwrap();
        let mut kept = 0usize;
        for i in 0..=n {
            for j in (i + 1)..=n {
                if sub.get(i, j, 0) != 0 || sub.get(i, j, 1) != 0 {
                    kept += 1;
                }
            }
        }
        let mean = pairs as f64 * 0.1;
        let sd = (pairs as f64 * 0.1 * 0.9).sqrt();
        assert!((kept as f64 - mean).abs() < 3.0 * sd, "kept {kept} of {pairs}");
    }

    #[test]
    fn perturb_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Layout::from_elements(&[LayoutElement::new(2, [0.5, 0.5, 0.3, 0.3])], 1).unwrap();
        assert_eq!(perturb_layout(&base, 0.0, &mut rng).unwrap(), base);
        let sigma = 0.01;
        let draws = 100_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let p = perturb_layout(&base, sigma, &mut rng).unwrap();
            let e = p.get(0).unwrap();
            assert_eq!(e.category, 2);
            total += (e.bbox[0] - 0.5).abs();
        }
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let mean = total / draws as f64;
        assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
    }

    #[test]
    fn permutation_of_relations_matches_relations_of_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let l = random_layout(&mut rng, 6, 3);
            let perm = {
                let mut p: Vec<usize> = (0..6).collect();
                use rand::seq::SliceRandom;
                p.shuffle(&mut rng);
                p
            };
            let lhs = extract_relations(&l.permuted(&perm), 0.1);
            let rhs = extract_relations(&l, 0.1).permuted(&perm);
            assert_eq!(lhs, rhs);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn element() -> impl Strategy<Value = LayoutElement> {
            (0usize..3, 0.0..1.0f64, 0.0..1.0f64, 0.001..1.0f64, 0.001..1.0f64)
                .prop_map(|(c, x, y, w, h)| LayoutElement::new(c, [x, y, w, h]))
        }

        proptest! {
            #[test]
            fn relations_are_mirrored(elems in proptest::collection::vec(element(), 0..8), alpha in 0.01..0.9f64) {
                let l = Layout::from_elements(&elems, 8).unwrap();
                let rel = extract_relations(&l, alpha);
                prop_assert!(rel.validate().is_ok());
            }

            #[test]
            fn task_masks_satisfy_invariants(elems in proptest::collection::vec(element(), 1..8), seed in 0u64..1000) {
                let l = Layout::from_elements(&elems, 8).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for task in TaskKind::BASIC {
                    let m = build_task_mask(&task, &l, 3, &mut rng).unwrap();
                    prop_assert!(m.validate().is_ok());
                }
            }
        }
    }
}
