//! Token-grid geometry: crop extents, ring schedules, center fill and the
//! radial encoding that turns one grid into aligned input/target segments.
//!
//! Coordinates are `(row, col)` in the frame of the full grid. Extents are
//! half-open rectangles. Step indices are 0-based in this API; the schedule
//! text format numbers steps from 1.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A rectangular grid of discrete token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    vocab_size: usize,
    cells: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, vocab_size: usize, cells: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || vocab_size == 0 {
            return Err(Error::Shape(format!("grid {height}x{width} with vocab {vocab_size} must be non-empty")));
        }
        if cells.len() != height * width {
            return Err(Error::Shape(format!("{} cells for a {height}x{width} grid", cells.len())));
        }
        if let Some(&id) = cells.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
        }
        Ok(Self { height, width, vocab_size, cells })
    }

    pub fn filled(height: usize, width: usize, vocab_size: usize, id: u32) -> Result<Self> {
        Self::new(height, width, vocab_size, vec![id; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, id: u32) -> Result<()> {
        if id as usize >= self.vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab: self.vocab_size });
        }
        self.cells[row * self.width + col] = id;
        Ok(())
    }

    pub fn full_extent(&self) -> Extent {
        Extent::full(self.height, self.width)
    }

    /// Rows of space-separated ids, one line per grid row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.cells.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|id| id.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, vocab_size: usize) -> Result<Self> {
        let mut cells = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<u32> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>().map_err(|e| Error::Parse { line: i + 1, msg: format!("bad token id {t:?}: {e}") })
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Parse { line: i + 1, msg: format!("row has {} ids, expected {w}", row.len()) })
                }
                _ => {}
            }
            cells.extend(row);
            height += 1;
        }
        let width = width.ok_or(Error::Parse { line: 0, msg: "empty grid".into() })?;
        Self::new(height, width, vocab_size, cells)
    }
}

/// Half-open rectangle `rows [top, bottom) x cols [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Extent {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Extent {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Result<Self> {
        if top >= bottom || left >= right {
            return Err(Error::Shape(format!("empty extent {top},{left},{bottom},{right}")));
        }
        Ok(Self { top, left, bottom, right })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, bottom: height, right: width }
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    pub fn contains_extent(&self, other: &Extent) -> bool {
        other.top >= self.top && other.left >= self.left && other.bottom <= self.bottom && other.right <= self.right
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.bottom <= height && self.right <= width
    }

    /// Row-major coordinates covered by the extent.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.top..self.bottom).flat_map(move |r| (self.left..self.right).map(move |c| (r, c)))
    }

    pub fn offset(&self, dr: usize, dc: usize) -> Self {
        Self { top: self.top + dr, left: self.left + dc, bottom: self.bottom + dr, right: self.right + dc }
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.top, self.left, self.bottom, self.right)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Where the first extent of a schedule sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Anchor {
    Center,
    EdgeMid(Side),
    Corner(Corner),
}

impl Anchor {
    /// Sides allowed to grow, as `[top, bottom, left, right]`.
    fn growable(self) -> [bool; 4] {
        match self {
            Anchor::Center => [true; 4],
            Anchor::EdgeMid(Side::Top) => [false, true, true, true],
            Anchor::EdgeMid(Side::Bottom) => [true, false, true, true],
            Anchor::EdgeMid(Side::Left) => [true, true, false, true],
            Anchor::EdgeMid(Side::Right) => [true, true, true, false],
            Anchor::Corner(Corner::TopLeft) => [false, true, false, true],
            Anchor::Corner(Corner::TopRight) => [false, true, true, false],
            Anchor::Corner(Corner::BottomLeft) => [true, false, false, true],
            Anchor::Corner(Corner::BottomRight) => [true, false, true, false],
        }
    }
}

impl fmt::Display for Anchor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Anchor::Center => "center",
            Anchor::EdgeMid(Side::Top) => "edge-top",
            Anchor::EdgeMid(Side::Bottom) => "edge-bottom",
            Anchor::EdgeMid(Side::Left) => "edge-left",
            Anchor::EdgeMid(Side::Right) => "edge-right",
            Anchor::Corner(Corner::TopLeft) => "corner-top-left",
            Anchor::Corner(Corner::TopRight) => "corner-top-right",
            Anchor::Corner(Corner::BottomLeft) => "corner-bottom-left",
            Anchor::Corner(Corner::BottomRight) => "corner-bottom-right",
        };
        f.write_str(s)
    }
}

impl FromStr for Anchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "center" => Anchor::Center,
            "edge-top" | "edge" => Anchor::EdgeMid(Side::Top),
            "edge-bottom" => Anchor::EdgeMid(Side::Bottom),
            "edge-left" => Anchor::EdgeMid(Side::Left),
            "edge-right" => Anchor::EdgeMid(Side::Right),
            "corner-top-left" | "corner" => Anchor::Corner(Corner::TopLeft),
            "corner-top-right" => Anchor::Corner(Corner::TopRight),
            "corner-bottom-left" => Anchor::Corner(Corner::BottomLeft),
            "corner-bottom-right" => Anchor::Corner(Corner::BottomRight),
            other => return Err(Error::Schedule(format!("unknown anchor {other:?}"))),
        })
    }
}

/// Per-step border thickness on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Thickness {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Thickness {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self { top, bottom, left, right }
    }

    fn is_zero(&self) -> bool {
        self.top + self.bottom + self.left + self.right == 0
    }
}

/// How extents grow from one step to the next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Growth {
    /// `t` tokens on every side the anchor lets grow, until the grid is covered.
    Uniform(usize),
    /// Each axis grows by `2t` per step whichever sides are growable, so every
    /// anchor covers a square grid in the same number of steps.
    Balanced(usize),
    /// Explicit thickness for steps `1..N` (the growth from step `k-1` to `k`).
    /// The first extent is whatever remains after peeling these off the grid.
    Steps(Vec<Thickness>),
}

impl Growth {
    fn per_step(&self, anchor: Anchor) -> Thickness {
        let [gt, gb, gl, gr] = anchor.growable();
        let pick = |on: bool, t: usize| if on { t } else { 0 };
        match *self {
            Growth::Uniform(t) => Thickness::new(pick(gt, t), pick(gb, t), pick(gl, t), pick(gr, t)),
            Growth::Balanced(t) => {
                let axis = |a: bool, b: bool| match (a, b) {
                    (true, true) => (t, t),
                    (true, false) => (2 * t, 0),
                    (false, true) => (0, 2 * t),
                    (false, false) => (0, 0),
                };
                let (top, bottom) = axis(gt, gb);
                let (left, right) = axis(gl, gr);
                Thickness::new(top, bottom, left, right)
            }
            Growth::Steps(_) => unreachable!("explicit steps have no fixed thickness"),
        }
    }
}

/// Strictly nested sequence of extents ending at the full grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingSchedule {
    anchor: Anchor,
    grid_height: usize,
    grid_width: usize,
    extents: Vec<Extent>,
    /// Index of each extent in the schedule it was derived from.
    origin: Vec<usize>,
}

impl RingSchedule {
    pub fn from_extents(grid_height: usize, grid_width: usize, anchor: Anchor, extents: Vec<Extent>) -> Result<Self> {
        let origin = (0..extents.len()).collect();
        let s = Self { anchor, grid_height, grid_width, extents, origin };
        s.validate()?;
        Ok(s)
    }

    pub fn anchor(&self) -> Anchor {
        self.anchor
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn extents(&self) -> &[Extent] {
        &self.extents
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.extents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extents.is_empty()
    }

    /// Sum of extent areas: the flattened sequence length without prefix.
    pub fn total_positions(&self) -> usize {
        self.extents.iter().map(Extent::area).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.grid_height, self.grid_width);
        if h == 0 || w == 0 {
            return Err(Error::Schedule("grid must be non-empty".into()));
        }
        let last = self.extents.last().ok_or_else(|| Error::Schedule("schedule has no extents".into()))?;
        if *last != Extent::full(h, w) {
            return Err(Error::Schedule(format!("final extent {last} does not cover the {h}x{w} grid")));
        }
        for e in &self.extents {
            if e.top >= e.bottom || e.left >= e.right || !e.fits(h, w) {
                return Err(Error::OutOfBounds { extent: e.to_string(), height: h, width: w });
            }
        }
        for pair in self.extents.windows(2) {
            if !pair[1].contains_extent(&pair[0]) || pair[1].area() <= pair[0].area() {
                return Err(Error::Schedule(format!("extent {} is not strictly inside {}", pair[0], pair[1])));
            }
        }
        if self.origin.len() != self.extents.len() {
            return Err(Error::Schedule("origin table length mismatch".into()));
        }
        Ok(())
    }

    /// Restrict to the extents at `keep` (sorted, must end at the final index).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let n = self.extents.len();
        if keep.is_empty() || *keep.last().unwrap() != n - 1 {
            return Err(Error::Schedule(format!("kept steps {keep:?} must end with the full-grid step {}", n - 1)));
        }
        if keep.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Schedule(format!("kept steps {keep:?} are not strictly sorted")));
        }
        let s = Self {
            anchor: self.anchor,
            grid_height: self.grid_height,
            grid_width: self.grid_width,
            extents: keep.iter().map(|&i| self.extents[i]).collect(),
            origin: keep.iter().map(|&i| self.origin[i]).collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Coordinates new at step `k`: `extent_k \ extent_{k-1}`, row-major.
    pub fn ring(&self, k: usize) -> Result<Vec<(usize, usize)>> {
        let e =
            self.extents.get(k).ok_or_else(|| Error::Schedule(format!("step {k} out of range 0..{}", self.len())))?;
        let prev = if k == 0 { None } else { Some(self.extents[k - 1]) };
        Ok(e.positions().filter(|&(r, c)| !prev.is_some_and(|p| p.contains(r, c))).collect())
    }

    /// Text form: header lines then `k: top,left,bottom,right` per step (1-based).
    pub fn to_text(&self) -> String {
        let mut out = format!("grid: {} {}\nanchor: {}\n", self.grid_height, self.grid_width, self.anchor);
        for (k, e) in self.extents.iter().enumerate() {
            out.push_str(&format!("{}: {}\n", k + 1, e));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, msg: &str| Error::Parse { line: line + 1, msg: msg.to_string() };

        let (ln, grid) = lines.next().ok_or_else(|| err(0, "missing grid line"))?;
        let dims = grid.strip_prefix("grid:").ok_or_else(|| err(ln, "expected `grid: H W`"))?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(ln, "grid dims must be integers")))
            .collect::<Result<_>>()?;
        let [h, w] = dims[..] else {
            return Err(err(ln, "expected two grid dims"));
        };

        let (ln, anchor) = lines.next().ok_or_else(|| err(ln, "missing anchor line"))?;
        let anchor: Anchor =
            anchor.strip_prefix("anchor:").ok_or_else(|| err(ln, "expected `anchor: <name>`"))?.trim().parse()?;

        let mut extents = Vec::new();
        for (ln, line) in lines {
            let (k, rest) = line.split_once(':').ok_or_else(|| err(ln, "expected `k: t,l,b,r`"))?;
            let k: usize = k.trim().parse().map_err(|_| err(ln, "bad step number"))?;
            if k != extents.len() + 1 {
                return Err(err(ln, "step numbers must count up from 1"));
            }
            let v: Vec<usize> = rest
                .trim()
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| err(ln, "bad extent coordinate")))
                .collect::<Result<_>>()?;
            let [t, l, b, r] = v[..] else {
                return Err(err(ln, "extent needs four coordinates"));
            };
            extents.push(Extent::new(t, l, b, r)?);
        }
        Self::from_extents(h, w, anchor, extents)
    }
}

/// Build a schedule by peeling rings off the full grid according to `growth`.
pub fn make_schedule(grid_height: usize, grid_width: usize, anchor: Anchor, growth: &Growth) -> Result<RingSchedule> {
    if grid_height == 0 || grid_width == 0 {
        return Err(Error::Schedule("grid must be non-empty".into()));
    }
    let full = Extent::full(grid_height, grid_width);
    let mut rev = vec![full];
    match growth {
        Growth::Steps(steps) => {
            let mut cur = full;
            for th in steps.iter().rev() {
                if th.is_zero() {
                    return Err(Error::Schedule("zero-thickness growth step".into()));
                }
                let (vt, hz) = (th.top + th.bottom, th.left + th.right);
                if cur.height() <= vt || cur.width() <= hz {
                    return Err(Error::Schedule(format!("growth overshoots the grid: cannot peel {th:?} from {cur}")));
                }
                cur = Extent {
                    top: cur.top + th.top,
                    bottom: cur.bottom - th.bottom,
                    left: cur.left + th.left,
                    right: cur.right - th.right,
                };
                rev.push(cur);
            }
        }
        uniform => {
            let th = uniform.per_step(anchor);
            if th.is_zero() {
                return Err(Error::Schedule("growth thickness must be positive".into()));
            }
            let mut cur = full;
            loop {
                let mut next = cur;
                let mut moved = false;
                if th.top + th.bottom > 0 && cur.height() > th.top + th.bottom {
                    next.top += th.top;
                    next.bottom -= th.bottom;
                    moved = true;
                }
                if th.left + th.right > 0 && cur.width() > th.left + th.right {
                    next.left += th.left;
                    next.right -= th.right;
                    moved = true;
                }
                if !moved {
                    break;
                }
                rev.push(next);
                cur = next;
            }
        }
    }
    rev.reverse();
    let s = RingSchedule::from_extents(grid_height, grid_width, anchor, rev)?;
    check_anchor(&s)?;
    Ok(s)
}

fn check_anchor(s: &RingSchedule) -> Result<()> {
    let e = s.extents[0];
    let (h, w) = (s.grid_height, s.grid_width);
    let (mt, mb, ml, mr) = (e.top, h - e.bottom, e.left, w - e.right);
    let centered_v = mt.abs_diff(mb) <= 1;
    let centered_h = ml.abs_diff(mr) <= 1;
    let ok = match s.anchor {
        Anchor::Center => centered_v && centered_h,
        Anchor::EdgeMid(Side::Top) => mt == 0 && centered_h,
        Anchor::EdgeMid(Side::Bottom) => mb == 0 && centered_h,
        Anchor::EdgeMid(Side::Left) => ml == 0 && centered_v,
        Anchor::EdgeMid(Side::Right) => mr == 0 && centered_v,
        Anchor::Corner(Corner::TopLeft) => mt == 0 && ml == 0,
        Anchor::Corner(Corner::TopRight) => mt == 0 && mr == 0,
        Anchor::Corner(Corner::BottomLeft) => mb == 0 && ml == 0,
        Anchor::Corner(Corner::BottomRight) => mb == 0 && mr == 0,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Schedule(format!("first extent {e} is not placed at anchor {}", s.anchor)))
    }
}

/// Schedules known by name, for a `height x width` grid.
pub fn preset_schedule(name: &str, height: usize, width: usize) -> Result<RingSchedule> {
    match name {
        "center" => make_schedule(height, width, Anchor::Center, &Growth::Uniform(1)),
        "edge" => make_schedule(height, width, Anchor::EdgeMid(Side::Top), &Growth::Balanced(1)),
        "corner" => make_schedule(height, width, Anchor::Corner(Corner::TopLeft), &Growth::Balanced(1)),
        // One row and one column per step, alternating top-left and
        // bottom-right, from a centered block a quarter of the grid wide.
        "center13" | "alternating" => {
            let (h0, w0) = ((height / 4).max(1), (width / 4).max(1));
            let steps_v = height - h0;
            let steps_h = width - w0;
            let n = steps_v.max(steps_h);
            let steps = (0..n)
                .map(|i| {
                    let tl = i % 2 == 0;
                    let v = i < steps_v;
                    let hz = i < steps_h;
                    Thickness::new((tl && v) as usize, (!tl && v) as usize, (tl && hz) as usize, (!tl && hz) as usize)
                })
                .collect();
            make_schedule(height, width, Anchor::Center, &Growth::Steps(steps))
        }
        "single" => RingSchedule::from_extents(height, width, Anchor::Center, vec![Extent::full(height, width)]),
        other => Err(Error::Schedule(format!("unknown schedule preset {other:?}"))),
    }
}

pub fn crop(g: &TokenGrid, e: &Extent) -> Result<TokenGrid> {
    if e.top >= e.bottom || e.left >= e.right || !e.fits(g.height, g.width) {
        return Err(Error::OutOfBounds { extent: e.to_string(), height: g.height, width: g.width });
    }
    let cells = e.positions().map(|(r, c)| g.get(r, c)).collect();
    TokenGrid::new(e.height(), e.width(), g.vocab_size, cells)
}

/// Grid over an extent whose entries are token ids or the prompt sentinel
/// (`id == vocab_size`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedGrid {
    pub extent: Extent,
    pub vocab_size: usize,
    pub ids: Vec<u32>,
}

impl AnnotatedGrid {
    pub fn prompt_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn is_prompt(&self, i: usize) -> bool {
        self.ids[i] == self.prompt_id()
    }

    pub fn prompt_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == self.prompt_id()).count()
    }
}

/// Place `inner` (a grid over `inner_extent`) inside `outer` and mark every
/// other position with the prompt sentinel.
pub fn center_fill(outer: &Extent, inner: Option<(&TokenGrid, &Extent)>, vocab_size: usize) -> Result<AnnotatedGrid> {
    let prompt = vocab_size as u32;
    let mut ids = vec![prompt; outer.area()];
    if let Some((g, ie)) = inner {
        if !outer.contains_extent(ie) {
            return Err(Error::Shape(format!("inner extent {ie} not inside {outer}")));
        }
        if g.height != ie.height() || g.width != ie.width() {
            return Err(Error::Shape(format!("inner grid {}x{} does not match extent {ie}", g.height, g.width)));
        }
        if g.vocab_size != vocab_size {
            return Err(Error::Shape("inner grid vocabulary differs".into()));
        }
        for (r, c) in ie.positions() {
            let i = (r - outer.top) * outer.width() + (c - outer.left);
            ids[i] = g.get(r - ie.top, c - ie.left);
        }
    }
    Ok(AnnotatedGrid { extent: *outer, vocab_size, ids })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    /// Inside the previous step's extent: eligible for correction.
    Interior,
    /// New at this step: generated from the prompt.
    Border,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSegment {
    pub step: usize,
    pub extent: Extent,
    pub interior: Option<Extent>,
    pub positions: Vec<(usize, usize)>,
    pub regions: Vec<Region>,
    /// Start of this segment in the flattened (prefix-free) sequence.
    pub offset: usize,
}

impl StepSegment {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn interior_count(&self) -> usize {
        self.interior.map_or(0, |e| e.area())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosMeta {
    pub step: usize,
    pub row: usize,
    pub col: usize,
    pub region: Region,
}

/// Flattened concatenation of all step segments with per-position metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub grid_height: usize,
    pub grid_width: usize,
    pub segments: Vec<StepSegment>,
    meta: Vec<PosMeta>,
    /// Schedule index of each step (differs from the ordinal under subsets).
    pub origin: Vec<usize>,
}

impl SequenceLayout {
    pub fn from_schedule(s: &RingSchedule) -> Self {
        let mut segments = Vec::with_capacity(s.len());
        let mut meta = Vec::with_capacity(s.total_positions());
        for (k, e) in s.extents.iter().enumerate() {
            let interior = if k == 0 { None } else { Some(s.extents[k - 1]) };
            let positions: Vec<_> = e.positions().collect();
            let regions: Vec<_> = positions
                .iter()
                .map(
                    |&(r, c)| {
                        if interior.is_some_and(|i| i.contains(r, c)) {
                            Region::Interior
                        } else {
                            Region::Border
                        }
                    },
                )
                .collect();
            let offset = meta.len();
            meta.extend(positions.iter().zip(&regions).map(|(&(row, col), &region)| PosMeta {
                step: k,
                row,
                col,
                region,
            }));
            segments.push(StepSegment { step: k, extent: *e, interior, positions, regions, offset });
        }
        Self { grid_height: s.grid_height, grid_width: s.grid_width, segments, meta, origin: s.origin.clone() }
    }

    pub fn total_len(&self) -> usize {
        self.meta.len()
    }

    pub fn meta(&self) -> &[PosMeta] {
        &self.meta
    }

    pub fn num_steps(&self) -> usize {
        self.segments.len()
    }

    /// Flattened index of position `within` of step `step`.
    pub fn index_of(&self, step: usize, within: usize) -> usize {
        self.segments[step].offset + within
    }
}

/// Aligned input segments (`S_k`), target crops (`g_k`) and their layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RadialEncoding {
    pub inputs: Vec<AnnotatedGrid>,
    pub targets: Vec<TokenGrid>,
    pub layout: SequenceLayout,
}

impl RadialEncoding {
    /// Input ids in layout order (prompt sentinel = vocab size).
    pub fn flat_inputs(&self) -> Vec<u32> {
        self.inputs.iter().flat_map(|s| s.ids.iter().copied()).collect()
    }

    pub fn flat_targets(&self) -> Vec<u32> {
        self.targets.iter().flat_map(|g| g.cells.iter().copied()).collect()
    }
}

pub fn radial_encode(g: &TokenGrid, s: &RingSchedule) -> Result<RadialEncoding> {
    if g.height != s.grid_height || g.width != s.grid_width {
        return Err(Error::Shape(format!(
            "grid {}x{} vs schedule {}x{}",
            g.height, g.width, s.grid_height, s.grid_width
        )));
    }
    let mut targets: Vec<TokenGrid> = Vec::with_capacity(s.len());
    let mut inputs = Vec::with_capacity(s.len());
    for (k, e) in s.extents.iter().enumerate() {
        let input = if k == 0 {
            center_fill(e, None, g.vocab_size)?
        } else {
            center_fill(e, Some((&targets[k - 1], &s.extents[k - 1])), g.vocab_size)?
        };
        inputs.push(input);
        targets.push(crop(g, e)?);
    }
    Ok(RadialEncoding { inputs, targets, layout: SequenceLayout::from_schedule(s) })
}

/// Coordinates of step `k`'s ring; see [`RingSchedule::ring`].
pub fn ring_diff(s: &RingSchedule, k: usize) -> Result<Vec<(usize, usize)>> {
    s.ring(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(s: &RingSchedule) -> Vec<usize> {
        s.extents().iter().map(|e| e.height()).collect()
    }

    #[test]
    fn center_16_uniform_1() {
        let s = make_schedule(16, 16, Anchor::Center, &Growth::Uniform(1)).unwrap();
        assert_eq!(sizes(&s), vec![2, 4, 6, 8, 10, 12, 14, 16]);
        assert_eq!(s.extents()[0], Extent::new(7, 7, 9, 9).unwrap());
        // brute-force: every extent is square, centered and nested
        for e in s.extents() {
            assert_eq!(e.height(), e.width());
            assert_eq!(e.top, 16 - e.bottom);
        }
    }

    #[test]
    fn corner_4_uniform_1() {
        let s = make_schedule(4, 4, Anchor::Corner(Corner::TopLeft), &Growth::Uniform(1)).unwrap();
        assert_eq!(sizes(&s), vec![1, 2, 3, 4]);
        assert!(s.extents().iter().all(|e| e.top == 0 && e.left == 0));
        let counts: Vec<_> = (0..4).map(|k| s.ring(k).unwrap().len()).collect();
        assert_eq!(counts, vec![1, 3, 5, 7]);
    }

    #[test]
    fn degenerate_grid() {
        let s = make_schedule(1, 1, Anchor::Center, &Growth::Uniform(3)).unwrap();
        assert_eq!(s.extents(), &[Extent::full(1, 1)]);
    }

    #[test]
    fn overshooting_steps_rejected() {
        let steps = vec![Thickness::new(1, 1, 1, 1); 4];
        assert!(make_schedule(8, 8, Anchor::Center, &Growth::Steps(steps)).is_err());
        let zero = vec![Thickness::default()];
        assert!(make_schedule(8, 8, Anchor::Center, &Growth::Steps(zero)).is_err());
    }

    #[test]
    fn center13_has_13_steps() {
        let s = preset_schedule("center13", 16, 16).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!(s.extents()[0], Extent::new(6, 6, 10, 10).unwrap());
        // odd extents lean toward the top-left
        let e = s.extents()[1];
        assert_eq!((e.top, 16 - e.bottom), (5, 6));
    }

    #[test]
    fn balanced_anchors_share_step_count() {
        for name in ["center", "edge", "corner"] {
            let s = preset_schedule(name, 8, 8).unwrap();
            assert_eq!(sizes(&s), vec![2, 4, 6, 8], "{name}");
        }
    }

    #[test]
    fn subset_examples() {
        let s = make_schedule(16, 16, Anchor::Center, &Growth::Uniform(1)).unwrap();
        assert_eq!(sizes(&s.subset(&[0, 3, 7]).unwrap()), vec![2, 8, 16]);
        assert_eq!(s.subset(&(0..8).collect::<Vec<_>>()).unwrap(), s);
        let one = s.subset(&[7]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.origin(), &[7]);
        assert!(s.subset(&[0, 3]).is_err());
        assert!(s.subset(&[]).is_err());
    }

    #[test]
    fn crop_index_arithmetic() {
        let g = TokenGrid::new(4, 4, 16, (0..16).collect()).unwrap();
        let c = crop(&g, &Extent::new(1, 1, 3, 3).unwrap()).unwrap();
        assert_eq!(c.cells(), &[5, 6, 9, 10]);
        assert_eq!(crop(&g, &g.full_extent()).unwrap(), g);
        assert!(crop(&g, &Extent::new(0, 0, 5, 2).unwrap()).is_err());
        // nested crops compose
        let outer = Extent::new(0, 1, 4, 4).unwrap();
        let inner = Extent::new(1, 2, 3, 3).unwrap();
        let local = Extent::new(1, 1, 3, 2).unwrap();
        assert_eq!(crop(&crop(&g, &outer).unwrap(), &local).unwrap(), crop(&g, &inner).unwrap());
    }

    #[test]
    fn center_fill_counts() {
        let outer = Extent::new(0, 0, 4, 4).unwrap();
        let all_prompt = center_fill(&outer, None, 8).unwrap();
        assert_eq!(all_prompt.prompt_count(), 16);

        let inner_e = Extent::new(1, 1, 3, 3).unwrap();
        let inner = TokenGrid::filled(2, 2, 8, 5).unwrap();
        let f = center_fill(&outer, Some((&inner, &inner_e)), 8).unwrap();
        assert_eq!(f.prompt_count(), 12);
        assert_eq!(f.ids.iter().filter(|&&i| i == 5).count(), 4);

        let same = TokenGrid::filled(4, 4, 8, 3).unwrap();
        let f = center_fill(&outer, Some((&same, &outer)), 8).unwrap();
        assert_eq!(f.prompt_count(), 0);

        let wrong = TokenGrid::filled(3, 2, 8, 3).unwrap();
        assert!(center_fill(&outer, Some((&wrong, &inner_e)), 8).is_err());
    }

    #[test]
    fn radial_encode_lengths() {
        let s = make_schedule(16, 16, Anchor::Center, &Growth::Uniform(1)).unwrap();
        let g = TokenGrid::new(16, 16, 64, (0..256).map(|i| (i * 7 % 64) as u32).collect()).unwrap();
        let enc = radial_encode(&g, &s).unwrap();
        assert_eq!(enc.layout.total_len(), 816);
        assert_eq!(enc.inputs[0].prompt_count(), 4);
        // interior targets equal the previous input's copy of ground truth
        for seg in &enc.layout.segments[1..] {
            let input = &enc.inputs[seg.step];
            for (i, &(r, c)) in seg.positions.iter().enumerate() {
                if seg.regions[i] == Region::Interior {
                    assert_eq!(input.ids[i], g.get(r, c));
                } else {
                    assert!(input.is_prompt(i));
                }
            }
        }
        let one = preset_schedule("single", 16, 16).unwrap();
        let enc = radial_encode(&g, &one).unwrap();
        assert_eq!(enc.inputs[0].prompt_count(), 256);
        assert_eq!(enc.targets[0], g);
    }

    #[test]
    fn ring_counts_center() {
        let s = make_schedule(16, 16, Anchor::Center, &Growth::Uniform(1)).unwrap();
        let counts: Vec<_> = (0..s.len()).map(|k| ring_diff(&s, k).unwrap().len()).collect();
        assert_eq!(counts, vec![4, 12, 20, 28, 36, 44, 52, 60]);
        assert_eq!(counts.iter().sum::<usize>(), 256);
        assert_eq!(ring_diff(&s, 0).unwrap(), s.extents()[0].positions().collect::<Vec<_>>());
        assert!(ring_diff(&s, 8).is_err());
    }

    #[test]
    fn schedule_text_roundtrip() {
        let s = make_schedule(16, 16, Anchor::Center, &Growth::Uniform(1)).unwrap();
        let text = s.to_text();
        assert!(text.starts_with("grid: 16 16\nanchor: center\n1: 7,7,9,9\n"));
        let back = RingSchedule::from_text(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), text);
        assert!(RingSchedule::from_text("grid: 4 4\nanchor: center\n1: 1,1,3,3\n").is_err());
        assert!(RingSchedule::from_text("grid: 4 4\nanchor: middle\n1: 0,0,4,4\n").is_err());
    }

    #[test]
    fn grid_text_roundtrip() {
        let g = TokenGrid::new(2, 3, 10, vec![1, 2, 3, 4, 5, 9]).unwrap();
        assert_eq!(g.to_text(), "1 2 3\n4 5 9\n");
        assert_eq!(TokenGrid::from_text(&g.to_text(), 10).unwrap(), g);
        assert!(TokenGrid::from_text("1 2\n3\n", 10).is_err());
        assert!(TokenGrid::from_text("1 12\n", 10).is_err());
    }
}
