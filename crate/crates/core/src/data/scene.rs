//! The synthetic shapes world: scenes on the 8×8 token grid, their captions, edit triples
//! and an analytic reading of any grid back into caption facts.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::tokenizer::{decode_tokens, EditMask, PixelMask, TokenGrid, TokenizerConfig};

/// Token rows and columns of a scene; quadrants are 4×4 blocks.
pub const GRID: usize = 8;
const HALF: usize = GRID / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
    Orange,
    Purple,
    Gray,
}

impl Color {
    pub const ALL: [Color; 11] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
        Color::Orange,
        Color::Purple,
        Color::Gray,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 170, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Cyan => [0, 255, 255],
            Color::Magenta => [255, 0, 255],
            Color::White => [255, 255, 255],
            Color::Black => [0, 0, 0],
            Color::Orange => [255, 170, 0],
            Color::Purple => [170, 0, 255],
            Color::Gray => [85, 85, 85],
        }
    }

    /// Palette id under the default lattice tokenizer.
    pub fn token(self) -> u32 {
        let [r, g, b] = self.rgb();
        (r as u32 / 85) * 16 + (g as u32 / 85) * 4 + b as u32 / 85
    }

    pub fn from_token(id: u32) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.token() == id)
    }

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Gray => "gray",
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Bar];

    /// Occupied cells relative to the quadrant origin; all offsets lie in 1..=3, so objects
    /// in different quadrants never touch.
    pub fn footprint(self) -> &'static [(usize, usize)] {
        match self {
            Shape::Square => &[(1, 1), (1, 2), (2, 1), (2, 2)],
            Shape::Circle => &[(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)],
            Shape::Bar => &[(2, 1), (2, 2), (2, 3)],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Bar => "bar",
        }
    }

    pub fn from_word(w: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    pub fn origin(self) -> (usize, usize) {
        let i = self as usize;
        ((i / 2) * HALF, (i % 2) * HALF)
    }

    pub fn of_cell(r: usize, c: usize) -> Quadrant {
        Quadrant::ALL[(r / HALF) * 2 + c / HALF]
    }

    pub fn words(self) -> [&'static str; 2] {
        match self {
            Quadrant::TopLeft => ["top", "left"],
            Quadrant::TopRight => ["top", "right"],
            Quadrant::BottomLeft => ["bottom", "left"],
            Quadrant::BottomRight => ["bottom", "right"],
        }
    }

    pub fn from_words(v: &str, h: &str) -> Option<Quadrant> {
        Quadrant::ALL.into_iter().find(|q| q.words() == [v, h])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub quadrant: Quadrant,
    /// Top-left cell of the footprint's bounding box.
    pub cell: (usize, usize),
    /// Footprint size in patches.
    pub size: usize,
}

impl SceneObject {
    pub fn new(shape: Shape, color: Color, quadrant: Quadrant) -> Self {
        let (r0, c0) = quadrant.origin();
        let fp = shape.footprint();
        let dr = fp.iter().map(|p| p.0).min().expect("non-empty");
        let dc = fp.iter().map(|p| p.1).min().expect("non-empty");
        Self { shape, color, quadrant, cell: (r0 + dr, c0 + dc), size: fp.len() }
    }

    /// Raster positions of the occupied cells.
    pub fn positions(&self) -> Vec<usize> {
        let (r0, c0) = self.quadrant.origin();
        self.shape.footprint().iter().map(|(r, c)| (r0 + r) * GRID + c0 + c).collect()
    }

    fn phrase(&self) -> String {
        let [v, h] = self.quadrant.words();
        format!("a {} {} {v} {h}", self.color.word(), self.shape.word())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: Color,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if *o != SceneObject::new(o.shape, o.color, o.quadrant) {
                return Err(NepError::Input(format!("object {i} has inconsistent geometry")));
            }
            if o.color == self.background {
                return Err(NepError::Input(format!("object {i} is the background colour")));
            }
            if self.objects[..i].iter().any(|p| p.quadrant == o.quadrant) {
                return Err(NepError::Input(format!("two objects share the {:?} quadrant", o.quadrant)));
            }
            if self.objects[..i].iter().any(|p| p.shape == o.shape && p.color == o.color) {
                return Err(NepError::Input("object descriptions must be unique".into()));
            }
        }
        Ok(())
    }

    /// Objects in quadrant order.
    pub fn sorted_objects(&self) -> Vec<SceneObject> {
        let mut v = self.objects.clone();
        v.sort_by_key(|o| o.quadrant);
        v
    }

    pub fn object_in(&self, q: Quadrant) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.quadrant == q)
    }

    pub fn find(&self, shape: Shape, color: Color) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.shape == shape && o.color == color)
    }

    pub fn grid(&self) -> TokenGrid {
        let mut ids = vec![self.background.token(); GRID * GRID];
        for o in &self.objects {
            for p in o.positions() {
                ids[p] = o.color.token();
            }
        }
        TokenGrid::new(ids, GRID, GRID).expect("grid shape")
    }

    pub fn render(&self, tok: &TokenizerConfig) -> Result<RgbImage> {
        check_world(tok)?;
        decode_tokens(&self.grid(), tok)
    }

    /// `"a red circle top left and a blue bar bottom right on green"`, or
    /// `"a green background"` without objects.
    pub fn caption(&self) -> String {
        if self.objects.is_empty() {
            return format!("a {} background", self.background.word());
        }
        let parts: Vec<String> = self.sorted_objects().iter().map(|o| o.phrase()).collect();
        format!("{} on {}", parts.join(" and "), self.background.word())
    }

    pub fn parse_caption(text: &str) -> Result<SceneSpec> {
        let bad = || NepError::Input(format!("not a scene caption: {text:?}"));
        let words: Vec<&str> = text.split_whitespace().collect();
        if let ["a", c, "background"] = words.as_slice() {
            return Ok(SceneSpec { objects: vec![], background: Color::from_word(c).ok_or_else(bad)? });
        }
        let n = words.len();
        if n < 7 || words[n - 2] != "on" {
            return Err(bad());
        }
        let background = Color::from_word(words[n - 1]).ok_or_else(bad)?;
        let mut objects = Vec::new();
        for chunk in words[..n - 2].split(|w| *w == "and") {
            match chunk {
                ["a", c, s, v, h] => {
                    let color = Color::from_word(c).ok_or_else(bad)?;
                    let shape = Shape::from_word(s).ok_or_else(bad)?;
                    let q = Quadrant::from_words(v, h).ok_or_else(bad)?;
                    objects.push(SceneObject::new(shape, color, q));
                }
                _ => return Err(bad()),
            }
        }
        Ok(SceneSpec { objects, background })
    }
}

/// The world is laid out for the default 32×32, patch-4 lattice tokenizer.
pub fn check_world(tok: &TokenizerConfig) -> Result<()> {
    let lattice = TokenizerConfig::default();
    if tok.grid_rows() != GRID || tok.grid_cols() != GRID || tok.palette != lattice.palette {
        return Err(NepError::Config("the shapes world needs the default 8×8 lattice tokenizer".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Recolor,
    Add,
    Remove,
    Replace,
}

impl EditOp {
    pub const ALL: [EditOp; 4] = [EditOp::Recolor, EditOp::Add, EditOp::Remove, EditOp::Replace];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTriple {
    pub source: SceneSpec,
    pub op: EditOp,
    pub target: SceneSpec,
    /// Patches whose content differs between source and target.
    pub mask: PixelMask,
    pub instruction: String,
}

impl EditTriple {
    pub fn edit_mask(&self, tok: &TokenizerConfig) -> Result<EditMask> {
        crate::tokenizer::patchify_mask(&self.mask, tok)
    }
}

pub fn random_scene<R: Rng + ?Sized>(rng: &mut R) -> SceneSpec {
    let background = *Color::ALL.choose(rng).expect("colours");
    let n = rng.gen_range(1..=2);
    let mut quads = Quadrant::ALL.to_vec();
    quads.shuffle(rng);
    let mut spec = SceneSpec { objects: Vec::new(), background };
    for &q in &quads[..n] {
        let (shape, color) = fresh_description(&spec, None, rng);
        spec.objects.push(SceneObject::new(shape, color, q));
    }
    spec
}

/// A shape/colour pair not yet used by `spec` (ignoring `skip`), off the background.
fn fresh_description<R: Rng + ?Sized>(spec: &SceneSpec, skip: Option<usize>, rng: &mut R) -> (Shape, Color) {
    loop {
        let shape = *Shape::ALL.choose(rng).expect("shapes");
        let color = *Color::ALL.choose(rng).expect("colours");
        let taken = spec
            .objects
            .iter()
            .enumerate()
            .any(|(i, o)| Some(i) != skip && o.shape == shape && o.color == color);
        if color != spec.background && !taken {
            return (shape, color);
        }
    }
}

fn mask_of(positions: &[usize]) -> PixelMask {
    EditMask::from_positions(positions, &TokenizerConfig::default()).expect("world positions").pixel
}

/// Applies `op` to `source`; every op is feasible on a scene with one or two objects.
pub fn apply_edit<R: Rng + ?Sized>(source: &SceneSpec, op: EditOp, rng: &mut R) -> EditTriple {
    let mut target = source.clone();
    let pick = rng.gen_range(0..source.objects.len().max(1));
    let (instruction, changed) = match op {
        EditOp::Recolor => {
            let o = source.objects[pick];
            let color = loop {
                let c = *Color::ALL.choose(rng).expect("colours");
                if c != o.color && c != source.background && source.find(o.shape, c).is_none() {
                    break c;
                }
            };
            target.objects[pick].color = color;
            (format!("make the {} {} {}", o.color.word(), o.shape.word(), color.word()), o.positions())
        }
        EditOp::Remove => {
            let o = target.objects.remove(pick);
            (format!("remove the {} {}", o.color.word(), o.shape.word()), o.positions())
        }
        EditOp::Add => {
            let free: Vec<Quadrant> =
                Quadrant::ALL.into_iter().filter(|q| source.object_in(*q).is_none()).collect();
            let q = *free.choose(rng).expect("at most three objects");
            let (shape, color) = fresh_description(source, None, rng);
            let o = SceneObject::new(shape, color, q);
            target.objects.push(o);
            let [v, h] = q.words();
            (format!("add a {} {} {v} {h}", color.word(), shape.word()), o.positions())
        }
        EditOp::Replace => {
            let old = source.objects[pick];
            let (shape, color) = loop {
                let d = fresh_description(source, Some(pick), rng);
                if d.0 != old.shape {
                    break d;
                }
            };
            let new = SceneObject::new(shape, color, old.quadrant);
            target.objects[pick] = new;
            let mut cells = old.positions();
            cells.extend(new.positions());
            (
                format!("replace the {} {} with a {} {}", old.color.word(), old.shape.word(), color.word(), shape.word()),
                cells,
            )
        }
    };
    EditTriple { source: source.clone(), op, target, mask: mask_of(&changed), instruction }
}

pub fn random_edit<R: Rng + ?Sized>(rng: &mut R) -> EditTriple {
    let op = *EditOp::ALL.choose(rng).expect("ops");
    let source = random_scene(rng);
    apply_edit(&source, op, rng)
}

/// What one quadrant of a grid shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadrantReading {
    Empty,
    Object { shape: Shape, color: Color },
    /// Foreground cells that form no known object.
    Clutter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneReading {
    /// Majority token (lowest id on ties).
    pub background_token: u32,
    pub quadrants: [QuadrantReading; 4],
}

impl SceneReading {
    pub fn background(&self) -> Option<Color> {
        Color::from_token(self.background_token)
    }

    pub fn objects(&self) -> Vec<(Shape, Color)> {
        self.quadrants
            .iter()
            .filter_map(|q| match *q {
                QuadrantReading::Object { shape, color } => Some((shape, color)),
                _ => None,
            })
            .collect()
    }
}

pub fn read_grid(grid: &TokenGrid) -> SceneReading {
    let mut counts = [0usize; 64];
    for &id in &grid.ids {
        counts[id as usize % 64] += 1;
    }
    let bg = (0..64).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).expect("non-empty") as u32;
    let quadrants = Quadrant::ALL.map(|q| {
        let (r0, c0) = q.origin();
        let mut fg = Vec::new();
        for r in 0..HALF {
            for c in 0..HALF {
                let id = grid.ids[(r0 + r) * GRID + c0 + c];
                if id != bg {
                    fg.push(((r, c), id));
                }
            }
        }
        if fg.is_empty() {
            return QuadrantReading::Empty;
        }
        let id = fg[0].1;
        let color = Color::from_token(id);
        let cells: Vec<(usize, usize)> = fg.iter().map(|f| f.0).collect();
        let shape = Shape::ALL.into_iter().find(|s| s.footprint() == cells.as_slice());
        match (shape, color, fg.iter().all(|f| f.1 == id)) {
            (Some(shape), Some(color), true) => QuadrantReading::Object { shape, color },
            _ => QuadrantReading::Clutter,
        }
    });
    SceneReading { background_token: bg, quadrants }
}

/// Fraction of the caption's five facts (four quadrants plus background) that the grid shows.
pub fn scene_match(grid: &TokenGrid, spec: &SceneSpec) -> f64 {
    let reading = read_grid(grid);
    let mut hits = (reading.background() == Some(spec.background)) as usize;
    for (i, q) in Quadrant::ALL.into_iter().enumerate() {
        let want = match spec.object_in(q) {
            Some(o) => QuadrantReading::Object { shape: o.shape, color: o.color },
            None => QuadrantReading::Empty,
        };
        hits += (reading.quadrants[i] == want) as usize;
    }
    hits as f64 / 5.0
}
