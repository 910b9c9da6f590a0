use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenSeq, Word};
use crate::config::DataSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 200;
const BACKGROUND: [u8; 3] = [24, 24, 28];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
const RELATIONS: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

impl Color {
    fn word(self) -> Word {
        match self {
            Color::Red => Word::Red,
            Color::Green => Word::Green,
            Color::Blue => Word::Blue,
            Color::Yellow => Word::Yellow,
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 190, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [235, 215, 40],
        }
    }
}

impl Shape {
    fn word(self) -> Word {
        match self {
            Shape::Circle => Word::Circle,
            Shape::Square => Word::Square,
            Shape::Triangle => Word::Triangle,
        }
    }

    /// Whether the offset `(dy, dx)` from the cell centre lies inside a shape
    /// of half-extent `half`.
    fn covers(self, dy: f64, dx: f64, half: f64) -> bool {
        match self {
            Shape::Square => dy.abs() <= half && dx.abs() <= half,
            Shape::Circle => dy * dy + dx * dx <= half * half,
            Shape::Triangle => {
                // apex up, base on the bottom edge
                let t = (dy + half) / (2.0 * half);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * half
            }
        }
    }
}

impl Relation {
    fn words(self) -> &'static [Word] {
        match self {
            Relation::LeftOf => &[Word::Left, Word::Of],
            Relation::RightOf => &[Word::Right, Word::Of],
            Relation::Above => &[Word::Above],
            Relation::Below => &[Word::Below],
        }
    }

    /// `subject <relation> landmark` on grid cells.
    fn holds(self, subject: &PlacedObject, landmark: &PlacedObject) -> bool {
        match self {
            Relation::LeftOf => subject.col < landmark.col,
            Relation::RightOf => subject.col > landmark.col,
            Relation::Above => subject.row < landmark.row,
            Relation::Below => subject.row > landmark.row,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

impl PlacedObject {
    fn is(&self, color: Color, shape: Shape) -> bool {
        self.color == color && self.shape == shape
    }
}

/// `<color> <shape> [<relation> <color> <shape>]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub color: Color,
    pub shape: Shape,
    pub relation: Option<(Relation, Color, Shape)>,
}

impl Expression {
    pub fn words(&self) -> Vec<Word> {
        let mut w = vec![self.color.word(), self.shape.word()];
        if let Some((rel, c, s)) = self.relation {
            w.extend_from_slice(rel.words());
            w.push(c.word());
            w.push(s.word());
        }
        w
    }

    /// Tokens including the global slot.
    pub fn token_len(&self) -> usize {
        1 + self.words().len()
    }
}

/// Indices of the objects an expression can refer to. A relation clause is
/// satisfied when some other object matching the landmark description stands
/// in that relation to the candidate.
pub fn referents(objects: &[PlacedObject], expr: &Expression) -> Vec<usize> {
    (0..objects.len())
        .filter(|&i| {
            let o = &objects[i];
            o.is(expr.color, expr.shape)
                && expr.relation.is_none_or(|(rel, c, s)| {
                    objects
                        .iter()
                        .enumerate()
                        .any(|(j, l)| j != i && l.is(c, s) && rel.holds(o, l))
                })
        })
        .collect()
}

/// Shortest expression singling out `objects[target]`, if the grammar has one.
/// Ties are broken by relation order, then landmark index.
pub fn describe(objects: &[PlacedObject], target: usize) -> Option<Expression> {
    let t = objects[target];
    let plain = Expression {
        color: t.color,
        shape: t.shape,
        relation: None,
    };
    if referents(objects, &plain) == [target] {
        return Some(plain);
    }
    let mut candidates: Vec<Expression> = Vec::new();
    for rel in RELATIONS {
        for (j, l) in objects.iter().enumerate() {
            if j == target {
                continue;
            }
            let e = Expression {
                relation: Some((rel, l.color, l.shape)),
                ..plain
            };
            if referents(objects, &e) == [target] {
                candidates.push(e);
            }
        }
    }
    candidates.into_iter().min_by_key(Expression::token_len)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// `[H, W, 3]` in `[0, 1]`, quantized to multiples of 1/255.
    pub image: Tensor<f32>,
    pub tokens: TokenSeq,
    /// `[H, W]` with 1 on the target's pixels and 0 elsewhere.
    pub gt_mask: Tensor<f32>,
    pub seed: u64,
    pub objects: Vec<PlacedObject>,
    pub target: usize,
    pub expression: Expression,
}

impl SampleRecord {
    pub fn text(&self) -> String {
        self.tokens.text()
    }
}

pub fn validate_spec(spec: &DataSpec) -> Result<()> {
    let bad = |msg: String| Err(Error::Config(msg));
    if spec.grid == 0 || !spec.image_size.is_multiple_of(spec.grid) {
        return bad(format!("image size {} not divisible into a {}-cell grid", spec.image_size, spec.grid));
    }
    let cell = spec.image_size / spec.grid;
    if cell < 2 * spec.cell_margin + 6 {
        return bad(format!("cells of {cell} px are too small for a margin of {}", spec.cell_margin));
    }
    if spec.min_objects == 0 || spec.min_objects > spec.max_objects {
        return bad(format!("object count range {}..={} is empty", spec.min_objects, spec.max_objects));
    }
    if spec.max_objects > spec.grid * spec.grid {
        return bad(format!("{} objects do not fit in {} cells", spec.max_objects, spec.grid * spec.grid));
    }
    if spec.max_len < 3 {
        return bad("max_len must leave room for the global slot, a color and a shape".into());
    }
    Ok(())
}

/// Per-sample seed of item `index` in the split seeded by `split_seed`.
pub fn sample_seed(split_seed: u64, index: usize) -> u64 {
    split_seed.wrapping_mul(1 << 32).wrapping_add(index as u64)
}

/// A scene and expression drawn only from `seed` and `spec`.
///
/// Scenes whose target has no unambiguous description within `max_len`
/// tokens are redrawn, up to a fixed number of attempts.
pub fn gen_sample(seed: u64, spec: &DataSpec) -> Result<SampleRecord> {
    generate(seed, spec, MAX_ATTEMPTS)
}

fn generate(seed: u64, spec: &DataSpec, attempts: usize) -> Result<SampleRecord> {
    validate_spec(spec)?;
    let mut rng = rng::stream(seed, rng::SAMPLE_STREAM);
    let cells = spec.grid * spec.grid;
    for _ in 0..attempts {
        let n = rng.random_range(spec.min_objects..=spec.max_objects);
        let objects: Vec<PlacedObject> = sample_indices(&mut rng, cells, n)
            .into_iter()
            .map(|cell| PlacedObject {
                shape: SHAPES[rng.random_range(0..SHAPES.len())],
                color: COLORS[rng.random_range(0..COLORS.len())],
                row: cell / spec.grid,
                col: cell % spec.grid,
            })
            .collect();
        let target = rng.random_range(0..n);
        let Some(expression) = describe(&objects, target) else {
            continue;
        };
        if expression.token_len() > spec.max_len {
            continue;
        }
        let tokens = TokenSeq::from_words(&expression.words(), spec.max_len)?;
        let (image, gt_mask) = render(spec, &objects, target);
        return Ok(SampleRecord {
            image,
            tokens,
            gt_mask,
            seed,
            objects,
            target,
            expression,
        });
    }
    Err(Error::Generation(format!(
        "no describable scene after {attempts} attempts for seed {seed}"
    )))
}

fn render(spec: &DataSpec, objects: &[PlacedObject], target: usize) -> (Tensor<f32>, Tensor<f32>) {
    let size = spec.image_size;
    let cell = size / spec.grid;
    let half = cell as f64 / 2.0 - spec.cell_margin as f64;
    let mut pixels = vec![0u8; size * size * 3];
    for px in pixels.chunks_exact_mut(3) {
        px.copy_from_slice(&BACKGROUND);
    }
    let mut mask = vec![0.0f32; size * size];
    for (k, o) in objects.iter().enumerate() {
        let cy = (o.row * cell) as f64 + cell as f64 / 2.0;
        let cx = (o.col * cell) as f64 + cell as f64 / 2.0;
        for y in o.row * cell..(o.row + 1) * cell {
            for x in o.col * cell..(o.col + 1) * cell {
                if o.shape.covers(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, half) {
                    let p = y * size + x;
                    pixels[3 * p..3 * p + 3].copy_from_slice(&o.color.rgb());
                    if k == target {
                        mask[p] = 1.0;
                    }
                }
            }
        }
    }
    let image = pixels.iter().map(|&v| v as f32 / 255.0).collect();
    (
        Tensor::new(&[size, size, 3], image).expect("image extents"),
        Tensor::new(&[size, size], mask).expect("mask extents"),
    )
}

/// `count` samples seeded by [`sample_seed`]`(split_seed, i)`.
pub fn gen_dataset(split_seed: u64, count: usize, spec: &DataSpec) -> Result<Vec<SampleRecord>> {
    (0..count).map(|i| gen_sample(sample_seed(split_seed, i), spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(color: Color, shape: Shape, row: usize, col: usize) -> PlacedObject {
        PlacedObject { shape, color, row, col }
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = DataSpec::default();
        assert_eq!(gen_sample(11, &spec).unwrap(), gen_sample(11, &spec).unwrap());
        assert_ne!(gen_sample(11, &spec).unwrap().image, gen_sample(12, &spec).unwrap().image);
    }

    #[test]
    fn single_object_gets_plain_expression() {
        let spec = DataSpec {
            min_objects: 1,
            max_objects: 1,
            ..DataSpec::default()
        };
        for seed in 0..20 {
            let s = gen_sample(seed, &spec).unwrap();
            assert_eq!(s.expression.relation, None);
            assert_eq!(s.tokens.len(), 3);
        }
    }

    #[test]
    fn duplicate_referents_need_a_relation() {
        let objects = [
            obj(Color::Red, Shape::Circle, 0, 0),
            obj(Color::Red, Shape::Circle, 0, 2),
            obj(Color::Blue, Shape::Square, 1, 1),
        ];
        let e = describe(&objects, 0).unwrap();
        assert!(e.relation.is_some());
        assert_eq!(referents(&objects, &e), vec![0]);
        let plain = Expression { color: Color::Red, shape: Shape::Circle, relation: None };
        assert_eq!(referents(&objects, &plain), vec![0, 1]);
    }

    #[test]
    fn twins_are_told_apart_by_position() {
        let stacked = [obj(Color::Red, Shape::Circle, 0, 0), obj(Color::Red, Shape::Circle, 1, 0)];
        assert_eq!(describe(&stacked, 0).unwrap().relation.unwrap().0, Relation::Above);
        assert_eq!(describe(&stacked, 1).unwrap().relation.unwrap().0, Relation::Below);
        let side = [obj(Color::Red, Shape::Circle, 0, 0), obj(Color::Red, Shape::Circle, 0, 1)];
        assert_eq!(describe(&side, 1).unwrap().relation.unwrap().0, Relation::RightOf);
    }

    #[test]
    fn mask_covers_only_the_target() {
        let spec = DataSpec::default();
        let s = gen_sample(3, &spec).unwrap();
        let cell = spec.image_size / spec.grid;
        let t = s.objects[s.target];
        let size = spec.image_size;
        let mut inside = 0;
        for (p, &m) in s.gt_mask.data().iter().enumerate() {
            let (y, x) = (p / size, p % size);
            let in_cell = y / cell == t.row && x / cell == t.col;
            if m == 1.0 {
                assert!(in_cell);
                inside += 1;
                let rgb = &s.image.data()[3 * p..3 * p + 3];
                assert_eq!(rgb, t.color.rgb().map(|v| v as f32 / 255.0).as_slice());
            } else {
                assert_eq!(m, 0.0);
            }
        }
        assert!(inside > 10);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let too_many = DataSpec { max_objects: 17, ..DataSpec::default() };
        assert!(matches!(gen_sample(0, &too_many), Err(Error::Config(_))));
        let tiny = DataSpec { grid: 16, ..DataSpec::default() };
        assert!(validate_spec(&tiny).is_err());
    }

    #[test]
    fn exhausted_retries_are_a_generation_error() {
        assert!(matches!(generate(0, &DataSpec::default(), 0), Err(Error::Generation(_))));
    }
}
