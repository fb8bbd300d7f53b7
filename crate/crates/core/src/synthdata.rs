//! Deterministic synthetic detection scenes.
//!
//! Each object is a flat-colored body plus an accent part whose geometry
//! depends on the class (a stripe, a cab on top, a post on top). Colors
//! come from a [`ComboSplit`]: training and seen-test images use the
//! training combos, the unseen-combo test set only the held-out ones.
//! Test images may carry an unlabeled "chassis" bar under an object.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::GroundTruthBox;
use crate::model::Sample;
use crate::partition::{DatasetManifest, Record};
use crate::rng::Prng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("impossible combo request: {0}")]
    Combo(String),
    #[error("{path}: {reason}")]
    Image { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

const CHASSIS: Rgb = Rgb([40, 40, 40]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyShape {
    /// Body with an accent stripe along its bottom edge.
    Rect,
    /// Body with a narrower accent block on top, flush right.
    RectWithTop,
    /// Body with a thin accent post centered on top.
    RectWithPost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub class_id: usize,
    pub name: String,
    pub shape: BodyShape,
    /// Relative frequency of this class among generated images.
    pub share: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColorCombo {
    pub body: Rgb,
    pub accent: Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboSplit {
    pub train: Vec<ColorCombo>,
    pub test: Vec<ColorCombo>,
}

impl ComboSplit {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(SynthError::Combo("both combo sets must be nonempty".into()));
        }
        if let Some(c) = self.test.iter().find(|c| self.train.contains(c)) {
            return Err(SynthError::Combo(format!("{c:?} is both a train and a test combo")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub archetypes: Vec<Archetype>,
    pub backgrounds: Vec<Rgb>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Body width range as fractions of the image side.
    pub body_width: (f32, f32),
    pub body_height: (f32, f32),
    pub blur_probability: f64,
    /// Global brightness factor; `0.5` stands in for dim lighting.
    pub brightness: f32,
    /// Chance that a test-set object gets an unlabeled chassis bar.
    pub distractor_probability: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} < 16", self.image_size));
        }
        if self.archetypes.is_empty() {
            return bad("no archetypes".into());
        }
        for (i, a) in self.archetypes.iter().enumerate() {
            if a.class_id != i {
                return bad(format!("archetype {i} has class id {}", a.class_id));
            }
        }
        if self.archetypes.iter().all(|a| a.share == 0) {
            return bad("all archetype shares are zero".into());
        }
        if self.backgrounds.is_empty() {
            return bad("no backgrounds".into());
        }
        if !(1..=2).contains(&self.min_objects) || !(self.min_objects..=2).contains(&self.max_objects) {
            return bad(format!("objects per image {}..={} outside 1..=2", self.min_objects, self.max_objects));
        }
        for (lo, hi) in [self.body_width, self.body_height] {
            if !(lo > 0.0 && lo <= hi && hi <= 0.6) {
                return bad(format!("body size range ({lo}, {hi}) outside (0, 0.6]"));
            }
        }
        if !(0.0..=1.0).contains(&self.blur_probability) || !(0.0..=1.0).contains(&self.distractor_probability) {
            return bad("probabilities must lie in [0,1]".into());
        }
        if !(self.brightness > 0.0 && self.brightness <= 1.0) {
            return bad(format!("brightness {} outside (0,1]", self.brightness));
        }
        Ok(())
    }
}

/// Packed RGB8, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(size: usize, color: Rgb) -> Self {
        Self {
            size,
            pixels: color.0.repeat(size * size),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn fill_rect(&mut self, r: PixelRect, color: Rgb) {
        for y in r.y..(r.y + r.h).min(self.size) {
            for x in r.x..(r.x + r.w).min(self.size) {
                let i = (y * self.size + x) * 3;
                self.pixels[i..i + 3].copy_from_slice(&color.0);
            }
        }
    }

    /// 3×3 mean over in-bounds neighbors, rounded half up.
    pub fn box_blur(&self) -> Image {
        let n = self.size as isize;
        let mut out = self.clone();
        for y in 0..n {
            for x in 0..n {
                for ch in 0..3 {
                    let (mut sum, mut count) = (0u32, 0u32);
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (xx, yy) = (x + dx, y + dy);
                            if (0..n).contains(&xx) && (0..n).contains(&yy) {
                                sum += u32::from(self.pixels[((yy * n + xx) * 3) as usize + ch]);
                                count += 1;
                            }
                        }
                    }
                    out.pixels[((y * n + x) * 3) as usize + ch] = ((sum + count / 2) / count) as u8;
                }
            }
        }
        out
    }

    fn scale_brightness(&mut self, factor: f32) {
        if factor != 1.0 {
            for p in &mut self.pixels {
                *p = (f32::from(*p) * factor).round() as u8;
            }
        }
    }

    /// Model input: channels scaled to `[-1, 1]`.
    pub fn to_input(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p) / 127.5 - 1.0).collect()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parse binary PPM (P6) or PGM (P5, expanded to RGB), square, maxval 255.
    pub fn from_pnm(bytes: &[u8], origin: &str) -> Result<Image, SynthError> {
        let err = |reason: &str| SynthError::Image {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
        }
        pos += 1;
        let channels = match fields[0] {
            "P6" => 3,
            "P5" => 1,
            _ => return Err(err("not a binary PPM/PGM")),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if w != h {
            return Err(err("image is not square"));
        }
        if maxval != 255 {
            return Err(err("only 8-bit images are supported"));
        }
        let data = bytes.get(pos..pos + w * h * channels).ok_or_else(|| err("truncated pixel data"))?;
        let pixels = if channels == 3 {
            data.to_vec()
        } else {
            data.iter().flat_map(|&g| [g, g, g]).collect()
        };
        Ok(Image { size: w, pixels })
    }

    pub fn read(path: &Path) -> Result<Image, SynthError> {
        Image::from_pnm(&fs::read(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PixelRect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl PixelRect {
    fn overlaps(&self, o: &PixelRect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

/// An object placed in pixel coordinates; `(x, y)` is the top-left corner
/// of its labeled extent (body plus accent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub class_id: usize,
    pub shape: BodyShape,
    pub combo: ColorCombo,
    pub x: usize,
    pub y: usize,
    pub body_w: usize,
    pub body_h: usize,
    pub chassis: bool,
}

impl PlacedObject {
    fn top_h(&self) -> usize {
        match self.shape {
            BodyShape::Rect => 0,
            BodyShape::RectWithTop => (self.body_h / 2).max(2),
            BodyShape::RectWithPost => (self.body_h * 2 / 3).max(2),
        }
    }

    fn extent(&self) -> PixelRect {
        PixelRect {
            x: self.x,
            y: self.y,
            w: self.body_w,
            h: self.top_h() + self.body_h,
        }
    }

    fn chassis_rect(&self, image_size: usize) -> PixelRect {
        let e = self.extent();
        PixelRect {
            x: e.x + self.body_w / 8,
            y: e.y + e.h,
            w: self.body_w - self.body_w / 4,
            h: chassis_height(image_size),
        }
    }

    /// Extent including a chassis bar when present.
    fn footprint(&self, image_size: usize) -> PixelRect {
        let mut e = self.extent();
        if self.chassis {
            e.h += chassis_height(image_size);
        }
        e
    }

    fn draw(&self, img: &mut Image) {
        let top = self.top_h();
        let body = PixelRect {
            x: self.x,
            y: self.y + top,
            w: self.body_w,
            h: self.body_h,
        };
        img.fill_rect(body, self.combo.body);
        let accent = match self.shape {
            BodyShape::Rect => {
                let sh = (self.body_h / 4).max(1);
                PixelRect {
                    y: body.y + body.h - sh,
                    h: sh,
                    ..body
                }
            }
            BodyShape::RectWithTop => {
                let tw = (self.body_w / 2).max(2);
                PixelRect {
                    x: self.x + self.body_w - tw,
                    y: self.y,
                    w: tw,
                    h: top,
                }
            }
            BodyShape::RectWithPost => {
                let pw = (self.body_w / 6).max(2);
                PixelRect {
                    x: self.x + (self.body_w - pw) / 2,
                    y: self.y,
                    w: pw,
                    h: top,
                }
            }
        };
        img.fill_rect(accent, self.combo.accent);
        if self.chassis {
            img.fill_rect(self.chassis_rect(img.size), CHASSIS);
        }
    }

    /// Normalized box enclosing body and accent; the chassis is excluded.
    pub fn ground_truth(&self, image_size: usize) -> GroundTruthBox {
        let e = self.extent();
        let s = image_size as f32;
        GroundTruthBox {
            class_id: self.class_id,
            cx: (e.x as f32 + e.w as f32 / 2.0) / s,
            cy: (e.y as f32 + e.h as f32 / 2.0) / s,
            w: e.w as f32 / s,
            h: e.h as f32 / s,
        }
    }
}

fn chassis_height(image_size: usize) -> usize {
    (image_size / 16).max(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub image: Image,
    pub boxes: Vec<GroundTruthBox>,
}

/// Paint `objects` over a flat background, then optionally blur and dim.
pub fn render_scene(image_size: usize, background: Rgb, objects: &[PlacedObject], blur: bool, brightness: f32) -> RenderedScene {
    let mut image = Image::filled(image_size, background);
    for o in objects {
        o.draw(&mut image);
    }
    if blur {
        image = image.box_blur();
    }
    image.scale_brightness(brightness);
    RenderedScene {
        image,
        boxes: objects.iter().map(|o| o.ground_truth(image_size)).collect(),
    }
}

/// One generated image and how it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: Image,
    pub objects: Vec<PlacedObject>,
    pub boxes: Vec<GroundTruthBox>,
    pub blurred: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub records: Vec<SceneRecord>,
    pub class_names: Vec<String>,
}

impl GeneratedSet {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            records: self
                .records
                .iter()
                .map(|r| Record {
                    id: r.id.clone(),
                    image_path: format!("images/{}.ppm", r.id),
                    boxes: r.boxes.clone(),
                })
                .collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.records
            .iter()
            .map(|r| Sample::detection(r.image.to_input(), r.boxes.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Images per class (an image counts once per class it contains).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for r in &self.records {
            for (c, count) in counts.iter_mut().enumerate() {
                *count += usize::from(r.boxes.iter().any(|b| b.class_id == c));
            }
        }
        counts
    }

    /// Write `images/<id>.ppm` and `labels/<id>.txt` under `root`.
    pub fn write_yolo_dir(&self, root: &Path) -> Result<(), SynthError> {
        let (images, labels) = (root.join("images"), root.join("labels"));
        fs::create_dir_all(&images)?;
        fs::create_dir_all(&labels)?;
        for r in &self.records {
            fs::write(images.join(format!("{}.ppm", r.id)), r.image.to_ppm())?;
            let mut text = String::new();
            for b in &r.boxes {
                writeln!(text, "{} {:.6} {:.6} {:.6} {:.6}", b.class_id, b.cx, b.cy, b.w, b.h).unwrap();
            }
            fs::write(labels.join(format!("{}.txt", r.id)), text)?;
        }
        Ok(())
    }
}

/// Training set, seen-combo test set, and unseen-combo test set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: GeneratedSet,
    pub seen_test: GeneratedSet,
    pub unseen_test: GeneratedSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Partition {
    Train,
    SeenTest,
    UnseenTest,
}

impl Partition {
    fn tag(self) -> u64 {
        self as u64
    }

    fn prefix(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::SeenTest => "seen",
            Partition::UnseenTest => "unseen",
        }
    }
}

/// Largest-remainder allocation of `n` images over the archetype shares.
pub fn class_counts(archetypes: &[Archetype], n: usize) -> Vec<usize> {
    let total: u64 = archetypes.iter().map(|a| u64::from(a.share)).sum();
    let exact: Vec<(usize, u64)> = archetypes
        .iter()
        .map(|a| {
            let num = n as u64 * u64::from(a.share);
            ((num / total) as usize, num % total)
        })
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.0).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn place_object(
    spec: &SceneSpec,
    rng: &mut Prng,
    class_id: usize,
    combos: &[ColorCombo],
    allow_chassis: bool,
    taken: &[PlacedObject],
) -> Option<PlacedObject> {
    let size = spec.image_size;
    let arche = &spec.archetypes[class_id];
    let px = |lo: f32, hi: f32, rng: &mut Prng| -> usize {
        let lo = (lo * size as f32).round() as usize;
        let hi = (hi * size as f32).round() as usize;
        lo.max(4) + rng.index(hi.max(lo) - lo + 1)
    };
    let body_w = px(spec.body_width.0, spec.body_width.1, rng);
    let body_h = px(spec.body_height.0, spec.body_height.1, rng);
    let combo = combos[rng.index(combos.len())];
    let chassis = allow_chassis && rng.bernoulli(spec.distractor_probability);
    let mut obj = PlacedObject {
        class_id,
        shape: arche.shape,
        combo,
        x: 0,
        y: 0,
        body_w,
        body_h,
        chassis,
    };
    let foot = obj.footprint(size);
    if foot.w > size || foot.h > size {
        return None;
    }
    for _ in 0..32 {
        obj.x = rng.index(size - foot.w + 1);
        obj.y = rng.index(size - foot.h + 1);
        let f = obj.footprint(size);
        if taken.iter().all(|t| !t.footprint(size).overlaps(&f)) {
            return Some(obj);
        }
    }
    None
}

fn generate_set(
    spec: &SceneSpec,
    partition: Partition,
    combos: &[ColorCombo],
    n: usize,
) -> GeneratedSet {
    let mut classes: Vec<usize> = class_counts(&spec.archetypes, n)
        .into_iter()
        .enumerate()
        .flat_map(|(c, k)| std::iter::repeat_n(c, k))
        .collect();
    Prng::derive(spec.seed, &[partition.tag(), u64::MAX]).shuffle(&mut classes);
    let allow_chassis = partition != Partition::Train;

    let records = classes
        .iter()
        .enumerate()
        .map(|(i, &class_id)| {
            let mut rng = Prng::derive(spec.seed, &[partition.tag(), i as u64]);
            let background = spec.backgrounds[rng.index(spec.backgrounds.len())];
            let n_objects = spec.min_objects + rng.index(spec.max_objects - spec.min_objects + 1);
            let mut objects = Vec::with_capacity(n_objects);
            for k in 0..n_objects {
                let class = if k == 0 {
                    class_id
                } else {
                    rng.index(spec.archetypes.len())
                };
                if let Some(o) = place_object(spec, &mut rng, class, combos, allow_chassis, &objects) {
                    objects.push(o);
                }
            }
            // Always draw, so the layout does not depend on the probability.
            let blurred = rng.unit() < spec.blur_probability;
            let scene = render_scene(spec.image_size, background, &objects, blurred, spec.brightness);
            SceneRecord {
                id: format!("{}_{i:05}", partition.prefix()),
                image: scene.image,
                objects,
                boxes: scene.boxes,
                blurred,
            }
        })
        .collect();
    GeneratedSet {
        records,
        class_names: spec.archetypes.iter().map(|a| a.name.clone()).collect(),
    }
}

pub fn generate_dataset(
    spec: &SceneSpec,
    combos: &ComboSplit,
    n_train: usize,
    n_test: usize,
) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    combos.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(SynthError::InvalidSpec("image counts must be >= 1".into()));
    }
    // The first object of every image must fit even at maximum size.
    let probe = PlacedObject {
        class_id: 0,
        shape: BodyShape::RectWithPost,
        combo: combos.train[0],
        x: 0,
        y: 0,
        body_w: (spec.body_width.1 * spec.image_size as f32).round() as usize,
        body_h: (spec.body_height.1 * spec.image_size as f32).round() as usize,
        chassis: true,
    };
    let f = probe.footprint(spec.image_size);
    if f.w > spec.image_size || f.h > spec.image_size {
        return Err(SynthError::InvalidSpec("objects do not fit the image".into()));
    }
    Ok(SyntheticDataset {
        train: generate_set(spec, Partition::Train, &combos.train, n_train),
        seen_test: generate_set(spec, Partition::SeenTest, &combos.train, n_test),
        unseen_test: generate_set(spec, Partition::UnseenTest, &combos.test, n_test),
    })
}

/// Named colors used by the presets.
pub mod palette {
    use super::Rgb;

    pub const RED: Rgb = Rgb([200, 40, 40]);
    pub const BLUE: Rgb = Rgb([40, 60, 200]);
    pub const WHITE: Rgb = Rgb([235, 235, 235]);
    pub const LIGHT_RED: Rgb = Rgb([255, 140, 120]);
    pub const LIGHT_BLUE: Rgb = Rgb([120, 180, 255]);
    pub const YELLOW: Rgb = Rgb([230, 200, 40]);
    pub const GREEN: Rgb = Rgb([50, 160, 70]);

    /// Three flat backgrounds.
    pub const BACKGROUNDS: [Rgb; 3] = [Rgb([110, 110, 110]), Rgb([150, 130, 100]), Rgb([90, 120, 100])];
}

/// Two-class cab scene: 3:1 bodies without/with a top block; training
/// pairs each body with its matching accent, the held-out combos swap them.
pub fn cabin_preset(image_size: usize, seed: u64) -> (SceneSpec, ComboSplit) {
    use palette::*;
    let spec = SceneSpec {
        image_size,
        archetypes: vec![
            Archetype {
                class_id: 0,
                name: "cabin_without_windshield".into(),
                shape: BodyShape::Rect,
                share: 3,
            },
            Archetype {
                class_id: 1,
                name: "cabin_with_windshield".into(),
                shape: BodyShape::RectWithTop,
                share: 1,
            },
        ],
        backgrounds: BACKGROUNDS.to_vec(),
        min_objects: 1,
        max_objects: 1,
        body_width: (0.35, 0.5),
        body_height: (0.2, 0.28),
        blur_probability: 0.1,
        brightness: 1.0,
        distractor_probability: 0.5,
        seed,
    };
    let combos = ComboSplit {
        train: vec![
            ColorCombo { body: BLUE, accent: LIGHT_BLUE },
            ColorCombo { body: RED, accent: LIGHT_RED },
        ],
        test: vec![
            ColorCombo { body: BLUE, accent: LIGHT_RED },
            ColorCombo { body: RED, accent: LIGHT_BLUE },
        ],
    };
    (spec, combos)
}

/// Three equally frequent trailer shapes.
pub fn trailer_preset(image_size: usize, seed: u64) -> (SceneSpec, ComboSplit) {
    use palette::*;
    let arche = |class_id: usize, name: &str, shape| Archetype {
        class_id,
        name: name.into(),
        shape,
        share: 1,
    };
    let spec = SceneSpec {
        image_size,
        archetypes: vec![
            arche(0, "white_trailer", BodyShape::Rect),
            arche(1, "blue_trailer", BodyShape::RectWithTop),
            arche(2, "penholder_trailer", BodyShape::RectWithPost),
        ],
        backgrounds: BACKGROUNDS.to_vec(),
        min_objects: 1,
        max_objects: 1,
        body_width: (0.35, 0.5),
        body_height: (0.2, 0.28),
        blur_probability: 0.1,
        brightness: 1.0,
        distractor_probability: 0.5,
        seed,
    };
    let combos = ComboSplit {
        train: vec![
            ColorCombo { body: WHITE, accent: BLUE },
            ColorCombo { body: BLUE, accent: WHITE },
        ],
        test: vec![
            ColorCombo { body: YELLOW, accent: GREEN },
            ColorCombo { body: WHITE, accent: RED },
        ],
    };
    (spec, combos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(x: usize, y: usize, w: usize, h: usize, shape: BodyShape) -> PlacedObject {
        PlacedObject {
            class_id: 0,
            shape,
            combo: ColorCombo {
                body: palette::RED,
                accent: palette::LIGHT_RED,
            },
            x,
            y,
            body_w: w,
            body_h: h,
            chassis: false,
        }
    }

    #[test]
    fn centered_half_width_rect() {
        let scene = render_scene(64, palette::BACKGROUNDS[0], &[obj(16, 24, 32, 16, BodyShape::Rect)], false, 1.0);
        let b = scene.boxes[0];
        assert_eq!((b.cx, b.cy, b.w, b.h), (0.5, 0.5, 0.5, 0.25));
        assert_eq!(scene.image.get(16, 24), palette::RED.0);
        assert_eq!(scene.image.get(15, 24), palette::BACKGROUNDS[0].0);
    }

    #[test]
    fn box_includes_top_but_not_chassis() {
        let mut o = obj(10, 10, 20, 8, BodyShape::RectWithTop);
        o.chassis = true;
        let scene = render_scene(64, palette::BACKGROUNDS[0], &[o], false, 1.0);
        let b = scene.boxes[0];
        assert_eq!(b.h * 64.0, 12.0);
        assert_eq!(b.cy * 64.0, 16.0);
        // Accent block sits in the top-right corner of the box.
        assert_eq!(scene.image.get(29, 10), palette::LIGHT_RED.0);
        assert_eq!(scene.image.get(10, 10), palette::BACKGROUNDS[0].0);
        // Chassis row just below the box.
        assert_eq!(scene.image.get(15, 22), CHASSIS.0);
    }

    #[test]
    fn class_count_allocation() {
        let (spec, _) = cabin_preset(32, 0);
        assert_eq!(class_counts(&spec.archetypes, 800), vec![600, 200]);
        assert_eq!(class_counts(&spec.archetypes, 10), vec![8, 2]);
        let (t, _) = trailer_preset(32, 0);
        assert_eq!(class_counts(&t.archetypes, 10), vec![4, 3, 3]);
    }

    #[test]
    fn spec_validation() {
        let (mut spec, mut combos) = cabin_preset(32, 0);
        combos.test.push(combos.train[0]);
        assert!(matches!(generate_dataset(&spec, &combos, 4, 4), Err(SynthError::Combo(_))));
        spec.blur_probability = 1.5;
        let (_, combos) = cabin_preset(32, 0);
        assert!(generate_dataset(&spec, &combos, 4, 4).is_err());
    }

    #[test]
    fn pnm_roundtrip() {
        let scene = render_scene(16, palette::BACKGROUNDS[1], &[obj(2, 2, 8, 4, BodyShape::RectWithPost)], true, 0.5);
        let back = Image::from_pnm(&scene.image.to_ppm(), "mem").unwrap();
        assert_eq!(back, scene.image);
        let pgm = [b"P5\n# gray\n2 2\n255\n".as_slice(), &[0, 50, 100, 255]].concat();
        let g = Image::from_pnm(&pgm, "mem").unwrap();
        assert_eq!(g.get(1, 1), [255, 255, 255]);
        assert!(Image::from_pnm(b"P6\n2 2\n255\n\x00", "mem").is_err());
    }
}
