//! Synthetic object–action(–modifier) video tasks on small grayscale grids,
//! per-video augmentation, subject splits and an on-disk export format.
//!
//! A video shows one target glyph performing a motion program and, optionally,
//! static distractor glyphs. Every sample is a pure function of the spec, the
//! seed and the sample index.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use crate::prng::Prng;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("fold {fold} outside 1..={folds}")]
    Fold { fold: usize, folds: usize },
    #[error("crop {crop} exceeds frame size {size}")]
    Crop { crop: usize, size: usize },
    #[error("malformed dataset export: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Glyph {
    Ring,
    Plus,
    Square,
    Cross,
    Disc,
    Bar,
}

impl Glyph {
    pub const ALL: [Glyph; 6] = [Glyph::Ring, Glyph::Plus, Glyph::Square, Glyph::Cross, Glyph::Disc, Glyph::Bar];

    /// Distance (in glyph radii) from `(u, v)` to the glyph's stroke.
    fn distance(self, u: f64, v: f64, thickness: f64) -> f64 {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Glyph::Ring => ((u * u + v * v).sqrt() - 0.8).abs() - thickness,
            Glyph::Square => (au.max(av) - 0.8).abs() - thickness,
            Glyph::Plus => {
                let arm = |a: f64, b: f64| (a - thickness).max(b - 1.0);
                arm(au, av).min(arm(av, au))
            }
            Glyph::Cross => {
                let d = (au - av).abs() / 2f64.sqrt();
                (d - thickness).max(au.max(av) - 0.8)
            }
            Glyph::Disc => (u * u + v * v).sqrt() - 0.7,
            Glyph::Bar => (av - thickness * 1.5).max(au - 1.0),
        }
    }
}

/// Motion program of the target. All programs are symmetric under a horizontal
/// flip up to their phase, so flipping never changes the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Motion {
    ShakeH,
    ShakeV,
    Rise,
    Fall,
    Approach,
    Recede,
    Blink,
    Circle,
    Bounce,
}

impl Motion {
    pub const ALL: [Motion; 9] = [
        Motion::ShakeH,
        Motion::ShakeV,
        Motion::Rise,
        Motion::Fall,
        Motion::Approach,
        Motion::Recede,
        Motion::Blink,
        Motion::Circle,
        Motion::Bounce,
    ];

    /// Offset, scale and visibility at normalized time `s ∈ [0, 1]` for `cycles`
    /// repetitions, `phase` in radians and amplitude `a` in pixels.
    fn pose(self, s: f64, cycles: f64, phase: f64, a: f64) -> (f64, f64, f64, bool) {
        let w = TAU * cycles * s + phase;
        match self {
            Motion::ShakeH => (a * w.sin(), 0.0, 1.0, true),
            Motion::ShakeV => (0.0, a * w.sin(), 1.0, true),
            Motion::Rise => (0.0, a * (1.0 - 2.0 * s), 1.0, true),
            Motion::Fall => (0.0, a * (2.0 * s - 1.0), 1.0, true),
            Motion::Approach => (0.0, 0.0, 0.6 + 0.8 * s, true),
            Motion::Recede => (0.0, 0.0, 1.4 - 0.8 * s, true),
            Motion::Blink => (0.0, 0.0, 1.0, w.sin() >= 0.0),
            Motion::Circle => (a * w.cos(), a * w.sin(), 1.0, true),
            Motion::Bounce => (0.0, -a * (PI * cycles * s + phase / 2.0).sin().abs(), 1.0, true),
        }
    }
}

/// One entry of the class table; indices point into the spec's lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassDef {
    pub object: usize,
    pub action: usize,
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridVideoSpec {
    /// Side of the square frame grid.
    pub grid: usize,
    pub objects: Vec<Glyph>,
    pub actions: Vec<Motion>,
    /// Repetition counts forming the modifier category; empty for none.
    pub counts: Vec<usize>,
    /// Cycles used when there is no modifier category.
    pub default_cycles: usize,
    pub classes: Vec<ClassDef>,
    pub subjects: usize,
    pub repetitions: usize,
    /// Static glyphs per video drawn from glyphs that are not targets.
    pub distractors: usize,
    /// Inclusive length range; equal ends give fixed-length videos.
    pub length: (usize, usize),
    /// Peak motion excursion in pixels.
    pub amplitude: f64,
    /// Glyph radius in pixels.
    pub glyph_size: f64,
}

impl GridVideoSpec {
    /// Object–action surrogate: 15 classes from 4 glyphs × 9 motions, fixed length.
    pub fn oa() -> Self {
        let classes = (0..15)
            .map(|i| ClassDef {
                object: i % 4,
                action: i % 9,
                count: None,
            })
            .collect();
        GridVideoSpec {
            grid: 32,
            objects: vec![Glyph::Ring, Glyph::Plus, Glyph::Square, Glyph::Cross],
            actions: Motion::ALL.to_vec(),
            counts: Vec::new(),
            default_cycles: 2,
            classes,
            subjects: 10,
            repetitions: 2,
            distractors: 1,
            length: (20, 20),
            amplitude: 6.0,
            glyph_size: 4.0,
        }
    }

    /// Object–action–modifier surrogate: 2 glyphs × 2 shakes × {1, 2, 3}
    /// repetitions, variable length.
    pub fn oam() -> Self {
        let mut classes = Vec::new();
        for object in 0..2 {
            for action in 0..2 {
                for count in 0..3 {
                    classes.push(ClassDef {
                        object,
                        action,
                        count: Some(count),
                    });
                }
            }
        }
        GridVideoSpec {
            grid: 32,
            objects: vec![Glyph::Ring, Glyph::Plus],
            actions: vec![Motion::ShakeH, Motion::ShakeV],
            counts: vec![1, 2, 3],
            default_cycles: 1,
            classes,
            subjects: 10,
            repetitions: 2,
            distractors: 1,
            length: (30, 60),
            amplitude: 7.0,
            glyph_size: 4.0,
        }
    }

    /// Class counts of the label heads: object, action, and modifier if present.
    pub fn heads(&self) -> Vec<usize> {
        let mut h = vec![self.objects.len(), self.actions.len()];
        if !self.counts.is_empty() {
            h.push(self.counts.len());
        }
        h
    }

    pub fn head_names(&self) -> Vec<&'static str> {
        ["object", "action", "modifier"][..self.heads().len()].to_vec()
    }

    pub fn video_count(&self) -> usize {
        self.classes.len() * self.subjects * self.repetitions
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let err = |m: String| Err(TaskError::Spec(m));
        if self.grid < 8 {
            return err(format!("grid {} is too small", self.grid));
        }
        if self.classes.is_empty() || self.subjects == 0 || self.repetitions == 0 {
            return err("classes, subjects and repetitions must be non-empty".into());
        }
        if self.classes.len() > self.objects.len() * self.actions.len() * self.counts.len().max(1) {
            return err(format!(
                "{} classes exceed the {}×{}×{} combination table",
                self.classes.len(),
                self.objects.len(),
                self.actions.len(),
                self.counts.len().max(1)
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let count_ok = match c.count {
                Some(k) => k < self.counts.len(),
                None => self.counts.is_empty(),
            };
            if c.object >= self.objects.len() || c.action >= self.actions.len() || !count_ok {
                return err(format!("class {i} references an unknown object, action or count"));
            }
            if self.classes[..i].contains(c) {
                return err(format!("class {i} is duplicated"));
            }
        }
        let (lo, hi) = self.length;
        if lo == 0 || lo > hi {
            return err(format!("length range {lo}..={hi} is empty"));
        }
        let max_cycles = self.counts.iter().copied().max().unwrap_or(self.default_cycles);
        if lo < 4 * max_cycles {
            return err(format!("{lo} frames cannot show {max_cycles} repetitions (need 4 frames each)"));
        }
        let spare = Glyph::ALL.iter().filter(|g| !self.objects.contains(g)).count();
        if self.distractors > 0 && spare == 0 {
            return err("no glyph left over for distractors".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub class: usize,
    pub subject: usize,
    /// Per-head label indices.
    pub labels: Vec<usize>,
    /// `[1, grid, grid]` frames with values in `[−1, 1]`.
    pub frames: Vec<Tensor>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GridVideoSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn heads(&self) -> Vec<usize> {
        self.spec.heads()
    }

    pub fn max_len(&self) -> usize {
        self.samples.iter().map(Sample::len).max().unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }
}

/// Per-subject style, the synthetic analog of different people performing.
#[derive(Debug, Clone, Copy)]
struct Style {
    thickness: f64,
    intensity: f64,
    amplitude: f64,
    phase: f64,
    center: (f64, f64),
}

impl Style {
    fn draw(seed: u64, subject: usize) -> Self {
        let mut p = Prng::derive(seed ^ 0x5EED_57E1, subject as u64);
        Style {
            thickness: p.range(0.16, 0.28),
            intensity: p.range(0.8, 1.0),
            amplitude: p.range(0.9, 1.1),
            phase: p.range(0.0, TAU),
            center: (p.range(-1.5, 1.5), p.range(-1.5, 1.5)),
        }
    }
}

#[derive(Clone, Copy)]
struct Placed {
    glyph: Glyph,
    cx: f64,
    cy: f64,
    radius: f64,
    thickness: f64,
    intensity: f64,
}

fn render(grid: usize, glyphs: &[Placed], precision: Precision) -> Tensor {
    let mut data = vec![-1.0; grid * grid];
    for y in 0..grid {
        for x in 0..grid {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v: f64 = -1.0;
            for g in glyphs {
                let d = g.glyph.distance((px - g.cx) / g.radius, (py - g.cy) / g.radius, g.thickness);
                let coverage = (0.5 - d * g.radius).clamp(0.0, 1.0);
                v = v.max(-1.0 + 2.0 * g.intensity * coverage);
            }
            // Stored at single precision so a cached copy is exact.
            data[y * grid + x] = v as f32 as f64;
        }
    }
    Tensor::with_precision(vec![1, grid, grid], data, precision).expect("finite frame")
}

fn generate_sample(spec: &GridVideoSpec, seed: u64, id: usize, class: usize, subject: usize) -> Sample {
    let def = spec.classes[class];
    let style = Style::draw(seed, subject);
    let mut p = Prng::derive(seed, id as u64 + 1);
    let (lo, hi) = spec.length;
    let len = lo + p.below(hi - lo + 1);
    let cycles = def.count.map_or(spec.default_cycles, |k| spec.counts[k]) as f64;
    let phase = style.phase + p.range(-0.5, 0.5);
    let amplitude = spec.amplitude * style.amplitude * p.range(0.95, 1.05);
    let mid = spec.grid as f64 / 2.0;
    let (cx, cy) = (mid + style.center.0 + p.range(-1.0, 1.0), mid + style.center.1 + p.range(-1.0, 1.0));
    let radius = spec.glyph_size * p.range(0.95, 1.05);
    let thickness = style.thickness;
    let intensity = style.intensity;
    let motion = spec.actions[def.action];
    let glyph = spec.objects[def.object];

    let spare: Vec<Glyph> = Glyph::ALL.iter().copied().filter(|g| !spec.objects.contains(g)).collect();
    let corners = [(0.16, 0.16), (0.84, 0.16), (0.16, 0.84), (0.84, 0.84)];
    let first_corner = p.below(corners.len());
    let distractors: Vec<Placed> = (0..spec.distractors)
        .map(|k| {
            let (fx, fy) = corners[(first_corner + k) % corners.len()];
            Placed {
                glyph: spare[p.below(spare.len())],
                cx: fx * spec.grid as f64 + p.range(-0.5, 0.5),
                cy: fy * spec.grid as f64 + p.range(-0.5, 0.5),
                radius: spec.glyph_size * 0.6,
                thickness: 0.25,
                intensity: p.range(0.6, 0.9),
            }
        })
        .collect();

    let frames = (0..len)
        .map(|t| {
            let s = if len > 1 { t as f64 / len as f64 } else { 0.0 };
            let (dx, dy, scale, visible) = motion.pose(s, cycles, phase, amplitude);
            let mut glyphs = distractors.clone();
            if visible {
                glyphs.push(Placed {
                    glyph,
                    cx: cx + dx,
                    cy: cy + dy,
                    radius: radius * scale,
                    thickness,
                    intensity,
                });
            }
            render(spec.grid, &glyphs, Precision::F64)
        })
        .collect();

    let mut labels = vec![def.object, def.action];
    if let Some(k) = def.count {
        labels.push(k);
    }
    Sample {
        id,
        class,
        subject,
        labels,
        frames,
    }
}

/// Generates every (class, subject, repetition) video, ordered by subject, class, repetition.
pub fn generate(spec: &GridVideoSpec, seed: u64) -> Result<Dataset, TaskError> {
    spec.validate()?;
    let mut jobs = Vec::with_capacity(spec.video_count());
    for subject in 0..spec.subjects {
        for class in 0..spec.classes.len() {
            for _ in 0..spec.repetitions {
                jobs.push((jobs.len(), class, subject));
            }
        }
    }
    use rayon::prelude::*;
    let samples = jobs
        .par_iter()
        .map(|&(id, class, subject)| generate_sample(spec, seed, id, class, subject))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

/// Object–action dataset (no modifier category).
pub fn gen_oa(spec: &GridVideoSpec, seed: u64) -> Result<Dataset, TaskError> {
    if !spec.counts.is_empty() {
        return Err(TaskError::Spec("gen_oa takes a spec without repetition counts".into()));
    }
    generate(spec, seed)
}

/// Object–action–modifier dataset.
pub fn gen_oam(spec: &GridVideoSpec, seed: u64) -> Result<Dataset, TaskError> {
    if spec.counts.is_empty() {
        return Err(TaskError::Spec("gen_oam needs repetition counts".into()));
    }
    generate(spec, seed)
}

/// Crop offset and flip shared by every frame of a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewTransform {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl ViewTransform {
    pub fn random(size: usize, crop: usize, prng: &mut Prng) -> Result<Self, TaskError> {
        if crop > size {
            return Err(TaskError::Crop { crop, size });
        }
        Ok(ViewTransform {
            dy: prng.below(size - crop + 1),
            dx: prng.below(size - crop + 1),
            flip: prng.bernoulli(0.5),
        })
    }

    pub fn center(size: usize, crop: usize) -> Result<Self, TaskError> {
        if crop > size {
            return Err(TaskError::Crop { crop, size });
        }
        let off = (size - crop) / 2;
        Ok(ViewTransform {
            dy: off,
            dx: off,
            flip: false,
        })
    }

    /// Crops a `[C, H, W]` frame to `crop × crop` and mirrors it if requested.
    pub fn apply(&self, frame: &Tensor, crop: usize) -> Result<Tensor, TaskError> {
        let &[c, h, w] = frame.shape() else {
            return Err(TaskError::Spec(format!("frame shape {:?} is not [C,H,W]", frame.shape())));
        };
        if self.dy + crop > h || self.dx + crop > w {
            return Err(TaskError::Crop { crop, size: h.min(w) });
        }
        let src = frame.data();
        let mut out = Vec::with_capacity(c * crop * crop);
        for ch in 0..c {
            for y in 0..crop {
                let row = (ch * h + self.dy + y) * w + self.dx;
                if self.flip {
                    out.extend(src[row..row + crop].iter().rev());
                } else {
                    out.extend_from_slice(&src[row..row + crop]);
                }
            }
        }
        Ok(Tensor::with_precision(vec![c, crop, crop], out, frame.precision()).expect("cropped frame"))
    }
}

/// Applies one random crop and flip decision to a whole video.
pub fn augment(frames: &[Tensor], crop: usize, prng: &mut Prng) -> Result<Vec<Tensor>, TaskError> {
    let size = frames.first().map_or(crop, |f| f.shape()[1].min(f.shape()[2]));
    let view = ViewTransform::random(size, crop, prng)?;
    frames.iter().map(|f| view.apply(f, crop)).collect()
}

/// Center crop without flipping, as used at evaluation.
pub fn center_crop(frames: &[Tensor], crop: usize) -> Result<Vec<Tensor>, TaskError> {
    let size = frames.first().map_or(crop, |f| f.shape()[1].min(f.shape()[2]));
    let view = ViewTransform::center(size, crop)?;
    frames.iter().map(|f| view.apply(f, crop)).collect()
}

pub const FOLDS: usize = 3;

/// Test subjects of a fold: a contiguous (wrapping) block of `max(1, round(n/5))`.
pub fn test_subjects(subjects: usize, fold: usize) -> Result<Vec<usize>, TaskError> {
    if fold == 0 || fold > FOLDS {
        return Err(TaskError::Fold { fold, folds: FOLDS });
    }
    if subjects < 2 {
        return Err(TaskError::Spec("a split needs at least two subjects".into()));
    }
    let n_test = ((subjects as f64 / 5.0).round() as usize).max(1);
    Ok((0..n_test).map(|i| ((fold - 1) * n_test + i) % subjects).collect())
}

/// Sample indices of the training and test partitions of `fold` (1-based).
pub fn split(dataset: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>), TaskError> {
    let test = test_subjects(dataset.spec.subjects, fold)?;
    let (te, tr): (Vec<usize>, Vec<usize>) = (0..dataset.samples.len()).partition(|&i| test.contains(&dataset.samples[i].subject));
    Ok((tr, te))
}

const MANIFEST: &str = "manifest.csv";

/// Writes `manifest.csv` and one blob per sample: `T·C·H·W` little-endian f32
/// values in frame-major, row-major order.
pub fn export(dataset: &Dataset, dir: &Path) -> Result<(), TaskError> {
    fs::create_dir_all(dir)?;
    let mut manifest = io::BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "id,class,subject,labels,length,channels,height,width,file")?;
    for s in &dataset.samples {
        let file = format!("sample_{:05}.f32", s.id);
        let shape = s.frames[0].shape();
        let labels: Vec<String> = s.labels.iter().map(|l| l.to_string()).collect();
        writeln!(
            manifest,
            "{},{},{},{},{},{},{},{},{}",
            s.id,
            s.class,
            s.subject,
            labels.join(";"),
            s.len(),
            shape[0],
            shape[1],
            shape[2],
            file
        )?;
        let mut blob = Vec::with_capacity(s.len() * s.frames[0].len() * 4);
        for f in &s.frames {
            for &v in f.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(dir.join(file), blob)?;
    }
    manifest.flush()?;
    Ok(())
}

/// Reads back the samples of an export (frames as stored, i.e. f32-rounded).
pub fn import(dir: &Path) -> Result<Vec<Sample>, TaskError> {
    let bad = |m: &str| TaskError::Format(m.to_string());
    let reader = BufReader::new(fs::File::open(dir.join(MANIFEST))?);
    let mut out = Vec::new();
    for line in reader.lines().skip(1) {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad("manifest row needs 9 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric manifest field"));
        let (len, c, h, w) = (num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?);
        let labels = f[3].split(';').map(num).collect::<Result<Vec<_>, _>>()?;
        let blob = fs::read(dir.join(f[8]))?;
        let per = c * h * w;
        if blob.len() != len * per * 4 {
            return Err(bad("blob size does not match manifest"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let frames = values
            .chunks(per)
            .map(|v| Tensor::with_precision(vec![c, h, w], v.to_vec(), Precision::F64))
            .collect::<Result<_, _>>()
            .map_err(|_| bad("non-finite frame value"))?;
        out.push(Sample {
            id: num(f[0])?,
            class: num(f[1])?,
            subject: num(f[2])?,
            labels,
            frames,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        assert_eq!(GridVideoSpec::oa().video_count(), 300);
        assert_eq!(GridVideoSpec::oa().heads(), vec![4, 9]);
        assert_eq!(GridVideoSpec::oam().classes.len(), 12);
        assert_eq!(GridVideoSpec::oam().heads(), vec![2, 2, 3]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = GridVideoSpec::oam();
        s.length = (10, 60);
        assert!(s.validate().is_err());
        let mut s = GridVideoSpec::oa();
        s.classes.push(s.classes[0]);
        assert!(s.validate().is_err());
        let mut s = GridVideoSpec::oam();
        s.objects = vec![Glyph::Ring];
        assert!(s.validate().is_err());
    }

    #[test]
    fn frames_are_in_range() {
        let mut spec = GridVideoSpec::oam();
        spec.subjects = 2;
        spec.repetitions = 1;
        let d = gen_oam(&spec, 3).unwrap();
        assert_eq!(d.samples.len(), 24);
        for s in &d.samples {
            assert!((30..=60).contains(&s.len()));
            for f in &s.frames {
                assert!(f.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                assert!(f.data().iter().any(|&v| v > 0.5), "target visible");
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let f = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let v = ViewTransform { dy: 0, dx: 0, flip: true };
        let twice = v.apply(&v.apply(&f, 3).unwrap(), 3).unwrap();
        assert_eq!(twice, f);
        let crop = ViewTransform { dy: 1, dx: 1, flip: false }.apply(&f, 2).unwrap();
        assert_eq!(crop.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn split_sizes() {
        assert_eq!(test_subjects(10, 1).unwrap(), vec![0, 1]);
        assert_eq!(test_subjects(10, 3).unwrap(), vec![4, 5]);
        assert_eq!(test_subjects(5, 2).unwrap(), vec![1]);
        assert!(test_subjects(10, 4).is_err());
    }
}
