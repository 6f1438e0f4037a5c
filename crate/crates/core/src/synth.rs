//! Procedural face-like corpus used as a stand-in for real photographs.
//!
//! Every identity owns a fixed set of traits (skin tone, hair colour and
//! style, eye colour, face proportions, glasses); individual images jitter
//! position, scale, lighting and sensor noise. The makeup domain draws fresh
//! random traits and paints lipstick, eyeshadow and blush on top.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub skin: Rgb,
    pub hair: Rgb,
    /// 0 = short cap, 1 = long sides, 2 = shaved.
    pub hair_style: u8,
    pub iris: Rgb,
    /// Horizontal face radius relative to the vertical one.
    pub face_aspect: f32,
    pub eye_spacing: f32,
    pub mouth_width: f32,
    pub glasses: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Makeup {
    pub lipstick: Option<Rgb>,
    pub eyeshadow: Option<Rgb>,
    pub blush: Option<Rgb>,
}

impl Makeup {
    pub fn is_bare(&self) -> bool {
        self.lipstick.is_none() && self.eyeshadow.is_none() && self.blush.is_none()
    }
}

/// Per-image nuisance parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
    pub gain: f32,
    pub background: Rgb,
    pub noise_sigma: f32,
    pub noise_seed: u64,
}

impl Jitter {
    pub fn none() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            gain: 1.0,
            background: [0.8, 0.8, 0.8],
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let grey: f32 = rng.random_range(0.55..0.9);
        let tint = |rng: &mut R| (grey + rng.random_range(-0.06..0.06f32)).clamp(0.0, 1.0);
        Self {
            dx: rng.random_range(-0.04..0.04),
            dy: rng.random_range(-0.04..0.04),
            scale: rng.random_range(0.94..1.06),
            gain: rng.random_range(0.9..1.1),
            background: [tint(rng), tint(rng), tint(rng)],
            noise_sigma: 0.02,
            noise_seed: rng.random(),
        }
    }
}

const SKIN_LADDER: [Rgb; 8] = [
    [0.98, 0.87, 0.78],
    [0.93, 0.78, 0.66],
    [0.87, 0.70, 0.56],
    [0.80, 0.60, 0.46],
    [0.70, 0.50, 0.36],
    [0.60, 0.42, 0.29],
    [0.50, 0.34, 0.23],
    [0.40, 0.27, 0.18],
];

const HAIR_PALETTE: [Rgb; 8] = [
    [0.08, 0.06, 0.05],
    [0.35, 0.20, 0.10],
    [0.75, 0.60, 0.30],
    [0.55, 0.20, 0.08],
    [0.60, 0.60, 0.62],
    [0.25, 0.15, 0.10],
    [0.90, 0.82, 0.55],
    [0.15, 0.15, 0.30],
];

const IRIS_PALETTE: [Rgb; 4] = [
    [0.25, 0.15, 0.08],
    [0.20, 0.40, 0.70],
    [0.25, 0.50, 0.30],
    [0.45, 0.45, 0.45],
];

fn random_skin<R: Rng>(rng: &mut R) -> Rgb {
    let t: f32 = rng.random_range(0.0..7.0);
    let i = t.floor() as usize;
    let f = t - i as f32;
    let (a, b) = (SKIN_LADDER[i], SKIN_LADDER[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// The `n` class identities for `seed`. Skin tones and hair colours are
/// permutations of fixed ladders, so no two of the first eight identities
/// share either trait.
pub fn identities(n: usize, seed: u64) -> Vec<Identity> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth-identities"));
    let mut skin_order: Vec<usize> = (0..SKIN_LADDER.len()).collect();
    let mut hair_order: Vec<usize> = (0..HAIR_PALETTE.len()).collect();
    skin_order.shuffle(&mut rng);
    hair_order.shuffle(&mut rng);
    (0..n)
        .map(|k| {
            let lap = k / SKIN_LADDER.len();
            let skin = if lap == 0 {
                SKIN_LADDER[skin_order[k]]
            } else {
                random_skin(&mut rng)
            };
            Identity {
                skin,
                hair: HAIR_PALETTE[hair_order[k % HAIR_PALETTE.len()]],
                hair_style: (k % 3) as u8,
                iris: IRIS_PALETTE[rng.random_range(0..IRIS_PALETTE.len())],
                face_aspect: rng.random_range(0.72..0.92),
                eye_spacing: rng.random_range(0.09..0.13),
                mouth_width: rng.random_range(0.06..0.11),
                glasses: (k / 3) % 2 == 1,
            }
        })
        .collect()
}

fn random_identity<R: Rng>(rng: &mut R) -> Identity {
    Identity {
        skin: random_skin(rng),
        hair: HAIR_PALETTE[rng.random_range(0..HAIR_PALETTE.len())],
        hair_style: rng.random_range(0..3),
        iris: IRIS_PALETTE[rng.random_range(0..IRIS_PALETTE.len())],
        face_aspect: rng.random_range(0.72..0.92),
        eye_spacing: rng.random_range(0.09..0.13),
        mouth_width: rng.random_range(0.06..0.11),
        glasses: rng.random_bool(0.3),
    }
}

const LIPSTICKS: [Rgb; 4] = [
    [0.75, 0.05, 0.12],
    [0.55, 0.05, 0.25],
    [0.90, 0.30, 0.40],
    [0.45, 0.08, 0.08],
];
const SHADOWS: [Rgb; 4] = [
    [0.45, 0.25, 0.55],
    [0.20, 0.35, 0.55],
    [0.55, 0.40, 0.25],
    [0.30, 0.50, 0.35],
];

pub fn random_makeup<R: Rng>(rng: &mut R) -> Makeup {
    let makeup = Makeup {
        lipstick: rng
            .random_bool(0.85)
            .then(|| LIPSTICKS[rng.random_range(0..LIPSTICKS.len())]),
        eyeshadow: rng
            .random_bool(0.75)
            .then(|| SHADOWS[rng.random_range(0..SHADOWS.len())]),
        blush: rng.random_bool(0.6).then_some([0.95, 0.45, 0.5]),
    };
    if makeup.is_bare() {
        return Makeup {
            lipstick: Some(LIPSTICKS[0]),
            ..makeup
        };
    }
    makeup
}

struct Canvas {
    size: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(size: usize, fill: Rgb) -> Self {
        Self {
            size,
            px: vec![fill; size * size],
        }
    }

    /// Paints an axis-aligned ellipse in unit coordinates with a one-pixel
    /// antialiased rim. `keep` restricts painting to points it accepts.
    fn ellipse(
        &mut self,
        (cx, cy): (f32, f32),
        (rx, ry): (f32, f32),
        color: Rgb,
        alpha: f32,
        keep: impl Fn(f32, f32) -> bool,
    ) {
        let s = self.size as f32;
        let rim = rx.min(ry) * s;
        for y in 0..self.size {
            for x in 0..self.size {
                let u = (x as f32 + 0.5) / s;
                let v = (y as f32 + 0.5) / s;
                if !keep(u, v) {
                    continue;
                }
                let d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
                let cover = ((1.0 - d) * rim + 0.5).clamp(0.0, 1.0) * alpha;
                if cover > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    for c in 0..3 {
                        p[c] += (color[c] - p[c]) * cover;
                    }
                }
            }
        }
    }

    fn ring(&mut self, center: (f32, f32), r: f32, thickness: f32, color: Rgb) {
        let s = self.size as f32;
        for y in 0..self.size {
            for x in 0..self.size {
                let u = (x as f32 + 0.5) / s;
                let v = (y as f32 + 0.5) / s;
                let d = ((u - center.0).powi(2) + (v - center.1).powi(2)).sqrt();
                let cover = ((thickness / 2.0 - (d - r).abs()) * s + 0.5).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    for c in 0..3 {
                        p[c] += (color[c] - p[c]) * cover;
                    }
                }
            }
        }
    }
}

fn shade(c: Rgb, k: f32) -> Rgb {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// Renders one `size`×`size` face.
pub fn render_face(id: &Identity, makeup: &Makeup, jitter: &Jitter, size: usize) -> ImageTensor {
    let mut cv = Canvas::new(size, jitter.background);
    let sc = jitter.scale;
    let cx = 0.5 + jitter.dx;
    let cy = 0.54 + jitter.dy;
    let ry = 0.34 * sc;
    let rx = ry * id.face_aspect;
    let all = |_: f32, _: f32| true;

    // hair behind the face
    match id.hair_style {
        0 => cv.ellipse((cx, cy - 0.06 * sc), (rx * 1.12, ry * 0.95), id.hair, 1.0, |_, v| {
            v < cy - 0.05 * sc
        }),
        1 => cv.ellipse((cx, cy + 0.02 * sc), (rx * 1.3, ry * 1.12), id.hair, 1.0, all),
        _ => {}
    }
    cv.ellipse((cx, cy), (rx, ry), id.skin, 1.0, all);
    // hairline over the forehead
    if id.hair_style != 2 {
        let line = cy - ry * 0.55;
        cv.ellipse((cx, cy - 0.02 * sc), (rx * 1.02, ry * 1.02), id.hair, 1.0, |_, v| v < line);
    }

    let eye_y = cy - 0.06 * sc;
    let sp = id.eye_spacing * sc;
    if let Some(shadow) = makeup.eyeshadow {
        for side in [-1.0, 1.0] {
            cv.ellipse((cx + side * sp, eye_y - 0.025 * sc), (0.065 * sc, 0.04 * sc), shadow, 0.75, all);
        }
    }
    for side in [-1.0f32, 1.0] {
        let ex = cx + side * sp;
        cv.ellipse((ex, eye_y - 0.065 * sc), (0.05 * sc, 0.012 * sc), shade(id.hair, 0.8), 1.0, all);
        cv.ellipse((ex, eye_y), (0.045 * sc, 0.026 * sc), [0.97, 0.97, 0.97], 1.0, all);
        cv.ellipse((ex, eye_y), (0.02 * sc, 0.02 * sc), id.iris, 1.0, all);
        cv.ellipse((ex, eye_y), (0.008 * sc, 0.008 * sc), [0.02, 0.02, 0.02], 1.0, all);
    }
    if let Some(blush) = makeup.blush {
        for side in [-1.0, 1.0] {
            cv.ellipse((cx + side * (sp + 0.04 * sc), cy + 0.06 * sc), (0.055 * sc, 0.04 * sc), blush, 0.45, all);
        }
    }
    cv.ellipse((cx, cy + 0.05 * sc), (0.022 * sc, 0.04 * sc), shade(id.skin, 0.85), 1.0, all);
    let lips = makeup.lipstick.unwrap_or_else(|| {
        let s = id.skin;
        [s[0] * 0.85, s[1] * 0.55, s[2] * 0.55]
    });
    cv.ellipse((cx, cy + 0.165 * sc), (id.mouth_width * sc, 0.025 * sc), lips, 1.0, all);

    if id.glasses {
        let frame = [0.08, 0.08, 0.1];
        for side in [-1.0, 1.0] {
            cv.ring((cx + side * sp, eye_y), 0.062 * sc, 0.014 * sc, frame);
        }
        let bridge_half = sp - 0.062 * sc;
        cv.ellipse((cx, eye_y), (bridge_half.max(0.01), 0.007 * sc), frame, 1.0, all);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(jitter.noise_seed);
    let noise = Normal::new(0.0f32, jitter.noise_sigma.max(0.0)).expect("finite sigma");
    let data: Vec<f32> = cv
        .px
        .iter()
        .flat_map(|p| p.map(|v| v * jitter.gain))
        .map(|v| {
            if jitter.noise_sigma > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            }
        })
        .collect();
    ImageTensor::from_clamped(size, size, data).expect("canvas has size*size*3 values")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub makeup_count: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 30,
            test_per_class: 6,
            makeup_count: 40,
            image_size: 64,
            seed: 0,
        }
    }
}

/// Directories produced by [`write_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusLayout {
    pub train: PathBuf,
    pub test: PathBuf,
    pub makeup: PathBuf,
}

pub fn class_dir_name(k: usize) -> String {
    format!("class_{k:02}")
}

/// Writes `root/{train,test}/class_NN/*.png` and `root/makeup/*.png`.
pub fn write_corpus(root: &Path, spec: &SynthSpec) -> Result<CorpusLayout> {
    if spec.num_classes == 0 || spec.image_size < 8 {
        return Err(Error::InvalidConfig(format!("unusable synth spec {spec:?}")));
    }
    let ids = identities(spec.num_classes, spec.seed);
    let layout = CorpusLayout {
        train: root.join("train"),
        test: root.join("test"),
        makeup: root.join("makeup"),
    };
    for (split, dir, count) in [
        ("train", &layout.train, spec.train_per_class),
        ("test", &layout.test, spec.test_per_class),
    ] {
        for (k, id) in ids.iter().enumerate() {
            let class_dir = dir.join(class_dir_name(k));
            std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("synth-{split}-{k}")));
            for i in 0..count {
                let img = render_face(id, &Makeup::default(), &Jitter::sample(&mut rng), spec.image_size);
                img.save_png(&class_dir.join(format!("img_{i:03}.png")))?;
            }
        }
    }
    std::fs::create_dir_all(&layout.makeup).map_err(|e| Error::io(&layout.makeup, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth-makeup"));
    for i in 0..spec.makeup_count {
        let id = random_identity(&mut rng);
        let makeup = random_makeup(&mut rng);
        let img = render_face(&id, &makeup, &Jitter::sample(&mut rng), spec.image_size);
        img.save_png(&layout.makeup.join(format!("mk_{i:03}.png")))?;
    }
    Ok(layout)
}

/// Writes an ordered frame sequence of identity `class` into
/// `dir/class_NN/frame_NNNN.png`, the layout evaluation expects.
pub fn write_frames(dir: &Path, spec: &SynthSpec, class: usize, count: usize) -> Result<PathBuf> {
    let ids = identities(spec.num_classes, spec.seed);
    let id = ids.get(class).ok_or(Error::LabelOutOfRange {
        label: class,
        num_classes: spec.num_classes,
    })?;
    let class_dir = dir.join(class_dir_name(class));
    std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("synth-frames-{class}")));
    for i in 0..count {
        let img = render_face(id, &Makeup::default(), &Jitter::sample(&mut rng), spec.image_size);
        img.save_png(&class_dir.join(format!("frame_{i:04}.png")))?;
    }
    Ok(class_dir)
}
