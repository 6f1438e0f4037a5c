//! Frame-based evaluation: the share of frames assigned to each class and
//! the digital attack report built on it.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::dataset::load_image;
use crate::error::{Error, Result};
use crate::image::{from_batch_tensor, to_batch_tensor, ImageTensor};
use crate::models::{argmax_rows, ImageTranslator, LogitModel};
use crate::objectives::{gaussian_blur_t, AttackMode, BlurConfig};

const CHUNK: usize = 32;

/// An ordered sequence of same-sized frames of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    frames: Vec<ImageTensor>,
    source: PathBuf,
    attacker_label: usize,
}

impl FrameSet {
    pub fn new(frames: Vec<ImageTensor>, source: impl Into<PathBuf>, attacker_label: usize) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyFrameset)?;
        let (h, w) = (first.height(), first.width());
        if let Some(bad) = frames.iter().find(|f| f.height() != h || f.width() != w) {
            return Err(Error::DimensionMismatch(format!(
                "frame of {}x{} in a {h}x{w} sequence",
                bad.height(),
                bad.width()
            )));
        }
        Ok(Self {
            frames,
            source: source.into(),
            attacker_label,
        })
    }

    /// Loads every image directly inside `dir`, in file-name order, resized
    /// to `size`.
    pub fn load_dir(dir: &Path, attacker_label: usize, size: usize) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
                    && p.extension().is_some_and(|x| {
                        matches!(x.to_string_lossy().to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg")
                    })
            })
            .collect();
        paths.sort();
        let frames = paths.iter().map(|p| load_image(p, size)).collect::<Result<Vec<_>>>()?;
        Self::new(frames, dir, attacker_label)
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.frames
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    pub fn attacker_label(&self) -> usize {
        self.attacker_label
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Same frames with a different pixel content, e.g. after translation.
    fn with_frames(&self, frames: Vec<ImageTensor>) -> Result<Self> {
        Self::new(frames, self.source.clone(), self.attacker_label)
    }

    fn resized(&self, size: usize) -> Result<Self> {
        let f = &self.frames[0];
        if f.height() == size && f.width() == size {
            return Ok(self.clone());
        }
        self.with_frames(self.frames.iter().map(|f| f.resize(size, size)).collect())
    }
}

/// Number of frames assigned to each class by argmax of the logits, ties
/// going to the lower index.
pub fn classify_frames(model: &dyn LogitModel, frames: &FrameSet) -> Result<Vec<usize>> {
    let k = model.num_classes();
    if let Some(size) = model.input_size() {
        let f = &frames.frames[0];
        if f.height() != size || f.width() != size {
            return Err(Error::DimensionMismatch(format!(
                "classifier takes {size}x{size} frames, got {}x{}",
                f.height(),
                f.width()
            )));
        }
    }
    let mut counts = vec![0; k];
    for chunk in frames.frames.chunks(CHUNK) {
        let batch = to_batch_tensor(chunk, DType::F32, &Device::Cpu)?;
        let logits = model.logits(&batch)?;
        if logits.dims() != [chunk.len(), k] {
            return Err(Error::DimensionMismatch(format!(
                "expected ({}, {k}) logits, got {:?}",
                chunk.len(),
                logits.dims()
            )));
        }
        for label in argmax_rows(&logits)? {
            counts[label] += 1;
        }
    }
    Ok(counts)
}

/// `P_i = count_i / total * 100`.
pub fn frame_probability(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyFrameset);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64 * 100.0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Untargeted success: attacker share strictly below `tau` percent.
    pub tau: f64,
    /// Targeted success: target share strictly above `tau_prime` percent.
    pub tau_prime: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau: 50.0,
            tau_prime: 50.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvaluationTag {
    Digital,
    /// Reserved; nothing in this crate produces physical results.
    Physical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: AttackMode,
    pub attacker_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label: Option<usize>,
    /// Shares on `blur(G(x))`, the quantity the attack optimises.
    pub per_class_percent: Vec<f64>,
    /// Shares on `G(x)` without the blur.
    pub unblurred_per_class_percent: Vec<f64>,
    /// Shares on the untouched frames.
    pub baseline_per_class_percent: Vec<f64>,
    pub success: bool,
    pub unblurred_success: bool,
    pub thresholds: Thresholds,
    pub digital_or_physical: EvaluationTag,
    pub frame_count: usize,
    pub config_digest: String,
}

impl EvaluationReport {
    pub fn attacker_percent(&self) -> f64 {
        self.per_class_percent[self.attacker_label]
    }

    pub fn target_percent(&self) -> Option<f64> {
        self.target_label.map(|t| self.per_class_percent[t])
    }
}

/// What to evaluate and how to judge it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackGoal {
    pub mode: AttackMode,
    #[serde(default)]
    pub target_label: Option<usize>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl AttackGoal {
    pub fn untargeted() -> Self {
        Self {
            mode: AttackMode::Untargeted,
            target_label: None,
            thresholds: Thresholds::default(),
        }
    }

    pub fn targeted(target: usize) -> Self {
        Self {
            mode: AttackMode::Targeted,
            target_label: Some(target),
            thresholds: Thresholds::default(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match (self.mode, self.target_label) {
            (AttackMode::Untargeted, Some(_)) => Err(Error::InvalidConfig(
                "target_label is only valid in targeted mode".into(),
            )),
            (AttackMode::Targeted, None) => Err(Error::InvalidConfig("targeted mode needs target_label".into())),
            (AttackMode::Targeted, Some(t)) if t >= num_classes => Err(Error::LabelOutOfRange {
                label: t,
                num_classes,
            }),
            _ => Ok(()),
        }
    }

    fn succeeded(&self, percent: &[f64], attacker: usize) -> bool {
        match self.mode {
            AttackMode::Untargeted => percent[attacker] < self.thresholds.tau,
            AttackMode::Targeted => {
                percent[self.target_label.expect("validated")] > self.thresholds.tau_prime
            }
        }
    }
}

/// `G(x)` and `blur(G(x))` for every frame.
pub fn adversarial_frames(
    generator: &dyn ImageTranslator,
    blur: &BlurConfig,
    frames: &FrameSet,
) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
    let (mut plain, mut blurred) = (Vec::new(), Vec::new());
    for chunk in frames.frames.chunks(CHUNK) {
        let x = to_batch_tensor(chunk, DType::F32, &Device::Cpu)?;
        let g = generator.translate(&x)?.detach();
        blurred.extend(from_batch_tensor(&gaussian_blur_t(&g, blur)?)?);
        plain.extend(from_batch_tensor(&g)?);
    }
    Ok((plain, blurred))
}

/// Runs the generator (then the blur) over every frame and reports the
/// per-class shares before and after the attack.
pub fn attack_report(
    classifier: &dyn LogitModel,
    generator: &dyn ImageTranslator,
    blur: &BlurConfig,
    frames: &FrameSet,
    goal: &AttackGoal,
    config_digest: &str,
) -> Result<EvaluationReport> {
    let k = classifier.num_classes();
    goal.validate(k)?;
    blur.validate()?;
    let attacker = frames.attacker_label;
    if attacker >= k {
        return Err(Error::LabelOutOfRange {
            label: attacker,
            num_classes: k,
        });
    }
    let fit = |set: FrameSet| match classifier.input_size() {
        Some(s) => set.resized(s),
        None => Ok(set),
    };
    let (plain, blurred) = adversarial_frames(generator, blur, frames)?;
    let baseline = frame_probability(&classify_frames(classifier, &fit(frames.clone())?)?)?;
    let unblurred = frame_probability(&classify_frames(classifier, &fit(frames.with_frames(plain)?)?)?)?;
    let attacked = frame_probability(&classify_frames(classifier, &fit(frames.with_frames(blurred)?)?)?)?;
    Ok(EvaluationReport {
        mode: goal.mode,
        attacker_label: attacker,
        target_label: goal.target_label,
        success: goal.succeeded(&attacked, attacker),
        unblurred_success: goal.succeeded(&unblurred, attacker),
        per_class_percent: attacked,
        unblurred_per_class_percent: unblurred,
        baseline_per_class_percent: baseline,
        thresholds: goal.thresholds,
        digital_or_physical: EvaluationTag::Digital,
        frame_count: frames.len(),
        config_digest: config_digest.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Artifacts

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub chart: PathBuf,
}

/// Rounds percentages to millionths of a percent so that the rounded values
/// still sum to exactly 100 (largest-remainder apportionment).
pub fn round_percents(percent: &[f64]) -> Vec<i64> {
    const UNITS: i64 = 100_000_000;
    let total: f64 = percent.iter().sum();
    if total <= 0.0 {
        return vec![0; percent.len()];
    }
    let scaled: Vec<f64> = percent.iter().map(|p| p / total * UNITS as f64).collect();
    let mut units: Vec<i64> = scaled.iter().map(|v| v.floor() as i64).collect();
    let mut order: Vec<usize> = (0..percent.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = UNITS - units.iter().sum::<i64>();
    for &i in order.iter().take(short.max(0) as usize) {
        units[i] += 1;
    }
    units
}

fn format_units(u: i64) -> String {
    format!("{}.{:06}", u / 1_000_000, u % 1_000_000)
}

/// `class,percent` rows with six decimals.
pub fn perclass_csv(percent: &[f64]) -> String {
    let mut out = String::from("class,percent\n");
    for (i, u) in round_percents(percent).into_iter().enumerate() {
        out.push_str(&format!("{i},{}\n", format_units(u)));
    }
    out
}

/// Writes `report.json`, `perclass.csv` and `chart.png` into `out_dir`.
pub fn emit_report(report: &EvaluationReport, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        json: out_dir.join("report.json"),
        csv: out_dir.join("perclass.csv"),
        chart: out_dir.join("chart.png"),
    };
    let json = serde_json::to_string_pretty(report)? + "\n";
    std::fs::write(&files.json, json).map_err(|e| Error::io(&files.json, e))?;
    std::fs::write(&files.csv, perclass_csv(&report.per_class_percent))
        .map_err(|e| Error::io(&files.csv, e))?;
    bar_chart(report).save_png(&files.chart)?;
    Ok(files)
}

// 3x5 glyphs, one row per byte, bit 2 = leftmost column.
const GLYPHS: &[(char, [u8; 5])] = &[
    ('0', [7, 5, 5, 5, 7]),
    ('1', [2, 6, 2, 2, 7]),
    ('2', [7, 1, 7, 4, 7]),
    ('3', [7, 1, 3, 1, 7]),
    ('4', [5, 5, 7, 1, 1]),
    ('5', [7, 4, 7, 1, 7]),
    ('6', [7, 4, 7, 5, 7]),
    ('7', [7, 1, 1, 2, 2]),
    ('8', [7, 5, 7, 5, 7]),
    ('9', [7, 5, 7, 1, 7]),
    ('.', [0, 0, 0, 0, 2]),
    ('%', [5, 1, 2, 4, 5]),
];

struct Plot {
    w: usize,
    h: usize,
    px: Vec<[f32; 3]>,
}

impl Plot {
    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: [f32; 3]) {
        for y in y0.min(self.h)..y1.min(self.h) {
            for x in x0.min(self.w)..x1.min(self.w) {
                self.px[y * self.w + x] = c;
            }
        }
    }

    /// Draws `text` centred on `cx` with its top at `y`, `scale` pixels per dot.
    fn text(&mut self, text: &str, cx: usize, y: usize, scale: usize, c: [f32; 3]) {
        let advance = 4 * scale;
        let width = text.chars().count() * advance;
        let mut x = cx.saturating_sub(width / 2);
        for ch in text.chars() {
            if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for col in 0..3 {
                        if bits & (4 >> col) != 0 {
                            let px = x + col * scale;
                            let py = y + r * scale;
                            self.rect(px, py, px + scale, py + scale, c);
                        }
                    }
                }
            }
            x += advance;
        }
    }
}

/// One bar per class, labelled with its percentage above and its index
/// below. The attacker's bar is red, the target's green.
pub fn bar_chart(report: &EvaluationReport) -> ImageTensor {
    const BAR: usize = 36;
    const GAP: usize = 14;
    const PLOT_H: usize = 200;
    const TOP: usize = 24;
    const BOTTOM: usize = 24;
    let k = report.per_class_percent.len();
    let w = GAP + k * (BAR + GAP);
    let h = TOP + PLOT_H + BOTTOM;
    let mut plot = Plot {
        w,
        h,
        px: vec![[1.0; 3]; w * h],
    };
    let ink = [0.1, 0.1, 0.1];
    plot.rect(0, TOP + PLOT_H, w, TOP + PLOT_H + 1, ink);
    let units = round_percents(&report.per_class_percent);
    for (i, &p) in report.per_class_percent.iter().enumerate() {
        let x0 = GAP + i * (BAR + GAP);
        let bar_h = ((p / 100.0) * PLOT_H as f64).round() as usize;
        let color = if i == report.attacker_label {
            [0.8, 0.15, 0.15]
        } else if Some(i) == report.target_label {
            [0.15, 0.6, 0.2]
        } else {
            [0.25, 0.4, 0.75]
        };
        plot.rect(x0, TOP + PLOT_H - bar_h, x0 + BAR, TOP + PLOT_H, color);
        let label = format!("{:.1}%", units[i] as f64 / 1e6);
        let label_y = (TOP + PLOT_H - bar_h).saturating_sub(12);
        plot.text(&label, x0 + BAR / 2, label_y, 2, ink);
        plot.text(&i.to_string(), x0 + BAR / 2, TOP + PLOT_H + 6, 2, ink);
    }
    let data = plot.px.into_iter().flatten().collect();
    ImageTensor::new(h, w, data).expect("chart pixels are in range")
}
