//! Face localisation and cropping ahead of translation and classification.
//!
//! Detection is pluggable. The default detector takes the central 75% of the
//! frame; [`SidecarDetector`] replays boxes computed offline by an external
//! detector. Faces are not aligned.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn full(image: &ImageTensor) -> Self {
        Self::new(0, 0, image.width(), image.height())
    }

    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// A face detector. Implementations must only return boxes that are valid
/// for the image they were given.
pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;

    /// `source` is the file the image was decoded from, when known.
    fn detect(&self, image: &ImageTensor, source: Option<&Path>) -> Option<BoundingBox>;
}

/// A named, shareable detector.
#[derive(Clone)]
pub struct DetectorHandle(Arc<dyn FaceDetector>);

impl DetectorHandle {
    pub fn new(detector: impl FaceDetector + 'static) -> Self {
        Self(Arc::new(detector))
    }

    pub fn center_crop() -> Self {
        Self::new(CenterCropDetector)
    }

    pub fn name(&self) -> &str {
        self.0.name()
    }

    pub fn detect(&self, image: &ImageTensor, source: Option<&Path>) -> Option<BoundingBox> {
        self.0.detect(image, source)
    }
}

impl fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("DetectorHandle").field(&self.name()).finish()
    }
}

/// Deterministic fallback: the central 75% of the frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct CenterCropDetector;

impl FaceDetector for CenterCropDetector {
    fn name(&self) -> &str {
        "center-crop"
    }

    fn detect(&self, image: &ImageTensor, _source: Option<&Path>) -> Option<BoundingBox> {
        let mx = image.width() / 8;
        let my = image.height() / 8;
        Some(BoundingBox::new(
            mx,
            my,
            image.width() - mx,
            image.height() - my,
        ))
    }
}

/// Boxes precomputed by an external detector, keyed by image path.
///
/// The sidecar is a JSON object mapping a path to `[x0, y0, x1, y1]`. Keys
/// are matched against the full path, then against the file name. Boxes are
/// clipped to the image; a box that is empty after clipping counts as no
/// detection.
#[derive(Clone, Debug, Default)]
pub struct SidecarDetector {
    boxes: BTreeMap<String, [i64; 4]>,
}

impl SidecarDetector {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            boxes: serde_json::from_str(&text)?,
        })
    }

    pub fn from_map(boxes: BTreeMap<String, [i64; 4]>) -> Self {
        Self { boxes }
    }

    fn lookup(&self, source: &Path) -> Option<[i64; 4]> {
        if let Some(b) = self.boxes.get(source.to_string_lossy().as_ref()) {
            return Some(*b);
        }
        let name = source.file_name()?.to_string_lossy();
        self.boxes.get(name.as_ref()).copied()
    }
}

impl FaceDetector for SidecarDetector {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn detect(&self, image: &ImageTensor, source: Option<&Path>) -> Option<BoundingBox> {
        let [x0, y0, x1, y1] = self.lookup(source?)?;
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        let b = BoundingBox::new(
            clip(x0, image.width()),
            clip(y0, image.height()),
            clip(x1, image.width()),
            clip(y1, image.height()),
        );
        b.is_valid_for(image.width(), image.height()).then_some(b)
    }
}

/// Parses a detector choice: `center-crop` or `sidecar:<path>`.
pub fn detector_from_spec(spec: &str) -> Result<DetectorHandle> {
    match spec.split_once(':') {
        None if spec == "center-crop" => Ok(DetectorHandle::center_crop()),
        Some(("sidecar", path)) => Ok(DetectorHandle::new(SidecarDetector::from_json_file(
            &PathBuf::from(path),
        )?)),
        _ => Err(Error::InvalidConfig(format!(
            "unknown detector {spec:?}; expected center-crop or sidecar:<path>"
        ))),
    }
}

pub fn detect_face(
    detector: &DetectorHandle,
    image: &ImageTensor,
    source: Option<&Path>,
) -> Option<BoundingBox> {
    detector.detect(image, source)
}

/// Crops `bbox` and resizes it to `output_size x output_size`. Non-square
/// boxes are stretched.
pub fn crop_face(image: &ImageTensor, bbox: BoundingBox, output_size: usize) -> Result<ImageTensor> {
    if !bbox.is_valid_for(image.width(), image.height()) || output_size == 0 {
        return Err(Error::InvalidBox {
            bbox: bbox.as_array(),
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(image
        .crop(bbox.x0, bbox.y0, bbox.x1, bbox.y1)
        .resize(output_size, output_size))
}
