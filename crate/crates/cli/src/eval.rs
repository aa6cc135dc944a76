//! Region-cropped evaluation with pluggable scorers.

use std::collections::HashMap;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use maskguide::attention::BinaryRaster;
use maskguide::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Higher is better; scores the edited crop against the edit phrase.
    TextAlignment,
    /// Lower is better; scores the source/edited crop pair.
    StructureDistance,
}

pub trait ScorerPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> ScorerKind;
    fn concurrent_safe(&self) -> bool {
        true
    }
    /// `source` is given to structure scorers, `text` to text scorers.
    fn score(&self, edited: &RgbImage, source: Option<&RgbImage>, text: Option<&str>) -> Result<f64>;
}

/// `sqrt(sum over pixels and channels of diff^2 / pixel count)`.
#[derive(Debug, Default)]
pub struct PixelL2;

impl ScorerPlugin for PixelL2 {
    fn name(&self) -> &str {
        "pixel-l2"
    }

    fn kind(&self) -> ScorerKind {
        ScorerKind::StructureDistance
    }

    fn score(&self, edited: &RgbImage, source: Option<&RgbImage>, _text: Option<&str>) -> Result<f64> {
        let source = source.ok_or_else(|| Error::contract("pixel-l2 needs a source crop"))?;
        if source.dimensions() != edited.dimensions() {
            return Err(Error::contract("pixel-l2 crops differ in size"));
        }
        let n = (edited.width() * edited.height()) as f64;
        let sum: f64 = edited
            .as_raw()
            .iter()
            .zip(source.as_raw())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok((sum / n).sqrt())
    }
}

const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [255.0, 0.0, 0.0]),
    ("green", [0.0, 160.0, 0.0]),
    ("blue", [0.0, 0.0, 255.0]),
    ("yellow", [255.0, 255.0, 0.0]),
    ("orange", [255.0, 165.0, 0.0]),
    ("purple", [128.0, 0.0, 128.0]),
    ("pink", [255.0, 150.0, 200.0]),
    ("white", [255.0, 255.0, 255.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [128.0, 128.0, 128.0]),
    ("grey", [128.0, 128.0, 128.0]),
    ("brown", [140.0, 80.0, 20.0]),
];

/// Keyword stub: for each color word in the phrase, `1 - d / d_max` between
/// the crop's mean color and the word's reference color, averaged. Phrases
/// without a color word score 0.
#[derive(Debug, Default)]
pub struct ColorKeyword;

impl ScorerPlugin for ColorKeyword {
    fn name(&self) -> &str {
        "color-keyword"
    }

    fn kind(&self) -> ScorerKind {
        ScorerKind::TextAlignment
    }

    fn score(&self, edited: &RgbImage, _source: Option<&RgbImage>, text: Option<&str>) -> Result<f64> {
        let text = text.unwrap_or("").to_lowercase();
        let n = (edited.width() * edited.height()) as f64;
        let mut mean = [0.0f64; 3];
        for p in edited.pixels() {
            for c in 0..3 {
                mean[c] += p.0[c] as f64 / n;
            }
        }
        let d_max = (3.0f64 * 255.0 * 255.0).sqrt();
        let scores: Vec<f64> = text
            .split_whitespace()
            .filter_map(|w| COLORS.iter().find(|(name, _)| *name == w))
            .map(|(_, rgb)| {
                let d = (0..3).map(|c| (mean[c] - rgb[c]).powi(2)).sum::<f64>().sqrt();
                1.0 - d / d_max
            })
            .collect();
        if scores.is_empty() {
            return Ok(0.0);
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

#[derive(Clone)]
pub struct ScorerRegistry {
    scorers: HashMap<String, Arc<dyn ScorerPlugin>>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = Self {
            scorers: HashMap::new(),
        };
        r.register(Arc::new(PixelL2));
        r.register(Arc::new(ColorKeyword));
        r
    }
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        Self {
            scorers: HashMap::new(),
        }
    }

    pub fn register(&mut self, scorer: Arc<dyn ScorerPlugin>) {
        self.scorers.insert(scorer.name().to_string(), scorer);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ScorerPlugin>> {
        self.scorers
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown scorer '{name}'")))
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.scorers.keys().cloned().collect();
        v.sort();
        v
    }
}

/// Tight box `(x0, y0, x1, y1)`, exclusive upper bounds.
pub type BoundingBox = (u32, u32, u32, u32);

pub fn mask_bbox(mask: &BinaryRaster) -> Result<BoundingBox> {
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(Error::EmptyMask)?;
    Ok((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

pub fn crop(img: &RgbImage, bbox: BoundingBox) -> RgbImage {
    let (x0, y0, x1, y1) = bbox;
    image::imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub scorer: String,
    pub kind: ScorerKind,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bbox: [u32; 4],
    pub crop_pixels: u64,
    pub text: Option<String>,
    pub scores: Vec<ScoreEntry>,
}

fn entry(sc: &dyn ScorerPlugin, r: Result<f64>) -> ScoreEntry {
    let r = r.and_then(|v| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::contract(format!("scorer returned {v}")))
        }
    });
    let (score, error) = match r {
        Ok(v) => (Some(v), None),
        Err(err) => (None, Some(err.to_string())),
    };
    ScoreEntry {
        scorer: sc.name().to_string(),
        kind: sc.kind(),
        score,
        error,
    }
}

/// Crops both images to the mask's bounding box and runs every scorer;
/// individual scorer failures are reported, not raised.
pub fn evaluate(
    edited: &RgbImage,
    source: &RgbImage,
    mask: &BinaryRaster,
    edit_phrase: Option<&str>,
    scorers: &[Arc<dyn ScorerPlugin>],
) -> Result<EvalReport> {
    if edited.dimensions() != source.dimensions() {
        return Err(Error::config(format!(
            "edited image is {:?} but source is {:?}",
            edited.dimensions(),
            source.dimensions()
        )));
    }
    if (mask.width() as u32, mask.height() as u32) != edited.dimensions() {
        return Err(Error::config("mask size differs from the images"));
    }
    if scorers.is_empty() {
        return Err(Error::config("no scorers selected"));
    }
    let bbox = mask_bbox(mask)?;
    let e = crop(edited, bbox);
    let s = crop(source, bbox);
    let run_one = |sc: &Arc<dyn ScorerPlugin>| -> ScoreEntry {
        let r = match sc.kind() {
            ScorerKind::TextAlignment => sc.score(&e, None, edit_phrase),
            ScorerKind::StructureDistance => sc.score(&e, Some(&s), None),
        };
        entry(sc.as_ref(), r)
    };
    let run_one = &run_one;
    // Scorers that declare concurrency safety run on scoped threads.
    let scores = std::thread::scope(|scope| {
        let pending: Vec<_> = scorers
            .iter()
            .map(|sc| sc.concurrent_safe().then(|| scope.spawn(move || run_one(sc))))
            .collect();
        pending
            .into_iter()
            .zip(scorers)
            .map(|(handle, sc)| match handle {
                Some(h) => h
                    .join()
                    .unwrap_or_else(|_| entry(sc.as_ref(), Err(Error::contract("scorer panicked")))),
                None => run_one(sc),
            })
            .collect()
    });
    Ok(EvalReport {
        bbox: [bbox.0, bbox.1, bbox.2, bbox.3],
        crop_pixels: ((bbox.2 - bbox.0) * (bbox.3 - bbox.1)) as u64,
        text: edit_phrase.map(str::to_string),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 40]))
    }

    #[test]
    fn identical_images_have_zero_distance() {
        let a = img(20, 10);
        let m = BinaryRaster::from_fn(20, 10, |x, y| (3..9).contains(&x) && (2..7).contains(&y));
        let r = evaluate(&a, &a, &m, None, &[Arc::new(PixelL2)]).unwrap();
        assert_eq!(r.scores[0].score, Some(0.0));
        assert_eq!(r.bbox, [3, 2, 9, 7]);
    }

    #[test]
    fn full_mask_crops_whole_image() {
        let a = img(12, 9);
        let m = BinaryRaster::filled(12, 9, true);
        let bbox = mask_bbox(&m).unwrap();
        assert_eq!(crop(&a, bbox), a);
    }

    #[test]
    fn one_pixel_difference_closed_form() {
        let a = RgbImage::from_pixel(16, 16, image::Rgb([0, 0, 0]));
        let mut b = a.clone();
        b.put_pixel(5, 5, image::Rgb([255, 0, 0]));
        let m = BinaryRaster::from_fn(16, 16, |x, y| (4..10).contains(&x) && (3..8).contains(&y));
        let r = evaluate(&b, &a, &m, None, &[Arc::new(PixelL2)]).unwrap();
        let n = 6.0 * 5.0;
        assert!((r.scores[0].score.unwrap() - (255.0f64 * 255.0 / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_error() {
        let a = img(8, 8);
        let m = BinaryRaster::filled(8, 8, false);
        assert!(matches!(
            evaluate(&a, &a, &m, None, &[Arc::new(PixelL2)]),
            Err(Error::EmptyMask)
        ));
    }

    struct Broken;
    impl ScorerPlugin for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn kind(&self) -> ScorerKind {
            ScorerKind::TextAlignment
        }
        fn score(&self, _: &RgbImage, _: Option<&RgbImage>, _: Option<&str>) -> Result<f64> {
            Err(Error::backend("model not loaded"))
        }
    }

    #[test]
    fn scorer_failure_gives_partial_report() {
        let a = img(8, 8);
        let m = BinaryRaster::filled(8, 8, true);
        let r = evaluate(&a, &a, &m, Some("red"), &[Arc::new(Broken), Arc::new(PixelL2)]).unwrap();
        assert!(r.scores[0].error.is_some());
        assert_eq!(r.scores[1].score, Some(0.0));
    }

    #[test]
    fn color_keyword_prefers_matching_color() {
        let red = RgbImage::from_pixel(4, 4, image::Rgb([250, 10, 10]));
        let blue = RgbImage::from_pixel(4, 4, image::Rgb([10, 10, 250]));
        let s = ColorKeyword;
        assert!(s.score(&red, None, Some("red")).unwrap() > s.score(&blue, None, Some("red")).unwrap());
        assert_eq!(s.score(&red, None, Some("tabby")).unwrap(), 0.0);
    }
}
