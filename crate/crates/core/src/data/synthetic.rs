//! Procedural place datasets.
//!
//! Every place gets a random texture: a two-color gradient under a handful
//! of colored disks, rectangles and stripe bands. A view samples the texture
//! with a sub-pixel shift, then applies contrast, brightness and noise.
//! Images are quantized to 8 bits so that a dataset written to disk loads
//! back identically.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{PlaceDataset, Sample};
use super::image::encode_ppm;
use super::manifest::{Manifest, ManifestRecord, Role};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::retrieval::{Location, DEFAULT_THRESHOLD_M};
use crate::tensor::Tensor;

const SHAPES_PER_PLACE: usize = 7;

/// Photometric and geometric perturbation of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewJitter {
    /// Max shift in pixels along each axis.
    pub max_shift: f64,
    /// Max additive brightness offset.
    pub brightness: f64,
    /// Max relative contrast change.
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl ViewJitter {
    pub const NONE: ViewJitter = ViewJitter {
        max_shift: 0.0,
        brightness: 0.0,
        contrast: 0.0,
        noise_sigma: 0.0,
    };

    fn validate(&self) -> Result<()> {
        let v = [self.max_shift, self.brightness, self.contrast, self.noise_sigma];
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || self.contrast >= 1.0 {
            return Err(Error::Config(format!("invalid view jitter {self:?}")));
        }
        Ok(())
    }
}

impl Default for ViewJitter {
    fn default() -> Self {
        ViewJitter {
            max_shift: 4.0,
            brightness: 0.1,
            contrast: 0.15,
            noise_sigma: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Places whose views are all training images.
    pub num_places: usize,
    /// Held-out places split into references and queries.
    pub eval_places: usize,
    pub views_per_place: usize,
    /// Views of each held-out place used as references; the rest are queries.
    pub reference_views: usize,
    pub height: usize,
    pub width: usize,
    pub jitter: ViewJitter,
    /// Distance between neighboring place centers, meters.
    pub spacing_m: f64,
    /// Max offset of a view from its place center along each axis, meters.
    pub position_jitter_m: f64,
    /// Frame-indexed variant: place `p` sits at frame `p * stride`.
    pub frame_stride: Option<u64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_places: 128,
            eval_places: 32,
            views_per_place: 6,
            reference_views: 2,
            height: 64,
            width: 64,
            jitter: ViewJitter::default(),
            spacing_m: 100.0,
            position_jitter_m: 5.0,
            frame_stride: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_places + self.eval_places == 0 || self.views_per_place == 0 {
            return Err(Error::Config("synthetic dataset needs places and views".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.eval_places > 0 && (self.reference_views == 0 || self.reference_views >= self.views_per_place) {
            return Err(Error::Config(format!(
                "reference_views must be in 1..{} for held-out places",
                self.views_per_place
            )));
        }
        self.jitter.validate()?;
        if self.frame_stride == Some(0) {
            return Err(Error::Config("frame_stride must be positive".into()));
        }
        let spread = 2.0 * SQRT_2 * self.position_jitter_m;
        if !(self.position_jitter_m >= 0.0) || spread > DEFAULT_THRESHOLD_M {
            return Err(Error::Config(format!(
                "views of one place may be {spread} m apart, beyond the {DEFAULT_THRESHOLD_M} m match threshold"
            )));
        }
        if !(self.spacing_m - spread > 2.0 * DEFAULT_THRESHOLD_M) {
            return Err(Error::Config(format!(
                "place spacing {} m leaves neighbors within twice the match threshold",
                self.spacing_m
            )));
        }
        Ok(())
    }

    pub fn total_places(&self) -> usize {
        self.num_places + self.eval_places
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripes { nx: f64, ny: f64, period: f64, phase: f64, duty: f64 },
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Stripes { nx, ny, period, phase, duty } => {
                ((x * nx + y * ny) / period + phase).rem_euclid(1.0) < duty
            }
        }
    }
}

/// A place's base texture, defined on continuous pixel coordinates.
#[derive(Clone, Debug)]
pub struct Pattern {
    from: [f64; 3],
    to: [f64; 3],
    axis: (f64, f64),
    extent: f64,
    shapes: Vec<(Shape, [f64; 3])>,
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

impl Pattern {
    pub fn random<R: Rng>(height: usize, width: usize, rng: &mut R) -> Self {
        let (h, w) = (height as f64, width as f64);
        let angle = rng.gen_range(0.0..2.0 * PI);
        let shapes = (0..SHAPES_PER_PLACE)
            .map(|_| {
                let shape = match rng.gen_range(0..3) {
                    0 => Shape::Disk {
                        cx: rng.gen_range(0.0..w),
                        cy: rng.gen_range(0.0..h),
                        r: rng.gen_range(0.08..0.25) * w.min(h),
                    },
                    1 => {
                        let (x0, y0) = (rng.gen_range(-0.1..0.8) * w, rng.gen_range(-0.1..0.8) * h);
                        Shape::Rect {
                            x0,
                            y0,
                            x1: x0 + rng.gen_range(0.1..0.4) * w,
                            y1: y0 + rng.gen_range(0.1..0.4) * h,
                        }
                    }
                    _ => {
                        let a = rng.gen_range(0.0..PI);
                        Shape::Stripes {
                            nx: a.cos(),
                            ny: a.sin(),
                            period: rng.gen_range(0.1..0.3) * w.min(h),
                            phase: rng.gen(),
                            duty: rng.gen_range(0.15..0.4),
                        }
                    }
                };
                (shape, color(rng))
            })
            .collect();
        Pattern {
            from: color(rng),
            to: color(rng),
            axis: (angle.cos(), angle.sin()),
            extent: h.hypot(w),
            shapes,
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some((_, c)) = self.shapes.iter().rev().find(|(s, _)| s.covers(x, y)) {
            return *c;
        }
        let t = ((x * self.axis.0 + y * self.axis.1) / self.extent + 0.5).clamp(0.0, 1.0);
        std::array::from_fn(|c| self.from[c] * (1.0 - t) + self.to[c] * t)
    }

    /// Renders one jittered, 8-bit quantized `[3, H, W]` view.
    pub fn render<R: Rng>(&self, height: usize, width: usize, jitter: &ViewJitter, rng: &mut R) -> Tensor {
        let mut span = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let (dx, dy) = (span(jitter.max_shift), span(jitter.max_shift));
        let gain = 1.0 + span(jitter.contrast);
        let offset = span(jitter.brightness);
        let noise = (jitter.noise_sigma > 0.0).then(|| Normal::new(0.0, jitter.noise_sigma).expect("valid sigma"));
        let n = height * width;
        let mut data = vec![0.0; 3 * n];
        for yi in 0..height {
            for xi in 0..width {
                let rgb = self.sample(xi as f64 + 0.5 + dx, yi as f64 + 0.5 + dy);
                for (c, v) in rgb.iter().enumerate() {
                    let mut v = (v - 0.5) * gain + 0.5 + offset;
                    if let Some(noise) = &noise {
                        v += noise.sample(rng);
                    }
                    data[c * n + yi * width + xi] = quantize(v);
                }
            }
        }
        Tensor::new(&[3, height, width], data).expect("shape matches data")
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Shifts by whole pixels (edges replicated) and applies photometric
/// jitter. Used for training-time augmentation.
pub fn augment<R: Rng>(image: &Tensor, jitter: &ViewJitter, rng: &mut R) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h as isize, *w as isize),
        s => return Err(Error::dim("augment", format!("expected [3, H, W], got {s:?}"))),
    };
    let max = jitter.max_shift.floor() as isize;
    let mut span = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let (dx, dy) = if max > 0 {
        (span(max as f64).round() as isize, span(max as f64).round() as isize)
    } else {
        (0, 0)
    };
    let gain = 1.0 + span(jitter.contrast);
    let offset = span(jitter.brightness);
    let noise = (jitter.noise_sigma > 0.0).then(|| Normal::new(0.0, jitter.noise_sigma).expect("valid sigma"));
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = (y + dy).clamp(0, h - 1);
                let sx = (x + dx).clamp(0, w - 1);
                let mut v = (src[((c * h + sy) * w + sx) as usize] - 0.5) * gain + 0.5 + offset;
                if let Some(noise) = &noise {
                    v += noise.sample(rng);
                }
                out[((c * h + y) * w + x) as usize] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(image.shape(), out)
}

fn place_center(place: usize, total: usize, spacing: f64) -> (f64, f64) {
    let cols = (total as f64).sqrt().ceil() as usize;
    ((place % cols) as f64 * spacing, (place / cols) as f64 * spacing)
}

pub fn sample_id(place: usize, view: usize) -> String {
    format!("p{place:04}_v{view:02}")
}

/// Generates the dataset in memory. A pure function of `cfg`.
pub fn generate(cfg: &SyntheticConfig) -> Result<PlaceDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.total_places();
    let mut samples = Vec::with_capacity(total * cfg.views_per_place);
    for place in 0..total {
        let pattern = Pattern::random(cfg.height, cfg.width, &mut rng);
        let center = place_center(place, total, cfg.spacing_m);
        for view in 0..cfg.views_per_place {
            let role = if place < cfg.num_places {
                Role::Train
            } else if view < cfg.reference_views {
                Role::Reference
            } else {
                Role::Query
            };
            let j = cfg.position_jitter_m;
            let mut span = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
            let location = match cfg.frame_stride {
                Some(stride) => Location::Frame((place as u64 * stride) as i64),
                None => Location::Planar {
                    x: center.0 + span(j),
                    y: center.1 + span(j),
                },
            };
            let image = pattern.render(cfg.height, cfg.width, &cfg.jitter, &mut rng);
            samples.push(Sample {
                id: sample_id(place, view),
                place_id: place as u64,
                location,
                role,
                input: ModelInput::Image(image),
            });
        }
    }
    Ok(PlaceDataset { samples })
}

/// Writes `images/*.ppm` and `manifest.csv` under `dir`.
pub fn write_dataset(dataset: &PlaceDataset, dir: &Path) -> Result<Manifest> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let ModelInput::Image(img) = &s.input else {
            return Err(Error::Contract("only image datasets can be written as pixmaps".into()));
        };
        let rel = Path::new("images").join(format!("{}.ppm", s.id));
        write_atomic(&dir.join(&rel), &encode_ppm(img)?)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            path: rel,
            place_id: s.place_id,
            location: s.location,
            role: s.role,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
