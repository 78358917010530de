//! Procedural two-domain image benchmark.
//!
//! Each class is a superformula outline with its own base hue; the shape
//! parameters and hue come from a stream keyed by the domain's label space, so
//! two label spaces share the rendering process but no class. Per-sample
//! jitter covers position, scale, rotation, hue and saturation. A domain
//! shift rotates all hues, adds pixel noise and moves the background level.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{DomainSplits, LabeledDataset, Split};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    /// Hue rotation in radians.
    pub color_rotation: f64,
    /// Standard deviation of additive per-pixel noise.
    pub texture_noise_sigma: f64,
    /// Offset added to the background intensity.
    pub background_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// `(H, W, C)`
    pub image_size: [usize; 3],
    #[serde(default)]
    pub shift: DomainShift,
    /// Half-width of the uniform per-sample hue jitter around a class's base
    /// hue, in turns. `0.5` makes colour carry no class information.
    #[serde(default = "default_hue_jitter")]
    pub hue_jitter: f64,
    pub label_space_id: String,
    pub seed: u64,
}

/// Fractions of each class assigned to train and val; test gets the rest.
pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;

/// Per-pixel noise present in every domain.
const BASE_NOISE: f64 = 0.03;
const HUE_JITTER: f64 = 0.12;
const TARGET_HUE_JITTER: f64 = 0.5;

fn default_hue_jitter() -> f64 {
    HUE_JITTER
}

impl DomainSpec {
    /// Broad "pretraining" domain: 20 classes x 200 samples, 32x32x3, no shift.
    pub fn default_broad(seed: u64) -> Self {
        Self {
            name: "broad".into(),
            num_classes: 20,
            samples_per_class: 200,
            image_size: [32, 32, 3],
            shift: DomainShift::default(),
            hue_jitter: HUE_JITTER,
            label_space_id: "broad".into(),
            seed,
        }
    }

    /// Shifted target domain: 5 disjoint classes x 120 samples.
    pub fn default_target(seed: u64) -> Self {
        Self {
            name: "target".into(),
            num_classes: 5,
            samples_per_class: 120,
            image_size: [32, 32, 3],
            shift: DomainShift {
                color_rotation: 1.2,
                texture_noise_sigma: 0.08,
                background_bias: -0.12,
            },
            hue_jitter: TARGET_HUE_JITTER,
            label_space_id: "target".into(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.image_size;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(alloc::format!(
                "domain `{}` needs at least 2 classes",
                self.name
            ));
        }
        if self.samples_per_class < 3 {
            return bad(alloc::format!(
                "domain `{}` needs at least 3 samples per class",
                self.name
            ));
        }
        if h < 8 || w < 8 || !(c == 1 || c == 3) {
            return bad(alloc::format!(
                "unsupported image size {:?}",
                self.image_size
            ));
        }
        let s = &self.shift;
        if !s.color_rotation.is_finite()
            || !s.background_bias.is_finite()
            || !(s.texture_noise_sigma >= 0.0)
            || !(0.0..=0.5).contains(&self.hue_jitter)
        {
            return bad(
                "shift parameters must be finite, noise nonnegative and hue_jitter in [0, 0.5]"
                    .into(),
            );
        }
        if self.label_space_id.is_empty() {
            return bad("label_space_id must not be empty".into());
        }
        Ok(())
    }

    /// Sizes of the (train, val, test) parts of one class.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.samples_per_class;
        let train = libm::round(n as f64 * TRAIN_FRACTION) as usize;
        let val = (libm::round(n as f64 * VAL_FRACTION) as usize).max(1);
        let train = train.min(n - val - 1).max(1);
        (train, val, n - train - val)
    }
}

/// Shape and colour parameters of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    pub symmetry: f64,
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
    pub hollow: bool,
    pub hue: f64,
    max_radius: f64,
}

fn superformula(phi: f64, m: f64, n1: f64, n2: f64, n3: f64) -> f64 {
    let a = libm::pow(libm::fabs(libm::cos(m * phi / 4.0)), n2);
    let b = libm::pow(libm::fabs(libm::sin(m * phi / 4.0)), n3);
    libm::pow(a + b, -1.0 / n1)
}

impl ClassStyle {
    pub fn for_class(label_space_id: &str, class: usize) -> Self {
        let mut r = rng::stream(rng::tag_hash(label_space_id), "class-style", class as u64);
        let symmetry = (3 + (rng::uniform(&mut r, 0.0, 6.0) as usize).min(5)) as f64;
        let n1 = libm::exp(rng::uniform(&mut r, libm::log(0.25), libm::log(2.5)));
        let n2 = rng::uniform(&mut r, 0.3, 2.5);
        let n3 = rng::uniform(&mut r, 0.3, 2.5);
        let hollow = rng::uniform(&mut r, 0.0, 1.0) < 0.35;
        let hue = rng::uniform(&mut r, 0.0, 1.0);
        let max_radius = (0..720)
            .map(|i| {
                superformula(
                    i as f64 * core::f64::consts::TAU / 720.0,
                    symmetry,
                    n1,
                    n2,
                    n3,
                )
            })
            .fold(0.0, f64::max);
        Self {
            symmetry,
            n1,
            n2,
            n3,
            hollow,
            hue,
            max_radius,
        }
    }

    /// Normalized outline radius in `(0, 1]` at angle `phi`.
    pub fn radius(&self, phi: f64) -> f64 {
        superformula(phi, self.symmetry, self.n1, self.n2, self.n3) / self.max_radius
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h - libm::floor(h)) * 6.0;
    let i = libm::floor(h) as usize % 6;
    let f = h - libm::floor(h);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render(spec: &DomainSpec, style: &ClassStyle, r: &mut Stream, out: &mut [f32]) {
    let [h, w, c] = spec.image_size;
    let half = (h.min(w) as f64) / 2.0;
    let cx = w as f64 / 2.0 + rng::uniform(r, -0.12, 0.12) * w as f64;
    let cy = h as f64 / 2.0 + rng::uniform(r, -0.12, 0.12) * h as f64;
    let scale = rng::uniform(r, 0.5, 0.85) * half;
    let rot = rng::uniform(r, -0.4, 0.4);
    let hue = style.hue
        + rng::uniform(r, -spec.hue_jitter, spec.hue_jitter)
        + spec.shift.color_rotation / core::f64::consts::TAU;
    let fg = hsv_to_rgb(hue, rng::uniform(r, 0.55, 0.95), rng::uniform(r, 0.7, 1.0));
    let grey = 0.4 + spec.shift.background_bias + rng::uniform(r, -0.08, 0.08);
    let bg: [f64; 3] = core::array::from_fn(|_| grey + rng::uniform(r, -0.04, 0.04));
    let sigma = BASE_NOISE + spec.shift.texture_noise_sigma;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let dist = libm::sqrt(dx * dx + dy * dy);
            let edge = scale * style.radius(libm::atan2(dy, dx) - rot);
            // One-pixel soft edge.
            let mut alpha = (edge - dist + 0.5).clamp(0.0, 1.0);
            if style.hollow {
                alpha *= (dist - 0.55 * edge + 0.5).clamp(0.0, 1.0);
            }
            for ch in 0..c {
                let (f, b) = if c == 3 {
                    (fg[ch], bg[ch])
                } else {
                    ((fg[0] + fg[1] + fg[2]) / 3.0, grey)
                };
                let v = alpha * f + (1.0 - alpha) * b + sigma * rng::normal(r);
                out[(y * w + x) * c + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Renders every sample of a domain and splits each class 70/10/20.
/// A pure function of `spec`.
pub fn generate_domain(spec: &DomainSpec) -> Result<DomainSplits> {
    spec.validate()?;
    let per: usize = spec.image_size.iter().product();
    let (n_train, n_val, _) = spec.split_sizes();
    let styles: Vec<ClassStyle> = (0..spec.num_classes)
        .map(|k| ClassStyle::for_class(&spec.label_space_id, k))
        .collect();
    let mut parts: [(Vec<f32>, Vec<u32>); 3] = Default::default();
    for (class, style) in styles.iter().enumerate() {
        let mut order: Vec<usize> = (0..spec.samples_per_class).collect();
        rng::shuffle(
            &mut rng::stream(spec.seed, "split", class as u64),
            &mut order,
        );
        for (pos, &sample) in order.iter().enumerate() {
            let part = if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            };
            let mut r = rng::stream(
                spec.seed ^ rng::tag_hash(&spec.label_space_id),
                "sample",
                (class * spec.samples_per_class + sample) as u64,
            );
            let start = parts[part].0.len();
            parts[part].0.resize(start + per, 0.0);
            render(spec, style, &mut r, &mut parts[part].0[start..]);
            parts[part].1.push(class as u32);
        }
    }
    let [train, val, test] = parts;
    let finish = |(images, labels): (Vec<f32>, Vec<u32>),
                  split: Split,
                  tag: u64|
     -> Result<LabeledDataset> {
        let ds = LabeledDataset::new(images, labels, split, spec.clone())?;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rng::shuffle(&mut rng::stream(spec.seed, "split-order", tag), &mut order);
        Ok(ds.subset(&order))
    };
    Ok(DomainSplits {
        train: finish(train, Split::Train, 0)?,
        val: finish(val, Split::Val, 1)?,
        test: finish(test, Split::Test, 2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DomainSpec {
        DomainSpec {
            samples_per_class: 10,
            num_classes: 3,
            image_size: [12, 12, 3],
            ..DomainSpec::default_target(seed)
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_domain(&small(3)).unwrap();
        let b = generate_domain(&small(3)).unwrap();
        assert_eq!(a.train.checksum(), b.train.checksum());
        assert_eq!(a.test.checksum(), b.test.checksum());
        let c = generate_domain(&small(4)).unwrap();
        assert_ne!(a.train.checksum(), c.train.checksum());
    }

    #[test]
    fn split_arithmetic() {
        let spec = DomainSpec {
            samples_per_class: 100,
            image_size: [8, 8, 3],
            ..DomainSpec::default_target(0)
        };
        let d = generate_domain(&spec).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (350, 50, 100));
        assert_eq!(d.train.class_counts(), alloc::vec![70; 5]);
        assert_eq!(DomainSpec::default_target(0).split_sizes(), (84, 12, 24));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let d = generate_domain(&small(1)).unwrap();
        assert!(d.train.images().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn label_spaces_have_distinct_styles() {
        let a = ClassStyle::for_class("broad", 0);
        let b = ClassStyle::for_class("target", 0);
        assert_ne!(a, b);
        assert_eq!(a, ClassStyle::for_class("broad", 0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(0);
        s.num_classes = 1;
        assert!(matches!(generate_domain(&s), Err(Error::InvalidConfig(_))));
        let mut s = small(0);
        s.shift.texture_noise_sigma = -0.1;
        assert!(generate_domain(&s).is_err());
    }
}
