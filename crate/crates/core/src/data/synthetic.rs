//! Procedural bi-temporal patches for smoke tests and desk-scale experiments.
//!
//! Both dates share a noisy textured ground. Foreground patches receive one
//! or more new bright rectangles ("buildings") in T2 only, which form the
//! change label. Optionally, unchanged rectangles are painted into both dates
//! so that appearance alone does not reveal change.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{classify_patch, PatchPair};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub tile: usize,
    pub count: usize,
    /// Probability that a patch receives at least one change.
    pub foreground_fraction: f64,
    /// Inclusive side-length range of changed rectangles.
    pub change_size: (usize, usize),
    pub max_changes: usize,
    /// Probability of an unchanged rectangle present in both dates.
    pub distractor_rate: f64,
    pub noise: u8,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(tile: usize, count: usize, seed: u64) -> Self {
        Self {
            tile,
            count,
            foreground_fraction: 0.5,
            change_size: (tile / 8, tile / 4),
            max_changes: 1,
            distractor_rate: 0.0,
            noise: 20,
            seed,
        }
    }
}

fn paint(img: &mut Array3<u8>, r: usize, c: usize, h: usize, w: usize, colour: [u8; 3]) {
    for (ch, &v) in colour.iter().enumerate() {
        img.slice_mut(s![ch, r..r + h, c..c + w]).fill(v);
    }
}

fn rect<R: Rng>(rng: &mut R, tile: usize, (lo, hi): (usize, usize)) -> (usize, usize, usize, usize) {
    let lo = lo.clamp(1, tile);
    let hi = hi.clamp(lo, tile);
    let h = rng.gen_range(lo..=hi);
    let w = rng.gen_range(lo..=hi);
    (rng.gen_range(0..=tile - h), rng.gen_range(0..=tile - w), h, w)
}

pub fn generate(spec: &SyntheticSpec) -> Vec<PatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = spec.tile;
    (0..spec.count)
        .map(|k| {
            let ground = [rng.gen_range(60..120u8), rng.gen_range(70..130u8), rng.gen_range(50..110u8)];
            let noise = i16::from(spec.noise);
            let mut t1 = Array3::from_shape_fn((3, t, t), |(c, _, _)| {
                (i16::from(ground[c]) + rng.gen_range(-noise..=noise)).clamp(0, 255) as u8
            });
            if rng.gen_bool(spec.distractor_rate) {
                let (r, c, h, w) = rect(&mut rng, t, spec.change_size);
                paint(&mut t1, r, c, h, w, [205, 200, 190]);
            }
            let half = noise / 2;
            let mut t2 = t1.mapv(|v| (i16::from(v) + rng.gen_range(-half..=half)).clamp(0, 255) as u8);
            let mut label = Array2::zeros((t, t));
            if rng.gen_bool(spec.foreground_fraction) {
                let n = rng.gen_range(1..=spec.max_changes.max(1));
                for _ in 0..n {
                    let (r, c, h, w) = rect(&mut rng, t, spec.change_size);
                    paint(&mut t2, r, c, h, w, [215, 205, 195]);
                    label.slice_mut(s![r..r + h, c..c + w]).fill(1);
                }
            }
            PatchPair {
                parent_id: format!("synthetic{k:05}"),
                offset: (0, 0),
                category: classify_patch(label.view()),
                t1,
                t2,
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatchCategory;

    #[test]
    fn deterministic_and_consistent_labels() {
        let spec = SyntheticSpec::new(16, 20, 4);
        let a = generate(&spec);
        assert_eq!(a, generate(&spec));
        for p in &a {
            assert_eq!(p.category == PatchCategory::Foreground, p.changed_pixels() > 0);
        }
        assert!(a.iter().any(|p| p.category == PatchCategory::Foreground));
        assert!(a.iter().any(|p| p.category == PatchCategory::Background));
    }
}
