//! Sample augmentation for 2D slice stacks: mirroring, small rotations,
//! and pad-then-resize, plus the balancing driver that grows a class to
//! an exact target count.
//!
//! Everything is seed-deterministic. Replica `k` of original `o` draws
//! its op chain from a generator seeded by `(seed, o, k)`, so outputs do
//! not depend on iteration order or thread count.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::util::{derive_seed2, worker_pool};
use crate::volume::{plane_from_channel, stack_from_planes, Plane, SliceStack};

/// Largest rotation magnitude the augmenter accepts, in degrees.
pub const MAX_ROTATION_DEG: f32 = 15.0;

// Sampled pad margins stay within this fraction of each dimension.
const MAX_PAD_FRACTION: f64 = 0.10;

#[derive(Debug)]
pub enum AugmentError {
    /// No originals to augment from.
    EmptyClass,
    /// Requested fewer outputs than there are originals.
    InvalidTarget { target: usize, originals: usize },
    /// Rotation outside the accepted range.
    AngleOutOfRange(f32),
}

impl fmt::Display for AugmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentError::EmptyClass => write!(f, "cannot augment an empty class"),
            AugmentError::InvalidTarget { target, originals } => write!(
                f,
                "target {target} is smaller than the {originals} originals"
            ),
            AugmentError::AngleOutOfRange(deg) => write!(
                f,
                "rotation of {deg} degrees exceeds the +/-{MAX_ROTATION_DEG} degree limit"
            ),
        }
    }
}

impl std::error::Error for AugmentError {}

/// Mirror direction: `H` reverses columns, `V` reverses rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorAxis {
    H,
    V,
}

/// One augmentation step.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentOp {
    Mirror(MirrorAxis),
    Rotate(f32),
    Pad { top: usize, bottom: usize, left: usize, right: usize, fill: f32 },
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentOp::Mirror(MirrorAxis::H) => write!(f, "mirror:h"),
            AugmentOp::Mirror(MirrorAxis::V) => write!(f, "mirror:v"),
            AugmentOp::Rotate(deg) => write!(f, "rotate:{deg}"),
            AugmentOp::Pad { top, bottom, left, right, .. } => {
                write!(f, "pad:{top},{bottom},{left},{right}")
            }
        }
    }
}

/// Compact chain notation, e.g. `"mirror:h|rotate:7.5"`.
pub fn chain_string(ops: &[AugmentOp]) -> String {
    ops.iter().map(|op| op.to_string()).collect::<Vec<_>>().join("|")
}

/// Exact index reversal along the chosen axis, per channel.
pub fn mirror(img: &SliceStack, axis: MirrorAxis) -> SliceStack {
    let (h, w) = (img.height(), img.width());
    let mut out = SliceStack::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = match axis {
                MirrorAxis::H => (r, w - 1 - c),
                MirrorAxis::V => (h - 1 - r, c),
            };
            for ch in 0..SliceStack::CHANNELS {
                out.set(r, c, ch, img.at(sr, sc, ch));
            }
        }
    }
    out
}

/// Rotation about the image center with bilinear interpolation and zero
/// fill; output dimensions equal input dimensions. A zero angle returns
/// a bit-exact copy.
pub fn rotate(img: &SliceStack, degrees: f32) -> Result<SliceStack, AugmentError> {
    if !degrees.is_finite() || degrees.abs() > MAX_ROTATION_DEG {
        return Err(AugmentError::AngleOutOfRange(degrees));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = f64::from(degrees).to_radians().sin_cos();
    let planes = [
        plane_from_channel(img, 0),
        plane_from_channel(img, 1),
        plane_from_channel(img, 2),
    ];
    let mut rotated = [Plane::zeros(h, w), Plane::zeros(h, w), Plane::zeros(h, w)];
    for r in 0..h {
        let dy = r as f64 - cy;
        for c in 0..w {
            let dx = c as f64 - cx;
            // Inverse map: where the output pixel comes from.
            let src_c = cx + cos * dx + sin * dy;
            let src_r = cy - sin * dx + cos * dy;
            for ch in 0..SliceStack::CHANNELS {
                let v = planes[ch].sample_bilinear(src_r, src_c) as f32;
                rotated[ch].set(r, c, v);
            }
        }
    }
    Ok(stack_from_planes(rotated))
}

/// Pads by the given margins with a fill value, then bilinearly resizes
/// back to the original dimensions. All-zero margins return a bit-exact
/// copy.
pub fn pad(
    img: &SliceStack,
    margins: (usize, usize, usize, usize),
    fill: f32,
) -> SliceStack {
    let (top, bottom, left, right) = margins;
    if top == 0 && bottom == 0 && left == 0 && right == 0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut planes = Vec::with_capacity(SliceStack::CHANNELS);
    for ch in 0..SliceStack::CHANNELS {
        let mut padded = Plane { h: ph, w: pw, data: vec![fill; ph * pw] };
        for r in 0..h {
            for c in 0..w {
                padded.set(r + top, c + left, img.at(r, c, ch));
            }
        }
        planes.push(padded.resize(h, w));
    }
    let planes: [Plane; 3] = planes.try_into().expect("exactly three channels");
    stack_from_planes(planes)
}

/// Applies a chain of ops left to right.
pub fn apply_chain(img: &SliceStack, ops: &[AugmentOp]) -> Result<SliceStack, AugmentError> {
    let mut out = img.clone();
    for op in ops {
        out = match *op {
            AugmentOp::Mirror(axis) => mirror(&out, axis),
            AugmentOp::Rotate(deg) => rotate(&out, deg)?,
            AugmentOp::Pad { top, bottom, left, right, fill } => {
                pad(&out, (top, bottom, left, right), fill)
            }
        };
    }
    Ok(out)
}

/// One output of [`augment_to_target`]: the stack, the chain that
/// produced it (empty for originals), and which original it came from.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub source_index: usize,
    pub stack: SliceStack,
    pub ops: Vec<AugmentOp>,
}

fn is_identity_op(op: &AugmentOp) -> bool {
    match *op {
        AugmentOp::Rotate(deg) => deg == 0.0,
        AugmentOp::Pad { top, bottom, left, right, .. } => {
            top == 0 && bottom == 0 && left == 0 && right == 0
        }
        AugmentOp::Mirror(_) => false,
    }
}

fn is_noop_chain(ops: &[AugmentOp]) -> bool {
    if ops.iter().all(is_identity_op) {
        return true;
    }
    matches!(
        ops,
        [AugmentOp::Mirror(a), AugmentOp::Mirror(b)] if a == b
    )
}

fn sample_op(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AugmentOp {
    match rng.random_range(0..3u32) {
        0 => AugmentOp::Mirror(if rng.random::<bool>() { MirrorAxis::H } else { MirrorAxis::V }),
        1 => AugmentOp::Rotate(rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
        _ => {
            let max_tb = (h as f64 * MAX_PAD_FRACTION) as usize;
            let max_lr = (w as f64 * MAX_PAD_FRACTION) as usize;
            AugmentOp::Pad {
                top: rng.random_range(0..=max_tb),
                bottom: rng.random_range(0..=max_tb),
                left: rng.random_range(0..=max_lr),
                right: rng.random_range(0..=max_lr),
                fill: 0.0,
            }
        }
    }
}

/// Draws a 1- or 2-op chain, rejecting chains that would reproduce the
/// original bit-for-bit.
fn sample_chain(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<AugmentOp> {
    for _ in 0..16 {
        let len = if rng.random::<bool>() { 1 } else { 2 };
        let ops: Vec<AugmentOp> = (0..len).map(|_| sample_op(rng, h, w)).collect();
        if !is_noop_chain(&ops) {
            return ops;
        }
    }
    // Degenerate rasters (too small to pad) can keep sampling identity
    // pads; a single mirror is always a usable fallback.
    vec![AugmentOp::Mirror(MirrorAxis::H)]
}

/// Grows a class to exactly `target` samples: all originals first (no
/// ops applied), then seeded replicas distributed over the originals so
/// per-original counts differ by at most one.
pub fn augment_to_target(
    samples: &[SliceStack],
    target: usize,
    seed: u64,
) -> Result<Vec<AugmentedSample>, AugmentError> {
    let n = samples.len();
    if n == 0 {
        return Err(AugmentError::EmptyClass);
    }
    if target < n {
        return Err(AugmentError::InvalidTarget { target, originals: n });
    }

    let mut out: Vec<AugmentedSample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| AugmentedSample { source_index: i, stack: s.clone(), ops: Vec::new() })
        .collect();

    // Replica jobs ordered by (original, replica); the first
    // `extra % n` originals take the extra one.
    let extra = target - n;
    let mut jobs = Vec::with_capacity(extra);
    for o in 0..n {
        let count = extra / n + usize::from(o < extra % n);
        for k in 0..count {
            jobs.push((o, k));
        }
    }

    let replicas: Vec<Result<AugmentedSample, AugmentError>> = worker_pool().install(|| {
        jobs.par_iter()
            .map(|&(o, k)| {
                let src = &samples[o];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, o as u64, k as u64));
                let ops = sample_chain(&mut rng, src.height(), src.width());
                let stack = apply_chain(src, &ops)?;
                Ok(AugmentedSample { source_index: o, stack, ops })
            })
            .collect()
    });
    for r in replicas {
        out.push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Stack with deterministic, asymmetric content.
    fn ramp_stack(h: usize, w: usize) -> SliceStack {
        let mut s = SliceStack::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                for ch in 0..SliceStack::CHANNELS {
                    s.set(r, c, ch, (r * w + c) as f32 + ch as f32 * 0.25);
                }
            }
        }
        s
    }

    /// Smooth radial blob, used for interpolation round-trip bounds.
    fn blob_stack(n: usize) -> SliceStack {
        let mut s = SliceStack::zeros(n, n);
        let center = (n as f32 - 1.0) / 2.0;
        for r in 0..n {
            for c in 0..n {
                let d2 = (r as f32 - center).powi(2) + (c as f32 - center).powi(2);
                let v = 100.0 * (-d2 / (2.0 * 100.0)).exp();
                for ch in 0..SliceStack::CHANNELS {
                    s.set(r, c, ch, v);
                }
            }
        }
        s
    }

    #[test]
    fn mirror_h_reverses_columns() {
        let mut img = SliceStack::zeros(2, 2);
        for (i, v) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            img.set(i / 2, i % 2, 0, v);
        }
        let out = mirror(&img, MirrorAxis::H);
        assert_eq!(out.at(0, 0, 0), 2.0);
        assert_eq!(out.at(0, 1, 0), 1.0);
        assert_eq!(out.at(1, 0, 0), 4.0);
        assert_eq!(out.at(1, 1, 0), 3.0);
    }

    #[test]
    fn mirror_twice_is_the_identity() {
        let img = ramp_stack(5, 7);
        for axis in [MirrorAxis::H, MirrorAxis::V] {
            let back = mirror(&mirror(&img, axis), axis);
            assert_eq!(back.data(), img.data());
        }
    }

    #[test]
    fn mirroring_a_symmetric_image_changes_nothing() {
        let mut img = SliceStack::zeros(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                // Symmetric under column reversal.
                img.set(r, c, 0, (c as i32 - 1).abs() as f32 + r as f32);
            }
        }
        let out = mirror(&img, MirrorAxis::H);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn rotate_zero_is_bit_exact_and_large_angles_are_rejected() {
        let img = ramp_stack(6, 6);
        let out = rotate(&img, 0.0).unwrap();
        assert_eq!(out.data(), img.data());
        assert!(matches!(rotate(&img, 15.5), Err(AugmentError::AngleOutOfRange(_))));
        assert!(matches!(rotate(&img, -16.0), Err(AugmentError::AngleOutOfRange(_))));
        assert!(rotate(&img, 15.0).is_ok());
    }

    #[test]
    fn rotating_a_constant_image_keeps_the_interior_constant() {
        let mut img = SliceStack::zeros(16, 16);
        for v in img.data_mut() {
            *v = 5.0;
        }
        let out = rotate(&img, 10.0).unwrap();
        // Center block is far from any clipped corner.
        for r in 5..11 {
            for c in 5..11 {
                assert!((out.at(r, c, 0) - 5.0).abs() < 1e-5);
            }
        }
        // Every output value sits between fill and the constant.
        for &v in out.data() {
            assert!((-1e-5..=5.0 + 1e-5).contains(&v));
        }
        // A clipped corner shows the zero fill.
        assert!(out.at(0, 0, 0) < 5.0);
    }

    #[test]
    fn rotation_round_trip_stays_within_two_percent_rms() {
        let img = blob_stack(64);
        let back = rotate(&rotate(&img, 10.0).unwrap(), -10.0).unwrap();
        let n = img.data().len() as f64;
        let rms = (img
            .data()
            .iter()
            .zip(back.data())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(rms < 2.0, "round-trip RMS {rms} (range 100)");
    }

    #[test]
    fn zero_pad_is_bit_exact_and_dims_never_change() {
        let img = ramp_stack(9, 4);
        let out = pad(&img, (0, 0, 0, 0), 0.0);
        assert_eq!(out.data(), img.data());
        let out = pad(&img, (3, 1, 0, 2), 0.0);
        assert_eq!((out.height(), out.width()), (9, 4));
    }

    #[test]
    fn padding_pulls_borders_toward_fill_and_keeps_the_center() {
        let mut img = SliceStack::zeros(12, 12);
        for v in img.data_mut() {
            *v = 8.0;
        }
        let out = pad(&img, (4, 4, 4, 4), 0.0);
        assert_eq!((out.height(), out.width()), (12, 12));
        assert!((out.at(6, 6, 0) - 8.0).abs() < 1e-5, "center must stay");
        assert_eq!(out.at(0, 0, 0), 0.0, "corner maps into the fill band");
        assert!(out.at(0, 5, 0) < 8.0, "border pulled toward fill");
    }

    #[test]
    fn chain_string_matches_the_documented_format() {
        let ops = vec![
            AugmentOp::Mirror(MirrorAxis::H),
            AugmentOp::Rotate(7.5),
            AugmentOp::Pad { top: 1, bottom: 0, left: 2, right: 3, fill: 0.0 },
        ];
        assert_eq!(chain_string(&ops), "mirror:h|rotate:7.5|pad:1,0,2,3");
        assert_eq!(chain_string(&[]), "");
    }

    #[test]
    fn full_class_balancing_arithmetic_matches_the_table() {
        // 96 originals grown to 8352: replicas split 8256 = 86 * 96.
        let samples: Vec<SliceStack> = (0..96).map(|_| ramp_stack(4, 4)).collect();
        let out = augment_to_target(&samples, 8352, 9).unwrap();
        assert_eq!(out.len(), 8352);
        let mut per_source = vec![0usize; 96];
        for s in &out {
            per_source[s.source_index] += 1;
        }
        assert!(per_source.iter().all(|&c| c == 87), "1 original + 86 replicas each");

        // 89 originals: 8263 replicas cannot split evenly; counts differ
        // by at most one.
        let samples: Vec<SliceStack> = (0..89).map(|_| ramp_stack(4, 4)).collect();
        let out = augment_to_target(&samples, 8352, 9).unwrap();
        assert_eq!(out.len(), 8352);
        let mut per_source = vec![0usize; 89];
        for s in &out {
            per_source[s.source_index] += 1;
        }
        let min = per_source.iter().min().unwrap();
        let max = per_source.iter().max().unwrap();
        assert!(max - min <= 1, "counts spread from {min} to {max}");
        assert_eq!(per_source.iter().sum::<usize>(), 8352);
    }

    #[test]
    fn target_equal_to_originals_returns_them_unchanged() {
        let samples: Vec<SliceStack> = (0..5).map(|i| ramp_stack(3 + i, 4)).collect();
        let out = augment_to_target(&samples, 5, 1).unwrap();
        assert_eq!(out.len(), 5);
        for (i, s) in out.iter().enumerate() {
            assert_eq!(s.source_index, i);
            assert!(s.ops.is_empty());
            assert_eq!(s.stack.data(), samples[i].data());
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let samples: Vec<SliceStack> = (0..3).map(|_| blob_stack(16)).collect();
        let a = augment_to_target(&samples, 20, 7).unwrap();
        let b = augment_to_target(&samples, 20, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.source_index, y.source_index);
            assert_eq!(chain_string(&x.ops), chain_string(&y.ops));
            assert_eq!(x.stack.data(), y.stack.data());
        }
        let c = augment_to_target(&samples, 20, 8).unwrap();
        let chains_a: Vec<String> = a.iter().map(|s| chain_string(&s.ops)).collect();
        let chains_c: Vec<String> = c.iter().map(|s| chain_string(&s.ops)).collect();
        assert_ne!(chains_a, chains_c, "different seeds should draw different chains");
    }

    /// Blob plus a tilted ramp: smooth but with no mirror symmetry.
    fn asymmetric_stack(n: usize) -> SliceStack {
        let mut s = blob_stack(n);
        for r in 0..n {
            for c in 0..n {
                for ch in 0..SliceStack::CHANNELS {
                    let v = s.at(r, c, ch) + 0.31 * r as f32 + 0.17 * c as f32;
                    s.set(r, c, ch, v);
                }
            }
        }
        s
    }

    #[test]
    fn replicas_never_reproduce_their_original_bit_for_bit() {
        let samples: Vec<SliceStack> = (0..4).map(|_| asymmetric_stack(20)).collect();
        let out = augment_to_target(&samples, 60, 3).unwrap();
        for s in &out {
            if s.ops.is_empty() {
                continue;
            }
            assert!(s.ops.len() <= 2, "chains are 1-2 ops");
            assert!(
                s.stack.data() != samples[s.source_index].data(),
                "chain {:?} reproduced its original",
                chain_string(&s.ops)
            );
        }
    }

    #[test]
    fn empty_class_and_undershoot_targets_are_rejected() {
        assert!(matches!(
            augment_to_target(&[], 10, 0),
            Err(AugmentError::EmptyClass)
        ));
        let samples: Vec<SliceStack> = (0..4).map(|_| ramp_stack(4, 4)).collect();
        assert!(matches!(
            augment_to_target(&samples, 3, 0),
            Err(AugmentError::InvalidTarget { target: 3, originals: 4 })
        ));
    }

    proptest! {
        #[test]
        fn balancing_counts_always_differ_by_at_most_one(
            n in 1usize..8,
            extra in 0usize..50,
            seed in 0u64..1000,
        ) {
            let samples: Vec<SliceStack> = (0..n).map(|_| ramp_stack(3, 3)).collect();
            let target = n + extra;
            let out = augment_to_target(&samples, target, seed).unwrap();
            prop_assert_eq!(out.len(), target);
            let mut per_source = vec![0usize; n];
            for s in &out {
                per_source[s.source_index] += 1;
            }
            let min = per_source.iter().min().unwrap();
            let max = per_source.iter().max().unwrap();
            prop_assert!(max - min <= 1);
            // Originals lead the output, in order and untouched.
            for i in 0..n {
                prop_assert_eq!(out[i].source_index, i);
                prop_assert!(out[i].ops.is_empty());
                prop_assert_eq!(out[i].stack.data(), samples[i].data());
            }
        }
    }
}
