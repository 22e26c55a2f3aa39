//! Synthetic two-domain classification tasks.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::flow::{bilinear_warp, synthetic_flow, Affine2, Image};
use crate::tensor::Tensor;
use crate::{seeded_rng, Rng as SeededRng};

/// Floor applied to the per-example standardization divisor.
pub const STD_FLOOR: f64 = 1e-8;

/// Label-generating process shared by both domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BaseTask {
    /// Gaussian clusters whose centres sit on a circle in the first two
    /// coordinates, with jitter in every coordinate.
    Blobs,
    /// Two interleaved half circles in the first two coordinates.
    TwoMoons,
    /// 16x16 stroke glyphs, one glyph type per class.
    Glyphs,
}

/// What happens to target inputs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DomainShift {
    /// Rotation in the plane of `rotation_plane` (vectors) or of the image.
    pub rotation_degrees: f64,
    pub rotation_plane: [usize; 2],
    /// Multiplies `brightness_coords` (vectors) or every pixel (glyphs).
    pub brightness_scale: f64,
    pub brightness_coords: Vec<usize>,
    /// Constant added to one channel (glyphs) or coordinate (vectors).
    pub additive_offset: f64,
    pub additive_channel: usize,
    /// Applies a fixed seeded permutation to the coordinates.
    pub permute: bool,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            rotation_degrees: 0.0,
            rotation_plane: [0, 1],
            brightness_scale: 1.0,
            brightness_coords: Vec::new(),
            additive_offset: 0.0,
            additive_channel: 0,
            permute: false,
        }
    }
}

impl DomainShift {
    pub fn is_identity(&self) -> bool {
        self.rotation_degrees == 0.0 && self.brightness_scale == 1.0 && self.additive_offset == 0.0 && !self.permute
    }
}

/// Everything needed to regenerate a two-domain dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticDomainSpec {
    pub task: BaseTask,
    /// Input dimension for vector tasks; ignored for glyphs.
    pub dim: usize,
    /// Colour channels of glyph images.
    pub channels: usize,
    pub classes: usize,
    /// Radius of the blob centre circle, or scale of the moons.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    /// Standard deviation of the per-coordinate centre jitter.
    pub center_jitter: f64,
    pub shift: DomainShift,
    /// Fraction of target examples in subgroup 1 (the "night" analogue).
    pub subgroup_fraction: f64,
    /// Extra brightness factor applied to subgroup 1.
    pub subgroup_scale: f64,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
    /// Per-example, per-channel standardization.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            task: BaseTask::Blobs,
            dim: 8,
            channels: 1,
            classes: 3,
            separation: 3.0,
            spread: 1.0,
            center_jitter: 1.0,
            shift: DomainShift::default(),
            subgroup_fraction: 0.5,
            subgroup_scale: 1.0,
            source_train: 2000,
            source_test: 500,
            target_train: 2000,
            target_val: 1000,
            target_test: 1000,
            standardize: true,
            seed: 0,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        match self.task {
            BaseTask::TwoMoons if self.classes != 2 => return Err(invalid("two-moons has exactly two classes")),
            BaseTask::Glyphs if self.classes > GLYPHS => return Err(invalid("at most 8 glyph classes")),
            BaseTask::Glyphs if self.channels == 0 => return Err(invalid("glyphs need at least one channel")),
            BaseTask::Blobs | BaseTask::TwoMoons if self.dim < 2 => return Err(invalid("vector tasks need dim >= 2")),
            _ => {}
        }
        let d = self.input_dim();
        let s = &self.shift;
        if s.rotation_plane[0] == s.rotation_plane[1] || (self.task != BaseTask::Glyphs && s.rotation_plane.iter().any(|&c| c >= d)) {
            return Err(invalid("rotation plane needs two distinct coordinates"));
        }
        if s.brightness_coords.iter().any(|&c| c >= d) {
            return Err(invalid("brightness coordinate out of range"));
        }
        let channel_limit = if self.task == BaseTask::Glyphs { self.channels } else { d };
        if s.additive_offset != 0.0 && s.additive_channel >= channel_limit {
            return Err(invalid("additive channel out of range"));
        }
        if !(0.0..=1.0).contains(&self.subgroup_fraction) {
            return Err(invalid("subgroup fraction must lie in [0, 1]"));
        }
        if !(self.spread >= 0.0) || !(self.center_jitter >= 0.0) || !self.separation.is_finite() {
            return Err(invalid("spread, jitter and separation must be finite and nonnegative"));
        }
        let counts = [self.source_train, self.source_test, self.target_train, self.target_val, self.target_test];
        if counts.contains(&0) {
            return Err(invalid("split sizes must be positive"));
        }
        Ok(())
    }

    /// Length of one input row.
    pub fn input_dim(&self) -> usize {
        match self.task {
            BaseTask::Glyphs => GLYPH_SIDE * GLYPH_SIDE * self.channels,
            _ => self.dim,
        }
    }

    fn standardize_channels(&self) -> usize {
        match self.task {
            BaseTask::Glyphs => self.channels,
            _ => 1,
        }
    }
}

const GLYPH_SIDE: usize = 16;
const GLYPHS: usize = 8;

/// One split: inputs, labels, target subgroup and the pool index of every
/// row.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub subgroups: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `rows` as a new split.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            subgroups: rows.iter().map(|&r| self.subgroups[r]).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        })
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }
}

/// Source and target splits of one synthetic task. Target labels are kept
/// for evaluation and model selection only.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoDomainDataset {
    pub source_train: Split,
    pub source_test: Split,
    pub target_train: Split,
    pub target_val: Split,
    pub target_test: Split,
    pub classes: usize,
    /// Examples whose standardization divisor hit [`STD_FLOOR`].
    pub floored: usize,
}

struct Generator<'a> {
    spec: &'a SyntheticDomainSpec,
    centers: Vec<Vec<f64>>,
    permutation: Vec<usize>,
}

impl Generator<'_> {
    fn clean(&self, label: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let spec = self.spec;
        let noise = Normal::new(0.0, spec.spread).map_err(|_| invalid("bad spread"))?;
        match spec.task {
            BaseTask::Blobs => Ok(self.centers[label].iter().map(|c| c + noise.sample(rng)).collect()),
            BaseTask::TwoMoons => {
                let t = rng.random_range(0.0..core::f64::consts::PI);
                let (x, y) = if label == 0 {
                    (libm::cos(t), libm::sin(t))
                } else {
                    (1.0 - libm::cos(t), 0.5 - libm::sin(t))
                };
                let mut v: Vec<f64> = (0..spec.dim).map(|_| noise.sample(rng)).collect();
                v[0] += spec.separation * (x - 0.5);
                v[1] += spec.separation * (y - 0.25);
                Ok(v)
            }
            BaseTask::Glyphs => Ok(glyph(label, spec.channels, spec.spread, rng)?.data().to_vec()),
        }
    }

    fn shift(&self, mut v: Vec<f64>, subgroup: usize) -> Result<Vec<f64>> {
        let s = &self.spec.shift;
        let glyphs = self.spec.task == BaseTask::Glyphs;
        if s.rotation_degrees != 0.0 {
            if glyphs {
                let c = self.spec.channels;
                let img = Image::new(GLYPH_SIDE, GLYPH_SIDE, c, v)?;
                let mid = (GLYPH_SIDE as f64 - 1.0) / 2.0;
                let flow = synthetic_flow(&Affine2::rotation_about(s.rotation_degrees, mid, mid), GLYPH_SIDE, GLYPH_SIDE)?;
                v = bilinear_warp(&img, &flow)?.data().to_vec();
            } else {
                let [a, b] = s.rotation_plane;
                let (sn, cs) = libm::sincos(s.rotation_degrees.to_radians());
                let (x, y) = (v[a], v[b]);
                v[a] = cs * x - sn * y;
                v[b] = sn * x + cs * y;
            }
        }
        let scale = s.brightness_scale * if subgroup == 1 { self.spec.subgroup_scale } else { 1.0 };
        if scale != 1.0 {
            if glyphs || s.brightness_coords.is_empty() {
                v.iter_mut().for_each(|x| *x *= scale);
            } else {
                for &c in &s.brightness_coords {
                    v[c] *= scale;
                }
            }
        }
        if s.additive_offset != 0.0 {
            if glyphs {
                let c = self.spec.channels;
                v.iter_mut().skip(s.additive_channel).step_by(c).for_each(|x| *x += s.additive_offset);
            } else {
                v[s.additive_channel] += s.additive_offset;
            }
        }
        if s.permute {
            v = self.permutation.iter().map(|&i| v[i]).collect();
        }
        Ok(v)
    }
}

/// `x̃ = (x - mean_c) / max(std_c, floor)` per example and channel, with the
/// sample standard deviation. Returns whether the floor was hit.
pub fn standardize_example(v: &mut [f64], channels: usize) -> bool {
    let mut floored = false;
    for c in 0..channels {
        let n = v.iter().skip(c).step_by(channels).count();
        let mean = v.iter().skip(c).step_by(channels).sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().skip(c).step_by(channels).map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sd = libm::sqrt(var);
        if sd < STD_FLOOR {
            sd = STD_FLOOR;
            floored = true;
        }
        v.iter_mut().skip(c).step_by(channels).for_each(|x| *x = (*x - mean) / sd);
    }
    floored
}

fn glyph(label: usize, channels: usize, noise_sd: f64, rng: &mut SeededRng) -> Result<Image> {
    let n = GLYPH_SIDE as f64;
    let (ox, oy) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let ink = rng.random_range(0.6..1.0);
    let color: Vec<f64> = (0..channels).map(|_| rng.random_range(0.7..1.0)).collect();
    let noise = Normal::new(0.0, 0.05 * noise_sd.max(0.0)).map_err(|_| invalid("bad spread"))?;
    let mut data = Vec::with_capacity(GLYPH_SIDE * GLYPH_SIDE * channels);
    let c = (n - 1.0) / 2.0;
    for i in 0..GLYPH_SIDE {
        for j in 0..GLYPH_SIDE {
            let (x, y) = (j as f64 - c - ox, i as f64 - c - oy);
            let stroke = |d: f64| libm::exp(-d * d / 1.5);
            let r = libm::hypot(x, y);
            let v = match label {
                0 => stroke(y) * (x.abs() < 5.0) as u8 as f64,
                1 => stroke(x) * (y.abs() < 5.0) as u8 as f64,
                2 => stroke((x - y) / core::f64::consts::SQRT_2) * (r < 6.0) as u8 as f64,
                3 => stroke((x + y) / core::f64::consts::SQRT_2) * (r < 6.0) as u8 as f64,
                4 => stroke(r - 4.5),
                5 => (stroke(x) * (y.abs() < 5.0) as u8 as f64).max(stroke(y) * (x.abs() < 5.0) as u8 as f64),
                6 => stroke(x.abs().max(y.abs()) - 4.5),
                _ => stroke(r / 2.0),
            };
            for col in &color {
                data.push((ink * v * col + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(GLYPH_SIDE, GLYPH_SIDE, channels, data)
}

fn build_split(rows: Vec<(Vec<f64>, usize, usize)>, indices: Vec<usize>, dim: usize) -> Result<Split> {
    let n = rows.len();
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut subgroups = Vec::with_capacity(n);
    for (v, l, s) in rows {
        x.extend(v);
        labels.push(l);
        subgroups.push(s);
    }
    Ok(Split {
        x: Tensor::new(vec![n, dim], x)?,
        labels,
        subgroups,
        indices,
    })
}

/// Generates every split of `spec` deterministically from its seed.
///
/// Source and target draw labels and clean inputs from the same process;
/// only the target passes through the shift. The target pool is shuffled
/// once and cut into disjoint train, validation and test ranges.
pub fn make_two_domain_dataset(spec: &SyntheticDomainSpec) -> Result<TwoDomainDataset> {
    spec.validate()?;
    let dim = spec.input_dim();
    let mut layout_rng = seeded_rng(spec.seed);
    let jitter = Normal::new(0.0, spec.center_jitter).map_err(|_| invalid("bad jitter"))?;
    let offset = layout_rng.random_range(0.0..core::f64::consts::TAU);
    let centers = (0..spec.classes)
        .map(|k| {
            let a = offset + core::f64::consts::TAU * k as f64 / spec.classes as f64;
            (0..dim)
                .map(|d| {
                    let base = match d {
                        0 => spec.separation * libm::cos(a),
                        1 => spec.separation * libm::sin(a),
                        _ => 0.0,
                    };
                    base + jitter.sample(&mut layout_rng)
                })
                .collect()
        })
        .collect();
    let mut permutation: Vec<usize> = (0..dim).collect();
    permutation.shuffle(&mut layout_rng);
    let gen = Generator { spec, centers, permutation };

    let mut floored = 0usize;
    let channels = spec.standardize_channels();
    let mut finish = |mut v: Vec<f64>| {
        if spec.standardize && standardize_example(&mut v, channels) {
            floored += 1;
        }
        v
    };

    let mut src_rng = seeded_rng(spec.seed.wrapping_add(1));
    let n_src = spec.source_train + spec.source_test;
    let mut source = Vec::with_capacity(n_src);
    for _ in 0..n_src {
        let label = src_rng.random_range(0..spec.classes);
        let v = gen.clean(label, &mut src_rng)?;
        source.push((finish(v), label, 0));
    }

    let mut tgt_rng = seeded_rng(spec.seed.wrapping_add(2));
    let n_tgt = spec.target_train + spec.target_val + spec.target_test;
    let mut target = Vec::with_capacity(n_tgt);
    for _ in 0..n_tgt {
        let label = tgt_rng.random_range(0..spec.classes);
        let subgroup = usize::from(tgt_rng.random_bool(spec.subgroup_fraction));
        let v = gen.clean(label, &mut tgt_rng)?;
        let v = gen.shift(v, subgroup)?;
        target.push((finish(v), label, subgroup));
    }
    let mut order: Vec<usize> = (0..n_tgt).collect();
    order.shuffle(&mut tgt_rng);

    let take = |pool: &[(Vec<f64>, usize, usize)], idx: &[usize]| -> Result<Split> {
        build_split(idx.iter().map(|&i| pool[i].clone()).collect(), idx.to_vec(), dim)
    };
    let src_idx: Vec<usize> = (0..n_src).collect();
    let (a, b) = (spec.target_train, spec.target_train + spec.target_val);
    let ds = TwoDomainDataset {
        source_train: take(&source, &src_idx[..spec.source_train])?,
        source_test: take(&source, &src_idx[spec.source_train..])?,
        target_train: take(&target, &order[..a])?,
        target_val: take(&target, &order[a..b])?,
        target_test: take(&target, &order[b..])?,
        classes: spec.classes,
        floored,
    };
    ds.check_disjoint()?;
    Ok(ds)
}

impl TwoDomainDataset {
    pub fn input_dim(&self) -> usize {
        self.source_train.x.shape()[1]
    }

    /// Fails if any target pool index appears in two target splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut all: Vec<usize> = self
            .target_train
            .indices
            .iter()
            .chain(&self.target_val.indices)
            .chain(&self.target_test.indices)
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::InvalidArgument("target splits overlap".into()));
        }
        Ok(())
    }

    /// Little-endian byte image: per split, row and column counts, values,
    /// labels and subgroups.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in [
            &self.source_train,
            &self.source_test,
            &self.target_train,
            &self.target_val,
            &self.target_test,
        ] {
            let shape = s.x.shape();
            out.extend((shape[0] as u64).to_le_bytes());
            out.extend((shape[1] as u64).to_le_bytes());
            for v in s.x.data() {
                out.extend(v.to_le_bytes());
            }
            for (&l, &g) in s.labels.iter().zip(&s.subgroups) {
                out.extend((l as u32).to_le_bytes());
                out.push(g as u8);
            }
        }
        out
    }

    /// 64-bit FNV-1a of [`to_bytes`](Self::to_bytes).
    pub fn checksum(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            source_train: 50,
            source_test: 20,
            target_train: 40,
            target_val: 30,
            target_test: 30,
            seed,
            ..SyntheticDomainSpec::default()
        }
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_std() {
        let ds = make_two_domain_dataset(&small(3)).unwrap();
        for row in ds.target_test.x.data().chunks(8) {
            let m = row.iter().sum::<f64>() / 8.0;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 7.0;
            assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_example_hits_floor() {
        let mut v = vec![2.0; 4];
        assert!(standardize_example(&mut v, 1));
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let ds = make_two_domain_dataset(&small(4)).unwrap();
        assert_eq!((ds.target_train.len(), ds.target_val.len(), ds.target_test.len()), (40, 30, 30));
        ds.check_disjoint().unwrap();
        let mut bad = ds.clone();
        bad.target_val.indices[0] = bad.target_test.indices[0];
        assert!(bad.check_disjoint().is_err());
    }

    #[test]
    fn zero_shift_gives_identically_distributed_domains() {
        let ds = make_two_domain_dataset(&small(5)).unwrap();
        assert!(SyntheticDomainSpec::default().shift.is_identity());
        assert_eq!(ds.source_train.x.shape()[1], ds.target_train.x.shape()[1]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = make_two_domain_dataset(&small(42)).unwrap();
        let b = make_two_domain_dataset(&small(42)).unwrap();
        let c = make_two_domain_dataset(&small(43)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn other_tasks_generate() {
        let moons = SyntheticDomainSpec {
            task: BaseTask::TwoMoons,
            classes: 2,
            ..small(1)
        };
        assert_eq!(make_two_domain_dataset(&moons).unwrap().input_dim(), 8);
        let glyphs = SyntheticDomainSpec {
            task: BaseTask::Glyphs,
            classes: 8,
            channels: 3,
            shift: DomainShift {
                rotation_degrees: 20.0,
                brightness_scale: 0.7,
                additive_offset: 0.2,
                additive_channel: 2,
                permute: true,
                ..DomainShift::default()
            },
            ..small(1)
        };
        assert_eq!(make_two_domain_dataset(&glyphs).unwrap().input_dim(), 768);
        let bad = SyntheticDomainSpec {
            task: BaseTask::TwoMoons,
            classes: 3,
            ..small(1)
        };
        assert!(make_two_domain_dataset(&bad).is_err());
    }
}
