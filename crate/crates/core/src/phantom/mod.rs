//! Procedural phantoms with analytic ground truth.
//!
//! Four geometries cover the behaviours the benchmark probes: a smooth
//! drifting ellipsoid, a trunk that splits into two branches, a cylinder whose
//! label stops at a cap while its intensity fades out gradually, and a tube
//! whose slices are all identical.

mod io;
mod suite;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::volume::{Dims, MaskVolume, Volume3D};

pub use io::{read_mask, read_volume, write_mask, write_volume, VOLUME_MAGIC};
pub use suite::{generate_suite, load_manifest, Manifest, PhantomEntry, Split, MANIFEST_FILE};

/// Minimum distance in voxels between the geometry and the grid border.
pub const MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Ellipsoid,
    BranchingY,
    CappedCylinder,
    ConstantTube,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 4] =
        [PhantomKind::Ellipsoid, PhantomKind::BranchingY, PhantomKind::CappedCylinder, PhantomKind::ConstantTube];

    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Ellipsoid => "ellipsoid",
            PhantomKind::BranchingY => "branching_y",
            PhantomKind::CappedCylinder => "capped_cylinder",
            PhantomKind::ConstantTube => "constant_tube",
        }
    }
}

/// Full description of one phantom. Generation is a pure function of this
/// value. Lengths are in voxels; `center` is `(x, y)` at `center_z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: Dims,
    pub spacing_mm: [f32; 3],
    pub center: [f32; 2],
    pub center_z: f32,
    /// In-plane displacement of the centre per slice.
    pub drift: [f32; 2],
    /// Sinusoidal in-plane sway of the centre: amplitude in voxels along x
    /// and y, then the period in slices (0 disables it).
    #[serde(default)]
    pub sway: [f32; 3],
    /// In-plane radius (x semi-axis for the ellipsoid, trunk radius otherwise).
    pub radius: f32,
    /// Ellipsoid y semi-axis.
    pub radius_y: f32,
    /// Ellipsoid z semi-axis.
    pub radius_z: f32,
    /// Extra radius at the middle of the trunk, tapering to zero at its ends.
    pub bulge: f32,
    pub branch_radius: f32,
    /// Half the distance between branch centres at the split slice.
    pub branch_offset: f32,
    /// Per-slice increase of the half distance between branches.
    pub branch_spread: f32,
    /// First slice containing two branches.
    pub split_depth: usize,
    /// First slice beyond the capped cylinder's label.
    pub cap_depth: usize,
    /// Number of slices over which the intensity fades out past the cap.
    pub fade_slices: usize,
    pub fg: f32,
    pub bg: f32,
    pub noise_std: f32,
    pub texture_amplitude: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Default geometry for `kind`, scaled to `dims`.
    pub fn new(kind: PhantomKind, dims: Dims, seed: u64) -> Self {
        let d = dims.depth as f32;
        let r = dims.height.min(dims.width) as f32 / 5.5;
        let mut spec = PhantomSpec {
            kind,
            dims,
            spacing_mm: [1.0; 3],
            center: [(dims.width as f32 - 1.0) / 2.0, (dims.height as f32 - 1.0) / 2.0],
            center_z: (d / 2.0).floor(),
            drift: [0.0; 2],
            sway: [0.0; 3],
            radius: r,
            radius_y: r,
            radius_z: r,
            bulge: 0.0,
            branch_radius: r * 0.6,
            branch_offset: r * 0.6 + 1.0,
            branch_spread: 0.3,
            split_depth: dims.depth / 2,
            cap_depth: (dims.depth * 5).div_ceil(8),
            fade_slices: 6,
            fg: 0.75,
            bg: 0.25,
            noise_std: 0.005,
            texture_amplitude: 0.05,
            seed,
        };
        match kind {
            PhantomKind::Ellipsoid => {
                spec.radius = r * 1.5;
                spec.radius_y = r * 1.15;
                spec.radius_z = (d / 2.0 - MARGIN as f32 - 1.5).max(1.0);
                spec.drift = [0.25, 0.1];
                spec.sway = [1.5, 1.0, 12.0];
            }
            PhantomKind::BranchingY => {
                spec.bulge = r * 0.25;
                spec.drift = [0.0, 0.15];
                spec.sway = [1.0, 1.5, 12.0];
            }
            PhantomKind::CappedCylinder => {
                spec.bulge = r * 0.2;
                spec.drift = [0.15, 0.1];
                spec.sway = [1.5, 1.0, 12.0];
            }
            PhantomKind::ConstantTube => {
                spec.noise_std = 0.0;
            }
        }
        spec
    }

    fn centre_at(&self, z: f32) -> (f32, f32) {
        let dz = z - self.center_z;
        let s = if self.sway[2] > 0.0 { (std::f32::consts::TAU * dz / self.sway[2]).sin() } else { 0.0 };
        (self.center[0] + self.drift[0] * dz + self.sway[0] * s, self.center[1] + self.drift[1] * dz + self.sway[1] * s)
    }

    /// Slices `[start, end)` spanned by the trunk of the branching and capped
    /// geometries.
    fn trunk_range(&self) -> (usize, usize) {
        let end = match self.kind {
            PhantomKind::BranchingY => self.split_depth,
            _ => self.cap_depth,
        };
        (MARGIN, end)
    }

    fn trunk_radius(&self, z: usize) -> f32 {
        let (a, b) = self.trunk_range();
        let t = (z as f32 - a as f32 + 0.5) / (b - a).max(1) as f32;
        self.radius + self.bulge * (std::f32::consts::PI * t.clamp(0.0, 1.0)).sin()
    }

    fn branch_half_distance(&self, z: usize) -> f32 {
        self.branch_offset + self.branch_spread * (z.saturating_sub(self.split_depth)) as f32
    }

    /// Analytic label at voxel centre `(x, y, z)`.
    pub fn inside(&self, x: usize, y: usize, z: usize) -> bool {
        let (px, py) = (x as f32, y as f32);
        let (cx, cy) = self.centre_at(z as f32);
        let disk = |cx: f32, cy: f32, r: f32| (px - cx).powi(2) + (py - cy).powi(2) <= r * r;
        match self.kind {
            PhantomKind::Ellipsoid => {
                let u = (px - cx) / self.radius;
                let v = (py - cy) / self.radius_y;
                let w = (z as f32 - self.center_z) / self.radius_z;
                u * u + v * v + w * w <= 1.0
            }
            PhantomKind::BranchingY => {
                let last = self.dims.depth - MARGIN;
                if z < MARGIN || z >= last {
                    false
                } else if z < self.split_depth {
                    disk(cx, cy, self.trunk_radius(z))
                } else {
                    let s = self.branch_half_distance(z);
                    disk(cx - s, cy, self.branch_radius) || disk(cx + s, cy, self.branch_radius)
                }
            }
            PhantomKind::CappedCylinder => (MARGIN..self.cap_depth).contains(&z) && disk(cx, cy, self.trunk_radius(z)),
            PhantomKind::ConstantTube => disk(self.center[0], self.center[1], self.radius),
        }
    }

    /// Intensity occupancy in `[0, 1]`: the label, except past the cylinder
    /// cap where the cross-section continues with smoothly decaying contrast.
    fn occupancy(&self, x: usize, y: usize, z: usize) -> f32 {
        if self.inside(x, y, z) {
            return 1.0;
        }
        if self.kind != PhantomKind::CappedCylinder || z < self.cap_depth || self.fade_slices == 0 {
            return 0.0;
        }
        let k = (z - self.cap_depth + 1) as f32 / (self.fade_slices + 1) as f32;
        if k >= 1.0 {
            return 0.0;
        }
        let last = self.cap_depth - 1;
        let (cx, cy) = self.centre_at(z as f32);
        let r = self.trunk_radius(last);
        if (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2) <= r * r {
            0.5 * (1.0 + (std::f32::consts::PI * k).cos())
        } else {
            0.0
        }
    }

    /// Checks segmentability and the border margin.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let Dims { height, width, depth } = self.dims;
        if height < 2 * MARGIN + 3 || width < 2 * MARGIN + 3 || depth < 3 {
            return bad(format!("dims {:?} too small", self.dims));
        }
        if !(self.fg - self.bg).abs().gt(&(2.0 * self.noise_std)) {
            return bad(format!("contrast {} must exceed twice noise std {}", (self.fg - self.bg).abs(), self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.fg) || !(0.0..=1.0).contains(&self.bg) || self.noise_std < 0.0 {
            return bad("intensities must lie in [0, 1] and noise must be nonnegative".into());
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return bad("spacing must be positive".into());
        }
        match self.kind {
            PhantomKind::BranchingY if !(MARGIN + 1 < self.split_depth && self.split_depth + 1 < depth - MARGIN) => {
                return bad(format!("split depth {} leaves no trunk or branches", self.split_depth));
            }
            PhantomKind::BranchingY if self.branch_offset <= self.branch_radius + 0.5 => {
                return bad("branches overlap at the split".into());
            }
            PhantomKind::CappedCylinder if !(MARGIN + 1 < self.cap_depth && self.cap_depth < depth - MARGIN) => {
                return bad(format!("cap depth {} must leave slices beyond the cap", self.cap_depth));
            }
            _ => {}
        }
        // The tube deliberately spans every slice, so only its in-plane extent is checked.
        let z_margin = if self.kind == PhantomKind::ConstantTube { 0 } else { MARGIN };
        let mut any = false;
        for z in 0..depth {
            for y in 0..height {
                for x in 0..width {
                    if self.inside(x, y, z) || self.occupancy(x, y, z) > 0.0 {
                        any = true;
                        let near = |v: usize, n: usize, m: usize| v < m || v + m >= n;
                        if near(x, width, MARGIN) || near(y, height, MARGIN) || near(z, depth, z_margin) {
                            return bad(format!("{} geometry reaches voxel ({x}, {y}, {z}) inside the margin", self.kind.name()));
                        }
                    }
                }
            }
        }
        if !any {
            return bad("geometry is empty".into());
        }
        Ok(())
    }
}

/// Sum of three low-frequency sinusoids with random orientation and phase,
/// scaled so the texture spans at most `±amplitude`.
fn texture(spec: &PhantomSpec, rng: &mut Stream) -> impl Fn(usize, usize, usize) -> f32 {
    let in_plane = spec.dims.height.min(spec.dims.width) as f32;
    let waves: Vec<[f32; 4]> = (0..3)
        .map(|_| {
            let period = rng.random_range(0.3..0.6) * in_plane;
            let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let k = std::f32::consts::TAU / period;
            let kz = if spec.kind == PhantomKind::ConstantTube { 0.0 } else { rng.random_range(-0.15..0.15) };
            [k * angle.cos(), k * angle.sin(), kz, rng.random_range(0.0..std::f32::consts::TAU)]
        })
        .collect();
    let amp = spec.texture_amplitude / 3.0;
    move |x, y, z| waves.iter().map(|w| amp * (w[0] * x as f32 + w[1] * y as f32 + w[2] * z as f32 + w[3]).sin()).sum()
}

/// Renders the phantom volume and its ground-truth label.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume3D, MaskVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = Stream::derive(spec.seed, "phantom-texture", 0);
    let tex = texture(spec, &mut rng);
    let mut noise_rng = Stream::derive(spec.seed, "phantom-noise", 0);
    let noise = Normal::new(0.0f32, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut vol = Vec::with_capacity(dims.len());
    let mut mask = Vec::with_capacity(dims.len());
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let occ = spec.occupancy(x, y, z);
                let n = if spec.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                let v = spec.bg + (spec.fg - spec.bg) * occ + tex(x, y, z) + n;
                vol.push(v.clamp(0.0, 1.0));
                mask.push(u8::from(spec.inside(x, y, z)));
            }
        }
    }
    Ok((Volume3D::new(dims, spec.spacing_mm, vol)?, MaskVolume::new(dims, spec.spacing_mm, mask)?))
}

/// Randomized variant of the default geometry used by the phantom suite.
pub fn jittered_spec(kind: PhantomKind, dims: Dims, seed: u64) -> PhantomSpec {
    let mut rng = Stream::derive(seed, "phantom-spec", 0);
    let mut spec = PhantomSpec::new(kind, dims, seed);
    let jitter = |rng: &mut Stream, v: f32, rel: f32| v * rng.random_range(1.0 - rel..1.0 + rel);
    spec.radius = jitter(&mut rng, spec.radius, 0.12);
    spec.radius_y = jitter(&mut rng, spec.radius_y, 0.12);
    spec.branch_radius = jitter(&mut rng, spec.branch_radius, 0.1);
    spec.branch_offset = spec.branch_offset.max(spec.branch_radius + 1.0);
    spec.fg = jitter(&mut rng, spec.fg, 0.05);
    spec.bg = jitter(&mut rng, spec.bg, 0.1);
    if kind != PhantomKind::ConstantTube {
        spec.drift[0] += rng.random_range(-0.15..0.15);
        spec.drift[1] += rng.random_range(-0.15..0.15);
    }
    spec.center[0] += rng.random_range(-1.5..1.5);
    spec.center[1] += rng.random_range(-1.5..1.5);
    if kind != PhantomKind::ConstantTube {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        spec.sway[0] = sign * jitter(&mut rng, spec.sway[0], 0.3);
        spec.sway[1] = sign * jitter(&mut rng, spec.sway[1], 0.3);
        spec.sway[2] = jitter(&mut rng, spec.sway[2], 0.2);
    }
    let shift: i64 = rng.random_range(-1..=1);
    spec.split_depth = (spec.split_depth as i64 + shift) as usize;
    spec.cap_depth = (spec.cap_depth as i64 + shift) as usize;
    // Pull the centre path back toward the axis until the margin holds.
    for _ in 0..20 {
        if spec.validate().is_ok() {
            break;
        }
        spec.drift = spec.drift.map(|v| v * 0.8);
        spec.sway[0] *= 0.8;
        spec.sway[1] *= 0.8;
        spec.center[0] += ((dims.width as f32 - 1.0) / 2.0 - spec.center[0]) * 0.2;
        spec.center[1] += ((dims.height as f32 - 1.0) / 2.0 - spec.center[1]) * 0.2;
    }
    spec
}
