//! Synthetic sphere dataset: pose sampling, analytic rendering of dense
//! coordinate maps, surface-region labels and map corruption.

use nalgebra::{Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{sample_rotation, BBox, CameraIntrinsics, Pose};

pub const IMAGE_WIDTH: usize = 640;
pub const IMAGE_HEIGHT: usize = 480;
pub const FOCAL_LENGTH: f64 = 800.0;
pub const MAP_SIZE: usize = 64;
pub const SPHERE_RADIUS: f64 = 1.0;
/// Tight 3D box of the sphere model.
pub const SPHERE_EXTENTS: [f64; 3] = [2.0, 2.0, 2.0];
/// Size of the canonical surface discretization shared by region sampling and metrics.
pub const SURFACE_POINTS: usize = 4096;
pub const DEFAULT_REGIONS: usize = 64;
pub const TRANSLATION_XY: (f64, f64) = (-2.0, 2.0);
pub const TRANSLATION_Z: (f64, f64) = (4.0, 8.0);
/// Upper end of the noise range used for training data.
pub const TRAIN_SIGMA_MAX: f64 = 0.03;
/// Upper end of the outlier range used for training data.
pub const TRAIN_OUTLIER_MAX: f64 = 0.3;

/// Virtual camera of the benchmark: focal 800, principal point at the image center.
pub fn benchmark_camera() -> CameraIntrinsics<f64> {
    CameraIntrinsics { fx: FOCAL_LENGTH, fy: FOCAL_LENGTH, cx: IMAGE_WIDTH as f64 / 2.0, cy: IMAGE_HEIGHT as f64 / 2.0 }
}

/// Per-pixel geometric maps of a square crop, stored row-major (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMaps {
    pub size: usize,
    /// Object coordinates normalized to `[0, 1]` by the tight box extents; 0 on background.
    pub coords3d: Vec<f32>,
    /// Full-image pixel location normalized by the image width and height.
    pub coords2d: Vec<f32>,
    pub mask: Vec<u8>,
    /// Surface region label, `1..=n` on the foreground, 0 on background.
    pub regions: Vec<u8>,
}

impl GeoMaps {
    pub fn empty(size: usize) -> Self {
        let n = size * size;
        Self { size, coords3d: vec![0.0; 3 * n], coords2d: vec![0.0; 2 * n], mask: vec![0; n], regions: vec![0; n] }
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn coord3d(&self, px: usize) -> [f32; 3] {
        [self.coords3d[3 * px], self.coords3d[3 * px + 1], self.coords3d[3 * px + 2]]
    }

    pub fn coord2d(&self, px: usize) -> [f32; 2] {
        [self.coords2d[2 * px], self.coords2d[2 * px + 1]]
    }

    /// Checks the map invariants: coordinates in range on the foreground,
    /// zero on the background, and labels present exactly on the foreground.
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.coords3d.len() != 3 * n
            || self.coords2d.len() != 2 * n
            || self.mask.len() != n
            || self.regions.len() != n
        {
            return Err(Error::ShapeMismatch("map buffers do not match the map size".into()));
        }
        for px in 0..n {
            let c = self.coord3d(px);
            let fg = self.mask[px] != 0;
            let ok = if fg { c.iter().all(|v| (0.0..=1.0).contains(v)) } else { c.iter().all(|&v| v == 0.0) };
            if !ok || fg != (self.regions[px] > 0) {
                return Err(Error::InvalidConfig(format!("map invariant violated at pixel {px}")));
            }
        }
        Ok(())
    }
}

/// One synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereSample {
    pub pose: Pose<f64>,
    pub k: CameraIntrinsics<f64>,
    /// Tight projected box of the sphere.
    pub bbox: BBox<f64>,
    /// Maps rendered over `bbox.zoomed()`.
    pub maps: GeoMaps,
    pub diameter: f64,
}

impl SphereSample {
    pub fn crop(&self) -> BBox<f64> {
        self.bbox.zoomed()
    }
}

/// Corruption applied to the object-coordinate channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub outlier_ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean(seed: u64) -> Self {
        Self { sigma: 0.0, outlier_ratio: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.outlier_ratio) {
            return Err(Error::InvalidConfig(format!(
                "noise spec out of range: sigma={}, outlier_ratio={}",
                self.sigma, self.outlier_ratio
            )));
        }
        if self.outlier_ratio > TRAIN_OUTLIER_MAX {
            log::warn!("outlier ratio {} is above the benchmark range", self.outlier_ratio);
        }
        Ok(())
    }
}

/// Deterministic RNG stream for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform rotation and a translation uniform in the benchmark box.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R) -> Pose<f64> {
    let rot = sample_rotation(rng);
    let t = Vector3::new(
        rng.random_range(TRANSLATION_XY.0..=TRANSLATION_XY.1),
        rng.random_range(TRANSLATION_XY.0..=TRANSLATION_XY.1),
        rng.random_range(TRANSLATION_Z.0..=TRANSLATION_Z.1),
    );
    Pose::new(rot, t)
}

/// Tight image box of a sphere, from the tangent planes of its silhouette cone.
pub fn sphere_bbox(center: &Vector3<f64>, radius: f64, k: &CameraIntrinsics<f64>) -> Result<BBox<f64>> {
    let cz = center.z;
    if !(cz > radius) {
        return Err(Error::DegenerateInput("sphere is not fully in front of the camera".into()));
    }
    let extent = |c: f64| {
        let den = cz * cz - radius * radius;
        let root = radius * (c * c + cz * cz - radius * radius).sqrt();
        ((c * cz - root) / den, (c * cz + root) / den)
    };
    let (x0, x1) = extent(center.x);
    let (y0, y1) = extent(center.y);
    let (u0, u1) = (k.fx * x0 + k.cx, k.fx * x1 + k.cx);
    let (v0, v1) = (k.fy * y0 + k.cy, k.fy * y1 + k.cy);
    BBox::new((u0 + u1) / 2.0, (v0 + v1) / 2.0, u1 - u0, v1 - v0)
}

/// Nearest intersection of the ray `s·d` (s > 0) with a sphere, as the ray parameter.
fn ray_sphere(d: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let a = d.norm_squared();
    let b = d.dot(center);
    let c = center.norm_squared() - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let s = (b - disc.sqrt()) / a;
    (s > 0.0).then_some(s)
}

/// Image location of the center of map pixel `(row, col)`.
pub fn pixel_location(crop: &BBox<f64>, size: usize, row: usize, col: usize) -> Vector2<f64> {
    let n = size as f64;
    Vector2::new(crop.cx + ((col as f64 + 0.5) / n - 0.5) * crop.w, crop.cy + ((row as f64 + 0.5) / n - 0.5) * crop.h)
}

/// Ray-casts the sphere model through every pixel of `crop`, resampled to `out_size²`.
///
/// Region labels are left at 1 on the foreground; see [`label_regions`].
pub fn render_sphere_maps(
    pose: &Pose<f64>,
    k: &CameraIntrinsics<f64>,
    crop: &BBox<f64>,
    out_size: usize,
) -> Result<GeoMaps> {
    if !(pose.t.z > SPHERE_RADIUS) {
        return Err(Error::DegenerateInput("sphere is not fully in front of the camera".into()));
    }
    let inv = pose.inverse();
    let mut maps = GeoMaps::empty(out_size);
    let (iw, ih) = (IMAGE_WIDTH as f64, IMAGE_HEIGHT as f64);
    for row in 0..out_size {
        for col in 0..out_size {
            let px = row * out_size + col;
            let uv = pixel_location(crop, out_size, row, col);
            maps.coords2d[2 * px] = (uv.x / iw) as f32;
            maps.coords2d[2 * px + 1] = (uv.y / ih) as f32;
            let d = k.unproject(&uv);
            if let Some(s) = ray_sphere(&d, &pose.t, SPHERE_RADIUS) {
                let obj = inv.apply(&(d * s));
                for a in 0..3 {
                    let l = SPHERE_EXTENTS[a];
                    maps.coords3d[3 * px + a] = ((obj[a] + l / 2.0) / l).clamp(0.0, 1.0) as f32;
                }
                maps.mask[px] = 1;
                maps.regions[px] = 1;
            }
        }
    }
    if maps.foreground() == 0 {
        return Err(Error::EmptyMask("no pixel of the crop sees the sphere".into()));
    }
    Ok(maps)
}

/// Quasi-uniform points on the unit sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Canonical model points of the sphere, shared by region sampling and metrics.
pub fn sphere_model_points() -> Vec<Vector3<f64>> {
    fibonacci_sphere(SURFACE_POINTS).into_iter().map(|p| p * SPHERE_RADIUS).collect()
}

/// Greedy farthest point sampling starting from `first`; ties go to the lowest index.
pub fn farthest_point_sampling(points: &[Vector3<f64>], n: usize, first: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(n.min(points.len()));
    if points.is_empty() || n == 0 {
        return picked;
    }
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut current = first;
    loop {
        picked.push(current);
        if picked.len() == n.min(points.len()) {
            break;
        }
        let p = points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, q) in points.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best.0 {
                best = (min_dist[i], i);
            }
        }
        current = best.1;
    }
    picked
}

/// Region centers on the sphere surface; the first center is chosen by `seed`.
pub fn fps_regions(n_regions: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if n_regions == 0 || n_regions > u8::MAX as usize {
        return Err(Error::InvalidConfig(format!("n_regions must be in 1..=255, got {n_regions}")));
    }
    let points = sphere_model_points();
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len());
    Ok(farthest_point_sampling(&points, n_regions, first).into_iter().map(|i| points[i]).collect())
}

/// Region centers shared by every split and command for a given region count.
pub fn region_centers(n_regions: usize) -> Result<Vec<Vector3<f64>>> {
    fps_regions(n_regions, 0)
}

/// Denormalized object point of a foreground pixel.
pub fn object_point(maps: &GeoMaps, px: usize) -> Vector3<f64> {
    let c = maps.coord3d(px);
    Vector3::from_fn(|a, _| c[a] as f64 * SPHERE_EXTENTS[a] - SPHERE_EXTENTS[a] / 2.0)
}

/// Labels every foreground pixel with its nearest region center (1-based).
pub fn label_regions(maps: &mut GeoMaps, centers: &[Vector3<f64>]) {
    for px in 0..maps.pixels() {
        if maps.mask[px] == 0 {
            maps.regions[px] = 0;
            continue;
        }
        let p = object_point(maps, px);
        let mut best = (f64::INFINITY, 0usize);
        for (i, c) in centers.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        maps.regions[px] = (best.1 + 1) as u8;
    }
}

/// Adds Gaussian noise to the foreground object coordinates, then replaces a
/// fraction of foreground pixels with uniform outliers, then clamps to `[0, 1]`.
pub fn corrupt_maps(maps: &GeoMaps, spec: &NoiseSpec) -> Result<GeoMaps> {
    spec.validate()?;
    let mut out = maps.clone();
    if spec.sigma == 0.0 && spec.outlier_ratio == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fg: Vec<usize> = (0..maps.pixels()).filter(|&px| maps.mask[px] != 0).collect();
    if spec.sigma > 0.0 {
        let normal = Normal::new(0.0, spec.sigma).expect("sigma is finite and non-negative");
        for &px in &fg {
            for a in 0..3 {
                out.coords3d[3 * px + a] += normal.sample(&mut rng) as f32;
            }
        }
    }
    let n_out = (spec.outlier_ratio * fg.len() as f64).floor() as usize;
    if n_out > 0 {
        for i in index::sample(&mut rng, fg.len(), n_out) {
            let px = fg[i];
            for a in 0..3 {
                out.coords3d[3 * px + a] = rng.random::<f32>();
            }
        }
    }
    for &px in &fg {
        for a in 0..3 {
            let v = &mut out.coords3d[3 * px + a];
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Parameters of a generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n: usize,
    pub seed: u64,
    pub n_regions: usize,
    /// Per-sample noise level is drawn from `U[0, sigma_max]`.
    pub sigma_max: f64,
    /// Per-sample outlier ratio is drawn from `U[0, outlier_max]`.
    pub outlier_max: f64,
}

impl DatasetSpec {
    pub fn train(n: usize, seed: u64) -> Self {
        Self { n, seed, n_regions: DEFAULT_REGIONS, sigma_max: TRAIN_SIGMA_MAX, outlier_max: TRAIN_OUTLIER_MAX }
    }

    pub fn test(n: usize, seed: u64) -> Self {
        Self { n, seed, n_regions: DEFAULT_REGIONS, sigma_max: 0.0, outlier_max: 0.0 }
    }
}

/// Generates sample `index` of a split; independent of every other sample.
pub fn generate_sample(spec: &DatasetSpec, centers: &[Vector3<f64>], index: u64) -> Result<SphereSample> {
    let mut rng = stream_rng(spec.seed, index);
    let k = benchmark_camera();
    let pose = sample_pose(&mut rng);
    let bbox = sphere_bbox(&pose.t, SPHERE_RADIUS, &k)?;
    let mut maps = render_sphere_maps(&pose, &k, &bbox.zoomed(), MAP_SIZE)?;
    label_regions(&mut maps, centers);
    let sigma = rng.random::<f64>() * spec.sigma_max;
    let outlier_ratio = rng.random::<f64>() * spec.outlier_max;
    let noise = NoiseSpec { sigma, outlier_ratio, seed: rng.next_u64() };
    let maps = corrupt_maps(&maps, &noise)?;
    Ok(SphereSample { pose, k, bbox, maps, diameter: 2.0 * SPHERE_RADIUS })
}

/// Generates a whole split. Samples draw from independent streams, so the
/// result does not depend on the worker count. Region labels use
/// [`region_centers`], so splits with different seeds share one partition.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SphereSample>> {
    if spec.n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    let centers = region_centers(spec.n_regions)?;
    (0..spec.n as u64).into_par_iter().map(|i| generate_sample(spec, &centers, i)).collect()
}
