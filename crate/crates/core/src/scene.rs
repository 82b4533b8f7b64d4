//! Cameras, images, the analytic blob scene, datasets on disk and image
//! metrics.
//!
//! The synthetic scene is a sum of isotropic Gaussian density blobs whose
//! centers follow quadratic paths in time. Its ground-truth frames come from
//! dense quadrature through the same compositing code the learned model uses.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{FieldScratch, RadianceField, SH_COEFFS};
use crate::numerics::Real;
use crate::renderer::{generate_rays, march_uniform, render_ray, SceneBox};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const PSNR_CAP: f64 = 99.0;

/// Pinhole camera, OpenCV axes (x right, y down, z forward), camera-to-world
/// pose as a row-major 4x4 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub view: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub c2w: [[f64; 4]; 4],
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

impl Camera {
    /// Camera at `eye` looking at `target`; principal point at the image center.
    pub fn look_at(
        view: usize,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: u32,
        height: u32,
        focal: f64,
    ) -> Result<Self> {
        let f = normalize3([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]])
            .ok_or_else(|| Error::config("camera eye and target coincide"))?;
        let down0 = [-up[0], -up[1], -up[2]];
        let r = normalize3(cross(down0, f))
            .ok_or_else(|| Error::config("camera up vector is parallel to the view axis"))?;
        let d = cross(f, r);
        let mut c2w = [[0.0; 4]; 4];
        for i in 0..3 {
            c2w[i] = [r[i], d[i], f[i], eye[i]];
        }
        c2w[3] = [0.0, 0.0, 0.0, 1.0];
        let cam = Self {
            view,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            c2w,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.c2w;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    pub fn forward(&self) -> [f64; 3] {
        [self.c2w[0][2], self.c2w[1][2], self.c2w[2][2]]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::config(format!(
                "camera {} has invalid intrinsics",
                self.view
            )));
        }
        let r = self.rotation();
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if det.abs() < 1e-9 {
            return Err(Error::config(format!(
                "camera {} has a degenerate rotation",
                self.view
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::config(format!(
                        "camera {} rotation is not orthonormal",
                        self.view
                    )));
                }
            }
        }
        Ok(())
    }

    /// Origin and unit direction through image-plane position `(px, py)`.
    pub fn pixel_ray(&self, px: f64, py: f64) -> ([f64; 3], [f64; 3]) {
        let dc = [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0];
        let r = self.rotation();
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = r[i][0] * dc[0] + r[i][1] * dc[1] + r[i][2] * dc[2];
        }
        (self.center(), normalize3(d).unwrap_or([0.0, 0.0, 1.0]))
    }
}

/// Interleaved RGB image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width as usize * height as usize {
            return Err(Error::contract(format!(
                "image {width}x{height} needs {} values, got {}",
                3 * width as usize * height as usize,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let data = (0..width as usize * height as usize)
            .flat_map(|_| rgb)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, u: u32, v: u32) -> [f32; 3] {
        let i = 3 * (v as usize * self.width as usize + u as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let mut m = [0.0f64; 3];
        for p in self.data.chunks(3) {
            for k in 0..3 {
                m[k] += p[k] as f64;
            }
        }
        let n = self.pixel_count().max(1) as f64;
        [(m[0] / n) as f32, (m[1] / n) as f32, (m[2] / n) as f32]
    }

    /// 8-bit quantization used for PNG storage.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .to_rgb8()
                .into_iter()
                .map(|b| b as f32 / 255.0)
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(
            w,
            h,
            img.into_raw()
                .into_iter()
                .map(|b| b as f32 / 255.0)
                .collect(),
        )
    }
}

/// Gaussian density blob with center `c0 + c1 t + c2 t^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub path: [[f64; 3]; 3],
    pub radius: f64,
    pub peak: f64,
    pub albedo: [f64; 3],
}

impl Blob {
    pub fn fixed(center: [f64; 3], radius: f64, peak: f64, albedo: [f64; 3]) -> Self {
        Self {
            path: [center, [0.0; 3], [0.0; 3]],
            radius,
            peak,
            albedo,
        }
    }

    pub fn center(&self, t: f64) -> [f64; 3] {
        let p = &self.path;
        [
            p[0][0] + p[1][0] * t + p[2][0] * t * t,
            p[0][1] + p[1][1] * t + p[2][1] * t * t,
            p[0][2] + p[1][2] * t + p[2][2] * t * t,
        ]
    }

    pub fn density(&self, x: [f64; 3], t: f64) -> f64 {
        let c = self.center(t);
        let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2);
        self.peak * (-r2 / (2.0 * self.radius * self.radius)).exp()
    }

    pub fn is_moving(&self) -> bool {
        self.path[1] != [0.0; 3] || self.path[2] != [0.0; 3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub dynamic: Vec<Blob>,
    #[serde(rename = "static")]
    pub static_blobs: Vec<Blob>,
    pub bounds: SceneBox,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    /// Two moving and two static blobs inside the unit box.
    fn default() -> Self {
        Self {
            dynamic: vec![
                Blob {
                    path: [[-0.45, 0.15, 0.0], [0.9, 0.0, 0.0], [0.0; 3]],
                    radius: 0.2,
                    peak: 30.0,
                    albedo: [0.95, 0.25, 0.2],
                },
                Blob {
                    path: [[0.1, -0.35, -0.3], [0.0, 0.9, 0.2], [0.0, -0.3, 0.0]],
                    radius: 0.18,
                    peak: 30.0,
                    albedo: [0.2, 0.9, 0.35],
                },
            ],
            static_blobs: vec![
                Blob::fixed([0.3, 0.3, 0.35], 0.25, 20.0, [0.25, 0.35, 0.95]),
                Blob::fixed([-0.3, -0.3, 0.3], 0.25, 20.0, [0.9, 0.85, 0.3]),
            ],
            bounds: SceneBox::default(),
            seed: 0,
        }
    }
}

impl SynthSceneSpec {
    pub fn blobs(&self) -> impl Iterator<Item = &Blob> {
        self.dynamic.iter().chain(&self.static_blobs)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blobs().enumerate() {
            if !(b.peak >= 0.0) || !(b.radius > 0.0) {
                return Err(Error::config(format!(
                    "blob {i} needs peak >= 0 and radius > 0"
                )));
            }
            if b.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::config(format!("blob {i} albedo outside [0,1]")));
            }
            for s in 0..=32 {
                let c = b.center(s as f64 / 32.0);
                for k in 0..3 {
                    if c[k] < self.bounds.min[k] || c[k] > self.bounds.max[k] {
                        return Err(Error::config(format!(
                            "blob {i} path leaves the scene bounds"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Analytic density and density-weighted albedo at world point `x`, time `t`.
pub fn oracle_field(spec: &SynthSceneSpec, x: [f64; 3], t: f64) -> (f64, [f64; 3]) {
    let mut sigma = 0.0;
    let mut c = [0.0; 3];
    for b in spec.blobs() {
        let s = b.density(x, t);
        sigma += s;
        for k in 0..3 {
            c[k] += s * b.albedo[k];
        }
    }
    if sigma > 0.0 {
        for v in &mut c {
            *v /= sigma;
        }
    }
    (sigma, c)
}

/// The analytic scene as a [`RadianceField`] over normalized coordinates;
/// `t = None` reads the scene at time 0.
#[derive(Debug, Clone)]
pub struct OracleField<'a> {
    pub spec: &'a SynthSceneSpec,
}

impl<R: Real> RadianceField<R> for OracleField<'_> {
    fn sample(
        &self,
        x: [R; 3],
        t: Option<R>,
        _: &[R; SH_COEFFS],
        _: &mut FieldScratch<R>,
    ) -> Result<(R, [R; 3])> {
        let p = self
            .spec
            .bounds
            .denormalize([x[0].as_f64(), x[1].as_f64(), x[2].as_f64()]);
        let (s, c) = oracle_field(self.spec, p, t.map_or(0.0, |v| v.as_f64()));
        Ok((R::of(s), [R::of(c[0]), R::of(c[1]), R::of(c[2])]))
    }
}

/// Dense-quadrature render of the analytic scene on black, `substeps`
/// uniform samples per ray.
pub fn oracle_render(
    spec: &SynthSceneSpec,
    camera: &Camera,
    t: f64,
    substeps: usize,
) -> Result<Image> {
    if substeps < 512 {
        return Err(Error::config(format!(
            "oracle needs at least 512 substeps, got {substeps}"
        )));
    }
    camera.validate()?;
    let field = OracleField { spec };
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Result<Vec<f32>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let pixels: Vec<(u32, u32)> = (0..w).map(|u| (u, v)).collect();
            let mut scratch = FieldScratch::<f64>::default();
            let mut row = Vec::with_capacity(3 * w as usize);
            for ray in generate_rays(camera, &pixels, &spec.bounds)? {
                let o = render_ray(
                    &field,
                    &ray,
                    Some(t),
                    &spec.bounds,
                    &march_uniform(&ray, substeps),
                    false,
                    &mut scratch,
                )?;
                row.extend(o.color.iter().map(|c| c.clamp(0.0, 1.0) as f32));
            }
            Ok(row)
        })
        .collect();
    let mut data = Vec::with_capacity(3 * (w * h) as usize);
    for r in rows {
        data.extend(r?);
    }
    Image::new(w, h, data)
}

/// Max per-pixel change between `substeps` and `2*substeps`; errors when the
/// quadrature has not converged to below one 8-bit level.
pub fn oracle_convergence(
    spec: &SynthSceneSpec,
    camera: &Camera,
    t: f64,
    substeps: usize,
) -> Result<f64> {
    let a = oracle_render(spec, camera, t, substeps)?;
    let b = oracle_render(spec, camera, t, 2 * substeps)?;
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max);
    if diff >= 1.0 / 255.0 {
        return Err(Error::config(format!(
            "scene spec does not converge at {substeps} substeps (max change {diff:.2e})"
        )));
    }
    Ok(diff)
}

/// Two-row arc of cameras facing the origin. View 0 sits at the center of
/// the upper row and is the held-out view.
pub fn arc_cameras(n_views: usize, width: u32, height: u32, radius: f64) -> Result<Vec<Camera>> {
    if n_views < 2 {
        return Err(Error::config("need at least two views"));
    }
    let upper_elev = 18f64.to_radians();
    let lower_elev = (-6f64).to_radians();
    let span = 60f64.to_radians();
    let focal = 0.5 * width as f64 / (1.25 / radius).atan().tan() * 0.95;
    let rest = n_views - 1;
    let n_upper = rest / 2;
    let n_lower = rest - n_upper;
    let mut poses = vec![(0.0, upper_elev)];
    let pairs = n_upper.div_ceil(2).max(1);
    for i in 0..n_upper {
        let mag = span * ((i / 2) + 1) as f64 / pairs as f64;
        poses.push((if i % 2 == 0 { mag } else { -mag }, upper_elev));
    }
    for i in 0..n_lower {
        poses.push((
            -span + 2.0 * span * (i as f64 + 0.5) / n_lower as f64,
            lower_elev,
        ));
    }
    poses
        .into_iter()
        .enumerate()
        .map(|(view, (az, el)): (usize, (f64, f64))| {
            // y is down in the world as well, so "up" is -y.
            let eye = [
                radius * el.cos() * az.sin(),
                -radius * el.sin(),
                -radius * el.cos() * az.cos(),
            ];
            Camera::look_at(view, eye, [0.0; 3], [0.0, -1.0, 0.0], width, height, focal)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub view: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4x4 camera-to-world.
    pub c2w: Vec<f64>,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        Self {
            view: c.view,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            c2w: c.c2w.iter().flatten().copied().collect(),
        }
    }
}

impl CameraRecord {
    fn to_camera(&self) -> Result<Camera> {
        if self.c2w.len() != 16 {
            return Err(Error::config(format!(
                "camera {} pose needs 16 values",
                self.view
            )));
        }
        let mut c2w = [[0.0; 4]; 4];
        for i in 0..4 {
            c2w[i].copy_from_slice(&self.c2w[4 * i..4 * i + 4]);
        }
        let cam = Camera {
            view: self.view,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            c2w,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_views: usize,
    pub n_frames: usize,
    pub width: u32,
    pub height: u32,
    pub held_out_view: usize,
    pub fps: f64,
    /// Scene box used to normalize coordinates.
    pub bounds: SceneBox,
    /// `{view}` and `{frame}` are substituted; frames are zero-padded to 4.
    pub frame_pattern: String,
    pub cameras: Vec<CameraRecord>,
    pub seed: u64,
    pub quantization: String,
    /// SHA-256 of every frame file, keyed by relative path.
    pub hashes: BTreeMap<String, String>,
    pub synth_spec: Option<SynthSceneSpec>,
}

pub const FRAME_PATTERN: &str = "frames/{view}/{frame}.png";

pub fn frame_rel_path(view: usize, frame: usize) -> String {
    FRAME_PATTERN
        .replace("{view}", &view.to_string())
        .replace("{frame}", &format!("{frame:04}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub n_views: usize,
    pub n_frames: usize,
    pub width: u32,
    pub height: u32,
    pub substeps: usize,
    pub fps: f64,
    pub camera_radius: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n_views: 8,
            n_frames: 60,
            width: 64,
            height: 64,
            substeps: 512,
            fps: 30.0,
            camera_radius: 3.2,
        }
    }
}

/// Normalized global time of a frame (`0` for the first, `1` for the last).
pub fn frame_time(frame: usize, n_frames: usize) -> f64 {
    if n_frames <= 1 {
        0.0
    } else {
        frame as f64 / (n_frames - 1) as f64
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders every view and frame of `spec` into `dir` and writes the manifest.
pub fn generate_dataset(
    spec: &SynthSceneSpec,
    opts: &GenerateOptions,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if opts.n_frames == 0 {
        return Err(Error::config("need at least one frame"));
    }
    let cameras = arc_cameras(opts.n_views, opts.width, opts.height, opts.camera_radius)?;
    let mut hashes = BTreeMap::new();
    for f in 0..opts.n_frames {
        let t = frame_time(f, opts.n_frames);
        for cam in &cameras {
            let img = oracle_render(spec, cam, t, opts.substeps)?;
            let rel = frame_rel_path(cam.view, f);
            let path = dir.join(&rel);
            img.save_png(&path)?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hashes.insert(rel, sha256_hex(&bytes));
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        n_views: opts.n_views,
        n_frames: opts.n_frames,
        width: opts.width,
        height: opts.height,
        held_out_view: 0,
        fps: opts.fps,
        bounds: spec.bounds,
        frame_pattern: FRAME_PATTERN.into(),
        cameras: cameras.iter().map(CameraRecord::from).collect(),
        seed,
        quantization: "8-bit sRGB-free linear PNG, round to nearest".into(),
        hashes,
        synth_spec: Some(spec.clone()),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let s = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Counts decoded timestamps currently held in memory and the peak.
#[derive(Debug, Clone, Default)]
pub struct ResidencyMonitor {
    current: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

impl ResidencyMonitor {
    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn acquire(&self, n: usize) -> ResidencyGuard {
        let now = self.current.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
        ResidencyGuard {
            monitor: self.clone(),
            count: n,
        }
    }
}

/// Releases its frames from the monitor when dropped.
#[derive(Debug)]
pub struct ResidencyGuard {
    monitor: ResidencyMonitor,
    count: usize,
}

impl Drop for ResidencyGuard {
    fn drop(&mut self) {
        self.monitor.current.fetch_sub(self.count, Ordering::SeqCst);
    }
}

/// Decoded frames of one chunk, all views.
#[derive(Debug)]
pub struct ChunkFrames {
    pub frames: Range<usize>,
    /// `images[local_frame][view]`.
    pub images: Vec<Vec<Image>>,
    _guard: ResidencyGuard,
}

/// A dataset directory with lazily decoded frames.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    root: PathBuf,
    manifest: DatasetManifest,
    cameras: Vec<Camera>,
    monitor: ResidencyMonitor,
}

impl SceneDataset {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn n_frames(&self) -> usize {
        self.manifest.n_frames
    }

    pub fn n_views(&self) -> usize {
        self.manifest.n_views
    }

    pub fn held_out_view(&self) -> usize {
        self.manifest.held_out_view
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.n_views())
            .filter(|&v| v != self.held_out_view())
            .collect()
    }

    pub fn bounds(&self) -> &SceneBox {
        &self.manifest.bounds
    }

    pub fn monitor(&self) -> &ResidencyMonitor {
        &self.monitor
    }

    /// Decodes one frame, checking its recorded hash.
    pub fn frame(&self, view: usize, frame: usize) -> Result<Image> {
        if view >= self.n_views() || frame >= self.n_frames() {
            return Err(Error::OutOfRange {
                time: format!("frame {frame} view {view}"),
                range: format!("frames 0..{} views 0..{}", self.n_frames(), self.n_views()),
            });
        }
        let rel = frame_rel_path(view, frame);
        let path = self.root.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if let Some(want) = self.manifest.hashes.get(&rel) {
            if *want != sha256_hex(&bytes) {
                return Err(Error::format(&path, "content hash differs from manifest"));
            }
        }
        let img = image::load_from_memory(&bytes)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if (w, h) != (self.manifest.width, self.manifest.height) {
            return Err(Error::format(
                &path,
                format!(
                    "expected {}x{}, found {w}x{h}",
                    self.manifest.width, self.manifest.height
                ),
            ));
        }
        Image::new(
            w,
            h,
            img.into_raw()
                .into_iter()
                .map(|b| b as f32 / 255.0)
                .collect(),
        )
    }

    /// Decodes all views of `frames`, registering them with the residency
    /// monitor until the returned value is dropped.
    pub fn load_chunk(&self, frames: Range<usize>) -> Result<ChunkFrames> {
        if frames.is_empty() || frames.end > self.n_frames() {
            return Err(Error::contract(format!(
                "chunk {frames:?} outside 0..{}",
                self.n_frames()
            )));
        }
        let guard = self.monitor.acquire(frames.len());
        let images = frames
            .clone()
            .map(|f| {
                (0..self.n_views())
                    .map(|v| self.frame(v, f))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChunkFrames {
            frames,
            images,
            _guard: guard,
        })
    }
}

pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let mpath = path.join("manifest.json");
    let manifest: DatasetManifest = read_json(&mpath)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "unsupported dataset format version {}",
                manifest.format_version
            ),
        ));
    }
    if manifest.cameras.len() != manifest.n_views || manifest.held_out_view >= manifest.n_views {
        return Err(Error::format(
            &mpath,
            "camera list does not match the view count",
        ));
    }
    let cameras = manifest
        .cameras
        .iter()
        .map(CameraRecord::to_camera)
        .collect::<Result<Vec<_>>>()?;
    for v in 0..manifest.n_views {
        for f in 0..manifest.n_frames {
            let rel = frame_rel_path(v, f);
            if !path.join(&rel).is_file() {
                return Err(Error::format(
                    path.join(&rel),
                    "frame listed by the manifest is missing",
                ));
            }
        }
    }
    Ok(SceneDataset {
        root: path.to_path_buf(),
        manifest,
        cameras,
        monitor: ResidencyMonitor::default(),
    })
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::contract(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW)
                .map(|i| k[i] * tmp[(y0 + i) * ow + x0])
                .sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of one channel (11x11 Gaussian window, sigma 1.5, K = 0.01/0.03).
pub fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(a, w, h, &k);
    let (mu_b, _, _) = filter_valid(b, w, h, &k);
    let (s_aa, _, _) = filter_valid(&aa, w, h, &k);
    let (s_bb, _, _) = filter_valid(&bb, w, h, &k);
    let (s_ab, _, _) = filter_valid(&ab, w, h, &k);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (ow * oh) as f64
}

/// `(1 - SSIM) / 2` with SSIM averaged over the RGB channels.
pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut s = 0.0;
    for ch in 0..3 {
        let ca: Vec<f64> = a
            .data
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|v| *v as f64)
            .collect();
        let cb: Vec<f64> = b
            .data
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|v| *v as f64)
            .collect();
        s += ssim_channel(&ca, &cb, w, h);
    }
    Ok((1.0 - s / 3.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::look_at(
            0,
            [0.0, 0.0, -3.0],
            [0.0; 3],
            [0.0, -1.0, 0.0],
            32,
            32,
            40.0,
        )
        .unwrap()
    }

    #[test]
    fn oracle_field_cases() {
        let blob = Blob::fixed([0.0; 3], 0.1, 7.0, [1.0, 0.5, 0.0]);
        let spec = SynthSceneSpec {
            dynamic: vec![],
            static_blobs: vec![blob.clone()],
            bounds: SceneBox::default(),
            seed: 0,
        };
        assert_eq!(oracle_field(&spec, [0.0; 3], 0.3).0, 7.0);
        assert!(oracle_field(&spec, [0.9, 0.9, 0.9], 0.3).0 < 1e-12);
        let twice = SynthSceneSpec {
            static_blobs: vec![blob.clone(), blob],
            ..spec.clone()
        };
        let (s1, c1) = oracle_field(&spec, [0.05, 0.0, 0.0], 0.0);
        let (s2, c2) = oracle_field(&twice, [0.05, 0.0, 0.0], 0.0);
        assert!((s2 - 2.0 * s1).abs() < 1e-12);
        for k in 0..3 {
            assert!((c1[k] - c2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn default_spec_is_valid() {
        let s = SynthSceneSpec::default();
        s.validate().unwrap();
        assert_eq!(s.dynamic.len(), 2);
        assert_eq!(s.static_blobs.len(), 2);
        assert!(s.dynamic.iter().all(Blob::is_moving));
    }

    #[test]
    fn oracle_render_cases() {
        let empty = SynthSceneSpec {
            dynamic: vec![],
            static_blobs: vec![],
            ..SynthSceneSpec::default()
        };
        let img = oracle_render(&empty, &cam(), 0.0, 512).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));

        let one = SynthSceneSpec {
            dynamic: vec![],
            static_blobs: vec![Blob::fixed([0.0; 3], 0.25, 3.0, [0.5, 0.5, 0.5])],
            ..SynthSceneSpec::default()
        };
        // principal point (16, 16) falls between the four central pixels
        let img = oracle_render(&one, &cam(), 0.0, 512).unwrap();
        let mut best = (0, 0, -1.0f32);
        for v in 0..32 {
            for u in 0..32 {
                let p = img.pixel(u, v)[0];
                if p > best.2 {
                    best = (u, v, p);
                }
            }
        }
        assert!(
            (15..=16).contains(&best.0) && (15..=16).contains(&best.1),
            "{best:?}"
        );
    }

    #[test]
    fn motion_mask_matches_blob_paths() {
        let spec = SynthSceneSpec::default();
        let c = cam();
        let a = oracle_render(&spec, &c, 0.0, 512).unwrap();
        let b = oracle_render(&spec, &c, 1.0, 512).unwrap();
        let moving_only = SynthSceneSpec {
            static_blobs: vec![],
            ..spec.clone()
        };
        let m0 = oracle_render(&moving_only, &c, 0.0, 512).unwrap();
        let m1 = oracle_render(&moving_only, &c, 1.0, 512).unwrap();
        for i in 0..a.pixel_count() {
            let changed = (0..3).any(|k| (a.data[3 * i + k] - b.data[3 * i + k]).abs() > 1e-3);
            // moving blobs are visible (alone) at one of the two times
            let touched = (0..3).any(|k| m0.data[3 * i + k] > 1e-4 || m1.data[3 * i + k] > 1e-4);
            if changed {
                assert!(touched, "pixel {i} changed without a moving blob");
            }
        }
        assert!(a != b);
    }

    #[test]
    fn default_scene_quadrature_converges() {
        let cams = arc_cameras(8, 64, 64, 3.2).unwrap();
        let d = oracle_convergence(&SynthSceneSpec::default(), &cams[0], 0.5, 512).unwrap();
        assert!(d < 1.0 / 255.0);
    }

    #[test]
    fn arc_layout() {
        let cams = arc_cameras(8, 64, 64, 3.2).unwrap();
        assert_eq!(cams.len(), 8);
        let c0 = cams[0].center();
        assert!(c0[0].abs() < 1e-12 && c0[1] < 0.0);
        for c in &cams {
            let f = c.forward();
            let e = c.center();
            let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
            for k in 0..3 {
                assert!((f[k] + e[k] / n).abs() < 1e-9);
            }
        }
        for i in 1..8 {
            assert!(cams[i].center() != c0);
        }
    }

    #[test]
    fn degenerate_pose_is_rejected() {
        let mut c = cam();
        c.c2w[0][0] = 0.0;
        c.c2w[1][0] = 0.0;
        c.c2w[2][0] = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let opts = GenerateOptions {
            n_views: 3,
            n_frames: 2,
            width: 16,
            height: 16,
            ..GenerateOptions::default()
        };
        let spec = SynthSceneSpec::default();
        let m = generate_dataset(&spec, &opts, 7, dir.path()).unwrap();
        assert_eq!(m.hashes.len(), 6);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(
            ds.cameras(),
            &arc_cameras(3, 16, 16, opts.camera_radius).unwrap()[..]
        );
        assert_eq!(ds.training_views(), vec![1, 2]);
        {
            let chunk = ds.load_chunk(0..2).unwrap();
            assert_eq!(chunk.images.len(), 2);
            assert_eq!(ds.monitor().current(), 2);
        }
        assert_eq!(ds.monitor().current(), 0);
        assert_eq!(ds.monitor().peak(), 2);

        let again = tempfile::tempdir().unwrap();
        let m2 = generate_dataset(&spec, &opts, 7, again.path()).unwrap();
        assert_eq!(m.hashes, m2.hashes);

        let victim = dir.path().join(frame_rel_path(1, 1));
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = ds.frame(1, 1).unwrap_err().to_string();
        assert!(err.contains("0001.png"), "{err}");

        let mut bad = m.clone();
        bad.format_version = 99;
        write_json(&dir.path().join("manifest.json"), &bad).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        assert!(psnr(&z, &Image::filled(5, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn psnr_falls_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Image::filled(16, 16, [0.5; 3]);
        let noise: Vec<f32> = (0..base.data.len())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let n = Image::new(
                16,
                16,
                base.data
                    .iter()
                    .zip(&noise)
                    .map(|(v, e)| v + amp * e)
                    .collect(),
            )
            .unwrap();
            let p = psnr(&base, &n).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn dssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Image::new(16, 16, (0..768).map(|_| rng.gen::<f32>()).collect()).unwrap();
        assert!(dssim(&a, &a).unwrap().abs() < 1e-12);
        let checker = Image::new(
            16,
            16,
            (0..256)
                .flat_map(|i| {
                    let v = ((i % 16 + i / 16) % 2) as f32;
                    [v; 3]
                })
                .collect(),
        )
        .unwrap();
        let neg = Image::new(16, 16, checker.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(dssim(&checker, &neg).unwrap() > 0.4);
        let b = Image::new(16, 16, (0..768).map(|_| rng.gen::<f32>()).collect()).unwrap();
        assert_eq!(dssim(&a, &b).unwrap(), dssim(&b, &a).unwrap());
        assert!(dssim(
            &Image::filled(8, 8, [0.0; 3]),
            &Image::filled(8, 8, [0.0; 3])
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn dssim_is_symmetric_and_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Image::new(12, 12, (0..432).map(|_| rng.gen::<f32>()).collect()).unwrap();
            let b = Image::new(12, 12, (0..432).map(|_| rng.gen::<f32>()).collect()).unwrap();
            let d = dssim(&a, &b).unwrap();
            prop_assert!((d - dssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
