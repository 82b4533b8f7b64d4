//! Rays, occupancy-grid marching and emission-absorption compositing.
//!
//! World space is the axis-aligned scene box; fields are queried at points
//! normalized into `[0,1]^3`. Rays are clipped to the box before marching.

use half::bf16;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{encode_direction, FieldScratch, RadianceField};
use crate::numerics::Real;
use crate::scene::{Camera, Image};

/// Marching stops once the remaining transmittance falls below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for SceneBox {
    fn default() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl SceneBox {
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let mut q = [0.0; 3];
        for k in 0..3 {
            q[k] = (p[k] - self.min[k]) / (self.max[k] - self.min[k]);
        }
        q
    }

    pub fn denormalize(&self, q: [f64; 3]) -> [f64; 3] {
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = self.min[k] + q[k] * (self.max[k] - self.min[k]);
        }
        p
    }

    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|k| (self.max[k] - self.min[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Slab test; returns the parametric interval inside the box (clamped at 0).
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - o[k]) / d[k];
            let b = (self.max[k] - o[k]) / d[k];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (hi > lo).then_some((lo, hi))
    }
}

/// `r(u) = o + u d` for `u ∈ [t_near, t_far]`. A ray that misses the scene
/// box has `t_near == t_far` and produces no samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub o: [f64; 3],
    pub d: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, u: f64) -> [f64; 3] {
        [
            self.o[0] + u * self.d[0],
            self.o[1] + u * self.d[1],
            self.o[2] + u * self.d[2],
        ]
    }

    pub fn length(&self) -> f64 {
        self.t_far - self.t_near
    }
}

/// One ray per pixel center, clipped to `bounds`.
pub fn generate_rays(
    camera: &Camera,
    pixels: &[(u32, u32)],
    bounds: &SceneBox,
) -> Result<Vec<Ray>> {
    camera.validate()?;
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= camera.width || v >= camera.height {
                return Err(Error::contract(format!(
                    "pixel ({u}, {v}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            let (o, d) = camera.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            let (t_near, t_far) = bounds.intersect(o, d).unwrap_or((0.0, 0.0));
            Ok(Ray {
                o,
                d,
                t_near,
                t_far,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyParams {
    pub resolution: usize,
    pub decay: f64,
    pub threshold: f64,
    /// Updates before this training step refresh every cell.
    pub warmup_steps: usize,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        Self {
            resolution: 128,
            decay: 0.95,
            threshold: 0.01,
            warmup_steps: 256,
        }
    }
}

/// Coarse density cache over the scene box, shared by all branches.
/// Cached densities are held at bf16 precision, so the grid round-trips
/// through a checkpoint exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    params: OccupancyParams,
    bounds: SceneBox,
    density: Vec<bf16>,
    bits: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(params: OccupancyParams, bounds: SceneBox) -> Result<Self> {
        if params.resolution == 0 || params.resolution > 1024 {
            return Err(Error::config(format!(
                "occupancy resolution {} out of range",
                params.resolution
            )));
        }
        if !(0.0..=1.0).contains(&params.decay) || params.threshold < 0.0 {
            return Err(Error::config(
                "occupancy decay must be in [0,1] and threshold >= 0",
            ));
        }
        let n = params.resolution.pow(3);
        Ok(Self {
            params,
            bounds,
            density: vec![bf16::ZERO; n],
            bits: vec![false; n],
        })
    }

    pub fn from_density(
        params: OccupancyParams,
        bounds: SceneBox,
        density: Vec<bf16>,
    ) -> Result<Self> {
        let mut g = Self::new(params, bounds)?;
        if density.len() != g.density.len() {
            return Err(Error::config(format!(
                "occupancy grid needs {} cells, got {}",
                g.density.len(),
                density.len()
            )));
        }
        g.density = density;
        g.refresh_bits();
        Ok(g)
    }

    pub fn params(&self) -> &OccupancyParams {
        &self.params
    }

    pub fn bounds(&self) -> &SceneBox {
        &self.bounds
    }

    pub fn resolution(&self) -> usize {
        self.params.resolution
    }

    pub fn cell_count(&self) -> usize {
        self.density.len()
    }

    pub fn density(&self) -> &[bf16] {
        &self.density
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Sets every cell's cached density.
    pub fn fill(&mut self, value: f64) {
        self.density.fill(bf16::from_f64(value));
        self.refresh_bits();
    }

    pub fn set_cell(&mut self, cell: usize, value: f64) {
        self.density[cell] = bf16::from_f64(value);
        self.bits[cell] = self.density[cell].to_f64() > self.params.threshold;
    }

    /// Raises every cell's density to at least `floor`, cell by cell.
    pub fn raise_to(&mut self, floor: &[bf16]) -> Result<()> {
        if floor.len() != self.density.len() {
            return Err(Error::contract(format!(
                "occupancy floor has {} cells, grid has {}",
                floor.len(),
                self.density.len()
            )));
        }
        for (d, f) in self.density.iter_mut().zip(floor) {
            if f.to_f64() > d.to_f64() {
                *d = *f;
            }
        }
        self.refresh_bits();
        Ok(())
    }

    fn refresh_bits(&mut self) {
        let th = self.params.threshold;
        for (b, d) in self.bits.iter_mut().zip(&self.density) {
            *b = d.to_f64() > th;
        }
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let r = self.params.resolution;
        [cell % r, cell / r % r, cell / (r * r)]
    }

    /// Cell containing a normalized point.
    #[inline]
    pub fn cell_of_normalized(&self, q: [f64; 3]) -> usize {
        let r = self.params.resolution;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            idx[k] = ((q[k] * r as f64).floor().max(0.0) as usize).min(r - 1);
        }
        idx[0] + r * (idx[1] + r * idx[2])
    }

    #[inline]
    pub fn occupied_normalized(&self, q: [f64; 3]) -> bool {
        self.bits[self.cell_of_normalized(q)]
    }

    pub fn occupied(&self, p: [f64; 3]) -> bool {
        self.occupied_normalized(self.bounds.normalize(p))
    }
}

/// One grid refresh. `query` maps normalized points and normalized times to
/// densities in batch. Every cell decays; the chosen cells then take the max
/// with a density sampled at a jittered point and a random time.
pub fn update_occupancy<G, Q>(
    grid: &mut OccupancyGrid,
    mut query: Q,
    step: usize,
    rng: &mut G,
) -> Result<()>
where
    G: Rng,
    Q: FnMut(&[[f64; 3]], &[f64]) -> Result<Vec<f64>>,
{
    let n = grid.cell_count();
    let cells: Vec<usize> = if step < grid.params.warmup_steps {
        (0..n).collect()
    } else {
        let mut c: Vec<usize> = (0..n / 2).map(|_| rng.gen_range(0..n)).collect();
        c.extend((0..n).filter(|&i| grid.bits[i]));
        c
    };
    let r = grid.params.resolution as f64;
    let mut points = Vec::with_capacity(cells.len());
    let mut times = Vec::with_capacity(cells.len());
    for &c in &cells {
        let [i, j, k] = grid.cell_coords(c);
        points.push([
            (i as f64 + rng.gen::<f64>()) / r,
            (j as f64 + rng.gen::<f64>()) / r,
            (k as f64 + rng.gen::<f64>()) / r,
        ]);
        times.push(rng.gen::<f64>());
    }
    let sigmas = query(&points, &times)?;
    if sigmas.len() != cells.len() {
        return Err(Error::contract(
            "occupancy query returned the wrong number of densities",
        ));
    }
    let decay = grid.params.decay;
    let mut cache: Vec<f64> = grid.density.iter().map(|d| d.to_f64() * decay).collect();
    for (&c, &s) in cells.iter().zip(&sigmas) {
        if !s.is_finite() {
            return Err(Error::numerical("occupancy update", "non-finite density"));
        }
        cache[c] = cache[c].max(s);
    }
    for (d, v) in grid.density.iter_mut().zip(cache) {
        *d = bf16::from_f64(v);
    }
    grid.refresh_bits();
    Ok(())
}

/// A marched sample: position parameter, interval length and its bin edges
/// normalized by the ray's in-box length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub delta: f64,
    pub s0: f64,
    pub s1: f64,
}

/// Uniform stepping over `[t_near, t_far]`, keeping samples that land in
/// occupied cells. Without `jitter` each sample sits at its bin midpoint;
/// with it, at a uniform offset inside the bin.
pub fn march_ray<G: Rng>(
    ray: &Ray,
    grid: Option<&OccupancyGrid>,
    step: f64,
    mut jitter: Option<&mut G>,
    out: &mut Vec<Sample>,
) {
    out.clear();
    let len = ray.length();
    if !(len > 0.0) || !(step > 0.0) {
        return;
    }
    let n = (len / step).ceil() as usize;
    let n = n.max(1);
    for i in 0..n {
        let a = ray.t_near + i as f64 * step;
        let b = (a + step).min(ray.t_far);
        if b <= a {
            break;
        }
        let u = match jitter.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        let t = a + u * (b - a);
        if let Some(g) = grid {
            if !g.occupied(ray.at(t)) {
                continue;
            }
        }
        out.push(Sample {
            t,
            delta: b - a,
            s0: (a - ray.t_near) / len,
            s1: (b - ray.t_near) / len,
        });
    }
}

/// `n` equal bins over the ray with midpoint samples and no grid.
pub fn march_uniform(ray: &Ray, n: usize) -> Vec<Sample> {
    let len = ray.length();
    if !(len > 0.0) || n == 0 {
        return Vec::new();
    }
    let h = len / n as f64;
    (0..n)
        .map(|i| Sample {
            t: ray.t_near + (i as f64 + 0.5) * h,
            delta: h,
            s0: i as f64 / n as f64,
            s1: (i + 1) as f64 / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T_i` before each sample, plus the final transmittance at the end.
    pub transmittance: Vec<f64>,
    pub s0: Vec<f64>,
    pub s1: Vec<f64>,
}

impl RenderOutput {
    pub fn sample_count(&self) -> usize {
        self.weights.len()
    }

    pub fn final_transmittance(&self) -> f64 {
        self.transmittance.last().copied().unwrap_or(1.0)
    }
}

/// Emission-absorption compositing of `n` samples. Bin edges default to the
/// cumulative normalized deltas.
pub fn volume_render(sigmas: &[f64], colors: &[[f64; 3]], deltas: &[f64]) -> Result<RenderOutput> {
    if sigmas.len() != colors.len() || sigmas.len() != deltas.len() {
        return Err(Error::contract(
            "sigmas, colors and deltas must have equal lengths",
        ));
    }
    if let Some(i) = sigmas.iter().position(|s| !(*s >= 0.0)) {
        return Err(Error::contract(format!(
            "negative or NaN density at sample {i}"
        )));
    }
    if let Some(i) = deltas.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::contract(format!(
            "non-positive interval at sample {i}"
        )));
    }
    let mut out = RenderOutput::default();
    let total: f64 = deltas.iter().sum();
    let mut acc = 0.0;
    for i in 0..sigmas.len() {
        push_sample(&mut out, sigmas[i], colors[i], deltas[i]);
        out.s0.push(acc / total);
        acc += deltas[i];
        out.s1.push(acc / total);
    }
    finish(&mut out);
    Ok(out)
}

#[inline]
fn push_sample(out: &mut RenderOutput, sigma: f64, c: [f64; 3], delta: f64) {
    if out.transmittance.is_empty() {
        out.transmittance.push(1.0);
    }
    let t = *out.transmittance.last().unwrap_or(&1.0);
    let alpha = 1.0 - (-sigma * delta).exp();
    let w = t * alpha;
    for k in 0..3 {
        out.color[k] += w * c[k];
    }
    out.weights.push(w);
    out.transmittance.push(t * (1.0 - alpha));
}

fn finish(out: &mut RenderOutput) {
    if out.transmittance.is_empty() {
        out.transmittance.push(1.0);
    }
    out.opacity = out.weights.iter().sum();
}

/// Gradient of a loss with respect to densities and colors, given
/// `dL/dĈ` and `dL/dw_i` from terms that depend on the weights directly
/// (distortion, opacity).
pub fn volume_render_backward(
    out: &RenderOutput,
    colors: &[[f64; 3]],
    deltas: &[f64],
    d_color: [f64; 3],
    d_weights: &[f64],
    d_sigma: &mut Vec<f64>,
    d_colors: &mut Vec<[f64; 3]>,
) {
    let n = out.weights.len();
    d_sigma.clear();
    d_sigma.resize(n, 0.0);
    d_colors.clear();
    d_colors.resize(n, [0.0; 3]);
    // suffix = Σ_{j>i} g_j w_j
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let w = out.weights[i];
        let g = d_color[0] * colors[i][0]
            + d_color[1] * colors[i][1]
            + d_color[2] * colors[i][2]
            + d_weights[i];
        d_colors[i] = [w * d_color[0], w * d_color[1], w * d_color[2]];
        d_sigma[i] = deltas[i] * (out.transmittance[i + 1] * g - suffix);
        suffix += g * w;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub step: f64,
    pub early_stop: bool,
    pub background: [f64; 3],
}

impl RenderOptions {
    /// Scene diagonal over `steps_per_diagonal`, black background.
    pub fn for_bounds(bounds: &SceneBox, steps_per_diagonal: usize) -> Self {
        Self {
            step: bounds.diagonal() / steps_per_diagonal as f64,
            early_stop: true,
            background: [0.0; 3],
        }
    }
}

/// Marches and composites one ray through `field` at normalized time `t`.
/// Samples are evaluated in order so early termination skips the field.
#[allow(clippy::too_many_arguments)]
pub fn render_ray<R: Real, F: RadianceField<R> + ?Sized>(
    field: &F,
    ray: &Ray,
    t: Option<f64>,
    bounds: &SceneBox,
    samples: &[Sample],
    early_stop: bool,
    scratch: &mut FieldScratch<R>,
) -> Result<RenderOutput> {
    let (sh64, _) = encode_direction(ray.d);
    let mut sh = [R::zero(); 16];
    for k in 0..16 {
        sh[k] = R::of(sh64[k]);
    }
    let tr = t.map(R::of);
    let mut out = RenderOutput::default();
    for s in samples {
        let q = bounds.normalize(ray.at(s.t));
        let (sigma, c) = field.sample([R::of(q[0]), R::of(q[1]), R::of(q[2])], tr, &sh, scratch)?;
        let c = [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()];
        push_sample(&mut out, sigma.as_f64(), c, s.delta);
        out.s0.push(s.s0);
        out.s1.push(s.s1);
        if early_stop && out.final_transmittance() < TRANSMITTANCE_EPS {
            break;
        }
    }
    finish(&mut out);
    Ok(out)
}

/// Renders a full image; rows are processed in parallel and the result does
/// not depend on the thread count.
pub fn render_image<R: Real, F: RadianceField<R> + ?Sized>(
    field: &F,
    camera: &Camera,
    t: Option<f64>,
    grid: Option<&OccupancyGrid>,
    bounds: &SceneBox,
    opts: &RenderOptions,
) -> Result<(Image, Vec<f32>)> {
    camera.validate()?;
    let (w, h) = (camera.width as usize, camera.height as usize);
    let rows: Vec<Result<(Vec<f32>, Vec<f32>)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut scratch = FieldScratch::default();
            let mut samples = Vec::new();
            let mut rgb = Vec::with_capacity(3 * w);
            let mut alpha = Vec::with_capacity(w);
            let pixels: Vec<(u32, u32)> = (0..w as u32).map(|u| (u, v as u32)).collect();
            for ray in generate_rays(camera, &pixels, bounds)? {
                march_ray::<rand_chacha::ChaCha8Rng>(&ray, grid, opts.step, None, &mut samples);
                let o = render_ray(
                    field,
                    &ray,
                    t,
                    bounds,
                    &samples,
                    opts.early_stop,
                    &mut scratch,
                )?;
                for k in 0..3 {
                    let c = o.color[k] + (1.0 - o.opacity) * opts.background[k];
                    rgb.push(c.clamp(0.0, 1.0) as f32);
                }
                alpha.push(o.opacity.clamp(0.0, 1.0) as f32);
            }
            Ok((rgb, alpha))
        })
        .collect();
    let mut data = Vec::with_capacity(3 * w * h);
    let mut opacity = Vec::with_capacity(w * h);
    for r in rows {
        let (rgb, a) = r?;
        data.extend(rgb);
        opacity.extend(a);
    }
    Ok((Image::new(camera.width, camera.height, data)?, opacity))
}
