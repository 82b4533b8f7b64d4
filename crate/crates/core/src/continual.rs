//! Chunked continual training: the chunk schedule, branch lifecycle, ray
//! importance sampling, the per-branch optimization loop and the driver
//! that walks a sequence chunk by chunk.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::PathBuf;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, Layout, SpatialEncoder};
use crate::error::{Error, Result};
use crate::field::{
    encode_direction, Branch, DecoderGrads, Field, FieldConfig, FieldScratch, FusionMode,
    SampleTrace, SH_COEFFS,
};
use crate::losses::{
    distortion_grad, distortion_loss, opacity_entropy, opacity_entropy_grad, total_loss, LossTerms,
    LossWeights,
};
use crate::numerics::{cosine_lr, AdamHyper, AdamState, Real};
use crate::renderer::{
    generate_rays, march_ray, render_image, volume_render_backward, OccupancyGrid, OccupancyParams,
    Ray, RenderOptions, RenderOutput, Sample, SceneBox, TRANSMITTANCE_EPS,
};
use crate::scene::{sha256_hex, Camera, ChunkFrames, Image, SceneDataset};

/// Default importance-sampling floor.
pub const IMPORTANCE_FLOOR: f64 = 0.05;

/// Description of the sampling scheme recorded with every checkpoint.
pub const SAMPLING_SCHEME: &str =
    "per-pixel max over chunk frames of channel-max |frame - chunk-local per-view median|, floored";

/// Deterministic seed derivation (splitmix64 over the tags).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Stream tags for [`derive_seed`].
pub const TAG_BASE: u64 = 1;
pub const TAG_BRANCH: u64 = 2;
pub const TAG_SAMPLER: u64 = 3;
pub const TAG_JITTER: u64 = 4;
pub const TAG_GRID: u64 = 5;

/// Partition of a sequence into chunks and episodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSchedule {
    pub n_frames: usize,
    /// Effective chunk length (clamped to the frame count).
    pub t_chunk: usize,
    pub t_episode: usize,
    pub eta_init: usize,
    pub eta_aux: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn plan_chunks(n_frames: usize, t_chunk: usize, t_episode: usize) -> Result<ChunkSchedule> {
    if n_frames == 0 {
        return Err(Error::config("sequence has no frames"));
    }
    if t_chunk == 0 || t_episode == 0 {
        return Err(Error::config("T_chunk and T_episode must be at least 1"));
    }
    let (t_chunk, warning) = if t_chunk > n_frames {
        (
            n_frames,
            Some(format!(
                "T_chunk {t_chunk} exceeds {n_frames} frames; training a single chunk"
            )),
        )
    } else {
        (t_chunk, None)
    };
    Ok(ChunkSchedule {
        n_frames,
        t_chunk,
        t_episode,
        eta_init: 0,
        eta_aux: 0,
        warning,
    })
}

impl ChunkSchedule {
    pub fn with_iterations(mut self, eta_init: usize, eta_aux: usize) -> Self {
        self.eta_init = eta_init;
        self.eta_aux = eta_aux;
        self
    }

    pub fn n_chunks(&self) -> usize {
        self.n_frames.div_ceil(self.t_chunk)
    }

    pub fn chunk(&self, k: usize) -> Range<usize> {
        let start = (k * self.t_chunk).min(self.n_frames);
        start..((k + 1) * self.t_chunk).min(self.n_frames)
    }

    pub fn chunks(&self) -> Vec<Range<usize>> {
        (0..self.n_chunks()).map(|k| self.chunk(k)).collect()
    }

    pub fn is_episode_start(&self, k: usize) -> bool {
        k % self.t_episode == 0
    }

    pub fn iterations(&self, k: usize) -> usize {
        if self.is_episode_start(k) {
            self.eta_init
        } else {
            self.eta_aux
        }
    }

    pub fn chunk_of_frame(&self, frame: usize) -> Result<usize> {
        if frame >= self.n_frames {
            return Err(Error::OutOfRange {
                time: format!("frame {frame}"),
                range: format!("0..{}", self.n_frames),
            });
        }
        Ok(frame / self.t_chunk)
    }

    /// Chunk index and time normalized within that chunk's frame range.
    pub fn local_time(&self, frame: usize) -> Result<(usize, f64)> {
        let k = self.chunk_of_frame(frame)?;
        let r = self.chunk(k);
        let t = if r.len() > 1 {
            (frame - r.start) as f64 / (r.len() - 1) as f64
        } else {
            0.0
        };
        Ok((k, t))
    }
}

/// Everything that shapes a continual run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub field: FieldConfig,
    /// Base table log2 length.
    #[serde(rename = "P1")]
    pub p1: u32,
    /// Auxiliary table log2 length.
    #[serde(rename = "P2")]
    pub p2: u32,
    #[serde(rename = "T_chunk")]
    pub t_chunk: usize,
    #[serde(rename = "T_episode")]
    pub t_episode: usize,
    pub eta_init: usize,
    pub eta_aux: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub adam: AdamHyper,
    pub loss: LossWeights,
    pub occupancy: OccupancyParams,
    /// Training steps between occupancy refreshes.
    pub occupancy_interval: usize,
    /// Ray-marching step as a fraction of the scene diagonal.
    pub steps_per_diagonal: usize,
    pub importance_floor: f64,
    /// Rays per parallel work unit. Results depend on this, not on the thread count.
    pub block_rays: usize,
    pub background: [f64; 3],
    pub seed: u64,
    /// Keep a copy of the occupancy grid after every chunk.
    pub snapshot_grids: bool,
}

impl TrainConfig {
    /// Full-scale defaults.
    pub fn paper(layout: Layout) -> Self {
        let t_chunk = 10;
        Self {
            field: FieldConfig::paper(layout, t_chunk),
            p1: 19,
            p2: 14,
            t_chunk,
            t_episode: 30,
            eta_init: 18_000,
            eta_aux: 3_000,
            batch_rays: 1024,
            lr: 1e-3,
            adam: AdamHyper::default(),
            loss: LossWeights::default(),
            occupancy: OccupancyParams::default(),
            occupancy_interval: 16,
            steps_per_diagonal: 1024,
            importance_floor: IMPORTANCE_FLOOR,
            block_rays: 64,
            background: [0.0; 3],
            seed: 0,
            snapshot_grids: false,
        }
    }

    /// Desk-scale preset for small synthetic scenes.
    pub fn toy(layout: Layout) -> Self {
        let t_chunk = 10;
        let spatial = match layout {
            Layout::Plane => enc(3, 6, 4, 12, 8, 64),
            _ => enc(3, 8, 2, 12, 4, 64),
        };
        Self {
            field: FieldConfig {
                layout,
                fusion: FusionMode::Sum,
                spatial,
                temporal_kind: crate::field::TemporalKind::Hash,
                temporal: enc(1, 2, 20, 7, 2, t_chunk as u32),
                space_time: enc(4, 8, 2, 8, 4, 64),
                hidden_sigma: 32,
                latent: 16,
                hidden_color: 16,
            },
            p1: 12,
            p2: 8,
            t_chunk,
            t_episode: 30,
            eta_init: 4000,
            eta_aux: 1500,
            batch_rays: 128,
            lr: 1e-2,
            adam: AdamHyper::default(),
            loss: LossWeights::default(),
            occupancy: OccupancyParams {
                resolution: 32,
                ..OccupancyParams::default()
            },
            occupancy_interval: 16,
            steps_per_diagonal: 64,
            importance_floor: IMPORTANCE_FLOOR,
            block_rays: 32,
            background: [0.0; 3],
            seed: 0,
            snapshot_grids: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        if self.p1 < self.p2 {
            return Err(Error::config(format!(
                "P1 ({}) must be at least P2 ({})",
                self.p1, self.p2
            )));
        }
        if !(4..=24).contains(&self.p2) || self.p1 > 24 {
            return Err(Error::config(
                "table sizes must satisfy 4 <= P2 <= P1 <= 24",
            ));
        }
        if self.t_chunk == 0 || self.t_episode == 0 {
            return Err(Error::config("T_chunk and T_episode must be at least 1"));
        }
        if self.batch_rays == 0 || self.block_rays == 0 {
            return Err(Error::config("batch_rays and block_rays must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.occupancy_interval == 0
            || self.steps_per_diagonal == 0
            || self.occupancy.resolution == 0
        {
            return Err(Error::config(
                "occupancy_interval, steps_per_diagonal and grid resolution must be positive",
            ));
        }
        if !(self.importance_floor >= 0.0) {
            return Err(Error::config("importance_floor must be non-negative"));
        }
        self.loss.validate()?;
        // Surface table-size errors (e.g. MERF needs P2 >= 4 + 1) before training.
        crate::encoders::layout_table_configs(self.field.layout, self.field.spatial, self.p2)?;
        Ok(())
    }

    pub fn schedule(&self, n_frames: usize) -> Result<ChunkSchedule> {
        Ok(plan_chunks(n_frames, self.t_chunk, self.t_episode)?
            .with_iterations(self.eta_init, self.eta_aux))
    }

    pub fn render_options(&self, bounds: &SceneBox) -> RenderOptions {
        RenderOptions {
            background: self.background,
            ..RenderOptions::for_bounds(bounds, self.steps_per_diagonal)
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).unwrap_or_default())
    }
}

fn enc(
    dims: usize,
    levels: usize,
    features: usize,
    log2: u32,
    n_min: u32,
    n_max: u32,
) -> EncoderConfig {
    EncoderConfig {
        dims,
        levels,
        features,
        log2_table_len: log2,
        n_min,
        n_max,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_sha256: String,
    pub importance_sampling: String,
    #[serde(default)]
    pub dataset_sha256: Option<String>,
}

/// The whole representation: one base encoder, per-chunk branches and the
/// shared occupancy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRepo {
    pub config: TrainConfig,
    pub schedule: ChunkSchedule,
    pub bounds: SceneBox,
    pub base: SpatialEncoder<f32>,
    pub branches: BTreeMap<usize, Branch<f32>>,
    pub grid: OccupancyGrid,
    /// Grid copies taken after each chunk when `snapshot_grids` is set.
    pub grid_snapshots: BTreeMap<usize, OccupancyGrid>,
    pub provenance: Provenance,
}

impl ModelRepo {
    /// Empty repo with a freshly initialized base encoder.
    pub fn new(config: TrainConfig, n_frames: usize, bounds: SceneBox) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule(n_frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_BASE]));
        let base = SpatialEncoder::init(
            config.field.layout,
            config.field.spatial,
            config.p1,
            &mut rng,
        )?;
        let grid = OccupancyGrid::new(config.occupancy, bounds)?;
        let provenance = Provenance {
            seed: config.seed,
            config_sha256: config.hash(),
            importance_sampling: SAMPLING_SCHEME.into(),
            dataset_sha256: None,
        };
        Ok(Self {
            config,
            schedule,
            bounds,
            base,
            branches: BTreeMap::new(),
            grid,
            grid_snapshots: BTreeMap::new(),
            provenance,
        })
    }

    /// Number of chunks trained without gaps from chunk 0.
    pub fn completed_chunks(&self) -> usize {
        (0..).take_while(|k| self.branches.contains_key(k)).count()
    }

    pub fn missing_branches(&self) -> Vec<usize> {
        (0..self.schedule.n_chunks())
            .filter(|k| !self.branches.contains_key(k))
            .collect()
    }

    pub fn require_complete(&self) -> Result<()> {
        let missing = self.missing_branches();
        if missing.is_empty() {
            return Ok(());
        }
        Err(Error::MissingBranches {
            frames: frame_ranges(&self.schedule, &missing),
            missing,
        })
    }

    pub fn branch(&self, k: usize) -> Result<&Branch<f32>> {
        self.branches.get(&k).ok_or_else(|| Error::MissingBranches {
            missing: vec![k],
            frames: frame_ranges(&self.schedule, &[k]),
        })
    }

    pub fn field(&self, k: usize) -> Result<Field<'_, f32>> {
        Ok(Field::new(
            &self.base,
            self.branch(k)?,
            self.config.field.fusion,
        ))
    }

    /// Renders a global frame from `camera`. With `use_snapshot` the grid
    /// saved right after the frame's chunk is used when one exists.
    pub fn render_frame(
        &self,
        camera: &Camera,
        frame: usize,
        use_snapshot: bool,
    ) -> Result<(Image, Vec<f32>)> {
        let (k, t) = self.schedule.local_time(frame)?;
        let field = self.field(k)?;
        let grid = match use_snapshot {
            true => self.grid_snapshots.get(&k).unwrap_or(&self.grid),
            false => &self.grid,
        };
        render_image(
            &field,
            camera,
            Some(t),
            Some(grid),
            &self.bounds,
            &self.config.render_options(&self.bounds),
        )
    }

    /// Little-endian bytes of every parameter of the base encoder.
    pub fn base_bytes(&self) -> Vec<u8> {
        self.base
            .tables()
            .iter()
            .flat_map(|t| f32_bytes(t.data()))
            .collect()
    }

    /// Little-endian bytes of every parameter of branch `k`.
    pub fn branch_bytes(&self, k: usize) -> Result<Vec<u8>> {
        Ok(self
            .branch(k)?
            .param_blocks()
            .iter()
            .flat_map(|b| f32_bytes(b.data))
            .collect())
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Human-readable frame ranges of a set of chunks, e.g. `10..20, 30..40`.
pub fn frame_ranges(schedule: &ChunkSchedule, chunks: &[usize]) -> String {
    chunks
        .iter()
        .map(|&k| {
            let r = schedule.chunk(k);
            format!("{}..{}", r.start, r.end)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// How a branch's decoders start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    /// Fresh at episode starts, warm-started from the previous branch otherwise.
    Schedule,
    /// Always fresh (ablation control).
    Fresh,
}

/// Builds branch `k` and returns it with its iteration budget.
pub fn init_branch<G: Rng>(
    k: usize,
    schedule: &ChunkSchedule,
    previous: Option<&Branch<f32>>,
    config: &TrainConfig,
    policy: InitPolicy,
    rng: &mut G,
) -> Result<(Branch<f32>, usize)> {
    let fresh = schedule.is_episode_start(k) || policy == InitPolicy::Fresh;
    let iterations = schedule.iterations(k);
    if fresh {
        return Ok((Branch::init(k, &config.field, config.p2, rng)?, iterations));
    }
    let prev = previous.ok_or_else(|| {
        Error::contract(format!(
            "branch {k} needs branch {} for its warm start",
            k - 1
        ))
    })?;
    if prev.index + 1 != k {
        return Err(Error::contract(format!(
            "branch {k} must warm-start from branch {}, got branch {}",
            k - 1,
            prev.index
        )));
    }
    let aux = SpatialEncoder::init(config.field.layout, config.field.spatial, config.p2, rng)?;
    Ok((
        Branch {
            index: k,
            aux: Some(aux),
            temporal: prev.temporal.clone(),
            theta1: prev.theta1.clone(),
            theta2: prev.theta2.clone(),
        },
        iterations,
    ))
}

/// One training ray: which view, which chunk-local frame and which pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySample {
    pub view: usize,
    pub local_frame: usize,
    pub pixel: (u32, u32),
}

/// Draws training rays with probability proportional to how much each pixel
/// changes over the chunk.
#[derive(Debug, Clone)]
pub struct ImportanceSampler {
    views: Vec<usize>,
    width: u32,
    height: u32,
    n_frames: usize,
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

fn median(v: &mut [f32]) -> f32 {
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ImportanceSampler {
    /// `images[local_frame][view]`; only `views` are ever sampled.
    pub fn new(images: &[Vec<Image>], views: &[usize], floor: f64) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::contract("cannot sample rays from an empty chunk"))?;
        if views.is_empty() {
            return Err(Error::contract("no training views to sample from"));
        }
        let (width, height) = match views.iter().map(|&v| first.get(v)).next().flatten() {
            Some(img) => (img.width, img.height),
            None => return Err(Error::contract("training view missing from the chunk")),
        };
        let npx = (width * height) as usize;
        let mut weights = Vec::with_capacity(views.len() * npx);
        let mut column = vec![0.0f32; images.len()];
        for &v in views {
            for f in images {
                let img = f
                    .get(v)
                    .ok_or_else(|| Error::contract(format!("view {v} missing from the chunk")))?;
                if (img.width, img.height) != (width, height) {
                    return Err(Error::contract("chunk images differ in size"));
                }
            }
            for p in 0..npx {
                let mut dev = 0.0f32;
                for c in 0..3 {
                    for (i, f) in images.iter().enumerate() {
                        column[i] = f[v].data[3 * p + c];
                    }
                    let med = median(&mut column);
                    for f in images {
                        dev = dev.max((f[v].data[3 * p + c] - med).abs());
                    }
                }
                weights.push(floor.max(dev as f64));
            }
        }
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::contract(format!("no pixel has positive sampling weight: {e}")))?;
        Ok(Self {
            views: views.to_vec(),
            width,
            height,
            n_frames: images.len(),
            weights,
            dist,
        })
    }

    /// Weights laid out view-major, pixels row-major within a view.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    pub fn sample<G: Rng>(&self, n: usize, rng: &mut G) -> Vec<RaySample> {
        let npx = (self.width * self.height) as usize;
        (0..n)
            .map(|_| {
                let i = self.dist.sample(rng);
                let (slot, p) = (i / npx, i % npx);
                let local_frame = rng.gen_range(0..self.n_frames);
                RaySample {
                    view: self.views[slot],
                    local_frame,
                    pixel: (
                        (p % self.width as usize) as u32,
                        (p / self.width as usize) as u32,
                    ),
                }
            })
            .collect()
    }
}

/// Importance-sampled batch of rays for one step.
pub fn importance_sample_rays<G: Rng>(
    chunk: &ChunkFrames,
    views: &[usize],
    floor: f64,
    batch: usize,
    rng: &mut G,
) -> Result<Vec<RaySample>> {
    Ok(ImportanceSampler::new(&chunk.images, views, floor)?.sample(batch, rng))
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub chunk: usize,
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub total: f64,
    /// Field evaluations in the batch.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchMetrics {
    pub chunk: usize,
    pub iterations: usize,
    pub records: Vec<StepRecord>,
}

impl BranchMetrics {
    /// Mean total loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let n = n.min(self.records.len());
        if n == 0 {
            return None;
        }
        Some(
            self.records[self.records.len() - n..]
                .iter()
                .map(|r| r.total)
                .sum::<f64>()
                / n as f64,
        )
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.total)
    }
}

/// Read-only inputs of a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub chunk: &'a ChunkFrames,
    pub cameras: &'a [Camera],
    pub views: &'a [usize],
}

struct TrainRay {
    ray: Ray,
    target: [f64; 3],
    t: f32,
}

/// Unnormalized loss terms of one ray.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RayTerms {
    /// Squared color error summed over channels.
    pub photometric: f64,
    pub distortion: f64,
    pub opacity: f64,
}

/// Reusable buffers for [`ray_pass`].
#[derive(Debug, Clone, Default)]
pub struct RayScratch<R> {
    scratch: Vec<FieldScratch<R>>,
    colors: Vec<[f64; 3]>,
    deltas: Vec<f64>,
    d_weights: Vec<f64>,
    d_dist: Vec<f64>,
    d_sigma: Vec<f64>,
    d_colors: Vec<[f64; 3]>,
    d_fused: Vec<R>,
}

/// Renders `ray` at chunk-local time `t` over `samples`, returns its loss
/// terms and backpropagates the batch loss (photometric, distortion and
/// opacity terms divided by `batch`) into the decoder gradients.
///
/// `on_point` is called once per composited sample with its trace and the
/// gradient of the fused feature. Encoder gradients, including the sparsity
/// term on auxiliary features, are left to the caller since they need the
/// sample count of the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn ray_pass<R: Real>(
    field: &Field<'_, R>,
    ray: &Ray,
    samples: &[Sample],
    bounds: &SceneBox,
    t: R,
    target: [f64; 3],
    background: [f64; 3],
    loss: &LossWeights,
    batch: f64,
    w: &mut RayScratch<R>,
    grads: &mut DecoderGrads<R>,
    mut on_point: impl FnMut(&SampleTrace<R>, &[R]),
) -> Result<RayTerms> {
    let (sh64, _) = encode_direction(ray.d);
    let mut sh = [R::zero(); SH_COEFFS];
    for k in 0..SH_COEFFS {
        sh[k] = R::of(sh64[k]);
    }
    if w.scratch.len() < samples.len() {
        w.scratch.resize_with(samples.len(), FieldScratch::default);
    }
    w.d_fused.resize(field.fused_width(), R::zero());
    let mut vr = RenderOutput::default();
    vr.transmittance.push(1.0);
    w.colors.clear();
    w.deltas.clear();
    let mut trans = 1.0;
    for (i, s) in samples.iter().enumerate() {
        let q = bounds.normalize(ray.at(s.t));
        let x = [R::of(q[0]), R::of(q[1]), R::of(q[2])];
        field.forward_traced(x, Some(t), &sh, &mut w.scratch[i])?;
        let tr = field.trace(&w.scratch[i]);
        let sigma = tr.sigma.as_f64();
        let c = [tr.rgb[0].as_f64(), tr.rgb[1].as_f64(), tr.rgb[2].as_f64()];
        let alpha = 1.0 - (-sigma * s.delta).exp();
        let wi = trans * alpha;
        for k in 0..3 {
            vr.color[k] += wi * c[k];
        }
        trans *= 1.0 - alpha;
        vr.weights.push(wi);
        vr.transmittance.push(trans);
        vr.s0.push(s.s0);
        vr.s1.push(s.s1);
        w.colors.push(c);
        w.deltas.push(s.delta);
        if trans < TRANSMITTANCE_EPS {
            break;
        }
    }
    let n = vr.weights.len();
    vr.opacity = vr.weights.iter().sum();
    let mut pred = vr.color;
    for k in 0..3 {
        pred[k] += (1.0 - vr.opacity) * background[k];
    }
    let mut terms = RayTerms::default();
    let mut d_color = [0.0; 3];
    for k in 0..3 {
        let e = pred[k] - target[k];
        terms.photometric += e * e;
        d_color[k] = 2.0 * e / batch;
    }
    terms.distortion = distortion_loss(&vr.weights, &vr.s0, &vr.s1);
    terms.opacity = opacity_entropy(vr.opacity);
    if n == 0 {
        return Ok(terms);
    }
    distortion_grad(&vr.weights, &vr.s0, &vr.s1, &mut w.d_dist);
    let d_op = loss.lambda_o / batch * opacity_entropy_grad(vr.opacity);
    let d_bg: f64 = (0..3).map(|k| d_color[k] * background[k]).sum();
    w.d_weights.clear();
    w.d_weights.extend(
        w.d_dist
            .iter()
            .map(|g| loss.lambda_d / batch * g + d_op - d_bg),
    );
    volume_render_backward(
        &vr,
        &w.colors,
        &w.deltas,
        d_color,
        &w.d_weights,
        &mut w.d_sigma,
        &mut w.d_colors,
    );
    for i in 0..n {
        let dc = w.d_colors[i];
        field.backward(
            &mut w.scratch[i],
            R::of(w.d_sigma[i]),
            [R::of(dc[0]), R::of(dc[1]), R::of(dc[2])],
            true,
            grads,
            &mut w.d_fused,
        );
        on_point(field.trace(&w.scratch[i]), &w.d_fused);
    }
    Ok(terms)
}

#[derive(Default)]
struct Worker {
    ray: RayScratch<f32>,
    samples: Vec<Sample>,
}

struct BlockOut {
    photometric: f64,
    distortion: f64,
    opacity: f64,
    l1_sum: f64,
    points: usize,
    grads: DecoderGrads<f32>,
    /// Per point: position, fused-feature gradient, sign of the aux feature.
    records: Vec<f32>,
}

struct PassCtx<'a> {
    field: Field<'a, f32>,
    grid: &'a OccupancyGrid,
    bounds: &'a SceneBox,
    step: f64,
    batch: f64,
    loss: LossWeights,
    background: [f64; 3],
    record_stride: usize,
}

fn block_pass(
    ctx: &PassCtx<'_>,
    w: &mut Worker,
    rays: &[TrainRay],
    rng: &mut ChaCha8Rng,
) -> Result<BlockOut> {
    let mut out = BlockOut {
        photometric: 0.0,
        distortion: 0.0,
        opacity: 0.0,
        l1_sum: 0.0,
        points: 0,
        grads: DecoderGrads::zeros(ctx.field.branch),
        records: Vec::new(),
    };
    let has_aux = ctx.field.branch.aux.is_some();
    for r in rays {
        march_ray(
            &r.ray,
            Some(ctx.grid),
            ctx.step,
            Some(&mut *rng),
            &mut w.samples,
        );
        let (records, l1_sum, points) = (&mut out.records, &mut out.l1_sum, &mut out.points);
        let terms = ray_pass(
            &ctx.field,
            &r.ray,
            &w.samples,
            ctx.bounds,
            r.t,
            r.target,
            ctx.background,
            &ctx.loss,
            ctx.batch,
            &mut w.ray,
            &mut out.grads,
            |tr, d_fused| {
                records.extend_from_slice(&tr.x);
                records.extend_from_slice(d_fused);
                if has_aux {
                    for a in &tr.aux_feat {
                        *l1_sum += a.abs() as f64;
                        records.push(if *a > 0.0 {
                            1.0
                        } else if *a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        });
                    }
                }
                *points += 1;
            },
        )?;
        debug_assert_eq!(out.records.len() % ctx.record_stride, 0);
        out.photometric += terms.photometric;
        out.distortion += terms.distortion;
        out.opacity += terms.opacity;
    }
    Ok(out)
}

fn abort(chunk: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Numerical { stage, detail } => Error::TrainingAborted {
            chunk,
            step,
            detail: format!("{stage}: {detail}"),
        },
        Error::NonFiniteGradient { index } => Error::TrainingAborted {
            chunk,
            step,
            detail: format!("non-finite gradient at parameter {index}"),
        },
        other => other,
    }
}

/// Refreshes the occupancy grid from a field at chunk-local times.
pub fn refresh_occupancy(
    grid: &mut OccupancyGrid,
    field: &Field<'_, f32>,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    crate::renderer::update_occupancy(
        grid,
        |points, times| {
            points
                .par_chunks(512)
                .zip(times.par_chunks(512))
                .map_init(FieldScratch::default, |s, (ps, ts)| {
                    ps.iter()
                        .zip(ts)
                        .map(|(p, &t)| {
                            let x = [p[0] as f32, p[1] as f32, p[2] as f32];
                            field.forward_density(x, Some(t as f32), s).map(f64::from)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<Vec<f64>>>>()
                .map(|v| v.concat())
        },
        step,
        rng,
    )
}

/// Trains `branch` on one chunk for `iterations` steps. The base encoder is
/// updated only for branch 0; later branches read it but never write it.
pub fn train_branch(
    base: &mut SpatialEncoder<f32>,
    branch: &mut Branch<f32>,
    grid: &mut OccupancyGrid,
    inputs: TrainInputs<'_>,
    config: &TrainConfig,
    iterations: usize,
    mut on_step: Option<&mut (dyn FnMut(&StepRecord) + '_)>,
) -> Result<BranchMetrics> {
    let k = branch.index;
    let mut metrics = BranchMetrics {
        chunk: k,
        iterations,
        records: Vec::with_capacity(iterations),
    };
    if iterations == 0 {
        return Ok(metrics);
    }
    let bounds = *grid.bounds();
    let sampler =
        ImportanceSampler::new(&inputs.chunk.images, inputs.views, config.importance_floor)?;
    let mut sample_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SAMPLER, k as u64]));
    let mut grid_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_GRID, k as u64]));
    let n_local = inputs.chunk.frames.len();
    let train_base = k == 0;
    let lf = base.width();
    let fusion = config.field.fusion;
    let fw = match fusion {
        FusionMode::Sum => lf,
        FusionMode::Concat => 2 * lf,
    };
    let record_stride = 3 + fw + if branch.aux.is_some() { lf } else { 0 };

    let mut base_grads = base.zero_grads();
    let mut base_adam: Vec<AdamState<f32>> = match train_base {
        true => base_grads
            .iter()
            .map(|g| AdamState::new(g.len(), config.adam))
            .collect(),
        false => Vec::new(),
    };
    let mut aux_grads = branch
        .aux
        .as_ref()
        .map(|a| a.zero_grads())
        .unwrap_or_default();
    let mut branch_adam: Vec<AdamState<f32>> = branch
        .block_lens()
        .iter()
        .map(|&n| AdamState::new(n, config.adam))
        .collect();
    let mut dec = DecoderGrads::zeros(branch);
    let step_len = bounds.diagonal() / config.steps_per_diagonal as f64;
    // The grid is shared by every branch, so cells occupied by earlier
    // chunks must stay occupied while this chunk decays its own cells.
    let grid_floor = (k > 0).then(|| grid.density().to_vec());

    for step in 0..iterations {
        if step % config.occupancy_interval == 0 {
            let field = Field::new(&*base, &*branch, fusion);
            refresh_occupancy(grid, &field, step, &mut grid_rng).map_err(|e| abort(k, step, e))?;
            if let Some(floor) = &grid_floor {
                grid.raise_to(floor)?;
            }
        }
        let picks = sampler.sample(config.batch_rays, &mut sample_rng);
        let mut rays = Vec::with_capacity(picks.len());
        for p in &picks {
            let cam = inputs
                .cameras
                .get(p.view)
                .ok_or_else(|| Error::contract(format!("no camera for view {}", p.view)))?;
            let ray = generate_rays(cam, &[p.pixel], &bounds)?[0];
            let px = inputs.chunk.images[p.local_frame][p.view].pixel(p.pixel.0, p.pixel.1);
            let t = if n_local > 1 {
                p.local_frame as f32 / (n_local - 1) as f32
            } else {
                0.0
            };
            rays.push(TrainRay {
                ray,
                target: [px[0] as f64, px[1] as f64, px[2] as f64],
                t,
            });
        }
        let blocks: Vec<BlockOut> = {
            let ctx = PassCtx {
                field: Field::new(&*base, &*branch, fusion),
                grid: &*grid,
                bounds: &bounds,
                step: step_len,
                batch: rays.len() as f64,
                loss: config.loss,
                background: config.background,
                record_stride,
            };
            rays.par_chunks(config.block_rays)
                .enumerate()
                .map_init(Worker::default, |w, (b, chunk)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed,
                        &[TAG_JITTER, k as u64, step as u64, b as u64],
                    ));
                    block_pass(&ctx, w, chunk, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| abort(k, step, e))?
        };

        let nb = rays.len() as f64;
        let points: usize = blocks.iter().map(|b| b.points).sum();
        let mut terms = LossTerms::default();
        for b in &blocks {
            terms.photometric += b.photometric;
            terms.distortion += b.distortion;
            terms.opacity += b.opacity;
            terms.l1 += b.l1_sum;
        }
        terms.photometric /= nb;
        terms.distortion /= nb;
        terms.opacity /= nb;
        terms.l1 = if points > 0 {
            terms.l1 / points as f64
        } else {
            0.0
        };
        let total = total_loss(&terms, &config.loss);
        if !terms.is_finite() || !total.is_finite() {
            return Err(Error::TrainingAborted {
                chunk: k,
                step,
                detail: format!(
                    "non-finite loss: photometric {}, distortion {}, opacity {}, l1 {}",
                    terms.photometric, terms.distortion, terms.opacity, terms.l1
                ),
            });
        }

        dec.clear();
        base_grads.iter_mut().for_each(|g| g.fill(0.0));
        aux_grads.iter_mut().for_each(|g| g.fill(0.0));
        let l1_scale = if points > 0 {
            (config.loss.lambda_r / points as f64) as f32
        } else {
            0.0
        };
        let mut g_aux = vec![0.0f32; lf];
        for b in &blocks {
            dec.add(&b.grads);
            for rec in b.records.chunks_exact(record_stride) {
                let x = &rec[..3];
                let d_fused = &rec[3..3 + fw];
                if train_base {
                    base.accumulate_grad(x, &d_fused[..lf], &mut base_grads);
                }
                if let Some(aux) = branch.aux.as_ref() {
                    let d = match fusion {
                        FusionMode::Sum => &d_fused[..lf],
                        FusionMode::Concat => &d_fused[lf..],
                    };
                    let sign = &rec[3 + fw..];
                    for i in 0..lf {
                        g_aux[i] = d[i] + l1_scale * sign[i];
                    }
                    aux.accumulate_grad(x, &g_aux, &mut aux_grads);
                }
            }
        }

        let lr = cosine_lr(step, iterations, config.lr)?;
        if train_base {
            for ((t, g), a) in base
                .tables_mut()
                .into_iter()
                .zip(&base_grads)
                .zip(&mut base_adam)
            {
                a.step(t.data_mut(), g, lr).map_err(|e| abort(k, step, e))?;
            }
        }
        let mut grads: Vec<&[f32]> = aux_grads.iter().map(Vec::as_slice).collect();
        if branch.temporal.params().is_some() {
            grads.push(&dec.temporal);
        }
        grads.push(&dec.theta1);
        grads.push(&dec.theta2);
        for ((p, g), a) in branch
            .blocks_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut branch_adam)
        {
            a.step(p, g, lr).map_err(|e| abort(k, step, e))?;
        }

        let rec = StepRecord {
            chunk: k,
            step,
            lr,
            terms,
            total,
            samples: points,
        };
        if let Some(f) = on_step.as_deref_mut() {
            f(&rec);
        }
        metrics.records.push(rec);
    }
    Ok(metrics)
}

/// Callbacks and persistence for [`run_continual_with`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Save a checkpoint here after every chunk.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `checkpoint_dir` if one exists.
    pub resume: bool,
    /// Stop after this many chunks have been trained in total.
    pub stop_after: Option<usize>,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
    pub after_chunk: Option<&'a mut dyn FnMut(&ModelRepo, &BranchMetrics) -> Result<()>>,
}

/// Outcome of a continual run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub repo: ModelRepo,
    pub metrics: Vec<BranchMetrics>,
    /// Largest number of decoded timestamps ever resident.
    pub peak_resident_frames: usize,
}

pub fn run_continual(dataset: &SceneDataset, config: &TrainConfig) -> Result<ModelRepo> {
    Ok(run_continual_with(dataset, config, RunOptions::default())?.repo)
}

/// Trains chunk after chunk, holding only the current chunk's frames.
pub fn run_continual_with(
    dataset: &SceneDataset,
    config: &TrainConfig,
    mut opts: RunOptions<'_>,
) -> Result<RunSummary> {
    config.validate()?;
    let resumed = match (&opts.checkpoint_dir, opts.resume) {
        (Some(dir), true) if dir.join("manifest.json").is_file() => {
            let repo = crate::checkpoint::load_checkpoint(dir)?;
            if repo.config != *config {
                return Err(Error::config(
                    "checkpoint was trained with a different configuration",
                ));
            }
            Some(repo)
        }
        _ => None,
    };
    let mut repo = match resumed {
        Some(r) => r,
        None => {
            let mut r = ModelRepo::new(config.clone(), dataset.n_frames(), *dataset.bounds())?;
            r.provenance.dataset_sha256 = Some(sha256_hex(
                &serde_json::to_vec(dataset.manifest()).unwrap_or_default(),
            ));
            r
        }
    };
    if repo.schedule.n_frames != dataset.n_frames() {
        return Err(Error::config(
            "checkpoint schedule does not match the dataset frame count",
        ));
    }
    let views = dataset.training_views();
    let mut metrics = Vec::new();
    let start = repo.completed_chunks();
    let end = opts
        .stop_after
        .unwrap_or(usize::MAX)
        .min(repo.schedule.n_chunks());
    for k in start..end {
        let range = repo.schedule.chunk(k);
        let chunk = dataset.load_chunk(range)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_BRANCH, k as u64]));
        let prev = k.checked_sub(1).and_then(|p| repo.branches.get(&p));
        let (mut branch, iterations) = init_branch(
            k,
            &repo.schedule,
            prev,
            config,
            InitPolicy::Schedule,
            &mut rng,
        )?;
        let inputs = TrainInputs {
            chunk: &chunk,
            cameras: dataset.cameras(),
            views: &views,
        };
        let m = train_branch(
            &mut repo.base,
            &mut branch,
            &mut repo.grid,
            inputs,
            config,
            iterations,
            opts.on_step.as_deref_mut(),
        )?;
        drop(chunk);
        repo.branches.insert(k, branch);
        if config.snapshot_grids {
            repo.grid_snapshots.insert(k, repo.grid.clone());
        }
        if let Some(dir) = &opts.checkpoint_dir {
            crate::checkpoint::save_checkpoint(&repo, dir)?;
        }
        if let Some(f) = opts.after_chunk.as_deref_mut() {
            f(&repo, &m)?;
        }
        metrics.push(m);
    }
    let peak = dataset.monitor().peak();
    if peak > repo.schedule.t_chunk {
        return Err(Error::contract(format!(
            "{peak} frames were resident at once, more than T_chunk = {}",
            repo.schedule.t_chunk
        )));
    }
    Ok(RunSummary {
        repo,
        metrics,
        peak_resident_frames: peak,
    })
}
