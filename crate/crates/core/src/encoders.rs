//! Multiresolution hash encoders: 3-D voxel grids, 2-D planes, the hybrid
//! voxel+plane layout, the 1-D temporal axis and the 4-D space-time grid.
//!
//! Every encoder stores `L` levels. Level `l` has resolution `N_l` (so
//! `N_l + 1` vertices per axis) and `min((N_l+1)^dims, 2^P)` rows of `F`
//! features. Small levels are indexed densely; larger ones through a spatial
//! hash. Features are multilinearly interpolated from the `2^dims` corners of
//! the enclosing cell and concatenated coarse to fine.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Hash primes per axis (the first axis is not scrambled).
pub const HASH_PRIMES: [u64; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Half-width of the uniform table initialization.
pub const TABLE_INIT_SCALE: f64 = 1e-4;

const MAX_CORNERS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dims: usize,
    pub levels: usize,
    pub features: usize,
    pub log2_table_len: u32,
    pub n_min: u32,
    pub n_max: u32,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.dims) {
            return Err(Error::config(format!(
                "encoder dims {} not in 1..=4",
                self.dims
            )));
        }
        if self.levels == 0 || self.features == 0 {
            return Err(Error::config(
                "encoder needs at least one level and one feature",
            ));
        }
        if !(4..=24).contains(&self.log2_table_len) {
            return Err(Error::config(format!(
                "log2 table length {} not in [4, 24]",
                self.log2_table_len
            )));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::config(format!(
                "invalid resolution range ({}, {})",
                self.n_min, self.n_max
            )));
        }
        if self.levels < 2 && self.n_min != self.n_max {
            return Err(Error::config(
                "a resolution range needs at least two levels",
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.levels * self.features
    }

    pub fn with_log2(mut self, log2_table_len: u32) -> Self {
        self.log2_table_len = log2_table_len;
        self
    }

    pub fn with_dims(mut self, dims: usize) -> Self {
        self.dims = dims;
        self
    }
}

/// Geometric level schedule `N_l = floor(n_min * b^l)` with the endpoints
/// pinned to `n_min` and `n_max`.
pub fn level_resolutions(config: &EncoderConfig) -> Vec<u32> {
    let l = config.levels;
    if l == 1 {
        return vec![config.n_min];
    }
    let (lo, hi) = (config.n_min as f64, config.n_max as f64);
    let growth = ((hi.ln() - lo.ln()) / (l - 1) as f64).exp();
    (0..l)
        .map(|i| {
            if i == 0 {
                config.n_min
            } else if i == l - 1 {
                config.n_max
            } else {
                // Guard against b^l landing a hair below an integer.
                (lo * growth.powi(i as i32) * (1.0 + 1e-12)).floor() as u32
            }
        })
        .collect()
}

fn vertex_count(res: u32, dims: usize) -> u64 {
    (res as u64 + 1).saturating_pow(dims as u32)
}

/// Rows stored for a level: `min((N+1)^dims, 2^P)`.
pub fn level_entry_count(res: u32, dims: usize, log2_table_len: u32) -> usize {
    vertex_count(res, dims).min(1u64 << log2_table_len) as usize
}

pub fn level_entries(config: &EncoderConfig) -> Vec<usize> {
    level_resolutions(config)
        .into_iter()
        .map(|n| level_entry_count(n, config.dims, config.log2_table_len))
        .collect()
}

#[inline(always)]
fn index_unchecked(coords: &[u32], res: u32, log2_table_len: u32, dense: bool) -> usize {
    if dense {
        let stride = res as usize + 1;
        let mut idx = 0usize;
        for &c in coords.iter().rev() {
            idx = idx * stride + c as usize;
        }
        idx
    } else {
        let mut h = 0u64;
        for (c, p) in coords.iter().zip(HASH_PRIMES) {
            h ^= (*c as u64).wrapping_mul(p);
        }
        (h & ((1u64 << log2_table_len) - 1)) as usize
    }
}

/// Table row of a grid vertex: dense row-major (first axis fastest) when the
/// level fits in `2^P` rows, otherwise the XOR-prime spatial hash.
pub fn hash_index(coords: &[u32], res: u32, log2_table_len: u32, dims: usize) -> Result<usize> {
    if coords.len() != dims || !(1..=4).contains(&dims) {
        return Err(Error::contract(format!(
            "expected {dims} coordinates, got {}",
            coords.len()
        )));
    }
    if let Some(c) = coords.iter().find(|&&c| c > res) {
        return Err(Error::contract(format!(
            "grid coordinate {c} exceeds resolution {res}"
        )));
    }
    let dense = vertex_count(res, dims) <= 1u64 << log2_table_len;
    Ok(index_unchecked(coords, res, log2_table_len, dense))
}

/// Interpolation stencil of one level: value offsets of the corner rows and
/// their multilinear weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil<R> {
    pub offsets: [usize; MAX_CORNERS],
    pub weights: [R; MAX_CORNERS],
    pub len: usize,
}

/// Parameter tables of one multiresolution encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTables<R> {
    config: EncoderConfig,
    resolutions: Vec<u32>,
    entries: Vec<usize>,
    /// Value offset (not row offset) of each level's first row.
    offsets: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> EncoderTables<R> {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let resolutions = level_resolutions(&config);
        let entries: Vec<usize> = resolutions
            .iter()
            .map(|&n| level_entry_count(n, config.dims, config.log2_table_len))
            .collect();
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for e in &entries {
            offsets.push(total);
            total += e * config.features;
        }
        Ok(Self {
            config,
            resolutions,
            entries,
            offsets,
            data: vec![R::zero(); total],
        })
    }

    /// Uniform in `[-1e-4, 1e-4]`.
    pub fn init<G: Rng>(config: EncoderConfig, rng: &mut G) -> Result<Self> {
        let mut t = Self::zeros(config)?;
        for v in &mut t.data {
            *v = R::of(rng.gen_range(-TABLE_INIT_SCALE..TABLE_INIT_SCALE));
        }
        Ok(t)
    }

    pub fn from_data(config: EncoderConfig, data: Vec<R>) -> Result<Self> {
        let mut t = Self::zeros(config)?;
        if data.len() != t.data.len() {
            return Err(Error::config(format!(
                "encoder needs {} values, got {}",
                t.data.len(),
                data.len()
            )));
        }
        t.data = data;
        Ok(t)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn width(&self) -> usize {
        self.config.width()
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    /// Mutable view of the feature row of `row` at `level`.
    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [R] {
        let f = self.config.features;
        let start = self.offsets[level] + row * f;
        &mut self.data[start..start + f]
    }

    pub fn row(&self, level: usize, row: usize) -> &[R] {
        let f = self.config.features;
        let start = self.offsets[level] + row * f;
        &self.data[start..start + f]
    }

    /// Interpolation stencil at `point` (already clamped to `[0,1]^dims`).
    #[inline]
    pub fn stencil(&self, level: usize, point: &[R]) -> Stencil<R> {
        let dims = self.config.dims;
        let res = self.resolutions[level];
        let dense = self.entries[level] as u64 == vertex_count(res, dims);
        let mut cell = [0u32; 4];
        let mut frac = [R::zero(); 4];
        let n = R::of(res as f64);
        for d in 0..dims {
            let pos = point[d] * n;
            let c = pos.floor().to_u32().unwrap_or(0).min(res - 1);
            cell[d] = c;
            frac[d] = pos - R::of(c as f64);
        }
        let corners = 1usize << dims;
        let mut st = Stencil {
            offsets: [0; MAX_CORNERS],
            weights: [R::zero(); MAX_CORNERS],
            len: corners,
        };
        let base = self.offsets[level];
        let f = self.config.features;
        let mut coords = [0u32; 4];
        for corner in 0..corners {
            let mut w = R::one();
            for d in 0..dims {
                if corner >> d & 1 == 1 {
                    coords[d] = cell[d] + 1;
                    w *= frac[d];
                } else {
                    coords[d] = cell[d];
                    w *= R::one() - frac[d];
                }
            }
            let row = index_unchecked(&coords[..dims], res, self.config.log2_table_len, dense);
            st.offsets[corner] = base + row * f;
            st.weights[corner] = w;
        }
        st
    }

    /// Writes the `L*F` encoding of `point` into `out`; returns true when the
    /// point had to be clamped into the unit cube.
    pub fn encode_into(&self, point: &[R], out: &mut [R]) -> bool {
        out[..self.width()].fill(R::zero());
        self.encode_accumulate(point, out)
    }

    /// Adds the encoding of `point` into `out`.
    pub fn encode_accumulate(&self, point: &[R], out: &mut [R]) -> bool {
        let (p, clamped) = clamp_point(point, self.config.dims);
        let f = self.config.features;
        for level in 0..self.config.levels {
            let st = self.stencil(level, &p);
            let dst = &mut out[level * f..(level + 1) * f];
            for c in 0..st.len {
                let w = st.weights[c];
                if w == R::zero() {
                    continue;
                }
                let row = &self.data[st.offsets[c]..st.offsets[c] + f];
                for (o, v) in dst.iter_mut().zip(row) {
                    *o += w * *v;
                }
            }
        }
        clamped
    }

    pub fn encode(&self, point: &[R]) -> Vec<R> {
        let mut out = vec![R::zero(); self.width()];
        self.encode_into(point, &mut out);
        out
    }

    /// Adjoint of [`encode_into`](Self::encode_into): scatter-adds the
    /// interpolation-weighted `grad_feature` into a dense gradient buffer
    /// laid out like the table data.
    pub fn accumulate_grad(&self, point: &[R], grad_feature: &[R], grads: &mut [R]) {
        let (p, _) = clamp_point(point, self.config.dims);
        let f = self.config.features;
        for level in 0..self.config.levels {
            let g = &grad_feature[level * f..(level + 1) * f];
            if g.iter().all(|v| *v == R::zero()) {
                continue;
            }
            let st = self.stencil(level, &p);
            for c in 0..st.len {
                let w = st.weights[c];
                if w == R::zero() {
                    continue;
                }
                let dst = &mut grads[st.offsets[c]..st.offsets[c] + f];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += w * *gv;
                }
            }
        }
    }
}

#[inline]
fn clamp_point<R: Real>(point: &[R], dims: usize) -> ([R; 4], bool) {
    let mut p = [R::zero(); 4];
    let mut clamped = false;
    for d in 0..dims {
        let v = point[d];
        let c = if v.is_nan() {
            R::zero()
        } else {
            v.max(R::zero()).min(R::one())
        };
        clamped |= c != v;
        p[d] = c;
    }
    (p, clamped)
}

/// Sparse gradient of one encoder's tables: sorted unique value offsets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseTableGrad<R> {
    pub entries: Vec<(usize, R)>,
}

impl<R: Real> SparseTableGrad<R> {
    pub fn scatter_into(&self, dense: &mut [R]) {
        for &(i, v) in &self.entries {
            dense[i] += v;
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<R> {
        let mut d = vec![R::zero(); len];
        self.scatter_into(&mut d);
        d
    }
}

pub fn encode<R: Real>(tables: &EncoderTables<R>, point: &[R]) -> Vec<R> {
    tables.encode(point)
}

/// Exact adjoint of [`encode`] as a sparse gradient. Colliding rows are merged
/// by key so the result does not depend on corner visiting order.
pub fn encoder_backward<R: Real>(
    tables: &EncoderTables<R>,
    point: &[R],
    grad_feature: &[R],
) -> Result<SparseTableGrad<R>> {
    if grad_feature.len() != tables.width() {
        return Err(Error::contract(format!(
            "grad_feature length {} != {}",
            grad_feature.len(),
            tables.width()
        )));
    }
    let (p, _) = clamp_point(point, tables.config.dims);
    let f = tables.config.features;
    let mut acc: BTreeMap<usize, R> = BTreeMap::new();
    for level in 0..tables.config.levels {
        let g = &grad_feature[level * f..(level + 1) * f];
        if g.iter().all(|v| *v == R::zero()) {
            continue;
        }
        let st = tables.stencil(level, &p);
        for c in 0..st.len {
            if st.weights[c] == R::zero() {
                continue;
            }
            for (k, gv) in g.iter().enumerate() {
                *acc.entry(st.offsets[c] + k).or_insert(R::zero()) += st.weights[c] * *gv;
            }
        }
    }
    Ok(SparseTableGrad {
        entries: acc.into_iter().collect(),
    })
}

/// Three axis-aligned 2-D encoders summed per level.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTables<R> {
    pub xy: EncoderTables<R>,
    pub yz: EncoderTables<R>,
    pub zx: EncoderTables<R>,
}

#[inline]
fn plane_points<R: Real>(p: &[R]) -> [[R; 2]; 3] {
    [[p[0], p[1]], [p[1], p[2]], [p[2], p[0]]]
}

impl<R: Real> PlaneTables<R> {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        let c = config.with_dims(2);
        Ok(Self {
            xy: EncoderTables::zeros(c)?,
            yz: EncoderTables::zeros(c)?,
            zx: EncoderTables::zeros(c)?,
        })
    }

    pub fn init<G: Rng>(config: EncoderConfig, rng: &mut G) -> Result<Self> {
        let c = config.with_dims(2);
        Ok(Self {
            xy: EncoderTables::init(c, rng)?,
            yz: EncoderTables::init(c, rng)?,
            zx: EncoderTables::init(c, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.xy.width()
    }

    pub fn encode_accumulate(&self, point: &[R], out: &mut [R]) -> bool {
        let pts = plane_points(point);
        let a = self.xy.encode_accumulate(&pts[0], out);
        let b = self.yz.encode_accumulate(&pts[1], out);
        let c = self.zx.encode_accumulate(&pts[2], out);
        a | b | c
    }

    pub fn tables(&self) -> [&EncoderTables<R>; 3] {
        [&self.xy, &self.yz, &self.zx]
    }

    pub fn tables_mut(&mut self) -> [&mut EncoderTables<R>; 3] {
        [&mut self.xy, &mut self.yz, &mut self.zx]
    }
}

/// `Q_xy(x,y) + Q_yz(y,z) + Q_zx(z,x)` per level, concatenated over levels.
pub fn encode_plane<R: Real>(
    xy: &EncoderTables<R>,
    yz: &EncoderTables<R>,
    zx: &EncoderTables<R>,
    point: &[R],
) -> Result<Vec<R>> {
    let w = xy.width();
    if yz.width() != w || zx.width() != w || [xy, yz, zx].iter().any(|t| t.config.dims != 2) {
        return Err(Error::config("plane tables must be 2-D with equal widths"));
    }
    let pts = plane_points(point);
    let mut out = vec![R::zero(); w];
    xy.encode_accumulate(&pts[0], &mut out);
    yz.encode_accumulate(&pts[1], &mut out);
    zx.encode_accumulate(&pts[2], &mut out);
    Ok(out)
}

/// Voxel term plus the three plane terms, per level.
pub fn encode_merf<R: Real>(
    voxel: &EncoderTables<R>,
    planes: &PlaneTables<R>,
    point: &[R],
) -> Result<Vec<R>> {
    if voxel.config.dims != 3 || voxel.width() != planes.width() {
        return Err(Error::config(
            "hybrid layout needs a 3-D voxel encoder matching the plane width",
        ));
    }
    let mut out = voxel.encode(point);
    planes.encode_accumulate(point, &mut out);
    Ok(out)
}

pub fn encode_temporal<R: Real>(tables: &EncoderTables<R>, t: R) -> Result<Vec<R>> {
    if tables.config.dims != 1 {
        return Err(Error::config("temporal encoder must be 1-D"));
    }
    Ok(tables.encode(&[t]))
}

pub fn encode_4d<R: Real>(tables: &EncoderTables<R>, point: &[R], t: R) -> Result<Vec<R>> {
    if tables.config.dims != 4 {
        return Err(Error::config("space-time encoder must be 4-D"));
    }
    Ok(tables.encode(&[point[0], point[1], point[2], t]))
}

/// Spatial encoder arrangement of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// 3-D voxel hash grid.
    Voxel,
    /// Three 2-D planes at `2^(P-2)` rows each.
    Plane,
    /// Voxel grid at `2^(P-3)` plus planes at `2^(P-4)`.
    Merf,
    /// Voxel spatial grid; the temporal encoder is a 4-D space-time grid.
    #[serde(rename = "4d")]
    Voxel4d,
}

impl Layout {
    pub fn name(&self) -> &'static str {
        match self {
            Layout::Voxel => "voxel",
            Layout::Plane => "plane",
            Layout::Merf => "merf",
            Layout::Voxel4d => "4d",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(Layout::Voxel),
            "plane" => Ok(Layout::Plane),
            "merf" => Ok(Layout::Merf),
            "4d" => Ok(Layout::Voxel4d),
            other => Err(Error::config(format!("unknown layout `{other}`"))),
        }
    }
}

/// Spatial encoder of a branch (base `Ψ_0` or auxiliary `Ψ_k`).
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialEncoder<R> {
    Voxel(EncoderTables<R>),
    Plane(PlaneTables<R>),
    Merf {
        voxel: EncoderTables<R>,
        planes: PlaneTables<R>,
    },
}

/// Table configurations for a layout whose nominal voxel table length is `2^P`.
pub fn layout_table_configs(
    layout: Layout,
    base: EncoderConfig,
    log2: u32,
) -> Result<Vec<EncoderConfig>> {
    let sub = |d: u32| {
        log2.checked_sub(d).ok_or_else(|| {
            Error::config(format!(
                "log2 table length {log2} too small for {}",
                layout.name()
            ))
        })
    };
    let v = base.with_dims(3);
    let p = base.with_dims(2);
    Ok(match layout {
        Layout::Voxel | Layout::Voxel4d => vec![v.with_log2(log2)],
        Layout::Plane => vec![p.with_log2(sub(2)?); 3],
        Layout::Merf => vec![
            v.with_log2(sub(3)?),
            p.with_log2(sub(4)?),
            p.with_log2(sub(4)?),
            p.with_log2(sub(4)?),
        ],
    })
}

impl<R: Real> SpatialEncoder<R> {
    fn build(
        layout: Layout,
        base: EncoderConfig,
        log2: u32,
        mut make: impl FnMut(EncoderConfig) -> Result<EncoderTables<R>>,
    ) -> Result<Self> {
        let cfgs = layout_table_configs(layout, base, log2)?;
        Ok(match layout {
            Layout::Voxel | Layout::Voxel4d => SpatialEncoder::Voxel(make(cfgs[0])?),
            Layout::Plane => SpatialEncoder::Plane(PlaneTables {
                xy: make(cfgs[0])?,
                yz: make(cfgs[1])?,
                zx: make(cfgs[2])?,
            }),
            Layout::Merf => SpatialEncoder::Merf {
                voxel: make(cfgs[0])?,
                planes: PlaneTables {
                    xy: make(cfgs[1])?,
                    yz: make(cfgs[2])?,
                    zx: make(cfgs[3])?,
                },
            },
        })
    }

    pub fn zeros(layout: Layout, base: EncoderConfig, log2: u32) -> Result<Self> {
        Self::build(layout, base, log2, EncoderTables::zeros)
    }

    pub fn init<G: Rng>(
        layout: Layout,
        base: EncoderConfig,
        log2: u32,
        rng: &mut G,
    ) -> Result<Self> {
        Self::build(layout, base, log2, |c| EncoderTables::init(c, rng))
    }

    pub fn width(&self) -> usize {
        match self {
            SpatialEncoder::Voxel(t) => t.width(),
            SpatialEncoder::Plane(p) => p.width(),
            SpatialEncoder::Merf { voxel, .. } => voxel.width(),
        }
    }

    pub fn encode_into(&self, point: &[R], out: &mut [R]) -> bool {
        out[..self.width()].fill(R::zero());
        match self {
            SpatialEncoder::Voxel(t) => t.encode_accumulate(point, out),
            SpatialEncoder::Plane(p) => p.encode_accumulate(point, out),
            SpatialEncoder::Merf { voxel, planes } => {
                voxel.encode_accumulate(point, out) | planes.encode_accumulate(point, out)
            }
        }
    }

    pub fn encode(&self, point: &[R]) -> Vec<R> {
        let mut out = vec![R::zero(); self.width()];
        self.encode_into(point, &mut out);
        out
    }

    /// Tables in a fixed order (voxel first, then xy, yz, zx planes).
    pub fn tables(&self) -> Vec<&EncoderTables<R>> {
        match self {
            SpatialEncoder::Voxel(t) => vec![t],
            SpatialEncoder::Plane(p) => p.tables().to_vec(),
            SpatialEncoder::Merf { voxel, planes } => {
                let mut v = vec![voxel];
                v.extend(planes.tables());
                v
            }
        }
    }

    pub fn tables_mut(&mut self) -> Vec<&mut EncoderTables<R>> {
        match self {
            SpatialEncoder::Voxel(t) => vec![t],
            SpatialEncoder::Plane(p) => p.tables_mut().into_iter().collect(),
            SpatialEncoder::Merf { voxel, planes } => {
                let mut v = vec![voxel];
                v.extend(planes.tables_mut());
                v
            }
        }
    }

    /// Scatter-adds the adjoint into per-table dense buffers (same order as
    /// [`tables`](Self::tables)).
    pub fn accumulate_grad(&self, point: &[R], grad_feature: &[R], grads: &mut [Vec<R>]) {
        match self {
            SpatialEncoder::Voxel(t) => t.accumulate_grad(point, grad_feature, &mut grads[0]),
            SpatialEncoder::Plane(p) => {
                for (i, (t, q)) in p.tables().into_iter().zip(plane_points(point)).enumerate() {
                    t.accumulate_grad(&q, grad_feature, &mut grads[i]);
                }
            }
            SpatialEncoder::Merf { voxel, planes } => {
                voxel.accumulate_grad(point, grad_feature, &mut grads[0]);
                for (i, (t, q)) in planes
                    .tables()
                    .into_iter()
                    .zip(plane_points(point))
                    .enumerate()
                {
                    t.accumulate_grad(&q, grad_feature, &mut grads[i + 1]);
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tables().iter().map(|t| t.param_count()).sum()
    }

    /// Parameters in 3-D tables vs 2-D tables.
    pub fn param_split(&self) -> (usize, usize) {
        let mut split = (0, 0);
        for t in self.tables() {
            match t.config().dims {
                2 => split.1 += t.param_count(),
                _ => split.0 += t.param_count(),
            }
        }
        split
    }

    pub fn zero_grads(&self) -> Vec<Vec<R>> {
        self.tables()
            .iter()
            .map(|t| vec![R::zero(); t.param_count()])
            .collect()
    }
}
