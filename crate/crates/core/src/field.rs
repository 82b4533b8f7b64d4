//! Per-branch field function.
//!
//! A branch maps a normalized point `x ∈ [0,1]^3`, a branch-local time
//! `t ∈ [0,1]` and a view direction to a density and a color:
//!
//! ```text
//! (σ, H) = f_θ1(fuse(Ψ_0(x), Ψ_k(x)) ⊕ Γ_k(t))
//! c      = f_θ2(H ⊕ SH(d))
//! ```
//!
//! Density uses an exp activation (clamped at 1e4), color a sigmoid. `H` is
//! the full output of `f_θ1`, so the raw density logit is part of the latent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, EncoderTables, Layout, SpatialEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Mlp, MlpTrace, Real};

/// Number of spherical-harmonic coefficients for four bands (l = 0..3).
pub const SH_COEFFS: usize = 16;
pub const SIGMA_MAX: f64 = 1e4;
/// Sinusoid octaves of the frequency time encoding.
pub const FREQ_BANDS: usize = 8;
/// Width of the learned layer after the frequency time encoding.
pub const FREQ_MLP_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Sum,
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionMode::Sum),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// How time is fed to the density network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    /// 1-D multiresolution hash grid.
    Hash,
    /// Fixed sinusoids `sin(2^i π t), cos(2^i π t)`, no parameters.
    Freq,
    /// Sinusoids followed by one learned linear layer.
    FreqMlp,
}

impl std::str::FromStr for TemporalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(TemporalKind::Hash),
            "freq" => Ok(TemporalKind::Freq),
            "freq_mlp" => Ok(TemporalKind::FreqMlp),
            other => Err(Error::config(format!(
                "unknown temporal encoding `{other}`"
            ))),
        }
    }
}

pub fn fuse_features<R: Real>(base: &[R], aux: &[R], mode: FusionMode) -> Result<Vec<R>> {
    match mode {
        FusionMode::Sum => {
            if base.len() != aux.len() {
                return Err(Error::config(format!(
                    "cannot sum features of length {} and {}",
                    base.len(),
                    aux.len()
                )));
            }
            Ok(base.iter().zip(aux).map(|(a, b)| *a + *b).collect())
        }
        FusionMode::Concat => Ok(base.iter().chain(aux).copied().collect()),
    }
}

/// Real spherical harmonics, bands 0..=3, in the usual `(l, m)` order.
/// Non-unit inputs are normalized; the flag reports that it happened.
pub fn encode_direction<R: Real>(d: [R; 3]) -> ([R; SH_COEFFS], bool) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let flagged = (n - R::one()).abs() > R::of(1e-6);
    let (x, y, z) = if n > R::zero() {
        (d[0] / n, d[1] / n, d[2] / n)
    } else {
        (R::zero(), R::zero(), R::one())
    };
    let c = |v: f64| R::of(v);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let out = [
        c(0.282_094_791_773_878_14),
        c(-0.488_602_511_902_919_9) * y,
        c(0.488_602_511_902_919_9) * z,
        c(-0.488_602_511_902_919_9) * x,
        c(1.092_548_430_592_079_2) * x * y,
        c(-1.092_548_430_592_079_2) * y * z,
        c(0.946_174_695_757_56) * zz - c(0.315_391_565_252_52),
        c(-1.092_548_430_592_079_2) * x * z,
        c(0.546_274_215_296_039_6) * (xx - yy),
        c(0.590_043_589_926_643_5) * y * (c(-3.0) * xx + yy),
        c(2.890_611_442_640_554) * x * y * z,
        c(0.457_045_799_464_465_7) * y * (c(1.0) - c(5.0) * zz),
        c(0.373_176_332_590_115_4) * z * (c(5.0) * zz - c(3.0)),
        c(0.457_045_799_464_465_7) * x * (c(1.0) - c(5.0) * zz),
        c(1.445_305_721_320_277) * z * (xx - yy),
        c(0.590_043_589_926_643_5) * x * (-xx + c(3.0) * yy),
    ];
    (out, flagged)
}

pub fn frequency_encoding<R: Real>(t: R, out: &mut [R]) {
    let pi = R::of(std::f64::consts::PI);
    let mut scale = pi;
    for i in 0..FREQ_BANDS {
        let a = scale * t;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
        scale = scale * R::of(2.0);
    }
}

/// Shape of every branch's field network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub layout: Layout,
    pub fusion: FusionMode,
    /// Spatial encoder shape; `dims` and `log2_table_len` are set per table.
    pub spatial: EncoderConfig,
    pub temporal_kind: TemporalKind,
    /// 1-D time grid (used with [`TemporalKind::Hash`]).
    pub temporal: EncoderConfig,
    /// 4-D space-time grid (used with [`Layout::Voxel4d`]); table length is
    /// the auxiliary size of the run.
    pub space_time: EncoderConfig,
    pub hidden_sigma: usize,
    pub latent: usize,
    pub hidden_color: usize,
}

impl FieldConfig {
    /// Full-scale defaults for a layout, temporal grid resolutions `(2, t_chunk)`.
    pub fn paper(layout: Layout, t_chunk: usize) -> Self {
        let spatial = match layout {
            Layout::Plane => enc(3, 6, 4, 19, 64, 2048),
            _ => enc(3, 12, 2, 19, 16, 2048),
        };
        Self {
            layout,
            fusion: FusionMode::Sum,
            spatial,
            temporal_kind: TemporalKind::Hash,
            temporal: enc(1, 2, 20, 7, 2, (t_chunk as u32).max(2)),
            space_time: enc(4, 12, 2, 14, 16, 2048),
            hidden_sigma: 128,
            latent: 48,
            hidden_color: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut s = self.spatial.with_dims(3);
        s.log2_table_len = s.log2_table_len.clamp(4, 24);
        s.validate()?;
        if self.temporal_kind == TemporalKind::Hash && self.layout != Layout::Voxel4d {
            if self.temporal.dims != 1 {
                return Err(Error::config("temporal encoder must be 1-D"));
            }
            self.temporal.validate()?;
        }
        if self.layout == Layout::Voxel4d {
            let mut st = self.space_time.with_dims(4);
            st.log2_table_len = st.log2_table_len.clamp(4, 24);
            st.validate()?;
        }
        if self.hidden_sigma == 0 || self.latent == 0 || self.hidden_color == 0 {
            return Err(Error::config("MLP widths must be positive"));
        }
        Ok(())
    }

    pub fn spatial_width(&self) -> usize {
        self.spatial.width()
    }

    pub fn fused_width(&self) -> usize {
        match self.fusion {
            FusionMode::Sum => self.spatial_width(),
            FusionMode::Concat => 2 * self.spatial_width(),
        }
    }

    pub fn temporal_width(&self) -> usize {
        if self.layout == Layout::Voxel4d {
            return self.space_time.width();
        }
        match self.temporal_kind {
            TemporalKind::Hash => self.temporal.width(),
            TemporalKind::Freq => 2 * FREQ_BANDS,
            TemporalKind::FreqMlp => FREQ_MLP_WIDTH,
        }
    }

    pub fn theta1_widths(&self) -> Vec<usize> {
        vec![
            self.fused_width() + self.temporal_width(),
            self.hidden_sigma,
            self.latent,
        ]
    }

    pub fn theta2_widths(&self) -> Vec<usize> {
        vec![self.latent + SH_COEFFS, self.hidden_color, 3]
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

/// Time features of a branch.
#[derive(Debug, Clone, PartialEq)]
pub enum TemporalEncoder<R> {
    Hash(EncoderTables<R>),
    Freq,
    FreqMlp(Mlp<R>),
    /// 4-D grid over `(x, y, z, t)`.
    SpaceTime(EncoderTables<R>),
}

impl<R: Real> TemporalEncoder<R> {
    pub fn init<G: Rng>(config: &FieldConfig, log2_space_time: u32, rng: &mut G) -> Result<Self> {
        if config.layout == Layout::Voxel4d {
            let c = config.space_time.with_dims(4).with_log2(log2_space_time);
            return Ok(TemporalEncoder::SpaceTime(EncoderTables::init(c, rng)?));
        }
        Ok(match config.temporal_kind {
            TemporalKind::Hash => {
                TemporalEncoder::Hash(EncoderTables::init(config.temporal.with_dims(1), rng)?)
            }
            TemporalKind::Freq => TemporalEncoder::Freq,
            TemporalKind::FreqMlp => {
                TemporalEncoder::FreqMlp(Mlp::init(&[2 * FREQ_BANDS, FREQ_MLP_WIDTH], rng)?)
            }
        })
    }

    pub fn width(&self) -> usize {
        match self {
            TemporalEncoder::Hash(t) | TemporalEncoder::SpaceTime(t) => t.width(),
            TemporalEncoder::Freq => 2 * FREQ_BANDS,
            TemporalEncoder::FreqMlp(m) => m.output_width(),
        }
    }

    pub fn params(&self) -> Option<&[R]> {
        match self {
            TemporalEncoder::Hash(t) | TemporalEncoder::SpaceTime(t) => Some(t.data()),
            TemporalEncoder::Freq => None,
            TemporalEncoder::FreqMlp(m) => Some(m.params()),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut [R]> {
        match self {
            TemporalEncoder::Hash(t) | TemporalEncoder::SpaceTime(t) => Some(t.data_mut()),
            TemporalEncoder::Freq => None,
            TemporalEncoder::FreqMlp(m) => Some(m.params_mut()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().map_or(0, <[R]>::len)
    }

    fn encode_into(&self, x: &[R; 3], t: R, out: &mut [R], trace: &mut MlpTrace<R>) -> Result<()> {
        match self {
            TemporalEncoder::Hash(tab) => {
                tab.encode_into(&[t], out);
            }
            TemporalEncoder::SpaceTime(tab) => {
                tab.encode_into(&[x[0], x[1], x[2], t], out);
            }
            TemporalEncoder::Freq => frequency_encoding(t, out),
            TemporalEncoder::FreqMlp(m) => {
                let mut f = [R::zero(); 2 * FREQ_BANDS];
                frequency_encoding(t, &mut f);
                m.forward_traced(&f, trace)?;
                out[..m.output_width()].copy_from_slice(trace.output());
            }
        }
        Ok(())
    }

    fn accumulate_grad(&self, x: &[R; 3], t: R, grad: &[R], trace: &MlpTrace<R>, out: &mut [R]) {
        match self {
            TemporalEncoder::Hash(tab) => tab.accumulate_grad(&[t], grad, out),
            TemporalEncoder::SpaceTime(tab) => {
                tab.accumulate_grad(&[x[0], x[1], x[2], t], grad, out)
            }
            TemporalEncoder::Freq => {}
            TemporalEncoder::FreqMlp(m) => {
                m.backward(trace, grad, out);
            }
        }
    }
}

/// One continual-learning branch. Branch 0 owns no auxiliary tables; it
/// trains the shared base encoder instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch<R> {
    pub index: usize,
    pub aux: Option<SpatialEncoder<R>>,
    pub temporal: TemporalEncoder<R>,
    pub theta1: Mlp<R>,
    pub theta2: Mlp<R>,
}

/// A named, shaped view of one parameter block.
#[derive(Debug)]
pub struct ParamBlock<'a, R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [R],
}

pub(crate) fn table_blocks<'a, R: Real>(
    prefix: &str,
    enc: &'a SpatialEncoder<R>,
) -> Vec<ParamBlock<'a, R>> {
    enc.tables()
        .into_iter()
        .enumerate()
        .map(|(i, t)| ParamBlock {
            name: format!("{prefix}.{i}"),
            shape: vec![t.param_count() / t.config().features, t.config().features],
            data: t.data(),
        })
        .collect()
}

impl<R: Real> Branch<R> {
    /// Fresh decoders: temporal encoder and both MLPs.
    pub fn init_decoders<G: Rng>(
        config: &FieldConfig,
        log2_space_time: u32,
        rng: &mut G,
    ) -> Result<(TemporalEncoder<R>, Mlp<R>, Mlp<R>)> {
        config.validate()?;
        let temporal = TemporalEncoder::init(config, log2_space_time, rng)?;
        let theta1 = Mlp::init(&config.theta1_widths(), rng)?;
        let theta2 = Mlp::init(&config.theta2_widths(), rng)?;
        Ok((temporal, theta1, theta2))
    }

    pub fn init<G: Rng>(
        index: usize,
        config: &FieldConfig,
        log2_aux: u32,
        rng: &mut G,
    ) -> Result<Self> {
        let aux = if index == 0 {
            None
        } else {
            Some(SpatialEncoder::init(
                config.layout,
                config.spatial,
                log2_aux,
                rng,
            )?)
        };
        let (temporal, theta1, theta2) = Self::init_decoders(config, log2_aux, rng)?;
        Ok(Self {
            index,
            aux,
            temporal,
            theta1,
            theta2,
        })
    }

    /// Parameter blocks in a fixed order: aux tables, temporal, θ1, θ2.
    pub fn param_blocks(&self) -> Vec<ParamBlock<'_, R>> {
        let mut v = self
            .aux
            .as_ref()
            .map(|a| table_blocks("aux", a))
            .unwrap_or_default();
        if let Some(p) = self.temporal.params() {
            let shape = match &self.temporal {
                TemporalEncoder::Hash(t) | TemporalEncoder::SpaceTime(t) => {
                    vec![t.param_count() / t.config().features, t.config().features]
                }
                _ => vec![p.len()],
            };
            v.push(ParamBlock {
                name: "temporal".into(),
                shape,
                data: p,
            });
        }
        v.push(ParamBlock {
            name: "theta1".into(),
            shape: vec![self.theta1.params().len()],
            data: self.theta1.params(),
        });
        v.push(ParamBlock {
            name: "theta2".into(),
            shape: vec![self.theta2.params().len()],
            data: self.theta2.params(),
        });
        v
    }

    /// Mutable blocks, same order as [`param_blocks`](Self::param_blocks).
    pub fn blocks_mut(&mut self) -> Vec<&mut [R]> {
        let mut v: Vec<&mut [R]> = Vec::new();
        if let Some(a) = self.aux.as_mut() {
            v.extend(a.tables_mut().into_iter().map(|t| t.data_mut()));
        }
        if let Some(p) = self.temporal.params_mut() {
            v.push(p);
        }
        v.push(self.theta1.params_mut());
        v.push(self.theta2.params_mut());
        v
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.param_blocks().iter().map(|b| b.data.len()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.block_lens().iter().sum()
    }

    pub fn aux_param_count(&self) -> usize {
        self.aux.as_ref().map_or(0, SpatialEncoder::param_count)
    }

    /// Parameters outside the spatial tables: temporal encoder plus MLPs.
    pub fn decoder_param_count(&self) -> usize {
        self.temporal.param_count() + self.theta1.params().len() + self.theta2.params().len()
    }
}

/// Gradient buffers for one branch's decoders (temporal, θ1, θ2). Spatial
/// table gradients are handled by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads<R> {
    pub temporal: Vec<R>,
    pub theta1: Vec<R>,
    pub theta2: Vec<R>,
}

impl<R: Real> DecoderGrads<R> {
    pub fn zeros(branch: &Branch<R>) -> Self {
        Self {
            temporal: vec![R::zero(); branch.temporal.param_count()],
            theta1: vec![R::zero(); branch.theta1.params().len()],
            theta2: vec![R::zero(); branch.theta2.params().len()],
        }
    }

    pub fn clear(&mut self) {
        self.temporal.fill(R::zero());
        self.theta1.fill(R::zero());
        self.theta2.fill(R::zero());
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.temporal, &other.temporal),
            (&mut self.theta1, &other.theta1),
            (&mut self.theta2, &other.theta2),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

/// Everything recorded by a traced field query for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct SampleTrace<R> {
    pub x: [R; 3],
    pub t: R,
    /// Auxiliary spatial feature `Ψ_k(x)` (empty for branch 0).
    pub aux_feat: Vec<R>,
    pub temporal: MlpTrace<R>,
    pub theta1: MlpTrace<R>,
    pub theta2: MlpTrace<R>,
    pub sigma: R,
    pub sigma_saturated: bool,
    pub rgb: [R; 3],
}

/// Reusable buffers for field queries.
#[derive(Debug, Clone, Default)]
pub struct FieldScratch<R> {
    base: Vec<R>,
    input: Vec<R>,
    color_in: Vec<R>,
    trace: SampleTrace<R>,
    grad_color_in: Vec<R>,
}

/// A branch bound to the base encoder: the queryable field of one chunk.
#[derive(Debug, Clone, Copy)]
pub struct Field<'a, R> {
    pub base: &'a SpatialEncoder<R>,
    pub branch: &'a Branch<R>,
    pub fusion: FusionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput<R> {
    pub sigma: R,
    pub rgb: [R; 3],
    pub latent: Vec<R>,
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<'a, R: Real> Field<'a, R> {
    pub fn new(base: &'a SpatialEncoder<R>, branch: &'a Branch<R>, fusion: FusionMode) -> Self {
        Self {
            base,
            branch,
            fusion,
        }
    }

    pub fn spatial_width(&self) -> usize {
        self.base.width()
    }

    pub fn fused_width(&self) -> usize {
        match self.fusion {
            FusionMode::Sum => self.base.width(),
            FusionMode::Concat => 2 * self.base.width(),
        }
    }

    /// Traced forward pass. `time = None` drops the temporal features (they
    /// are fed as zeros), which gives a time-invariant field.
    pub fn forward_traced(
        &self,
        x: [R; 3],
        time: Option<R>,
        sh: &[R; SH_COEFFS],
        scratch: &mut FieldScratch<R>,
    ) -> Result<()> {
        self.forward_density(x, time, scratch)?;
        let tr = &mut scratch.trace;
        scratch.color_in.clear();
        scratch.color_in.extend_from_slice(tr.theta1.output());
        scratch.color_in.extend_from_slice(sh);
        self.branch
            .theta2
            .forward_traced(&scratch.color_in, &mut tr.theta2)?;
        let c = tr.theta2.output();
        for k in 0..3 {
            tr.rgb[k] = sigmoid(c[k]);
        }
        if tr.rgb.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("color head", "non-finite color"));
        }
        Ok(())
    }

    /// Density-only forward pass; the color head is skipped and the trace's
    /// color is left stale.
    pub fn forward_density(
        &self,
        x: [R; 3],
        time: Option<R>,
        scratch: &mut FieldScratch<R>,
    ) -> Result<R> {
        let lf = self.base.width();
        let fw = self.fused_width();
        let tw = self.branch.temporal.width();
        let tr = &mut scratch.trace;
        tr.x = x;
        tr.t = time.unwrap_or(R::zero());
        scratch.input.clear();
        scratch.input.resize(fw + tw, R::zero());
        scratch.base.resize(lf, R::zero());
        self.base.encode_into(&x, &mut scratch.base);
        scratch.input[..lf].copy_from_slice(&scratch.base);
        match &self.branch.aux {
            Some(aux) => {
                tr.aux_feat.resize(lf, R::zero());
                aux.encode_into(&x, &mut tr.aux_feat);
                match self.fusion {
                    FusionMode::Sum => {
                        for (a, b) in scratch.input[..lf].iter_mut().zip(&tr.aux_feat) {
                            *a += *b;
                        }
                    }
                    FusionMode::Concat => scratch.input[lf..2 * lf].copy_from_slice(&tr.aux_feat),
                }
            }
            None => tr.aux_feat.clear(),
        }
        if let Some(t) = time {
            self.branch
                .temporal
                .encode_into(&x, t, &mut scratch.input[fw..], &mut tr.temporal)?;
        }
        self.branch
            .theta1
            .forward_traced(&scratch.input, &mut tr.theta1)?;
        let h = tr.theta1.output();
        let raw = h[0];
        if !raw.is_finite() {
            return Err(Error::numerical("density head", "non-finite density logit"));
        }
        let cap = R::of(SIGMA_MAX.ln());
        tr.sigma_saturated = raw > cap;
        tr.sigma = raw.min(cap).exp();
        Ok(tr.sigma)
    }

    pub fn trace<'s>(&self, scratch: &'s FieldScratch<R>) -> &'s SampleTrace<R> {
        &scratch.trace
    }

    /// Backward pass for the sample last traced into `scratch`. Accumulates
    /// decoder gradients and writes the gradient of the fused spatial feature
    /// into `d_fused` (length = fused width).
    pub fn backward(
        &self,
        scratch: &mut FieldScratch<R>,
        d_sigma: R,
        d_rgb: [R; 3],
        with_time: bool,
        grads: &mut DecoderGrads<R>,
        d_fused: &mut [R],
    ) {
        let tr = &scratch.trace;
        let mut d_c = [R::zero(); 3];
        for k in 0..3 {
            d_c[k] = d_rgb[k] * tr.rgb[k] * (R::one() - tr.rgb[k]);
        }
        let d_in2 = self
            .branch
            .theta2
            .backward(&tr.theta2, &d_c, &mut grads.theta2);
        let latent = self.branch.theta1.output_width();
        scratch.grad_color_in.clear();
        scratch.grad_color_in.extend_from_slice(&d_in2[..latent]);
        if !tr.sigma_saturated {
            scratch.grad_color_in[0] += d_sigma * tr.sigma;
        }
        let d_in1 =
            self.branch
                .theta1
                .backward(&tr.theta1, &scratch.grad_color_in, &mut grads.theta1);
        let fw = self.fused_width();
        d_fused[..fw].copy_from_slice(&d_in1[..fw]);
        if with_time {
            self.branch.temporal.accumulate_grad(
                &tr.x,
                tr.t,
                &d_in1[fw..],
                &tr.temporal,
                &mut grads.temporal,
            );
        }
    }

    /// Untraced query at a normalized point.
    pub fn query(
        &self,
        x: [R; 3],
        time: Option<R>,
        d: [R; 3],
        scratch: &mut FieldScratch<R>,
    ) -> Result<FieldOutput<R>> {
        let (sh, _) = encode_direction(d);
        self.forward_traced(x, time, &sh, scratch)?;
        let tr = &scratch.trace;
        Ok(FieldOutput {
            sigma: tr.sigma,
            rgb: tr.rgb,
            latent: tr.theta1.output().to_vec(),
        })
    }
}

/// Query one branch's field at a normalized point and branch-local time.
pub fn query_field<R: Real>(
    base: &SpatialEncoder<R>,
    branch: &Branch<R>,
    x: [R; 3],
    t: R,
    d: [R; 3],
    mode: FusionMode,
) -> Result<FieldOutput<R>> {
    Field::new(base, branch, mode).query(x, Some(t), d, &mut FieldScratch::default())
}

/// Anything that maps `(x, t, d)` to density and color. `t = None` asks for
/// the field without its temporal input.
pub trait RadianceField<R: Real>: Sync {
    fn sample(
        &self,
        x: [R; 3],
        t: Option<R>,
        sh: &[R; SH_COEFFS],
        scratch: &mut FieldScratch<R>,
    ) -> Result<(R, [R; 3])>;
}

impl<R: Real> RadianceField<R> for Field<'_, R> {
    fn sample(
        &self,
        x: [R; 3],
        t: Option<R>,
        sh: &[R; SH_COEFFS],
        scratch: &mut FieldScratch<R>,
    ) -> Result<(R, [R; 3])> {
        self.forward_traced(x, t, sh, scratch)?;
        Ok((scratch.trace.sigma, scratch.trace.rgb))
    }
}

/// Field that is the same everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField<R> {
    pub sigma: R,
    pub rgb: [R; 3],
}

impl<R: Real> RadianceField<R> for ConstantField<R> {
    fn sample(
        &self,
        _: [R; 3],
        _: Option<R>,
        _: &[R; SH_COEFFS],
        _: &mut FieldScratch<R>,
    ) -> Result<(R, [R; 3])> {
        Ok((self.sigma, self.rgb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Both fields see time.
    Full,
    /// The first field is queried without its temporal input.
    StaticDynamic,
}

/// Sum of two fields: densities add, colors add and are clamped to `[0,1]`.
pub fn compose_fields<R: Real>(
    a: &dyn RadianceField<R>,
    b: &dyn RadianceField<R>,
    composition: Composition,
    x: [R; 3],
    t: R,
    d: [R; 3],
    scratch: &mut FieldScratch<R>,
) -> Result<(R, [R; 3])> {
    let (sh, _) = encode_direction(d);
    let ta = match composition {
        Composition::Full => Some(t),
        Composition::StaticDynamic => None,
    };
    let (sa, ca) = a.sample(x, ta, &sh, scratch)?;
    let (sb, cb) = b.sample(x, Some(t), &sh, scratch)?;
    let mut c = [R::zero(); 3];
    for k in 0..3 {
        c[k] = (ca[k] + cb[k]).max(R::zero()).min(R::one());
    }
    Ok((sa + sb, c))
}

/// Two fields bound together as one [`RadianceField`].
pub struct ComposedField<'a, R> {
    pub a: &'a dyn RadianceField<R>,
    pub b: &'a dyn RadianceField<R>,
    pub composition: Composition,
}

impl<R: Real> RadianceField<R> for ComposedField<'_, R> {
    fn sample(
        &self,
        x: [R; 3],
        t: Option<R>,
        sh: &[R; SH_COEFFS],
        scratch: &mut FieldScratch<R>,
    ) -> Result<(R, [R; 3])> {
        let ta = match self.composition {
            Composition::Full => t,
            Composition::StaticDynamic => None,
        };
        let (sa, ca) = self.a.sample(x, ta, sh, scratch)?;
        let (sb, cb) = self.b.sample(x, t, sh, scratch)?;
        let mut c = [R::zero(); 3];
        for k in 0..3 {
            c[k] = (ca[k] + cb[k]).max(R::zero()).min(R::one());
        }
        Ok((sa + sb, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::numerics::{finite_diff_check, FdOptions};

    pub(crate) fn tiny_config(
        layout: Layout,
        fusion: FusionMode,
        kind: TemporalKind,
    ) -> FieldConfig {
        FieldConfig {
            layout,
            fusion,
            spatial: enc(3, 2, 2, 6, 2, 6),
            temporal_kind: kind,
            temporal: enc(1, 2, 2, 6, 2, 5),
            space_time: enc(4, 2, 2, 6, 2, 4),
            hidden_sigma: 8,
            latent: 6,
            hidden_color: 8,
        }
    }

    fn randomize(branch: &mut Branch<f64>, base: &mut SpatialEncoder<f64>, rng: &mut ChaCha8Rng) {
        for b in branch.blocks_mut() {
            for v in b.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        for t in base.tables_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn fusion_cases() {
        assert_eq!(
            fuse_features(&[1.0, 2.0], &[0.0, 0.0], FusionMode::Sum).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            fuse_features(&[1.0], &[2.0], FusionMode::Concat).unwrap(),
            vec![1.0, 2.0]
        );
        let (a, b) = ([0.3, -1.0], [2.0, 0.5]);
        assert_eq!(
            fuse_features(&a, &b, FusionMode::Sum).unwrap(),
            fuse_features(&b, &a, FusionMode::Sum).unwrap()
        );
        assert!(matches!(
            fuse_features(&[1.0], &[1.0, 2.0], FusionMode::Sum),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn direction_encoding_cases() {
        let (sh, flagged) = encode_direction([0.0f64, 0.0, 1.0]);
        assert!(!flagged);
        assert!((sh[0] - 1.0 / (2.0 * std::f64::consts::PI.sqrt())).abs() < 1e-12);
        assert_eq!(sh.len(), 16);
        let d = [0.48f64, -0.6, 0.64];
        let (p, _) = encode_direction(d);
        let (n, _) = encode_direction([-d[0], -d[1], -d[2]]);
        for (i, (a, b)) in p.iter().zip(&n).enumerate() {
            let odd = matches!(i, 1..=3 | 9..=15);
            let want = if odd { -a } else { *a };
            assert!((b - want).abs() < 1e-12, "coefficient {i}");
        }
        assert!(encode_direction([0.0f64, 0.0, 2.0]).1);
    }

    #[test]
    fn zero_field_gives_unit_density_and_grey() {
        let cfg = tiny_config(Layout::Voxel, FusionMode::Sum, TemporalKind::Hash);
        let base = SpatialEncoder::<f64>::zeros(Layout::Voxel, cfg.spatial, 6).unwrap();
        let (temporal, mut t1, mut t2) =
            Branch::<f64>::init_decoders(&cfg, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        t1.params_mut().fill(0.0);
        t2.params_mut().fill(0.0);
        let temporal = match temporal {
            TemporalEncoder::Hash(t) => {
                TemporalEncoder::Hash(EncoderTables::zeros(*t.config()).unwrap())
            }
            other => other,
        };
        let branch = Branch {
            index: 1,
            aux: Some(SpatialEncoder::zeros(Layout::Voxel, cfg.spatial, 6).unwrap()),
            temporal,
            theta1: t1,
            theta2: t2,
        };
        let out = query_field(
            &base,
            &branch,
            [0.3, 0.4, 0.5],
            0.2,
            [0.0, 0.0, 1.0],
            FusionMode::Sum,
        )
        .unwrap();
        assert_eq!(out.sigma, 1.0);
        assert_eq!(out.rgb, [0.5; 3]);
    }

    #[test]
    fn queries_are_deterministic() {
        let cfg = tiny_config(Layout::Merf, FusionMode::Concat, TemporalKind::Hash);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = SpatialEncoder::<f64>::init(Layout::Merf, cfg.spatial, 8, &mut rng).unwrap();
        let branch = Branch::init(2, &cfg, 8, &mut rng).unwrap();
        let a = query_field(
            &base,
            &branch,
            [0.1, 0.7, 0.2],
            0.6,
            [0.0, 1.0, 0.0],
            FusionMode::Concat,
        )
        .unwrap();
        let b = query_field(
            &base,
            &branch,
            [0.1, 0.7, 0.2],
            0.6,
            [0.0, 1.0, 0.0],
            FusionMode::Concat,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_aux_equals_base_only_field() {
        let cfg = tiny_config(Layout::Voxel, FusionMode::Sum, TemporalKind::Hash);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = SpatialEncoder::<f64>::init(Layout::Voxel, cfg.spatial, 6, &mut rng).unwrap();
        let mut branch = Branch::init(1, &cfg, 6, &mut rng).unwrap();
        branch.aux = Some(SpatialEncoder::zeros(Layout::Voxel, cfg.spatial, 6).unwrap());
        let mut only_base = branch.clone();
        only_base.aux = None;
        let p = [0.21, 0.33, 0.87];
        let a = query_field(&base, &branch, p, 0.4, [1.0, 0.0, 0.0], FusionMode::Sum).unwrap();
        let b = query_field(&base, &only_base, p, 0.4, [1.0, 0.0, 0.0], FusionMode::Sum).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn swapping_base_and_aux_under_sum_is_invisible() {
        let cfg = tiny_config(Layout::Voxel, FusionMode::Sum, TemporalKind::Hash);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = SpatialEncoder::<f64>::init(Layout::Voxel, cfg.spatial, 6, &mut rng).unwrap();
        let mut branch = Branch::init(1, &cfg, 6, &mut rng).unwrap();
        randomize(&mut branch, &mut base.clone(), &mut rng);
        let aux = branch.aux.clone().unwrap();
        let mut swapped = branch.clone();
        swapped.aux = Some(base.clone());
        let p = [0.6, 0.15, 0.45];
        let a = query_field(&base, &branch, p, 0.1, [0.0, 0.0, 1.0], FusionMode::Sum).unwrap();
        let b = query_field(&aux, &swapped, p, 0.1, [0.0, 0.0, 1.0], FusionMode::Sum).unwrap();
        assert!((a.sigma - b.sigma).abs() < 1e-12);
        for k in 0..3 {
            assert!((a.rgb[k] - b.rgb[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_cases() {
        let zero = ConstantField {
            sigma: 0.0f64,
            rgb: [0.0; 3],
        };
        let a = ConstantField {
            sigma: 1.0f64,
            rgb: [0.2; 3],
        };
        let mut s = FieldScratch::default();
        let (sig, c) = compose_fields(
            &a,
            &zero,
            Composition::Full,
            [0.5; 3],
            0.3,
            [0.0, 0.0, 1.0],
            &mut s,
        )
        .unwrap();
        assert_eq!((sig, c), (1.0, [0.2; 3]));
        let (sig, c) = compose_fields(
            &a,
            &a,
            Composition::Full,
            [0.5; 3],
            0.3,
            [0.0, 0.0, 1.0],
            &mut s,
        )
        .unwrap();
        assert_eq!(sig, 2.0);
        assert!(c.iter().all(|v| (v - 0.4).abs() < 1e-12));

        let cfg = tiny_config(Layout::Voxel, FusionMode::Sum, TemporalKind::Hash);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut base =
            SpatialEncoder::<f64>::init(Layout::Voxel, cfg.spatial, 6, &mut rng).unwrap();
        let mut branch = Branch::init(1, &cfg, 6, &mut rng).unwrap();
        randomize(&mut branch, &mut base, &mut rng);
        let f = Field::new(&base, &branch, FusionMode::Sum);
        let x = [0.3, 0.3, 0.3];
        let t0 = compose_fields(
            &f,
            &zero,
            Composition::StaticDynamic,
            x,
            0.1,
            [0.0, 0.0, 1.0],
            &mut s,
        )
        .unwrap();
        let t1 = compose_fields(
            &f,
            &zero,
            Composition::StaticDynamic,
            x,
            0.9,
            [0.0, 0.0, 1.0],
            &mut s,
        )
        .unwrap();
        assert_eq!(t0, t1);
        let f0 = compose_fields(
            &f,
            &zero,
            Composition::Full,
            x,
            0.1,
            [0.0, 0.0, 1.0],
            &mut s,
        )
        .unwrap();
        let f1 = compose_fields(
            &f,
            &zero,
            Composition::Full,
            x,
            0.9,
            [0.0, 0.0, 1.0],
            &mut s,
        )
        .unwrap();
        assert_ne!(f0, f1);
    }

    /// Scalar probe `v_σ σ + <v_c, c>` and its gradient with respect to all
    /// parameters laid out as [base tables | branch blocks].
    fn probe(
        cfg: &FieldConfig,
        base: &SpatialEncoder<f64>,
        branch: &Branch<f64>,
        x: [f64; 3],
        t: f64,
        d: [f64; 3],
        v: (f64, [f64; 3]),
    ) -> (f64, Vec<f64>) {
        let field = Field::new(base, branch, cfg.fusion);
        let mut scratch = FieldScratch::default();
        let (sh, _) = encode_direction(d);
        field.forward_traced(x, Some(t), &sh, &mut scratch).unwrap();
        let tr = field.trace(&scratch).clone();
        let val = v.0 * tr.sigma + (0..3).map(|k| v.1[k] * tr.rgb[k]).sum::<f64>();
        let mut dg = DecoderGrads::zeros(branch);
        let mut d_fused = vec![0.0; field.fused_width()];
        field.backward(&mut scratch, v.0, v.1, true, &mut dg, &mut d_fused);

        let lf = base.width();
        let mut base_g = base.zero_grads();
        base.accumulate_grad(&x, &d_fused[..lf], &mut base_g);
        let mut out: Vec<f64> = base_g.concat();
        if let Some(aux) = &branch.aux {
            let mut g = aux.zero_grads();
            let d_aux = match cfg.fusion {
                FusionMode::Sum => &d_fused[..lf],
                FusionMode::Concat => &d_fused[lf..],
            };
            aux.accumulate_grad(&x, d_aux, &mut g);
            out.extend(g.concat());
        }
        out.extend(dg.temporal);
        out.extend(dg.theta1);
        out.extend(dg.theta2);
        (val, out)
    }

    fn flat(base: &SpatialEncoder<f64>, branch: &Branch<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = base
            .tables()
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect();
        for b in branch.param_blocks() {
            v.extend_from_slice(b.data);
        }
        v
    }

    fn unflat(base: &mut SpatialEncoder<f64>, branch: &mut Branch<f64>, p: &[f64]) {
        let mut off = 0;
        for t in base.tables_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        for b in branch.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&p[off..off + n]);
            off += n;
        }
    }

    fn fd_case(
        layout: Layout,
        fusion: FusionMode,
        kind: TemporalKind,
        index: usize,
        seed: u64,
    ) -> f64 {
        let cfg = tiny_config(layout, fusion, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = SpatialEncoder::<f64>::init(layout, cfg.spatial, 8, &mut rng).unwrap();
        let mut branch = Branch::init(index, &cfg, 8, &mut rng).unwrap();
        randomize(&mut branch, &mut base, &mut rng);
        let x = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        let t = rng.gen_range(0.05..0.95);
        let d = [0.6, 0.0, 0.8];
        let v = (
            rng.gen_range(-1.0..1.0),
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
        );
        let p0 = flat(&base, &branch);
        let loss = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (mut b, mut br) = (base.clone(), branch.clone());
            unflat(&mut b, &mut br, p);
            Ok(probe(&cfg, &b, &br, x, t, d, v))
        };
        finite_diff_check(
            loss,
            &p0,
            &[],
            &FdOptions {
                seed,
                ..FdOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn field_gradients_match_finite_differences() {
        let kinds = [
            TemporalKind::Hash,
            TemporalKind::Freq,
            TemporalKind::FreqMlp,
        ];
        let mut seed = 0;
        for layout in [Layout::Voxel, Layout::Plane, Layout::Merf, Layout::Voxel4d] {
            for fusion in [FusionMode::Sum, FusionMode::Concat] {
                for (i, kind) in kinds.iter().enumerate() {
                    seed += 1;
                    let err = fd_case(layout, fusion, *kind, i % 2, seed);
                    assert!(err < 1e-3, "{layout:?} {fusion:?} {kind:?}: {err}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn outputs_respect_activation_ranges(seed in 0u64..10_000, px in 0.0f64..1.0, py in 0.0f64..1.0,
                                             pz in 0.0f64..1.0, t in 0.0f64..1.0) {
            let cfg = tiny_config(Layout::Voxel, FusionMode::Sum, TemporalKind::Hash);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut base = SpatialEncoder::<f64>::init(Layout::Voxel, cfg.spatial, 6, &mut rng).unwrap();
            let mut branch = Branch::init(1, &cfg, 6, &mut rng).unwrap();
            randomize(&mut branch, &mut base, &mut rng);
            let out = query_field(&base, &branch, [px, py, pz], t, [0.0, 0.0, 1.0], FusionMode::Sum).unwrap();
            prop_assert!(out.sigma >= 0.0 && out.sigma <= SIGMA_MAX);
            prop_assert!(out.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        }

        #[test]
        fn field_chain_passes_dot_product_test(seed in 0u64..10_000) {
            // The probe is linear in v, so <J^T v, u> computed by backward must
            // equal the directional derivative along u (checked by central differences).
            let cfg = tiny_config(Layout::Voxel, FusionMode::Concat, TemporalKind::Hash);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut base = SpatialEncoder::<f64>::init(Layout::Voxel, cfg.spatial, 8, &mut rng).unwrap();
            let mut branch = Branch::init(1, &cfg, 8, &mut rng).unwrap();
            randomize(&mut branch, &mut base, &mut rng);
            let x = [0.37, 0.52, 0.61];
            let v = (0.7, [0.3, -0.2, 0.9]);
            let p0 = flat(&base, &branch);
            let u: Vec<f64> = (0..p0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, g) = probe(&cfg, &base, &branch, x, 0.4, [0.0, 0.0, 1.0], v);
            let lhs: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            let eval = |s: f64| {
                let p: Vec<f64> = p0.iter().zip(&u).map(|(a, b)| a + s * b).collect();
                let (mut b, mut br) = (base.clone(), branch.clone());
                unflat(&mut b, &mut br, &p);
                probe(&cfg, &b, &br, x, 0.4, [0.0, 0.0, 1.0], v).0
            };
            let h = 1e-5;
            let rhs = (eval(h) - eval(-h)) / (2.0 * h);
            prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
        }
    }
}
