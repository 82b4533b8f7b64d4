//! Parameter counts, model sizes and streaming bandwidth. Sizes count
//! parameters at 4 bytes and occupancy cells at 2 bytes; size reports use
//! MB = 2^20 bytes, bandwidth reports MB = 10^6 bytes.

use serde::{Deserialize, Serialize};

use crate::continual::{ModelRepo, TrainConfig};
use crate::encoders::{layout_table_configs, level_entries, EncoderConfig, Layout};
use crate::error::Result;
use crate::field::{Branch, TemporalKind, FREQ_BANDS, FREQ_MLP_WIDTH};
use crate::numerics::mlp_param_count;

pub const SIZE_MB: f64 = 1_048_576.0;
pub const BANDWIDTH_MB: f64 = 1e6;
pub const PARAM_BYTES: u64 = 4;
pub const GRID_CELL_BYTES: u64 = 2;

/// `Σ_l min((N_l+1)^dims, 2^P) · F`.
pub fn param_count(config: &EncoderConfig, dims: usize) -> usize {
    level_entries(&config.with_dims(dims)).iter().sum::<usize>() * config.features
}

/// Parameters of a spatial encoder with nominal table length `2^log2`,
/// split into 3-D and 2-D tables.
pub fn spatial_param_split(
    layout: Layout,
    spatial: EncoderConfig,
    log2: u32,
) -> Result<(usize, usize)> {
    let mut split = (0, 0);
    for c in layout_table_configs(layout, spatial, log2)? {
        match c.dims {
            3 => split.0 += param_count(&c, 3),
            _ => split.1 += param_count(&c, c.dims),
        }
    }
    Ok(split)
}

/// Table capacity of a fully-hashed level relative to a single `2^log2`
/// voxel table, e.g. 0.3125 for MERF.
pub fn fully_hashed_fraction(layout: Layout, log2: u32) -> Result<f64> {
    let base = EncoderConfig {
        dims: 3,
        levels: 1,
        features: 1,
        log2_table_len: log2,
        n_min: 16,
        n_max: 16,
    };
    let cap: u64 = layout_table_configs(layout, base, log2)?
        .iter()
        .map(|c| 1u64 << c.log2_table_len)
        .sum();
    Ok(cap as f64 / (1u64 << log2) as f64)
}

/// Per-level aux/base entry ratio on levels hashed in both tables.
pub fn fully_hashed_ratio(p1: u32, p2: u32) -> f64 {
    (1u64 << p2) as f64 / (1u64 << p1) as f64
}

/// `"1/32"` style rendering of a power-of-two ratio.
pub fn ratio_label(p1: u32, p2: u32) -> String {
    if p1 == p2 {
        "1/1".into()
    } else {
        format!("1/{}", 1u64 << (p1 - p2))
    }
}

/// Parameters of a branch's temporal encoder and both MLPs.
pub fn decoder_param_count(config: &TrainConfig) -> usize {
    let f = &config.field;
    let temporal = if f.layout == Layout::Voxel4d {
        param_count(&f.space_time.with_log2(config.p2), 4)
    } else {
        match f.temporal_kind {
            TemporalKind::Hash => param_count(&f.temporal, 1),
            TemporalKind::Freq => 0,
            TemporalKind::FreqMlp => mlp_param_count(&[2 * FREQ_BANDS, FREQ_MLP_WIDTH]),
        }
    };
    temporal + mlp_param_count(&f.theta1_widths()) + mlp_param_count(&f.theta2_widths())
}

/// Closed-form sizes of a run, without allocating any tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeModel {
    pub base_3d: usize,
    pub base_2d: usize,
    pub aux_3d: usize,
    pub aux_2d: usize,
    pub decoder: usize,
    pub grid_cells: usize,
}

impl SizeModel {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let f = &config.field;
        let (base_3d, base_2d) = spatial_param_split(f.layout, f.spatial, config.p1)?;
        let (aux_3d, aux_2d) = spatial_param_split(f.layout, f.spatial, config.p2)?;
        Ok(Self {
            base_3d,
            base_2d,
            aux_3d,
            aux_2d,
            decoder: decoder_param_count(config),
            grid_cells: config.occupancy.resolution.pow(3),
        })
    }

    pub fn base_params(&self) -> usize {
        self.base_3d + self.base_2d
    }

    pub fn aux_params(&self) -> usize {
        self.aux_3d + self.aux_2d
    }

    /// Float parameters of a repo with `n_chunks` branches.
    pub fn total_params(&self, n_chunks: usize) -> u64 {
        if n_chunks == 0 {
            return 0;
        }
        (self.base_params() + n_chunks * self.decoder + (n_chunks - 1) * self.aux_params()) as u64
    }

    pub fn total_bytes(&self, n_chunks: usize) -> u64 {
        if n_chunks == 0 {
            return 0;
        }
        PARAM_BYTES * self.total_params(n_chunks) + GRID_CELL_BYTES * self.grid_cells as u64
    }

    /// Bytes one auxiliary branch adds.
    pub fn aux_branch_bytes(&self) -> u64 {
        PARAM_BYTES * (self.aux_params() + self.decoder) as u64
    }
}

/// Least-squares line through `(n, bytes)` points in exact rational
/// arithmetic. Returns `(intercept, slope, exact)` where `exact` says every
/// point lies on the line.
pub fn affine_fit(points: &[(u64, u64)]) -> Option<(i128, i128, bool)> {
    let (&(x0, y0), rest) = points.split_first()?;
    let &(x1, y1) = rest.first()?;
    if x1 == x0 {
        return None;
    }
    let dy = y1 as i128 - y0 as i128;
    let dx = x1 as i128 - x0 as i128;
    if dy % dx != 0 {
        return Some((0, 0, false));
    }
    let slope = dy / dx;
    let intercept = y0 as i128 - slope * x0 as i128;
    let exact = points
        .iter()
        .all(|&(x, y)| intercept + slope * x as i128 == y as i128);
    Some((intercept, slope, exact))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub base_3d: u64,
    pub base_2d: u64,
    pub aux_3d: u64,
    pub aux_2d: u64,
    pub temporal: u64,
    pub mlp: u64,
    pub occupancy_cells: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSize {
    pub index: usize,
    pub params: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub counts: ComponentCounts,
    pub float_params: u64,
    pub float_bytes: u64,
    pub grid_bytes: u64,
    pub total_bytes: u64,
    pub total_mb: f64,
    /// Grid snapshots kept for evaluation; not part of the model size.
    pub snapshot_bytes: u64,
    pub per_branch: Vec<BranchSize>,
    pub n_branches: usize,
    pub fully_hashed_ratio: f64,
    pub fully_hashed_ratio_label: String,
}

fn branch_counts(b: &Branch<f32>) -> (u64, u64, u64, u64) {
    let (a3, a2) = b.aux.as_ref().map_or((0, 0), |a| a.param_split());
    let mlp = (b.theta1.params().len() + b.theta2.params().len()) as u64;
    (a3 as u64, a2 as u64, b.temporal.param_count() as u64, mlp)
}

pub fn size_report(repo: &ModelRepo) -> SizeReport {
    let mut counts = ComponentCounts {
        base_3d: 0,
        base_2d: 0,
        aux_3d: 0,
        aux_2d: 0,
        temporal: 0,
        mlp: 0,
        occupancy_cells: 0,
    };
    let mut per_branch = Vec::new();
    if !repo.branches.is_empty() {
        let (b3, b2) = repo.base.param_split();
        counts.base_3d = b3 as u64;
        counts.base_2d = b2 as u64;
        counts.occupancy_cells = repo.grid.cell_count() as u64;
    }
    for (k, b) in &repo.branches {
        let (a3, a2, t, m) = branch_counts(b);
        counts.aux_3d += a3;
        counts.aux_2d += a2;
        counts.temporal += t;
        counts.mlp += m;
        let params = a3 + a2 + t + m;
        per_branch.push(BranchSize {
            index: *k,
            params,
            bytes: PARAM_BYTES * params,
        });
    }
    let float_params = counts.base_3d
        + counts.base_2d
        + counts.aux_3d
        + counts.aux_2d
        + counts.temporal
        + counts.mlp;
    let float_bytes = PARAM_BYTES * float_params;
    let grid_bytes = GRID_CELL_BYTES * counts.occupancy_cells;
    let total_bytes = float_bytes + grid_bytes;
    let snapshot_bytes = repo
        .grid_snapshots
        .values()
        .map(|g| GRID_CELL_BYTES * g.cell_count() as u64)
        .sum();
    SizeReport {
        counts,
        float_params,
        float_bytes,
        grid_bytes,
        total_bytes,
        total_mb: total_bytes as f64 / SIZE_MB,
        snapshot_bytes,
        per_branch,
        n_branches: repo.branches.len(),
        fully_hashed_ratio: fully_hashed_ratio(repo.config.p1, repo.config.p2),
        fully_hashed_ratio_label: ratio_label(repo.config.p1, repo.config.p2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    /// MB per frame needed to stream one auxiliary branch over its chunk.
    pub b_min: f64,
    /// Whole repo in MB per frame.
    pub b_avg: f64,
    pub t_chunk: usize,
    pub n_frames: usize,
    /// `(branch, bytes)` needed online while playing that branch's chunk.
    pub online_bytes: Vec<(usize, u64)>,
}

pub fn bandwidth_report(repo: &ModelRepo) -> BandwidthReport {
    let size = size_report(repo);
    let t_chunk = repo.schedule.t_chunk;
    let n_frames = repo.schedule.n_frames;
    let b_avg = size.total_bytes as f64 / n_frames as f64 / BANDWIDTH_MB;
    let online_bytes: Vec<(usize, u64)> =
        size.per_branch.iter().map(|b| (b.index, b.bytes)).collect();
    let aux_max = online_bytes
        .iter()
        .filter(|(k, _)| *k > 0)
        .map(|(_, b)| *b)
        .max();
    let b_min = match (repo.branches.len(), aux_max) {
        (0, _) => 0.0,
        (_, Some(bytes)) if repo.branches.len() > 1 => bytes as f64 / t_chunk as f64 / BANDWIDTH_MB,
        // A lone branch has to ship everything, so it streams at the average rate.
        _ => b_avg,
    };
    BandwidthReport {
        b_min,
        b_avg,
        t_chunk,
        n_frames,
        online_bytes,
    }
}

/// `B_min` of a configuration from its closed-form sizes.
pub fn model_b_min(model: &SizeModel, t_chunk: usize) -> f64 {
    model.aux_branch_bytes() as f64 / t_chunk as f64 / BANDWIDTH_MB
}

/// Plain-text rendering of both reports.
pub fn report_table(size: &SizeReport, bw: &BandwidthReport) -> String {
    let c = &size.counts;
    let rows = [
        ("base 3-D params", c.base_3d.to_string()),
        ("base 2-D params", c.base_2d.to_string()),
        ("aux 3-D params", c.aux_3d.to_string()),
        ("aux 2-D params", c.aux_2d.to_string()),
        ("temporal params", c.temporal.to_string()),
        ("mlp params", c.mlp.to_string()),
        ("occupancy cells", c.occupancy_cells.to_string()),
        ("branches", size.n_branches.to_string()),
        ("total bytes", size.total_bytes.to_string()),
        ("total MB (2^20)", format!("{:.3}", size.total_mb)),
        (
            "aux/base hashed ratio",
            size.fully_hashed_ratio_label.clone(),
        ),
        ("B_min MB/frame (10^6)", format!("{:.4}", bw.b_min)),
        ("B_avg MB/frame (10^6)", format!("{:.4}", bw.b_avg)),
    ];
    rows.iter()
        .map(|(k, v)| format!("{k:<24}{v:>16}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::SceneBox;

    fn enc(levels: usize, features: usize, log2: u32, n_min: u32, n_max: u32) -> EncoderConfig {
        EncoderConfig {
            dims: 3,
            levels,
            features,
            log2_table_len: log2,
            n_min,
            n_max,
        }
    }

    #[test]
    fn paper_table_counts() {
        let aux = param_count(&enc(12, 2, 14, 16, 2048), 3) as f64;
        assert!((aux / 0.37e6 - 1.0).abs() < 0.05, "aux {aux}");
        let base = param_count(&enc(12, 2, 19, 16, 2048), 3) as f64;
        assert!((base / 9.9e6 - 1.0).abs() < 0.15, "base {base}");
        assert_eq!(param_count(&enc(1, 1, 19, 1, 1), 3), 8);
    }

    #[test]
    fn ratios() {
        assert_eq!(fully_hashed_ratio(19, 14), 1.0 / 32.0);
        assert_eq!(ratio_label(19, 14), "1/32");
        assert_eq!(fully_hashed_fraction(Layout::Merf, 14).unwrap(), 0.3125);
        assert_eq!(fully_hashed_fraction(Layout::Voxel, 14).unwrap(), 1.0);
        assert_eq!(fully_hashed_fraction(Layout::Plane, 14).unwrap(), 0.75);
    }

    #[test]
    fn paper_bandwidth() {
        let cfg = TrainConfig::paper(Layout::Voxel);
        let m = SizeModel::new(&cfg).unwrap();
        let online = m.aux_params() + m.decoder;
        assert!(
            (online as f64 / 0.39e6 - 1.0).abs() < 0.05,
            "online {online}"
        );
        assert!((model_b_min(&m, 10) - 0.156).abs() < 0.01);
        let sym = TrainConfig {
            p1: 16,
            p2: 16,
            ..cfg.clone()
        };
        assert!(m.total_bytes(30) < SizeModel::new(&sym).unwrap().total_bytes(30));
    }

    #[test]
    fn affine_law_is_exact() {
        let m = SizeModel::new(&TrainConfig::toy(Layout::Merf)).unwrap();
        let pts: Vec<(u64, u64)> = [3u64, 6, 12]
            .iter()
            .map(|&n| (n, m.total_bytes(n as usize)))
            .collect();
        let (a, b, exact) = affine_fit(&pts).unwrap();
        assert!(exact);
        assert_eq!(b as u64, m.aux_branch_bytes());
        assert_eq!(
            m.total_bytes(12) - m.total_bytes(6),
            6 * m.aux_branch_bytes()
        );
        assert!(a > 0);
        assert!(!affine_fit(&[(1, 1), (2, 4), (3, 9)]).unwrap().2);
    }

    #[test]
    fn empty_repo_reports_zero() {
        let repo =
            ModelRepo::new(TrainConfig::toy(Layout::Voxel), 20, SceneBox::default()).unwrap();
        let s = size_report(&repo);
        assert_eq!(s.total_bytes, 0);
        assert_eq!(s.n_branches, 0);
        assert_eq!(bandwidth_report(&repo).b_min, 0.0);
    }
}
