//! Metric voxel grids, point-cloud voxelization and height-as-channel BEV
//! projection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{contract, Error, FormatError, Result};
use crate::geometry::{PointCloud, Vec3};

/// Cell-unit tolerance under which a coordinate is snapped onto a cell
/// boundary before flooring, so that e.g. 4.6 m / 0.2 m lands in cell 23.
pub const BOUNDARY_SNAP: f64 = 1e-9;

/// Axis-aligned metric volume split into equal voxels. Cells are half-open
/// `[low, high)` on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
    pub voxel_size: Vec3,
}

impl GridSpec {
    pub fn new(min_corner: Vec3, max_corner: Vec3, voxel_size: Vec3) -> Result<Self> {
        let spec = GridSpec { min_corner, max_corner, voxel_size };
        spec.validate()?;
        Ok(spec)
    }

    /// Evaluation volume of the occupancy forecasting benchmark: ±70 m
    /// horizontally, ±4.5 m vertically, 0.2 m voxels.
    pub fn benchmark_eval() -> Self {
        GridSpec {
            min_corner: [-70.0, -70.0, -4.5],
            max_corner: [70.0, 70.0, 4.5],
            voxel_size: [0.2, 0.2, 0.2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            let (lo, hi, s) = (self.min_corner[a], self.max_corner[a], self.voxel_size[a]);
            if !(lo.is_finite() && hi.is_finite() && s.is_finite()) {
                return Err(contract!("grid axis {a}: non-finite bounds or voxel size"));
            }
            if hi <= lo {
                return Err(contract!("grid axis {a}: max {hi} must exceed min {lo}"));
            }
            if s <= 0.0 {
                return Err(contract!("grid axis {a}: voxel size {s} must be positive"));
            }
            let ratio = (hi - lo) / s;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
                return Err(contract!(
                    "grid axis {a}: extent {} is not a whole number of {s} m voxels",
                    hi - lo
                ));
            }
        }
        Ok(())
    }

    /// Cell counts `(nx, ny, nz)`.
    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| {
            ((self.max_corner[a] - self.min_corner[a]) / self.voxel_size[a]).round() as usize
        })
    }

    /// Tensor shape `[Z, Y, X]` of grids over this volume.
    pub fn zyx_shape(&self) -> Vec<usize> {
        let [nx, ny, nz] = self.dims();
        vec![nz, ny, nx]
    }

    pub fn num_cells(&self) -> usize {
        self.dims().iter().product()
    }

    /// Flat row-major `(Z, Y, X)` offset of a cell.
    pub fn flat_index(&self, cell: [usize; 3]) -> usize {
        let [nx, ny, _] = self.dims();
        (cell[2] * ny + cell[1]) * nx + cell[0]
    }

    pub fn cell_center(&self, cell: [usize; 3]) -> Vec3 {
        std::array::from_fn(|a| self.min_corner[a] + (cell[a] as f64 + 0.5) * self.voxel_size[a])
    }

    /// Fractional position of `p` in cell units along axis `a`, with
    /// near-integer values snapped.
    pub fn cell_coordinate(&self, p: Vec3, a: usize) -> f64 {
        let r = (p[a] - self.min_corner[a]) / self.voxel_size[a];
        let n = r.round();
        if (r - n).abs() <= BOUNDARY_SNAP {
            n
        } else {
            r
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.voxel_index(p).is_some()
    }

    /// `floor((p - min) / size)` per axis, or `None` outside the half-open volume.
    pub fn voxel_index(&self, p: Vec3) -> Option<[usize; 3]> {
        let dims = self.dims();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = self.cell_coordinate(p, a).floor();
            if !(f >= 0.0 && f < dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }
}

/// Free-function form of [`GridSpec::voxel_index`].
pub fn voxel_index(spec: &GridSpec, p: Vec3) -> Option<[usize; 3]> {
    spec.voxel_index(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Probability,
    Logits,
}

/// Dense per-voxel values over a [`GridSpec`], stored as `[Z, Y, X]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    spec: GridSpec,
    values: Tensor,
    kind: GridKind,
}

impl OccupancyGrid {
    pub fn new(spec: GridSpec, values: Tensor, kind: GridKind) -> Result<Self> {
        if values.shape() != spec.zyx_shape().as_slice() {
            return Err(contract!(
                "grid values have shape {:?}, spec requires {:?}",
                values.shape(),
                spec.zyx_shape()
            ));
        }
        if kind == GridKind::Probability && values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract!("probability grid has values outside [0, 1]"));
        }
        Ok(OccupancyGrid { spec, values, kind })
    }

    pub fn zeros(spec: GridSpec, kind: GridKind) -> Self {
        OccupancyGrid { values: Tensor::zeros(spec.zyx_shape()), spec, kind }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn get(&self, cell: [usize; 3]) -> f64 {
        self.values.data()[self.spec.flat_index(cell)]
    }

    /// Applies the logistic function to a logit grid.
    pub fn to_probabilities(&self) -> OccupancyGrid {
        match self.kind {
            GridKind::Probability => self.clone(),
            GridKind::Logits => {
                let data = self.values.data().iter().map(|&v| crate::diffcore::sigmoid(v)).collect();
                let values = Tensor::new(self.values.shape().to_vec(), data).expect("same shape");
                OccupancyGrid { spec: self.spec, values, kind: GridKind::Probability }
            }
        }
    }
}

/// T future grids sharing one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyForecast {
    frames: Vec<OccupancyGrid>,
    /// Seconds between consecutive frames.
    frame_period: f64,
}

impl OccupancyForecast {
    pub fn new(frames: Vec<OccupancyGrid>, frame_period: f64) -> Result<Self> {
        let first = frames.first().ok_or_else(|| contract!("a forecast needs at least one frame"))?;
        if frames.iter().any(|f| f.spec != first.spec) {
            return Err(contract!("forecast frames must share one grid spec"));
        }
        if !(frame_period > 0.0) {
            return Err(contract!("frame period must be positive"));
        }
        Ok(OccupancyForecast { frames, frame_period })
    }

    pub fn frames(&self) -> &[OccupancyGrid] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn spec(&self) -> &GridSpec {
        &self.frames[0].spec
    }

    pub fn to_probabilities(&self) -> OccupancyForecast {
        OccupancyForecast {
            frames: self.frames.iter().map(OccupancyGrid::to_probabilities).collect(),
            frame_period: self.frame_period,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: OccupancyGrid,
    /// Points that fell outside the volume.
    pub outside: usize,
}

/// Binary occupancy: a cell is 1 when at least one point falls in it.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> Voxelized {
    let mut data = vec![0.0; spec.num_cells()];
    let mut outside = 0;
    for &p in &cloud.points {
        match spec.voxel_index(p) {
            Some(cell) => data[spec.flat_index(cell)] = 1.0,
            None => outside += 1,
        }
    }
    let values = Tensor::new(spec.zyx_shape(), data).expect("shape matches spec");
    Voxelized { grid: OccupancyGrid { spec: *spec, values, kind: GridKind::Probability }, outside }
}

/// Height slices become channels: `[Z, Y, X]` is read as `[C, H, W]`.
pub fn bev_encode(grid: OccupancyGrid) -> Result<Tensor> {
    if grid.kind != GridKind::Probability {
        return Err(contract!("bev_encode expects a probability grid"));
    }
    Ok(grid.values)
}

/// Per-channel max pooling over `factor × factor` blocks.
pub fn downsample_bev(bev: &Tensor, factor: usize) -> Result<Tensor> {
    let &[c, h, w] = bev.shape() else {
        return Err(contract!("downsample_bev expects [C,H,W], got {:?}", bev.shape()));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(contract!("downsample_bev: H={h}, W={w} not divisible by factor {factor}"));
    }
    if factor == 1 {
        return Ok(bev.clone());
    }
    let (ho, wo) = (h / factor, w / factor);
    let src = bev.data();
    let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(ch * ho + y / factor) * wo + x / factor];
                *o = o.max(src[(ch * h + y) * w + x]);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

const GRID_MAGIC: &[u8; 4] = b"O4DG";
pub const GRID_VERSION: u32 = 1;

/// Contents of a grid dump file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDump {
    pub spec: GridSpec,
    /// Row-major `(Z, Y, X)`.
    pub values: Vec<f32>,
}

/// Writes `O4DG`, u32 version, the spec as 9 little-endian f64 (min, max,
/// voxel size), then the values as little-endian f32.
pub fn write_grid(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 + 72 + grid.values.len() * 4);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&GRID_VERSION.to_le_bytes());
    let s = &grid.spec;
    for v in s.min_corner.iter().chain(&s.max_corner).chain(&s.voxel_size) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in grid.values.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<GridDump> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FormatError::MissingFile { path: path.into() }.into(),
        _ => Error::io(path, e),
    })?;
    let eof = || FormatError::UnexpectedEof { path: path.into() };
    if bytes.len() < 4 {
        return Err(eof().into());
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(FormatError::BadMagic { path: path.into(), expected: "O4DG" }.into());
    }
    if bytes.len() < 80 {
        return Err(eof().into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GRID_VERSION {
        return Err(FormatError::Version { path: path.into(), expected: GRID_VERSION, found: version }
            .into());
    }
    let f: Vec<f64> = bytes[8..80]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let spec = GridSpec::new([f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]])
        .map_err(|e| FormatError::Invalid { path: path.into(), msg: e.to_string() })?;
    let n = spec.num_cells();
    let body = &bytes[80..];
    if body.len() < n * 4 {
        return Err(eof().into());
    }
    if body.len() != n * 4 {
        return Err(FormatError::CountMismatch { path: path.into(), expected: n * 4, found: body.len() }
            .into());
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(GridDump { spec, values })
}
