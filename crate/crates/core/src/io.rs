//! On-disk formats: binary volume files, dataset bundles, run configuration,
//! diagnostics traces, metric reports and point-cloud exports.
//!
//! Volume file layout (all integers little-endian):
//!
//! ```text
//! offset size field
//!      0    4 magic "CLVX"
//!      4    1 version = 1
//!      5    1 dtype: 1 = real f32, 2 = complex f32 (re, im interleaved)
//!      6   12 dims nx, ny, nt as u32
//!     18    4 padding factor q as numerator, denominator u16
//!     22    - payload, f32 row-major
//! ```
//!
//! Concurrent writes to the same path are not coordinated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::em::{EmParams, DEFAULT_BETA_FLOOR, DEFAULT_R_FLOOR};
use crate::error::{ConfigError, Error, FormatError, Result};
use crate::forward::ForwardOperator;
use crate::mace::{DiagnosticsTrace, EngineConfig};
use crate::metrics::{CloudMetrics, GeometryParams, PointCloud, Psnr};
use crate::prior::PriorConfig;
use crate::sim::{Phantom, PhantomKind, SimParams};
use crate::volume::{make_aperture, ApertureMask, ComplexVolume, Dims, PadFactor, RealVolume};

pub const VOLUME_MAGIC: [u8; 4] = *b"CLVX";
pub const VOLUME_VERSION: u8 = 1;
pub const VOLUME_HEADER_LEN: usize = 22;
const DTYPE_REAL: u8 = 1;
const DTYPE_COMPLEX: u8 = 2;

/// Contents of a volume file.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Real(RealVolume),
    Complex(ComplexVolume),
}

impl Volume {
    pub fn dims(&self) -> Dims {
        match self {
            Volume::Real(v) => v.dims(),
            Volume::Complex(v) => v.dims(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Volume::Real(_) => "real",
            Volume::Complex(_) => "complex",
        }
    }
}

fn header(dims: Dims, dtype: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN);
    out.extend_from_slice(&VOLUME_MAGIC);
    out.push(VOLUME_VERSION);
    out.push(dtype);
    for n in dims.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&dims.q().num().to_le_bytes());
    out.extend_from_slice(&dims.q().den().to_le_bytes());
    out
}

fn push_f32(out: &mut Vec<u8>, x: f64, index: usize) -> std::result::Result<(), FormatError> {
    let v = x as f32;
    if !v.is_finite() {
        return Err(FormatError::NonFinite(index));
    }
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a volume; values are rounded to f32 and must stay finite.
pub fn encode_volume(v: &Volume) -> std::result::Result<Vec<u8>, FormatError> {
    match v {
        Volume::Real(r) => {
            let mut out = header(r.dims(), DTYPE_REAL);
            out.reserve(4 * r.len());
            for (i, &x) in r.as_slice().iter().enumerate() {
                push_f32(&mut out, x, i)?;
            }
            Ok(out)
        }
        Volume::Complex(c) => {
            let mut out = header(c.dims(), DTYPE_COMPLEX);
            out.reserve(8 * c.len());
            for (i, z) in c.as_slice().iter().enumerate() {
                push_f32(&mut out, z.re, i)?;
                push_f32(&mut out, z.im, i)?;
            }
            Ok(out)
        }
    }
}

pub fn decode_volume(bytes: &[u8]) -> std::result::Result<Volume, FormatError> {
    if bytes.len() < VOLUME_HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: VOLUME_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != VOLUME_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes[4] != VOLUME_VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let dtype = bytes[5];
    let width = match dtype {
        DTYPE_REAL => 1,
        DTYPE_COMPLEX => 2,
        other => return Err(FormatError::UnknownDtype(other)),
    };
    let u32_at =
        |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().expect("2 bytes"));
    let q = PadFactor::new(u16_at(18), u16_at(20))
        .map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let dims = Dims::with_factor(u32_at(6), u32_at(10), u32_at(14), q)
        .map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let payload = &bytes[VOLUME_HEADER_LEN..];
    let elem = 4 * width;
    if payload.len() % elem != 0 {
        let needed = VOLUME_HEADER_LEN + payload.len().div_ceil(elem) * elem;
        return Err(FormatError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let values = payload.len() / elem;
    if values != dims.len() {
        return Err(FormatError::LengthMismatch {
            header_values: dims.len(),
            payload_values: values,
        });
    }
    let floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
    Ok(if width == 1 {
        Volume::Real(RealVolume::from_vec(dims, floats.collect()).expect("length checked"))
    } else {
        let f: Vec<f64> = floats.collect();
        let data = f
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Volume::Complex(ComplexVolume::from_vec(dims, data).expect("length checked"))
    })
}

fn format_err(path: &Path, source: FormatError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let bytes = encode_volume(v).map_err(|e| format_err(path, e))?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_real(path: &Path, v: &RealVolume) -> Result<()> {
    write_volume(path, &Volume::Real(v.clone()))
}

pub fn write_complex(path: &Path, v: &ComplexVolume) -> Result<()> {
    write_volume(path, &Volume::Complex(v.clone()))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    decode_volume(&bytes).map_err(|e| format_err(path, e))
}

pub fn read_real(path: &Path) -> Result<RealVolume> {
    match read_volume(path)? {
        Volume::Real(v) => Ok(v),
        other => Err(format_err(
            path,
            FormatError::DtypeMismatch {
                expected: "real",
                found: other.kind(),
            },
        )),
    }
}

pub fn read_complex(path: &Path) -> Result<ComplexVolume> {
    match read_volume(path)? {
        Volume::Complex(v) => Ok(v),
        other => Err(format_err(
            path,
            FormatError::DtypeMismatch {
                expected: "complex",
                found: other.kind(),
            },
        )),
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub phantom: PhantomKind,
    /// Sphere radius or half-width of the other primitives, in padded voxels.
    pub size: f64,
    /// Shift of the primitive from the grid center, in padded voxels.
    pub offset: [f64; 3],
    /// Measured grid before zero padding.
    pub measured: [usize; 3],
    pub looks: usize,
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            phantom: PhantomKind::SteppedBlock,
            size: 8.0,
            offset: [0.0; 3],
            measured: [16, 16, 16],
            looks: 4,
            noise_var: 1e-3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardSection {
    /// Zero-padding factor: 1, 1.5 or 2 (any multiple of 1/2 is accepted).
    pub q: f64,
    /// Pupil diameter relative to the shorter measured cross-range extent.
    pub aperture_fraction: f64,
    /// `false` replaces the aperture by `a = 1` in reconstruction.
    pub aperture: bool,
    /// Reconstruction noise variance; defaults to `sim.noise_var`.
    pub sigma_w2: Option<f64>,
}

impl Default for ForwardSection {
    fn default() -> Self {
        ForwardSection {
            q: 2.0,
            aperture_fraction: 0.5,
            aperture: true,
            sigma_w2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSection {
    pub sigma2: f64,
    pub beta_floor: f64,
    pub r_floor: f64,
}

impl Default for EmSection {
    fn default() -> Self {
        EmSection {
            sigma2: 0.01,
            beta_floor: DEFAULT_BETA_FLOOR,
            r_floor: DEFAULT_R_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub wavelength_m: f64,
    pub range_m: f64,
    pub aperture_m: f64,
    pub bandwidth_hz: f64,
    pub pitch_m: Option<[f64; 3]>,
    /// Point-cloud threshold; defaults to the noise floor `sigma_w^2 / alpha`.
    pub threshold: Option<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let g = GeometryParams::default();
        MetricsSection {
            wavelength_m: g.wavelength_m,
            range_m: g.range_m,
            aperture_m: g.aperture_m,
            bandwidth_hz: g.bandwidth_hz,
            pitch_m: g.pitch_m,
            threshold: None,
        }
    }
}

impl MetricsSection {
    pub fn geometry(&self) -> GeometryParams {
        GeometryParams {
            wavelength_m: self.wavelength_m,
            range_m: self.range_m,
            aperture_m: self.aperture_m,
            bandwidth_hz: self.bandwidth_hz,
            pitch_m: self.pitch_m,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimSection,
    pub forward: ForwardSection,
    pub em: EmSection,
    pub prior: PriorConfig,
    pub engine: EngineConfig,
    pub metrics: MetricsSection,
}

fn range_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(ConfigError {
        line: None,
        message: format!("{key}: {msg}"),
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| r.map_err(|e| range_err(key, e));
        let s = &self.sim;
        if s.looks == 0 {
            return Err(range_err("sim.looks", "must be >= 1"));
        }
        if !(s.noise_var > 0.0 && s.noise_var.is_finite()) {
            return Err(range_err(
                "sim.noise_var",
                format!("{} must be > 0", s.noise_var),
            ));
        }
        let f = &self.forward;
        if !(f.aperture_fraction > 0.0 && f.aperture_fraction <= 1.0) {
            return Err(range_err(
                "forward.aperture_fraction",
                format!("{} not in (0, 1]", f.aperture_fraction),
            ));
        }
        if let Some(s2) = f.sigma_w2 {
            if !(s2 > 0.0 && s2.is_finite()) {
                return Err(range_err("forward.sigma_w2", format!("{s2} must be > 0")));
            }
        }
        let dims = self
            .dims()
            .map_err(|e| range_err("sim.measured / forward.q", e))?;
        wrap("sim", self.phantom_at(dims).validate())?;
        let e = &self.em;
        if !(e.sigma2 > 0.0 && e.sigma2.is_finite()) {
            return Err(range_err("em.sigma2", format!("{} must be > 0", e.sigma2)));
        }
        if !(e.beta_floor > 1.0 && e.beta_floor.is_finite()) {
            return Err(range_err(
                "em.beta_floor",
                format!("{} must be > 1", e.beta_floor),
            ));
        }
        if !(e.r_floor > 0.0 && e.r_floor.is_finite()) {
            return Err(range_err(
                "em.r_floor",
                format!("{} must be > 0", e.r_floor),
            ));
        }
        wrap("prior", self.prior.validate())?;
        wrap("engine", self.engine.validate())?;
        wrap("metrics", self.metrics.geometry().validate())?;
        if let Some(t) = self.metrics.threshold {
            if !(t >= 0.0) {
                return Err(range_err("metrics.threshold", format!("{t} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn pad_factor(&self) -> Result<PadFactor> {
        PadFactor::from_f64(self.forward.q)
    }

    /// Padded reconstruction grid.
    pub fn dims(&self) -> Result<Dims> {
        Dims::padded(self.sim.measured, self.pad_factor()?)
    }

    fn phantom_at(&self, dims: Dims) -> PhantomCheck {
        PhantomCheck(Phantom {
            kind: self.sim.phantom,
            offset: self.sim.offset,
            size: self.sim.size,
            dims,
        })
    }

    pub fn phantom(&self) -> Result<Phantom> {
        Ok(self.phantom_at(self.dims()?).0)
    }

    pub fn sim_params(&self) -> Result<SimParams> {
        Ok(SimParams {
            looks: self.sim.looks,
            noise_var: self.sim.noise_var,
            seed: self.sim.seed,
            dims: self.dims()?,
            aperture_fraction: self.forward.aperture_fraction,
        })
    }

    pub fn sigma_w2(&self) -> f64 {
        self.forward.sigma_w2.unwrap_or(self.sim.noise_var)
    }

    /// Reconstruction operator for `mask`, honoring `forward.aperture`.
    pub fn operator_for(&self, mask: ApertureMask) -> Result<ForwardOperator> {
        let op = ForwardOperator::new(mask, self.sigma_w2())?;
        Ok(if self.forward.aperture {
            op
        } else {
            op.without_aperture()
        })
    }

    /// Reconstruction operator with the configured aperture.
    pub fn operator(&self) -> Result<ForwardOperator> {
        self.operator_for(make_aperture(self.dims()?, self.forward.aperture_fraction)?)
    }

    pub fn em_params(&self, op: &ForwardOperator) -> Result<EmParams> {
        let p = EmParams {
            sigma_w2: op.sigma_w2(),
            sigma2: self.em.sigma2,
            beta_floor: self.em.beta_floor,
            alpha: op.alpha(),
            r_floor: self.em.r_floor,
        };
        p.validate()?;
        Ok(p)
    }
}

struct PhantomCheck(Phantom);

impl PhantomCheck {
    fn validate(&self) -> Result<()> {
        crate::sim::make_phantom(&self.0).map(|_| ())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a configuration; missing keys take their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        Error::Config(ConfigError {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().trim().to_string(),
        })
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(c) => Error::Config(ConfigError {
            message: format!("{}: {}", path.display(), c.message),
            ..c
        }),
        other => other,
    })
}

/// Canonical text form of a configuration.
pub fn dump_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| {
        Error::Config(ConfigError {
            line: None,
            message: e.to_string(),
        })
    })
}

// ---------------------------------------------------------------------------
// Dataset bundles

pub const MANIFEST: &str = "manifest.toml";
pub const MASK_FILE: &str = "mask.clvx";
pub const TRUTH_FILE: &str = "truth.clvx";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub looks: usize,
    pub seed: u64,
    pub noise_var: f64,
    pub snr_db: f64,
    pub shape: [usize; 3],
    pub q_num: u16,
    pub q_den: u16,
    pub files: Vec<String>,
    pub mask: String,
    pub truth: Option<String>,
}

/// Manifest of a dataset directory: dataset facts plus the configuration
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset: DatasetInfo,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    pub looks: Vec<ComplexVolume>,
    pub mask: ApertureMask,
    pub truth: Option<RealVolume>,
}

pub fn look_file(l: usize) -> String {
    format!("look_{l:03}.clvx")
}

impl DatasetBundle {
    pub fn new(
        config: &RunConfig,
        looks: Vec<ComplexVolume>,
        mask: ApertureMask,
        truth: Option<RealVolume>,
        snr_db: f64,
    ) -> Result<Self> {
        let dims = mask.dims();
        for y in &looks {
            dims.check(&y.dims())?;
        }
        if let Some(t) = &truth {
            dims.check(&t.dims())?;
        }
        let info = DatasetInfo {
            looks: looks.len(),
            seed: config.sim.seed,
            noise_var: config.sim.noise_var,
            snr_db,
            shape: dims.shape(),
            q_num: dims.q().num(),
            q_den: dims.q().den(),
            files: (0..looks.len()).map(look_file).collect(),
            mask: MASK_FILE.into(),
            truth: truth.as_ref().map(|_| TRUTH_FILE.into()),
        };
        Ok(DatasetBundle {
            manifest: Manifest {
                dataset: info,
                config: config.clone(),
            },
            looks,
            mask,
            truth,
        })
    }

    pub fn dims(&self) -> Dims {
        self.mask.dims()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let info = &self.manifest.dataset;
        for (y, name) in self.looks.iter().zip(&info.files) {
            write_complex(&dir.join(name), y)?;
        }
        write_real(&dir.join(&info.mask), &self.mask.to_volume())?;
        if let (Some(t), Some(name)) = (&self.truth, &info.truth) {
            write_real(&dir.join(name), t)?;
        }
        let text = toml::to_string(&self.manifest).map_err(|e| {
            Error::Config(ConfigError {
                line: None,
                message: e.to_string(),
            })
        })?;
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| {
            Error::Config(ConfigError {
                line: e.span().map(|s| line_of(&text, s.start)),
                message: format!("{}: {}", path.display(), e.message().trim()),
            })
        })?;
        let info = &manifest.dataset;
        if info.looks != info.files.len() || info.looks == 0 {
            return Err(Error::Config(ConfigError {
                line: None,
                message: format!(
                    "{}: manifest lists {} looks but {} files",
                    path.display(),
                    info.looks,
                    info.files.len()
                ),
            }));
        }
        let q = PadFactor::new(info.q_num, info.q_den)?;
        let [nx, ny, nt] = info.shape;
        let dims = Dims::with_factor(nx, ny, nt, q)?;
        let looks = info
            .files
            .iter()
            .map(|f| {
                let y = read_complex(&dir.join(f))?;
                dims.check(&y.dims())?;
                Ok(y)
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = ApertureMask::from_volume(&read_real(&dir.join(&info.mask))?.with_dims(dims)?)?;
        let truth = match &info.truth {
            Some(name) => Some(read_real(&dir.join(name))?.with_dims(dims)?),
            None => None,
        };
        Ok(DatasetBundle {
            manifest,
            looks,
            mask,
            truth,
        })
    }
}

// ---------------------------------------------------------------------------
// Reports and exports

pub const TRACE_HEADER: &str = "iteration\tconvergence_error\tmu_residual\twall_time_s";

pub fn trace_to_tsv(trace: &DiagnosticsTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{}\t{:e}\t{:e}\t{:.6}",
            r.iteration, r.convergence_error, r.mu_residual, r.wall_time_s
        );
    }
    out
}

pub fn parse_trace(text: &str) -> Result<DiagnosticsTrace> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Config(ConfigError {
            line: Some(1),
            message: "missing trace header".into(),
        }));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || {
            Error::Config(ConfigError {
                line: Some(i + 2),
                message: format!("malformed trace row {line:?}"),
            })
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(crate::mace::TraceRow {
            iteration: f[0].parse().map_err(|_| bad())?,
            convergence_error: f[1].parse().map_err(|_| bad())?,
            mu_residual: f[2].parse().map_err(|_| bad())?,
            wall_time_s: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(DiagnosticsTrace { rows })
}

pub fn write_trace(path: &Path, trace: &DiagnosticsTrace) -> Result<()> {
    fs::write(path, trace_to_tsv(trace))?;
    Ok(())
}

/// "x y z r" per line with 9 significant digits.
pub fn point_cloud_to_text(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in &cloud.points {
        let _ = writeln!(
            out,
            "{:.8e} {:.8e} {:.8e} {:.8e}",
            p.pos[0], p.pos[1], p.pos[2], p.r
        );
    }
    out
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, point_cloud_to_text(cloud))?;
    Ok(())
}

/// Depth and reflectivity maps as tab-separated `nx` rows of `ny` values.
pub fn write_projection(path: &Path, dims: Dims, values: &[f64], depth: &[usize]) -> Result<()> {
    let ny = dims.ny();
    let mut out = String::from("# reflectivity\n");
    for row in values.chunks(ny) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out.push_str("# depth index\n");
    for row in depth.chunks(ny) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Evaluation summary written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub psnr_beta: f64,
    pub threshold: f64,
    pub cutoff_m: f64,
    pub points: usize,
    pub truth_points: usize,
    pub retained: usize,
    pub fp_rate: f64,
    pub euclid_m: Option<f64>,
    pub nrmse: Option<f64>,
    pub nrmse_beta: Option<f64>,
}

impl MetricsReport {
    pub fn new(
        psnr: Psnr,
        threshold: f64,
        cutoff_m: f64,
        points: usize,
        truth_points: usize,
        m: &CloudMetrics,
    ) -> Self {
        MetricsReport {
            psnr_db: psnr.db,
            psnr_beta: psnr.beta,
            threshold,
            cutoff_m,
            points,
            truth_points,
            retained: m.retained,
            fp_rate: m.fp_rate,
            euclid_m: m.euclid_m,
            nrmse: m.nrmse,
            nrmse_beta: m.beta,
        }
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| {
            Error::Config(ConfigError {
                line: None,
                message: e.to_string(),
            })
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            Error::Config(ConfigError {
                line: e.span().map(|s| line_of(text, s.start)),
                message: e.message().to_string(),
            })
        })
    }
}

/// `<dir>/<name>`, creating `dir` if needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_complex(d: Dims, seed: u64) -> ComplexVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexVolume::from_fn(d, |_| {
            Complex64::new(
                rng.random_range(-1.0f32..1.0) as f64,
                rng.random_range(-1.0f32..1.0) as f64,
            )
        })
    }

    #[test]
    fn header_layout() {
        let d = Dims::padded([4, 4, 2], PadFactor::THREE_HALVES).unwrap();
        let b = encode_volume(&Volume::Real(RealVolume::filled(d, 1.0))).unwrap();
        assert_eq!(&b[..4], b"CLVX");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..10], &6u32.to_le_bytes());
        assert_eq!(&b[14..18], &3u32.to_le_bytes());
        assert_eq!(&b[18..22], &[3, 0, 2, 0]);
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22 + 4 * d.len());
    }

    #[test]
    fn complex_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.clvx");
        let d = Dims::new(16, 16, 16).unwrap();
        let v = random_complex(d, 1);
        write_complex(&path, &v).unwrap();
        let back = read_complex(&path).unwrap();
        assert_eq!(back, v);
        let again = dir.path().join("w.clvx");
        write_complex(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert!(matches!(
            read_real(&path),
            Err(Error::Format {
                source: FormatError::DtypeMismatch {
                    expected: "real",
                    found: "complex"
                },
                ..
            })
        ));
    }

    #[test]
    fn corrupted_files() {
        let d = Dims::new(2, 3, 4).unwrap();
        let good = encode_volume(&Volume::Real(RealVolume::filled(d, 0.5))).unwrap();
        assert_eq!(
            decode_volume(&good[..10]),
            Err(FormatError::Truncated {
                needed: 22,
                available: 10
            })
        );
        assert!(matches!(
            decode_volume(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(decode_volume(&b), Err(FormatError::BadMagic(*b"XLVX")));
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(decode_volume(&b), Err(FormatError::UnsupportedVersion(2)));
        let mut b = good.clone();
        b[5] = 7;
        assert_eq!(decode_volume(&b), Err(FormatError::UnknownDtype(7)));
        let mut b = good.clone();
        b[6] = 3;
        let err = decode_volume(&b).unwrap_err();
        assert_eq!(
            err,
            FormatError::LengthMismatch {
                header_values: 36,
                payload_values: 24
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("36") && msg.contains("24"));
        let mut b = good;
        b[20] = 0;
        assert!(matches!(decode_volume(&b), Err(FormatError::BadHeader(_))));
        let mut bad = RealVolume::filled(d, 0.5);
        bad[3] = f64::NAN;
        assert_eq!(
            encode_volume(&Volume::Real(bad)),
            Err(FormatError::NonFinite(3))
        );
        let mut big = RealVolume::filled(d, 0.5);
        big[0] = 1e300;
        assert_eq!(
            encode_volume(&Volume::Real(big)),
            Err(FormatError::NonFinite(0))
        );
    }

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.engine.rho, 0.5);
        assert_eq!(cfg.engine.max_iters, 250);
        assert_eq!(cfg.sigma_w2(), 1e-3);
    }

    #[test]
    fn config_errors() {
        let e = parse_config("[engine]\nrho = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("rho"), "{e}");
        let e = parse_config("[sim]\nlooks = 2\n\n[engine]\nbogus = 1\n").unwrap_err();
        match e {
            Error::Config(c) => {
                assert_eq!(c.line, Some(5));
                assert!(c.message.contains("bogus"), "{}", c.message);
            }
            other => panic!("{other}"),
        }
        let e = parse_config("[sim]\nlooks = \"four\"\n").unwrap_err();
        assert!(e.to_string().starts_with("line 2"), "{e}");
        assert!(parse_config("[nope]\n").is_err());
        assert!(parse_config("[forward]\nq = 1.3\n").is_err());
        assert!(parse_config("[prior]\nkind = \"bm4d\"\n").is_err());
    }

    #[test]
    fn config_dump_is_idempotent() {
        let mut cfg = RunConfig::default();
        cfg.forward.q = 1.5;
        cfg.sim.measured = [16, 16, 12];
        cfg.forward.sigma_w2 = Some(2e-3);
        cfg.metrics.pitch_m = Some([0.01, 0.01, 0.02]);
        cfg.prior.external.command = vec!["denoiser".into(), "--fast".into()];
        let text = dump_config(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(dump_config(&back).unwrap(), text);
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.sim.measured = [4, 4, 4];
        cfg.sim.size = 2.0;
        cfg.sim.looks = 2;
        let d = cfg.dims().unwrap();
        let mask = make_aperture(d, 0.5).unwrap();
        let looks = vec![random_complex(d, 1), random_complex(d, 2)];
        let truth = RealVolume::from_fn(d, |j| (j % 5) as f64 * 0.25);
        let b = DatasetBundle::new(&cfg, looks, mask, Some(truth), 12.5).unwrap();
        b.write(dir.path()).unwrap();
        assert_eq!(DatasetBundle::read(dir.path()).unwrap(), b);
        fs::remove_file(dir.path().join(look_file(1))).unwrap();
        assert!(DatasetBundle::read(dir.path()).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let trace = DiagnosticsTrace {
            rows: vec![
                crate::mace::TraceRow {
                    iteration: 1,
                    convergence_error: 0.125,
                    mu_residual: 3.5e-7,
                    wall_time_s: 0.5,
                },
                crate::mace::TraceRow {
                    iteration: 2,
                    convergence_error: 1.0 / 3.0,
                    mu_residual: 1e-9,
                    wall_time_s: 1.25,
                },
            ],
        };
        let text = trace_to_tsv(&trace);
        assert!(text.starts_with("iteration\tconvergence_error\tmu_residual\twall_time_s\n1\t"));
        assert_eq!(parse_trace(&text).unwrap(), trace);
        assert!(parse_trace("nope\n").is_err());
    }

    #[test]
    fn point_cloud_text() {
        let c = PointCloud {
            points: vec![crate::metrics::Point {
                pos: [0.0, 1.5, 1.0 / 3.0],
                r: 123456789.0,
            }],
        };
        assert_eq!(
            point_cloud_to_text(&c),
            "0.00000000e0 1.50000000e0 3.33333333e-1 1.23456789e8\n"
        );
    }

    #[test]
    fn report_round_trip() {
        let m = CloudMetrics {
            euclid_m: None,
            fp_rate: 1.0,
            nrmse: None,
            beta: None,
            retained: 0,
            removed: 3,
        };
        let r = MetricsReport::new(
            Psnr {
                db: f64::INFINITY,
                beta: 0.5,
            },
            1e-3,
            0.047,
            3,
            10,
            &m,
        );
        assert_eq!(MetricsReport::from_text(&r.to_text().unwrap()).unwrap(), r);
    }
}
