//! Prior agents: isotropic TV, slice-wise l2,1 shrinkage, Gaussian smoothing
//! and an external denoiser reached over a framed stdio protocol.

use std::io::{self, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, RealVolume};

pub const DEFAULT_TV_ITERS: usize = 20;
pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Tv,
    L21,
    Gaussian,
    External,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" => Ok(PriorKind::Tv),
            "l21" => Ok(PriorKind::L21),
            "gaussian" => Ok(PriorKind::Gaussian),
            "external" => Ok(PriorKind::External),
            other => Err(Error::invalid(
                "prior kind",
                format!("unknown prior {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub timeout_secs: f64,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            command: Vec::new(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// TV or l2,1 weight, or the Gaussian width in voxels.
    pub strength: f64,
    pub inner_iters: usize,
    pub external: ExternalConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: PriorKind::Tv,
            strength: 1e-4,
            inner_iters: DEFAULT_TV_ITERS,
            external: ExternalConfig::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::invalid(
                "prior.strength",
                format!("{} must be >= 0", self.strength),
            ));
        }
        if self.inner_iters == 0 {
            return Err(Error::invalid("prior.inner_iters", "must be >= 1"));
        }
        if self.kind == PriorKind::External {
            if self.external.command.is_empty() {
                return Err(Error::invalid("prior.external.command", "empty command"));
            }
            if !(self.external.timeout_secs > 0.0 && self.external.timeout_secs.is_finite()) {
                return Err(Error::invalid(
                    "prior.external.timeout_secs",
                    format!("{} must be > 0", self.external.timeout_secs),
                ));
            }
        }
        Ok(())
    }
}

fn strides(d: Dims) -> [usize; 3] {
    [d.ny() * d.nt(), d.nt(), 1]
}

/// Forward differences with a zero last difference along each axis.
fn gradient(x: &[f64], d: Dims, out: &mut [[f64; 3]]) {
    let shape = d.shape();
    let st = strides(d);
    out.par_iter_mut().enumerate().for_each(|(j, g)| {
        let c = d.coords(j);
        for a in 0..3 {
            g[a] = if c[a] + 1 < shape[a] {
                x[j + st[a]] - x[j]
            } else {
                0.0
            };
        }
    });
}

/// Adjoint of [`gradient`] (minus the discrete divergence).
fn gradient_adjoint(p: &[[f64; 3]], d: Dims, out: &mut [f64]) {
    let shape = d.shape();
    let st = strides(d);
    out.par_iter_mut().enumerate().for_each(|(j, o)| {
        let c = d.coords(j);
        let mut acc = 0.0;
        for a in 0..3 {
            if c[a] + 1 < shape[a] {
                acc -= p[j][a];
            }
            if c[a] > 0 {
                acc += p[j - st[a]][a];
            }
        }
        *o = acc;
    });
}

/// Isotropic total variation `sum_j |(D x)_j|`.
pub fn total_variation(x: &RealVolume) -> f64 {
    let mut g = vec![[0.0; 3]; x.len()];
    gradient(x.as_slice(), x.dims(), &mut g);
    g.par_iter()
        .map(|g| (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt())
        .sum()
}

/// `0.5 |x - v|^2 + lambda TV(x)`.
pub fn tv_energy(x: &RealVolume, v: &RealVolume, lambda: f64) -> Result<f64> {
    Ok(0.5 * x.distance(v)?.powi(2) + lambda * total_variation(x))
}

/// Approximate prox of `lambda TV` by accelerated projected gradient on the
/// dual, with a fixed iteration budget.
pub fn tv_denoise(v: &RealVolume, lambda: f64, inner_iters: usize) -> Result<RealVolume> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(
            "tv lambda",
            format!("{lambda} must be >= 0"),
        ));
    }
    if lambda == 0.0 || inner_iters == 0 {
        return Ok(v.clone());
    }
    let d = v.dims();
    let n = v.len();
    let step = 1.0 / (12.0 * lambda);
    let mut p = vec![[0.0; 3]; n];
    let mut p_prev = p.clone();
    let mut q = p.clone();
    let mut t = 1.0f64;
    let mut x = vec![0.0; n];
    let mut g = vec![[0.0; 3]; n];
    let primal = |q: &[[f64; 3]], x: &mut [f64]| {
        gradient_adjoint(q, d, x);
        x.par_iter_mut()
            .zip(v.as_slice().par_iter())
            .for_each(|(x, &v)| *x = v - lambda * *x);
    };
    for _ in 0..inner_iters {
        primal(&q, &mut x);
        gradient(&x, d, &mut g);
        std::mem::swap(&mut p, &mut p_prev);
        p.par_iter_mut()
            .zip(q.par_iter().zip(g.par_iter()))
            .for_each(|(p, (q, g))| {
                let mut s = [q[0] + step * g[0], q[1] + step * g[1], q[2] + step * g[2]];
                let norm = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
                if norm > 1.0 {
                    s.iter_mut().for_each(|c| *c /= norm);
                }
                *p = s;
            });
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        q.par_iter_mut()
            .zip(p.par_iter().zip(p_prev.par_iter()))
            .for_each(|(q, (p, pp))| {
                for a in 0..3 {
                    q[a] = p[a] + momentum * (p[a] - pp[a]);
                }
            });
        t = t_next;
    }
    primal(&p, &mut x);
    let out = RealVolume::from_vec(d, x)?;
    if tv_energy(&out, v, lambda)? > lambda * total_variation(v) {
        return Ok(v.clone());
    }
    Ok(out)
}

/// Exact prox of `lambda sum_z |v(., ., z)|_2`: block soft-thresholding of
/// each constant-range slice.
pub fn l21_shrink(v: &RealVolume, lambda: f64) -> Result<RealVolume> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(
            "l21 lambda",
            format!("{lambda} must be >= 0"),
        ));
    }
    let d = v.dims();
    let nt = d.nt();
    let mut norms = vec![0.0; nt];
    for (j, x) in v.as_slice().iter().enumerate() {
        norms[j % nt] += x * x;
    }
    let scale: Vec<f64> = norms
        .iter()
        .map(|m2| {
            let m = m2.sqrt();
            if m <= lambda {
                0.0
            } else {
                1.0 - lambda / m
            }
        })
        .collect();
    Ok(RealVolume::from_fn(d, |j| v[j] * scale[j % nt]))
}

/// Normalized sampled Gaussian of standard deviation `width`, truncated at
/// `ceil(4 width)`.
pub fn gaussian_kernel(width: f64) -> Vec<f64> {
    let radius = (4.0 * width).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (width * width)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian smoothing with reflective boundaries.
pub fn gaussian_denoise(v: &RealVolume, width: f64) -> Result<RealVolume> {
    if !(width >= 0.0 && width.is_finite()) {
        return Err(Error::invalid(
            "gaussian width",
            format!("{width} must be >= 0"),
        ));
    }
    if width == 0.0 {
        return Ok(v.clone());
    }
    let kernel = gaussian_kernel(width);
    let radius = (kernel.len() / 2) as i64;
    let d = v.dims();
    let shape = d.shape();
    let st = strides(d);
    let mut cur = v.as_slice().to_vec();
    for axis in 0..3 {
        let n = shape[axis];
        let src = cur;
        cur = (0..d.len())
            .into_par_iter()
            .map(|j| {
                let c = d.coords(j)[axis] as i64;
                let base = j - c as usize * st[axis];
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * src[base + reflect(c + k as i64 - radius, n) * st[axis]])
                    .sum()
            })
            .collect();
    }
    RealVolume::from_vec(d, cur)
}

// ---------------------------------------------------------------------------
// Sidecar protocol

pub const MAGIC: [u8; 4] = *b"CLDN";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;
/// Frames announcing more than this many payload bytes are refused.
pub const MAX_PAYLOAD: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Request = 1,
    Reply = 2,
    Handshake = 3,
    Shutdown = 4,
    Error = 255,
}

impl Opcode {
    pub fn from_u8(b: u8) -> Option<Opcode> {
        match b {
            1 => Some(Opcode::Request),
            2 => Some(Opcode::Reply),
            3 => Some(Opcode::Handshake),
            4 => Some(Opcode::Shutdown),
            255 => Some(Opcode::Error),
            _ => None,
        }
    }
}

/// Frame as read from the wire, before any validation.
///
/// `payload` holds raw bytes; the header's length field counts bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub magic: [u8; 4],
    pub version: u8,
    pub opcode: u8,
    pub reserved: u16,
    pub dims: [u32; 3],
    pub payload: Vec<u8>,
}

impl RawFrame {
    pub fn new(opcode: Opcode, dims: [u32; 3], payload: Vec<u8>) -> Self {
        RawFrame {
            magic: MAGIC,
            version: PROTOCOL_VERSION,
            opcode: opcode as u8,
            reserved: 0,
            dims,
            payload,
        }
    }

    pub fn volume(opcode: Opcode, v: &RealVolume) -> Self {
        let s = v.dims().shape();
        let payload = v
            .as_slice()
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect();
        Self::new(opcode, [s[0] as u32, s[1] as u32, s[2] as u32], payload)
    }

    pub fn error(message: &str) -> Self {
        Self::new(Opcode::Error, [0; 3], message.as_bytes().to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.magic);
        out.push(self.version);
        out.push(self.opcode);
        out.extend_from_slice(&self.reserved.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Checks magic, version and reserved bits, returning the opcode.
    pub fn check(&self) -> std::result::Result<Opcode, String> {
        if self.magic != MAGIC {
            return Err(format!("bad magic {:?}", self.magic));
        }
        if self.version != PROTOCOL_VERSION {
            return Err(format!("unsupported protocol version {}", self.version));
        }
        if self.reserved != 0 {
            return Err(format!("reserved field is {}, expected 0", self.reserved));
        }
        Opcode::from_u8(self.opcode).ok_or_else(|| format!("unknown opcode {}", self.opcode))
    }

    /// Decodes a volume payload whose length must match the header dims.
    pub fn to_volume(&self) -> std::result::Result<RealVolume, String> {
        let [nx, ny, nt] = self.dims.map(|d| d as usize);
        let dims = Dims::new(nx, ny, nt).map_err(|e| e.to_string())?;
        if self.payload.len() != 4 * dims.len() {
            return Err(format!(
                "payload has {} bytes but dims {nx}x{ny}x{nt} need {}",
                self.payload.len(),
                4 * dims.len()
            ));
        }
        let data = self
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        RealVolume::from_vec(dims, data).map_err(|e| e.to_string())
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<RawFrame>> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "truncated frame header",
                ))
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let u32_at = |i: usize| u32::from_le_bytes([h[i], h[i + 1], h[i + 2], h[i + 3]]);
    let len = u64::from_le_bytes(h[20..28].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("payload length {len} too large"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(RawFrame {
        magic: [h[0], h[1], h[2], h[3]],
        version: h[4],
        opcode: h[5],
        reserved: u16::from_le_bytes([h[6], h[7]]),
        dims: [u32_at(8), u32_at(12), u32_at(16)],
        payload,
    }))
}

pub fn write_frame(w: &mut impl Write, frame: &RawFrame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

/// Denoisers served by the reference sidecar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceDenoiser {
    Identity,
    Gaussian(f64),
}

/// Reference sidecar loop. Returns after a shutdown frame or end of input.
///
/// Malformed frames get an error reply and the loop continues.
pub fn serve(
    mut input: impl Read,
    mut output: impl Write,
    denoiser: ReferenceDenoiser,
) -> Result<()> {
    let mut greeted = false;
    while let Some(frame) = read_frame(&mut input)? {
        let reply = match frame.check() {
            Err(msg) => RawFrame::error(&msg),
            Ok(Opcode::Shutdown) => return Ok(()),
            Ok(Opcode::Handshake) => {
                greeted = true;
                RawFrame::new(Opcode::Handshake, [0; 3], Vec::new())
            }
            Ok(Opcode::Request) if !greeted => RawFrame::error("request before handshake"),
            Ok(Opcode::Request) => match denoiser {
                ReferenceDenoiser::Identity => match frame.to_volume() {
                    Ok(_) => RawFrame {
                        opcode: Opcode::Reply as u8,
                        ..frame
                    },
                    Err(msg) => RawFrame::error(&msg),
                },
                ReferenceDenoiser::Gaussian(width) => match frame.to_volume() {
                    Ok(v) => RawFrame::volume(Opcode::Reply, &gaussian_denoise(&v, width)?),
                    Err(msg) => RawFrame::error(&msg),
                },
            },
            Ok(op) => RawFrame::error(&format!("unexpected opcode {op:?}")),
        };
        write_frame(&mut output, &reply)?;
    }
    Ok(())
}

/// Client side of the sidecar protocol. One request is in flight at a time.
pub struct SidecarClient {
    writer: Box<dyn Write + Send>,
    replies: Receiver<io::Result<Option<RawFrame>>>,
    timeout: Duration,
    child: Option<Child>,
    broken: bool,
}

impl std::fmt::Debug for SidecarClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SidecarClient")
            .field("timeout", &self.timeout)
            .field("pid", &self.child.as_ref().map(Child::id))
            .field("broken", &self.broken)
            .finish()
    }
}

impl SidecarClient {
    /// Spawns `command` and performs the handshake.
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::invalid("sidecar command", "empty command"))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Sidecar(format!("cannot start {program:?}: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::build(stdout, stdin, timeout);
        client.child = Some(child);
        client.handshake()?;
        Ok(client)
    }

    /// Client over existing streams; performs the handshake.
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Result<Self> {
        let mut client = Self::build(reader, writer, timeout);
        client.handshake()?;
        Ok(client)
    }

    fn build(
        mut reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        timeout: Duration,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || loop {
            let frame = read_frame(&mut reader);
            let stop = !matches!(frame, Ok(Some(_)));
            if tx.send(frame).is_err() || stop {
                break;
            }
        });
        SidecarClient {
            writer: Box::new(writer),
            replies: rx,
            timeout,
            child: None,
            broken: false,
        }
    }

    fn exchange(&mut self, frame: &RawFrame) -> Result<RawFrame> {
        if self.broken {
            return Err(Error::Sidecar("connection is no longer usable".into()));
        }
        let result = self.exchange_inner(frame);
        if result.is_err() {
            self.broken = true;
        }
        result
    }

    fn exchange_inner(&mut self, frame: &RawFrame) -> Result<RawFrame> {
        write_frame(&mut self.writer, frame)
            .map_err(|e| Error::Sidecar(format!("write failed: {e}")))?;
        let reply = match self.replies.recv_timeout(self.timeout) {
            Ok(Ok(Some(reply))) => reply,
            Ok(Ok(None)) | Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Sidecar("sidecar closed its output".into()))
            }
            Ok(Err(e)) => return Err(Error::Sidecar(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Sidecar(format!(
                    "no reply within {:.1} s",
                    self.timeout.as_secs_f64()
                )))
            }
        };
        match reply
            .check()
            .map_err(|m| Error::Sidecar(format!("protocol error: {m}")))?
        {
            Opcode::Error => Err(Error::Sidecar(format!(
                "sidecar error: {}",
                String::from_utf8_lossy(&reply.payload)
            ))),
            _ => Ok(reply),
        }
    }

    fn handshake(&mut self) -> Result<()> {
        let reply = self.exchange(&RawFrame::new(Opcode::Handshake, [0; 3], Vec::new()))?;
        if reply.opcode != Opcode::Handshake as u8 {
            self.broken = true;
            return Err(Error::Sidecar(format!(
                "protocol error: handshake answered with opcode {}",
                reply.opcode
            )));
        }
        Ok(())
    }

    /// Sends `v` and returns the denoised volume with the same dims.
    pub fn denoise(&mut self, v: &RealVolume) -> Result<RealVolume> {
        let request = RawFrame::volume(Opcode::Request, v);
        let reply = self.exchange(&request)?;
        let fail = |this: &mut Self, msg: String| {
            this.broken = true;
            Err(Error::Sidecar(format!("protocol error: {msg}")))
        };
        if reply.opcode != Opcode::Reply as u8 {
            return fail(
                self,
                format!("expected a reply frame, got opcode {}", reply.opcode),
            );
        }
        if reply.dims != request.dims {
            return fail(
                self,
                format!(
                    "reply dims {:?} differ from request dims {:?}",
                    reply.dims, request.dims
                ),
            );
        }
        match reply.to_volume() {
            Ok(out) => Ok(out.with_dims(v.dims())?),
            Err(msg) => fail(self, msg),
        }
    }

    /// Sends a shutdown frame and waits briefly for the child to exit.
    pub fn shutdown(&mut self) {
        if !self.broken {
            let _ = write_frame(
                &mut self.writer,
                &RawFrame::new(Opcode::Shutdown, [0; 3], Vec::new()),
            );
        }
        self.broken = true;
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        thread::sleep(Duration::from_millis(10))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}

impl Drop for SidecarClient {
    fn drop(&mut self) {
        self.shutdown();
    }
}

// ---------------------------------------------------------------------------

/// Prior agent `H` built from a [`PriorConfig`].
#[derive(Debug)]
pub struct PriorAgent {
    config: PriorConfig,
    client: Option<SidecarClient>,
}

impl PriorAgent {
    /// Validates the configuration; an external prior starts its sidecar here.
    pub fn new(config: PriorConfig) -> Result<Self> {
        config.validate()?;
        let client = if config.kind == PriorKind::External {
            Some(SidecarClient::spawn(
                &config.external.command,
                Duration::from_secs_f64(config.external.timeout_secs),
            )?)
        } else {
            None
        };
        Ok(PriorAgent { config, client })
    }

    /// External agent over an already connected client.
    pub fn with_client(config: PriorConfig, client: SidecarClient) -> Self {
        PriorAgent {
            config: PriorConfig {
                kind: PriorKind::External,
                ..config
            },
            client: Some(client),
        }
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn denoise(&mut self, v: &RealVolume) -> Result<RealVolume> {
        let c = &self.config;
        match c.kind {
            PriorKind::Tv => tv_denoise(v, c.strength, c.inner_iters),
            PriorKind::L21 => l21_shrink(v, c.strength),
            PriorKind::Gaussian => gaussian_denoise(v, c.strength),
            PriorKind::External => self
                .client
                .as_mut()
                .ok_or_else(|| Error::Sidecar("external prior has no sidecar".into()))?
                .denoise(v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(d: Dims, seed: u64) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealVolume::from_fn(d, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn gradient_adjoint_identity() {
        let d = Dims::new(5, 4, 3).unwrap();
        let x = random(d, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<[f64; 3]> = (0..d.len())
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let mut g = vec![[0.0; 3]; d.len()];
        gradient(x.as_slice(), d, &mut g);
        let mut dt = vec![0.0; d.len()];
        gradient_adjoint(&p, d, &mut dt);
        let lhs: f64 = g
            .iter()
            .zip(&p)
            .map(|(g, p)| g[0] * p[0] + g[1] * p[1] + g[2] * p[2])
            .sum();
        let rhs: f64 = x.as_slice().iter().zip(&dt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn tv_fixed_points_and_identity() {
        let d = Dims::new(6, 6, 6).unwrap();
        let c = RealVolume::filled(d, 0.3);
        assert_eq!(tv_denoise(&c, 0.5, 20).unwrap(), c);
        let v = random(d, 3);
        assert_eq!(tv_denoise(&v, 0.0, 20).unwrap(), v);
        assert!(tv_denoise(&v, -1.0, 20).is_err());
    }

    #[test]
    fn tv_decreases_energy() {
        let d = Dims::new(8, 8, 8).unwrap();
        let v = random(d, 4);
        for lambda in [0.01, 0.1, 1.0] {
            let out = tv_denoise(&v, lambda, 20).unwrap();
            assert!(tv_energy(&out, &v, lambda).unwrap() <= lambda * total_variation(&v));
        }
    }

    #[test]
    fn tv_large_lambda_flattens_to_mean() {
        let d = Dims::new(6, 6, 6).unwrap();
        let v = random(d, 5);
        let out = tv_denoise(&v, 1e4, 500).unwrap();
        let mean = v.mean();
        for &x in out.as_slice() {
            assert!((x - mean).abs() < 1e-3, "{x} vs {mean}");
        }
    }

    #[test]
    fn l21_examples() {
        let d = Dims::new(2, 2, 3).unwrap();
        // Slice z = 0 has norm 1, z = 1 norm 2, z = 2 norm 4.
        let v = RealVolume::from_fn(d, |j| [0.5, 1.0, 2.0][j % 3]);
        let out = l21_shrink(&v, 2.0).unwrap();
        for j in 0..d.len() {
            let expected = [0.0, 0.0, 1.0][j % 3];
            assert!((out[j] - expected).abs() < 1e-15);
        }
        let half = l21_shrink(&v, 1.0).unwrap();
        assert!((half[1] - 0.5).abs() < 1e-15);
        assert_eq!(l21_shrink(&v, 0.0).unwrap(), v);
    }

    #[test]
    fn gaussian_kernel_and_mass() {
        let d = Dims::new(9, 9, 9).unwrap();
        let mut imp = RealVolume::zeros(d);
        imp[d.index(4, 4, 4)] = 1.0;
        let out = gaussian_denoise(&imp, 1.0).unwrap();
        assert!((out.sum() - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(1.0);
        let expected = k[4] * k[4] * k[5];
        assert!((out.get(4, 4, 5) - expected).abs() < 1e-15);
        let c = RealVolume::filled(d, 2.5);
        let smooth = gaussian_denoise(&c, 3.0).unwrap();
        assert!(smooth.distance(&c).unwrap() < 1e-12);
        let v = random(d, 6);
        assert_eq!(gaussian_denoise(&v, 0.0).unwrap(), v);
        let wide = gaussian_denoise(&v, 7.0).unwrap();
        assert!((wide.sum() - v.sum()).abs() < 1e-8 * v.sum());
    }

    #[test]
    fn reflection() {
        assert_eq!(
            (-3..8).map(|i| reflect(i, 3)).collect::<Vec<_>>(),
            [2, 1, 0, 0, 1, 2, 2, 1, 0, 0, 1]
        );
    }

    #[test]
    fn frame_layout() {
        let f = RawFrame::new(Opcode::Request, [2, 3, 4], vec![1, 2, 3, 4]);
        let b = f.encode();
        assert_eq!(&b[..4], b"CLDN");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..8], &[0, 0]);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &4u32.to_le_bytes());
        assert_eq!(&b[20..28], &4u64.to_le_bytes());
        assert_eq!(&b[28..], &[1, 2, 3, 4]);
        let back = read_frame(&mut &b[..]).unwrap().unwrap();
        assert_eq!(back, f);
        assert!(read_frame(&mut &b[..0]).unwrap().is_none());
        assert!(read_frame(&mut &b[..10]).is_err());
    }

    fn connect(denoiser: ReferenceDenoiser, timeout: Duration) -> SidecarClient {
        let (req_r, req_w) = io::pipe().unwrap();
        let (rep_r, rep_w) = io::pipe().unwrap();
        thread::spawn(move || serve(req_r, rep_w, denoiser));
        SidecarClient::from_streams(rep_r, req_w, timeout).unwrap()
    }

    #[test]
    fn identity_sidecar_round_trip() {
        let d = Dims::new(4, 5, 6).unwrap();
        let v = RealVolume::from_fn(d, |j| (j as f32 * 0.37).sin() as f64);
        let mut client = connect(ReferenceDenoiser::Identity, Duration::from_secs(10));
        let out = client.denoise(&v).unwrap();
        assert_eq!(out, v);
        let out = client.denoise(&v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn gaussian_sidecar_reduces_variance() {
        let d = Dims::new(8, 8, 8).unwrap();
        let mut client = connect(ReferenceDenoiser::Gaussian(1.0), Duration::from_secs(10));
        for trial in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let v = RealVolume::from_fn(d, |_| 1.0 + rng.random_range(-0.2..0.2));
            let var = |x: &RealVolume| x.map(|y| (y - x.mean()).powi(2)).mean();
            let out = client.denoise(&v).unwrap();
            assert!(var(&out) < var(&v));
        }
    }

    #[test]
    fn bad_frames_get_error_replies() {
        let (req_r, mut req_w) = io::pipe().unwrap();
        let (mut rep_r, rep_w) = io::pipe().unwrap();
        let server = thread::spawn(move || serve(req_r, rep_w, ReferenceDenoiser::Identity));
        let v = RealVolume::zeros(Dims::new(2, 2, 2).unwrap());
        let mut ask = |f: RawFrame| {
            write_frame(&mut req_w, &f).unwrap();
            read_frame(&mut rep_r).unwrap().unwrap()
        };
        assert_eq!(ask(RawFrame::volume(Opcode::Request, &v)).opcode, 255);
        assert_eq!(
            ask(RawFrame::new(Opcode::Handshake, [0; 3], vec![])).opcode,
            3
        );
        let mut bad = RawFrame::volume(Opcode::Request, &v);
        bad.magic = *b"XXXX";
        assert_eq!(ask(bad).opcode, 255);
        let mut short = RawFrame::volume(Opcode::Request, &v);
        short.payload.pop();
        assert_eq!(ask(short).opcode, 255);
        assert_eq!(ask(RawFrame::volume(Opcode::Request, &v)).opcode, 2);
        write_frame(&mut req_w, &RawFrame::new(Opcode::Shutdown, [0; 3], vec![])).unwrap();
        server.join().unwrap().unwrap();
    }

    #[test]
    fn wrong_dims_reply_is_a_protocol_error() {
        let (req_r, req_w) = io::pipe().unwrap();
        let (rep_r, mut rep_w) = io::pipe().unwrap();
        thread::spawn(move || {
            let mut req_r = req_r;
            let _ = read_frame(&mut req_r);
            write_frame(
                &mut rep_w,
                &RawFrame::new(Opcode::Handshake, [0; 3], vec![]),
            )
            .unwrap();
            let _ = read_frame(&mut req_r);
            let other = RealVolume::zeros(Dims::new(2, 2, 2).unwrap());
            write_frame(&mut rep_w, &RawFrame::volume(Opcode::Reply, &other)).unwrap();
            let _ = read_frame(&mut req_r);
        });
        let mut client =
            SidecarClient::from_streams(rep_r, req_w, Duration::from_secs(10)).unwrap();
        let err = client
            .denoise(&RealVolume::zeros(Dims::new(3, 3, 3).unwrap()))
            .unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");
    }

    #[test]
    fn silent_sidecar_times_out() {
        let (_req_r, req_w) = io::pipe().unwrap();
        let (rep_r, _rep_w) = io::pipe().unwrap();
        let start = Instant::now();
        let err =
            SidecarClient::from_streams(rep_r, req_w, Duration::from_millis(200)).unwrap_err();
        assert!(err.to_string().contains("no reply"), "{err}");
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn config_validation() {
        let mut c = PriorConfig::default();
        c.validate().unwrap();
        c.inner_iters = 0;
        assert!(c.validate().is_err());
        let c = PriorConfig {
            kind: PriorKind::External,
            ..PriorConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!("l21".parse::<PriorKind>().unwrap(), PriorKind::L21);
    }
}
