//! Wire protocol and TCP plumbing between the imaging/robot side and the
//! controller.
//!
//! Frames travel one way on `port`; commands and status replies share a
//! second connection on `port + 1`. All integers are little-endian.
//!
//! ```text
//! frame:   "USF1" | seq u32 | timestamp_ms u64 | rows u16 | cols u16 | spacing_um u16 | rows*cols bytes
//! command: "USC1" | kind u8 | seq u32 | payload | crc32 u32 (over all preceding bytes)
//!   kind 0 move_delta      dx, dy, dz: i32 micrometres (end-effector frame)
//!   kind 1 stop
//!   kind 2 status_request
//!   kind 3 status          x, y, z: i32 micrometres (world) | force i32 mN | timestamp_ms u64 | flags u8
//! ```

use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::control::{seek_force, ControlConfig, ControlError, ControlState, Plant};
use crate::detector::derive_seed;
use crate::geom::{EeDelta, ProbePose};
use crate::phantom::PhantomModel;
use crate::renderer::{FrameGeometry, GroundTruth, Renderer, UsFrame};

pub const FRAME_MAGIC: [u8; 4] = *b"USF1";
pub const COMMAND_MAGIC: [u8; 4] = *b"USC1";
pub const FRAME_HEADER_LEN: usize = 22;
pub const DEFAULT_PORT: u16 = 5600;
pub const PORT_ENV: &str = "USVS_PORT";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated message: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch")]
    BadChecksum,
    #[error("unknown command kind {0}")]
    UnknownKind(u8),
    #[error("invalid field: {0}")]
    InvalidField(String),
}

impl CodecError {
    /// Stable numeric code per error class.
    pub fn code(&self) -> u8 {
        match self {
            CodecError::BadMagic => 1,
            CodecError::Truncated { .. } => 2,
            CodecError::BadChecksum => 3,
            CodecError::UnknownKind(_) => 4,
            CodecError::InvalidField(_) => 5,
        }
    }
}

fn need(buf: &[u8], n: usize) -> Result<(), CodecError> {
    if buf.len() < n {
        return Err(CodecError::Truncated { needed: n, available: buf.len() });
    }
    Ok(())
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

fn le_i32(b: &[u8]) -> i32 {
    i32::from_le_bytes(b[..4].try_into().unwrap())
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

/// A message type with a 4-byte magic that can be pulled off a byte stream.
pub trait WireMessage: Sized {
    const MAGIC: [u8; 4];
    fn encode(&self) -> Vec<u8>;
    /// Decodes one message from the front of `buf`, returning it and the
    /// number of bytes consumed.
    fn decode(buf: &[u8]) -> Result<(Self, usize), CodecError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMessage {
    pub seq: u32,
    pub timestamp_ms: u64,
    pub rows: u16,
    pub cols: u16,
    pub spacing_um: u16,
    pub payload: Vec<u8>,
}

impl FrameMessage {
    pub fn from_frame(frame: &UsFrame, seq: u32) -> Result<Self, CodecError> {
        let dim = |v: usize, what: &str| u16::try_from(v).map_err(|_| CodecError::InvalidField(format!("{what} {v} exceeds u16")));
        let spacing_um = (frame.spacing_mm * 1000.0).round();
        if !(1.0..=u16::MAX as f64).contains(&spacing_um) {
            return Err(CodecError::InvalidField(format!("spacing {} mm", frame.spacing_mm)));
        }
        Ok(Self {
            seq,
            timestamp_ms: frame.timestamp_ms,
            rows: dim(frame.rows, "rows")?,
            cols: dim(frame.cols, "cols")?,
            spacing_um: spacing_um as u16,
            payload: frame.pixels.clone(),
        })
    }

    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry { rows: self.rows as usize, cols: self.cols as usize, spacing_mm: self.spacing_um as f64 / 1000.0 }
    }

    pub fn into_frame(self) -> UsFrame {
        let g = self.geometry();
        let mut f = UsFrame::new(g, self.payload).expect("decoder checks the payload length");
        f.seq = self.seq;
        f.timestamp_ms = self.timestamp_ms;
        f
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }
}

impl WireMessage for FrameMessage {
    const MAGIC: [u8; 4] = FRAME_MAGIC;

    fn encode(&self) -> Vec<u8> {
        assert_eq!(self.payload.len(), self.rows as usize * self.cols as usize, "payload does not match rows x cols");
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.extend_from_slice(&self.spacing_um.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    fn decode(buf: &[u8]) -> Result<(Self, usize), CodecError> {
        need(buf, 4)?;
        if buf[..4] != FRAME_MAGIC {
            return Err(CodecError::BadMagic);
        }
        need(buf, FRAME_HEADER_LEN)?;
        let rows = le_u16(&buf[16..]);
        let cols = le_u16(&buf[18..]);
        let total = FRAME_HEADER_LEN + rows as usize * cols as usize;
        need(buf, total)?;
        let msg = Self {
            seq: le_u32(&buf[4..]),
            timestamp_ms: le_u64(&buf[8..]),
            rows,
            cols,
            spacing_um: le_u16(&buf[20..]),
            payload: buf[FRAME_HEADER_LEN..total].to_vec(),
        };
        Ok((msg, total))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MoveDelta { dx_um: i32, dy_um: i32, dz_um: i32 },
    Stop,
    StatusRequest,
    Status(RobotStatus),
}

/// Robot state reported after each command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RobotStatus {
    pub x_um: i32,
    pub y_um: i32,
    pub z_um: i32,
    pub force_mn: i32,
    pub timestamp_ms: u64,
    /// Bit 0: the last force seek failed (no contact). Bit 1: stopped.
    pub flags: u8,
}

pub const STATUS_NO_CONTACT: u8 = 1;
pub const STATUS_STOPPED: u8 = 2;

fn um(mm: f64) -> i32 {
    (mm * 1000.0).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

impl RobotStatus {
    pub fn pose(&self) -> ProbePose {
        ProbePose::new(self.x_um as f64 / 1000.0, self.y_um as f64 / 1000.0, self.z_um as f64 / 1000.0)
    }

    pub fn force_n(&self) -> f64 {
        self.force_mn as f64 / 1000.0
    }
}

impl Command {
    pub fn move_delta(delta: EeDelta) -> Self {
        Command::MoveDelta { dx_um: um(delta.dx), dy_um: um(delta.dy), dz_um: um(delta.dz) }
    }

    /// The move in millimetres, for `MoveDelta`.
    pub fn delta_mm(&self) -> Option<EeDelta> {
        match *self {
            Command::MoveDelta { dx_um, dy_um, dz_um } => Some(EeDelta {
                dx: dx_um as f64 / 1000.0,
                dy: dy_um as f64 / 1000.0,
                dz: dz_um as f64 / 1000.0,
            }),
            _ => None,
        }
    }

    fn kind(&self) -> u8 {
        match self {
            Command::MoveDelta { .. } => 0,
            Command::Stop => 1,
            Command::StatusRequest => 2,
            Command::Status(_) => 3,
        }
    }

    fn payload_len(kind: u8) -> Option<usize> {
        match kind {
            0 => Some(12),
            1 | 2 => Some(0),
            3 => Some(25),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandMessage {
    pub seq: u32,
    pub command: Command,
}

impl WireMessage for CommandMessage {
    const MAGIC: [u8; 4] = COMMAND_MAGIC;

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40);
        out.extend_from_slice(&COMMAND_MAGIC);
        out.push(self.command.kind());
        out.extend_from_slice(&self.seq.to_le_bytes());
        match self.command {
            Command::MoveDelta { dx_um, dy_um, dz_um } => {
                for v in [dx_um, dy_um, dz_um] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Command::Stop | Command::StatusRequest => {}
            Command::Status(s) => {
                for v in [s.x_um, s.y_um, s.z_um, s.force_mn] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&s.timestamp_ms.to_le_bytes());
                out.push(s.flags);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn decode(buf: &[u8]) -> Result<(Self, usize), CodecError> {
        need(buf, 4)?;
        if buf[..4] != COMMAND_MAGIC {
            return Err(CodecError::BadMagic);
        }
        need(buf, 9)?;
        let kind = buf[4];
        let payload = Command::payload_len(kind).ok_or(CodecError::UnknownKind(kind))?;
        let body = 9 + payload;
        need(buf, body + 4)?;
        if crc32fast::hash(&buf[..body]) != le_u32(&buf[body..]) {
            return Err(CodecError::BadChecksum);
        }
        let p = &buf[9..body];
        let command = match kind {
            0 => Command::MoveDelta { dx_um: le_i32(p), dy_um: le_i32(&p[4..]), dz_um: le_i32(&p[8..]) },
            1 => Command::Stop,
            2 => Command::StatusRequest,
            _ => Command::Status(RobotStatus {
                x_um: le_i32(p),
                y_um: le_i32(&p[4..]),
                z_um: le_i32(&p[8..]),
                force_mn: le_i32(&p[12..]),
                timestamp_ms: le_u64(&p[16..]),
                flags: p[24],
            }),
        };
        Ok((Self { seq: le_u32(&buf[5..]), command }, body + 4))
    }
}

fn find_magic(buf: &[u8], magic: &[u8; 4]) -> Option<usize> {
    buf.windows(4).position(|w| w == magic)
}

/// Outcome of scanning a buffer for the next message.
enum Scan<M> {
    Message(M, usize),
    /// Need more bytes; `usize` bytes before it are garbage.
    Incomplete(usize),
}

fn scan_buffer<M: WireMessage>(buf: &[u8], at_eof: bool) -> Scan<M> {
    let mut start = 0;
    loop {
        let Some(off) = find_magic(&buf[start..], &M::MAGIC) else {
            // keep a possible magic prefix at the tail
            return Scan::Incomplete(buf.len().saturating_sub(3).max(start));
        };
        let pos = start + off;
        match M::decode(&buf[pos..]) {
            Ok((m, used)) => return Scan::Message(m, pos + used),
            Err(CodecError::Truncated { .. }) if !at_eof => return Scan::Incomplete(pos),
            Err(_) => start = pos + 1,
        }
    }
}

/// Decodes every valid message in `bytes`, skipping garbage and corrupt
/// messages.
pub fn decode_all<M: WireMessage>(bytes: &[u8]) -> Vec<M> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        match scan_buffer::<M>(&bytes[pos..], true) {
            Scan::Message(m, used) => {
                out.push(m);
                pos += used;
            }
            Scan::Incomplete(_) => break,
        }
    }
    out
}

/// Buffered reader that pulls messages off a byte stream and resynchronizes
/// on the next magic after garbage or corruption.
#[derive(Debug)]
pub struct MessageReader<R> {
    inner: R,
    buf: Vec<u8>,
    pub skipped_bytes: usize,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, buf: Vec::new(), skipped_bytes: 0 }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    /// Next message, or `None` at end of stream. Read timeouts surface as
    /// I/O errors without losing buffered bytes.
    pub fn next_message<M: WireMessage>(&mut self) -> io::Result<Option<M>> {
        let mut chunk = [0u8; 64 * 1024];
        let mut eof = false;
        loop {
            match scan_buffer::<M>(&self.buf, eof) {
                Scan::Message(m, used) => {
                    self.buf.drain(..used);
                    return Ok(Some(m));
                }
                Scan::Incomplete(garbage) => {
                    if garbage > 0 {
                        self.skipped_bytes += garbage;
                        self.buf.drain(..garbage);
                    }
                    if eof {
                        self.skipped_bytes += self.buf.len();
                        self.buf.clear();
                        return Ok(None);
                    }
                }
            }
            let n = self.inner.read(&mut chunk)?;
            if n == 0 {
                eof = true;
            } else {
                self.buf.extend_from_slice(&chunk[..n]);
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("cannot listen on {addr}: {source}")]
    Startup { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Simulated robot plus ultrasound station behind the server.
#[derive(Debug, Clone)]
pub struct SimStation {
    pub phantom: PhantomModel,
    pub renderer: Renderer,
    pub control: ControlConfig,
    pub pose: ProbePose,
    pub seed: u64,
}

impl SimStation {
    pub fn new(phantom: PhantomModel, renderer: Renderer, control: ControlConfig, seed: u64) -> Self {
        let pose = control.start_pose(&phantom);
        Self { phantom, renderer, control, pose, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub bind: IpAddr,
    /// Frame port; commands listen on `command_port`. Zero picks free ports.
    pub frame_port: u16,
    pub command_port: u16,
    pub rate_hz: f64,
}

impl ServerConfig {
    pub fn on_port(port: u16, rate_hz: f64) -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            frame_port: port,
            command_port: if port == 0 { 0 } else { port.wrapping_add(1) },
            rate_hz,
        }
    }
}

struct RobotState {
    pose: ProbePose,
    force_n: f64,
    no_contact: bool,
    stopped: bool,
}

struct FrameSlot {
    frame: Option<UsFrame>,
    generation: u64,
}

struct Shared {
    station: SimStation,
    robot: Mutex<RobotState>,
    slot: Mutex<FrameSlot>,
    fresh: Condvar,
    shutdown: AtomicBool,
    next_seq: AtomicU32,
    epoch: Instant,
}

impl Shared {
    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn status(&self, robot: &RobotState) -> RobotStatus {
        let p = robot.pose.position;
        RobotStatus {
            x_um: um(p.x),
            y_um: um(p.y),
            z_um: um(p.z),
            force_mn: um(robot.force_n),
            timestamp_ms: self.now_ms(),
            flags: (robot.no_contact as u8 * STATUS_NO_CONTACT) | (robot.stopped as u8 * STATUS_STOPPED),
        }
    }
}

/// Running frame and command server. Dropping it shuts it down.
pub struct FrameServer {
    pub frame_addr: SocketAddr,
    pub command_addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

const POLL: Duration = Duration::from_millis(20);

/// Starts the paced frame producer, the frame connection handler and the
/// command handler. One client per channel at a time.
pub fn serve_frames(station: SimStation, cfg: &ServerConfig) -> Result<FrameServer, StreamError> {
    if !(cfg.rate_hz.is_finite() && cfg.rate_hz > 0.0) {
        return Err(StreamError::Config(format!("frame rate {} Hz must be positive", cfg.rate_hz)));
    }
    let bind = |port: u16| {
        let addr = SocketAddr::new(cfg.bind, port);
        let l = TcpListener::bind(addr).map_err(|source| StreamError::Startup { addr, source })?;
        l.set_nonblocking(true)?;
        Ok::<_, StreamError>(l)
    };
    let frames = bind(cfg.frame_port)?;
    let commands = bind(cfg.command_port)?;
    let pose = station.pose;
    let shared = Arc::new(Shared {
        robot: Mutex::new(RobotState { pose, force_n: station.phantom.contact_force(&pose), no_contact: false, stopped: false }),
        station,
        slot: Mutex::new(FrameSlot { frame: None, generation: 0 }),
        fresh: Condvar::new(),
        shutdown: AtomicBool::new(false),
        next_seq: AtomicU32::new(0),
        epoch: Instant::now(),
    });
    let server = FrameServer {
        frame_addr: frames.local_addr()?,
        command_addr: commands.local_addr()?,
        threads: vec![
            spawn_named("usvs-producer", { let s = shared.clone(); let rate = cfg.rate_hz; move || produce(&s, rate) }),
            spawn_named("usvs-frames", { let s = shared.clone(); move || frame_handler(&s, frames) }),
            spawn_named("usvs-commands", { let s = shared.clone(); move || command_handler(&s, commands) }),
        ],
        shared,
    };
    log::info!("serving frames on {} and commands on {}", server.frame_addr, server.command_addr);
    Ok(server)
}

fn spawn_named(name: &str, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    std::thread::Builder::new().name(name.into()).spawn(f).expect("spawn server thread")
}

fn produce(shared: &Shared, rate_hz: f64) {
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let start = Instant::now();
    let mut k: u32 = 0;
    while !shared.shutdown.load(Ordering::Relaxed) {
        let deadline = start + period * k;
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep((deadline - now).min(POLL));
            continue;
        }
        k += 1;
        let (pose, ts) = {
            let robot = shared.robot.lock().unwrap();
            (robot.pose, shared.now_ms())
        };
        let st = &shared.station;
        let (mut frame, _) = st.renderer.render(&st.phantom, &pose, derive_seed(st.seed, k as u64));
        frame.timestamp_ms = ts;
        let mut slot = shared.slot.lock().unwrap();
        slot.frame = Some(frame);
        slot.generation += 1;
        shared.fresh.notify_all();
    }
}

fn accept(shared: &Shared, listener: &TcpListener) -> Option<TcpStream> {
    while !shared.shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client {peer} connected");
                stream.set_nonblocking(false).ok()?;
                stream.set_nodelay(true).ok();
                return Some(stream);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
    None
}

fn frame_handler(shared: &Shared, listener: TcpListener) {
    while let Some(mut stream) = accept(shared, &listener) {
        let mut seen = shared.slot.lock().unwrap().generation;
        loop {
            let frame = {
                let mut slot = shared.slot.lock().unwrap();
                while slot.generation == seen && !shared.shutdown.load(Ordering::Relaxed) {
                    slot = shared.fresh.wait_timeout(slot, POLL).unwrap().0;
                }
                if shared.shutdown.load(Ordering::Relaxed) {
                    return;
                }
                seen = slot.generation;
                slot.frame.clone()
            };
            let Some(frame) = frame else { continue };
            // seq is assigned only to frames actually sent, so it stays gapless
            let seq = shared.next_seq.load(Ordering::Relaxed);
            let msg = match FrameMessage::from_frame(&frame, seq) {
                Ok(m) => m,
                Err(e) => {
                    log::error!("cannot encode frame: {e}");
                    return;
                }
            };
            if let Err(e) = stream.write_all(&msg.encode()) {
                log::info!("frame client disconnected: {e}");
                break;
            }
            shared.next_seq.store(seq.wrapping_add(1), Ordering::Relaxed);
        }
    }
}

fn apply_command(shared: &Shared, cmd: Command) -> Command {
    let mut robot = shared.robot.lock().unwrap();
    match cmd {
        Command::MoveDelta { .. } if !robot.stopped => {
            let delta = cmd.delta_mm().expect("move command");
            let st = &shared.station;
            let moved = ControlState::new(robot.pose.translated_ee(delta));
            match seek_force(&moved, &st.phantom, &st.control) {
                Ok(s) => {
                    robot.pose = s.pose;
                    robot.force_n = s.force_n;
                    robot.no_contact = false;
                }
                Err(e) => {
                    log::warn!("force seek failed: {e}");
                    robot.pose = moved.pose;
                    robot.force_n = st.phantom.contact_force(&moved.pose);
                    robot.no_contact = true;
                }
            }
        }
        Command::Stop => robot.stopped = true,
        _ => {}
    }
    Command::Status(shared.status(&robot))
}

fn command_handler(shared: &Shared, listener: TcpListener) {
    while let Some(stream) = accept(shared, &listener) {
        if stream.set_read_timeout(Some(Duration::from_millis(100))).is_err() {
            continue;
        }
        let mut writer = match stream.try_clone() {
            Ok(w) => w,
            Err(_) => continue,
        };
        let mut reader = MessageReader::new(stream);
        let mut reply_seq = 0u32;
        loop {
            if shared.shutdown.load(Ordering::Relaxed) {
                return;
            }
            let msg = match reader.next_message::<CommandMessage>() {
                Ok(Some(m)) => m,
                Ok(None) => break,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
                Err(e) => {
                    log::info!("command client error: {e}");
                    break;
                }
            };
            if matches!(msg.command, Command::Status(_)) {
                continue;
            }
            let reply = CommandMessage { seq: reply_seq, command: apply_command(shared, msg.command) };
            reply_seq = reply_seq.wrapping_add(1);
            if writer.write_all(&reply.encode()).is_err() {
                break;
            }
        }
        log::info!("command client disconnected");
    }
}

impl FrameServer {
    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
        self.shared.fresh.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Current simulated robot pose.
    pub fn robot_pose(&self) -> ProbePose {
        self.shared.robot.lock().unwrap().pose
    }

    /// Blocks until shut down from another thread or the process exits.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for FrameServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Receiving end of the frame channel.
pub struct FrameClient {
    reader: MessageReader<TcpStream>,
}

impl FrameClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, StreamError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        Ok(Self { reader: MessageReader::new(stream) })
    }

    pub fn next_frame(&mut self) -> Result<FrameMessage, StreamError> {
        self.reader
            .next_message::<FrameMessage>()?
            .ok_or_else(|| StreamError::Protocol("frame stream closed".into()))
    }
}

/// Request/reply end of the command channel.
pub struct CommandClient {
    writer: TcpStream,
    reader: MessageReader<TcpStream>,
    seq: u32,
}

impl CommandClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, StreamError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self { writer: stream.try_clone()?, reader: MessageReader::new(stream), seq: 0 })
    }

    /// Sends `command` and waits for the status reply.
    pub fn request(&mut self, command: Command) -> Result<RobotStatus, StreamError> {
        let msg = CommandMessage { seq: self.seq, command };
        self.seq = self.seq.wrapping_add(1);
        self.writer.write_all(&msg.encode())?;
        match self.reader.next_message::<CommandMessage>()? {
            Some(CommandMessage { command: Command::Status(s), .. }) => Ok(s),
            Some(other) => Err(StreamError::Protocol(format!("unexpected reply {other:?}"))),
            None => Err(StreamError::Protocol("command channel closed".into())),
        }
    }
}

/// Plant backed by a remote station. Ground truth is computed locally from
/// the phantom model and the reported pose.
pub struct RemotePlant {
    pub phantom: PhantomModel,
    frames: FrameClient,
    commands: CommandClient,
    last_status: Option<RobotStatus>,
}

impl RemotePlant {
    pub fn connect(phantom: PhantomModel, frame_addr: SocketAddr, command_addr: SocketAddr) -> Result<Self, StreamError> {
        let timeout = Duration::from_secs(5);
        Ok(Self {
            phantom,
            frames: FrameClient::connect(frame_addr, timeout)?,
            commands: CommandClient::connect(command_addr, timeout)?,
            last_status: None,
        })
    }

    /// Connects to `host:port` (frames) and `host:port+1` (commands).
    pub fn connect_host(phantom: PhantomModel, host: IpAddr, port: u16) -> Result<Self, StreamError> {
        Self::connect(phantom, SocketAddr::new(host, port), SocketAddr::new(host, port.wrapping_add(1)))
    }

    pub fn stop(&mut self) -> Result<RobotStatus, StreamError> {
        self.commands.request(Command::Stop)
    }

    fn send_move(&mut self, delta: EeDelta, cfg: &ControlConfig) -> Result<(ProbePose, f64), ControlError> {
        let status = self.commands.request(Command::move_delta(delta)).map_err(|e| ControlError::Plant(e.to_string()))?;
        self.last_status = Some(status);
        if status.flags & STATUS_NO_CONTACT != 0 {
            return Err(ControlError::Contact { iterations: cfg.seek_max_iterations });
        }
        Ok((status.pose(), status.force_n()))
    }
}

impl Plant for RemotePlant {
    fn seek(&mut self, cfg: &ControlConfig) -> Result<(ProbePose, f64), ControlError> {
        self.send_move(EeDelta::default(), cfg)
    }

    fn move_and_seek(&mut self, delta: EeDelta, cfg: &ControlConfig) -> Result<(ProbePose, f64), ControlError> {
        self.send_move(delta, cfg)
    }

    /// Skips frames captured before the last command completed.
    fn acquire(&mut self, _step: usize, _cfg: &ControlConfig) -> Result<(UsFrame, GroundTruth), ControlError> {
        let status = self.last_status.ok_or_else(|| ControlError::Contract("acquire before the first seek".into()))?;
        loop {
            let msg = self.frames.next_frame().map_err(|e| ControlError::Plant(e.to_string()))?;
            if msg.timestamp_ms > status.timestamp_ms {
                let frame = msg.into_frame();
                let truth = GroundTruth::analytic(&self.phantom, &status.pose(), &frame.geometry());
                return Ok((frame, truth));
            }
        }
    }
}

/// Port from the environment, else the default. A CLI flag overrides both.
pub fn port_from_env() -> Result<u16, StreamError> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| StreamError::Config(format!("{PORT_ENV}={v:?} is not a port"))),
        Err(_) => Ok(DEFAULT_PORT),
    }
}
