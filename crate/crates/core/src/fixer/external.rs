//! Subprocess fixer transport.
//!
//! Frames flow over the child's stdin/stdout, little-endian throughout:
//!
//! ```text
//! request  = "FXRQ" | u32 payload_len | payload
//! payload  = u32 width | u32 height | f32 slice[width*height]
//!          | u32 rows | u32 cols | f32 proj_a[rows*cols] | f32 proj_b[rows*cols]
//!          | u32 prompt_len | prompt bytes (UTF-8)
//!          | u32 axis | u32 index
//! response = "FXRS" | u32 payload_len | f32 slice[width*height]
//! ```
//!
//! One response per request, in order. A malformed or truncated frame,
//! a closed pipe, or a response that is slow past the timeout all surface
//! as [`Error::Fixer`] and poison the transport; the child is killed.

use std::io::{Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::volume::{Image, SliceImage};

use super::{axis_code, axis_from_code, check_response_dims, FixerRequest, FixerResponse, SliceFixer};

const REQUEST_MAGIC: &[u8; 4] = b"FXRQ";
const RESPONSE_MAGIC: &[u8; 4] = b"FXRS";

/// Refuse frames claiming more than this many payload bytes.
const MAX_FRAME_BYTES: u32 = 1 << 28;

/// How long [`ExternalFixer`] waits for a response before declaring the
/// child hung.
pub const DEFAULT_RESPONSE_TIMEOUT: Duration = Duration::from_secs(30);

/// The bare description of an error, so wrapping it in another
/// [`Error::Fixer`] does not stack up "fixer protocol error:" prefixes.
fn fixer_detail(e: Error) -> String {
    match e {
        Error::Fixer(msg) => msg,
        other => other.to_string(),
    }
}

fn fixer_err(msg: impl Into<String>) -> Error {
    Error::Fixer(msg.into())
}

// ---------------------------------------------------------------------------
// frame encoding

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, vs: &[f64]) {
    buf.reserve(vs.len() * 4);
    for &v in vs {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn protocol_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| fixer_err(format!("{what} {n} exceeds protocol range")))
}

pub(super) fn encode_request(req: &FixerRequest) -> Result<Vec<u8>> {
    let w = protocol_u32(req.slice.width(), "slice width")?;
    let h = protocol_u32(req.slice.height(), "slice height")?;
    let rows = protocol_u32(req.cond_a.height, "conditioning rows")?;
    let cols = protocol_u32(req.cond_a.width, "conditioning cols")?;
    let prompt_len = protocol_u32(req.prompt.len(), "prompt length")?;
    let index = protocol_u32(req.slice.index, "slice index")?;

    let mut payload = Vec::new();
    push_u32(&mut payload, w);
    push_u32(&mut payload, h);
    push_f32s(&mut payload, req.slice.data());
    push_u32(&mut payload, rows);
    push_u32(&mut payload, cols);
    push_f32s(&mut payload, &req.cond_a.data);
    push_f32s(&mut payload, &req.cond_b.data);
    push_u32(&mut payload, prompt_len);
    payload.extend_from_slice(req.prompt.as_bytes());
    push_u32(&mut payload, axis_code(req.slice.axis));
    push_u32(&mut payload, index);

    let len = protocol_u32(payload.len(), "request payload")?;
    if len > MAX_FRAME_BYTES {
        return Err(fixer_err(format!("request payload of {len} bytes exceeds frame limit")));
    }
    let mut frame = Vec::with_capacity(8 + payload.len());
    frame.extend_from_slice(REQUEST_MAGIC);
    push_u32(&mut frame, len);
    frame.extend_from_slice(&payload);
    Ok(frame)
}

// ---------------------------------------------------------------------------
// frame decoding

/// Reads one frame with the given magic. `Ok(None)` means clean EOF at a
/// frame boundary; EOF anywhere else is a truncation error.
fn read_frame<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Option<Vec<u8>>> {
    let mut head = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(fixer_err("stream ended mid frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(fixer_err(format!("frame read failed: {e}"))),
        }
    }
    if &head != magic {
        return Err(fixer_err(format!(
            "bad frame magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| fixer_err("stream ended mid frame header"))?;
    let len = u32::from_le_bytes(len_bytes);
    if len > MAX_FRAME_BYTES {
        return Err(fixer_err(format!("frame claims {len} payload bytes, over the limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            fixer_err(format!("truncated frame: expected {len} payload bytes"))
        } else {
            fixer_err(format!("frame read failed: {e}"))
        }
    })?;
    Ok(Some(payload))
}

struct PayloadCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadCursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        PayloadCursor { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fixer_err("frame payload shorter than its fields claim"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| fixer_err("sample count overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(fixer_err(format!(
                "frame payload has {} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(super) fn decode_request(payload: &[u8]) -> Result<FixerRequest> {
    let mut c = PayloadCursor::new(payload);
    let w = c.u32()? as usize;
    let h = c.u32()? as usize;
    let slice = c.f32s(w.checked_mul(h).ok_or_else(|| fixer_err("slice size overflow"))?)?;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let n_cond = rows
        .checked_mul(cols)
        .ok_or_else(|| fixer_err("conditioning size overflow"))?;
    let proj_a = c.f32s(n_cond)?;
    let proj_b = c.f32s(n_cond)?;
    let prompt_len = c.u32()? as usize;
    let prompt = std::str::from_utf8(c.bytes(prompt_len)?)
        .map_err(|_| fixer_err("prompt is not valid UTF-8"))?
        .to_string();
    let axis = axis_from_code(c.u32()?).map_err(|e| fixer_err(e.to_string()))?;
    let index = c.u32()? as usize;
    c.finish()?;
    Ok(FixerRequest {
        slice: SliceImage {
            image: Image::new(w, h, slice)?,
            axis,
            index,
        },
        cond_a: Image::new(cols, rows, proj_a)?,
        cond_b: Image::new(cols, rows, proj_b)?,
        prompt,
    })
}

fn write_response<W: Write>(w: &mut W, slice: &[f64]) -> Result<()> {
    let mut frame = Vec::with_capacity(8 + slice.len() * 4);
    frame.extend_from_slice(RESPONSE_MAGIC);
    push_u32(&mut frame, protocol_u32(slice.len() * 4, "response payload")?);
    push_f32s(&mut frame, slice);
    w.write_all(&frame)
        .and_then(|_| w.flush())
        .map_err(|e| fixer_err(format!("response write failed: {e}")))
}

fn read_response<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let payload = read_frame(r, RESPONSE_MAGIC)?
        .ok_or_else(|| fixer_err("fixer process closed its output without responding"))?;
    if payload.len() % 4 != 0 {
        return Err(fixer_err(format!(
            "response payload of {} bytes is not a whole number of samples",
            payload.len()
        )));
    }
    let mut c = PayloadCursor::new(&payload);
    let out = c.f32s(payload.len() / 4)?;
    c.finish()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// echo server

/// What the in-repo echo subprocess does with each request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoMode {
    /// Answer every request with the request slice, unchanged.
    Echo,
    /// Answer the first request with a deliberately cut-off frame, then
    /// stop. Exists to exercise the parent's truncation handling.
    Truncate,
}

/// Runs a fixer subprocess loop over arbitrary streams: read a request,
/// write the slice straight back, repeat until clean EOF. This is the body
/// of the hidden CLI echo subcommand and is also driven in-memory by tests.
pub fn serve_echo<R: Read, W: Write>(mut input: R, mut output: W, mode: EchoMode) -> Result<()> {
    while let Some(payload) = read_frame(&mut input, REQUEST_MAGIC)? {
        let req = decode_request(&payload)?;
        match mode {
            EchoMode::Echo => write_response(&mut output, req.slice.data())?,
            EchoMode::Truncate => {
                let n_bytes = req.slice.data().len() * 4;
                let mut frame = Vec::with_capacity(8 + n_bytes / 2);
                frame.extend_from_slice(RESPONSE_MAGIC);
                push_u32(&mut frame, protocol_u32(n_bytes, "response payload")?);
                let mut half = vec![0u8; n_bytes / 2];
                half.copy_from_slice(&encode_f32_bytes(req.slice.data())[..n_bytes / 2]);
                frame.extend_from_slice(&half);
                output
                    .write_all(&frame)
                    .and_then(|_| output.flush())
                    .map_err(|e| fixer_err(format!("response write failed: {e}")))?;
                return Ok(());
            }
        }
    }
    Ok(())
}

fn encode_f32_bytes(vs: &[f64]) -> Vec<u8> {
    let mut raw = Vec::with_capacity(vs.len() * 4);
    push_f32s(&mut raw, vs);
    raw
}

// ---------------------------------------------------------------------------
// subprocess transport

enum WorkerReply {
    Slice(Vec<f64>),
    Failed(String),
}

/// Runs an arbitrary executable as the fixer. Requests are framed onto the
/// child's stdin and responses read from its stdout on a worker thread so
/// a hung child turns into a timeout error instead of a deadlock.
pub struct ExternalFixer {
    child: Child,
    requests: Option<mpsc::Sender<Vec<u8>>>,
    replies: mpsc::Receiver<WorkerReply>,
    worker: Option<JoinHandle<()>>,
    timeout: Duration,
    describe: String,
}

impl ExternalFixer {
    /// Spawns `program args...` with piped stdin/stdout (stderr passes
    /// through) using the default response timeout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        Self::spawn_with_timeout(program, args, DEFAULT_RESPONSE_TIMEOUT)
    }

    pub fn spawn_with_timeout(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let describe = if args.is_empty() {
            program.to_string()
        } else {
            format!("{program} {}", args.join(" "))
        };
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fixer_err(format!("failed to spawn fixer `{describe}`: {e}")))?;
        let mut stdin = child.stdin.take().expect("stdin was piped");
        let mut stdout = std::io::BufReader::new(child.stdout.take().expect("stdout was piped"));

        let (req_tx, req_rx) = mpsc::channel::<Vec<u8>>();
        let (rep_tx, rep_rx) = mpsc::channel::<WorkerReply>();
        let worker = std::thread::spawn(move || {
            while let Ok(frame) = req_rx.recv() {
                if let Err(e) = stdin.write_all(&frame).and_then(|_| stdin.flush()) {
                    let _ = rep_tx.send(WorkerReply::Failed(format!("request write failed: {e}")));
                    return;
                }
                match read_response(&mut stdout) {
                    Ok(slice) => {
                        if rep_tx.send(WorkerReply::Slice(slice)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = rep_tx.send(WorkerReply::Failed(fixer_detail(e)));
                        return;
                    }
                }
            }
        });

        Ok(ExternalFixer {
            child,
            requests: Some(req_tx),
            replies: rep_rx,
            worker: Some(worker),
            timeout,
            describe,
        })
    }

    fn poison(&mut self) {
        self.requests = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn fail(&mut self, req: &FixerRequest, msg: String) -> Error {
        self.poison();
        fixer_err(format!(
            "fixer `{}` on slice {:?}/{}: {msg}",
            self.describe, req.slice.axis, req.slice.index
        ))
    }
}

impl SliceFixer for ExternalFixer {
    fn fix_slice(&mut self, req: &FixerRequest) -> Result<FixerResponse> {
        req.validate()?;
        let frame = encode_request(req)?;
        let Some(requests) = self.requests.as_ref() else {
            return Err(fixer_err(format!(
                "fixer `{}` already failed; refusing further slices",
                self.describe
            )));
        };
        if requests.send(frame).is_err() {
            return Err(self.fail(req, "transport thread exited".to_string()));
        }
        let reply = match self.replies.recv_timeout(self.timeout) {
            Ok(reply) => reply,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let secs = self.timeout.as_secs_f64();
                return Err(self.fail(req, format!("no response within {secs:.0}s")));
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(self.fail(req, "transport thread exited".to_string()));
            }
        };
        let slice = match reply {
            WorkerReply::Slice(slice) => slice,
            WorkerReply::Failed(msg) => return Err(self.fail(req, msg)),
        };
        let expect = req.slice.data().len();
        if slice.len() != expect {
            return Err(self.fail(
                req,
                format!("response has {} samples, expected {expect}", slice.len()),
            ));
        }
        let out = SliceImage {
            image: Image::new(req.slice.width(), req.slice.height(), slice)?,
            axis: req.slice.axis,
            index: req.slice.index,
        };
        check_response_dims(req, &out)?;
        Ok(FixerResponse { slice: out })
    }
}

impl Drop for ExternalFixer {
    fn drop(&mut self) {
        self.poison();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixer::{snap_to_f32, IdentityFixer};
    use crate::volume::SliceAxis;
    use std::io::Cursor;

    fn sample_request() -> FixerRequest {
        let mut slice: Vec<f64> = (0..12).map(|i| (i as f64) * 0.37 - 1.1).collect();
        snap_to_f32(&mut slice);
        let mut cond: Vec<f64> = (0..6).map(|i| (i as f64) * 0.21).collect();
        snap_to_f32(&mut cond);
        FixerRequest {
            slice: SliceImage {
                image: Image::new(4, 3, slice).unwrap(),
                axis: SliceAxis::Coronal,
                index: 7,
            },
            cond_a: Image::new(3, 2, cond.clone()).unwrap(),
            cond_b: Image::new(3, 2, cond.iter().map(|v| v * 2.0).collect()).unwrap(),
            prompt: "axial slice of a head phantom".to_string(),
        }
    }

    #[test]
    fn request_roundtrips_through_frame() {
        let req = sample_request();
        let frame = encode_request(&req).unwrap();
        let payload = read_frame(&mut Cursor::new(&frame), REQUEST_MAGIC)
            .unwrap()
            .unwrap();
        let back = decode_request(&payload).unwrap();
        assert_eq!(back.slice.image.data, req.slice.image.data);
        assert_eq!(back.slice.axis, req.slice.axis);
        assert_eq!(back.slice.index, req.slice.index);
        assert_eq!(back.cond_a.data, req.cond_a.data);
        assert_eq!(back.cond_b.data, req.cond_b.data);
        assert_eq!(back.prompt, req.prompt);
        assert_eq!(back.cond_a.width, 3);
        assert_eq!(back.cond_a.height, 2);
    }

    #[test]
    fn echo_matches_identity_on_snapped_data() {
        let req = sample_request();
        let mut wire = Vec::new();
        wire.extend_from_slice(&encode_request(&req).unwrap());
        wire.extend_from_slice(&encode_request(&req).unwrap());
        let mut out = Vec::new();
        serve_echo(Cursor::new(&wire), &mut out, EchoMode::Echo).unwrap();

        let mut reader = Cursor::new(&out);
        let first = read_response(&mut reader).unwrap();
        let second = read_response(&mut reader).unwrap();
        let identity = IdentityFixer.fix_slice(&req).unwrap();
        assert_eq!(first, identity.slice.image.data);
        assert_eq!(second, identity.slice.image.data);
        assert!(read_frame(&mut reader, RESPONSE_MAGIC).unwrap().is_none());
    }

    #[test]
    fn truncated_response_is_a_protocol_error() {
        let req = sample_request();
        let wire = encode_request(&req).unwrap();
        let mut out = Vec::new();
        serve_echo(Cursor::new(&wire), &mut out, EchoMode::Truncate).unwrap();
        let err = read_response(&mut Cursor::new(&out)).unwrap_err();
        assert!(
            err.to_string().contains("truncated"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut frame = encode_request(&sample_request()).unwrap();
        frame[0] = b'X';
        let err = read_frame(&mut Cursor::new(&frame), REQUEST_MAGIC).unwrap_err();
        assert!(err.to_string().contains("magic"), "unexpected error: {err}");
    }

    #[test]
    fn oversized_length_rejected() {
        let mut frame = Vec::new();
        frame.extend_from_slice(REQUEST_MAGIC);
        push_u32(&mut frame, u32::MAX);
        let err = read_frame(&mut Cursor::new(&frame), REQUEST_MAGIC).unwrap_err();
        assert!(err.to_string().contains("limit"), "unexpected error: {err}");
    }

    #[test]
    fn partial_header_is_truncation() {
        let frame = encode_request(&sample_request()).unwrap();
        let err = read_frame(&mut Cursor::new(&frame[..2]), REQUEST_MAGIC).unwrap_err();
        assert!(
            err.to_string().contains("mid frame header"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn payload_with_trailing_bytes_rejected() {
        let req = sample_request();
        let frame = encode_request(&req).unwrap();
        let mut payload = read_frame(&mut Cursor::new(&frame), REQUEST_MAGIC)
            .unwrap()
            .unwrap();
        payload.push(0);
        let err = decode_request(&payload).unwrap_err();
        assert!(
            err.to_string().contains("trailing"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn bad_prompt_utf8_rejected() {
        let req = sample_request();
        let frame = encode_request(&req).unwrap();
        let mut payload = read_frame(&mut Cursor::new(&frame), REQUEST_MAGIC)
            .unwrap()
            .unwrap();
        // prompt starts after slice + conditioning fields and its length u32
        let prompt_start = 4 + 4 + 12 * 4 + 4 + 4 + 2 * 6 * 4 + 4;
        payload[prompt_start] = 0xff;
        payload[prompt_start + 1] = 0xfe;
        let err = decode_request(&payload).unwrap_err();
        assert!(err.to_string().contains("UTF-8"), "unexpected error: {err}");
    }
}
