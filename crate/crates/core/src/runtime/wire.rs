//! Binary frames for the loopback socket transport.
//!
//! Each frame is a little-endian `u32` payload length followed by the payload.
//! Payloads start with a one-byte tag; scalars are `f64` (8 bytes LE), counts
//! and lengths `u32` LE, vectors a length followed by that many `f64`.
//! The layout is documented in `docs/wire_format.md`.

use std::io::{self, Read, Write};

use nalgebra::DVector;

use super::{AgentReport, FromAgent, SolveRequest, ToAgent, Wave};

const TO_INIT: u8 = 0x01;
const TO_SOLVE: u8 = 0x02;
const TO_SNAPSHOT: u8 = 0x03;
const TO_SHUTDOWN: u8 = 0x04;
const FROM_REPORT: u8 = 0x81;
const FROM_STATE: u8 = 0x82;
const FROM_CLOSED: u8 = 0x83;

const MAX_FRAME: usize = 1 << 28;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("length fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec(&mut self, v: &DVector<f64>) {
        self.u32(v.len());
        for x in v.iter() {
            self.f64(*x);
        }
    }
    fn vecs(&mut self, vs: &[DVector<f64>]) {
        self.u32(vs.len());
        for v in vs {
            self.vec(v);
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> io::Result<&[u8]> {
        if self.0.len() < n {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "truncated frame",
            ));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> io::Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> io::Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec(&mut self) -> io::Result<DVector<f64>> {
        let n = self.u32()?;
        if n * 8 > self.0.len() {
            return Err(bad("vector length exceeds frame"));
        }
        let mut v = DVector::zeros(n);
        for i in 0..n {
            v[i] = self.f64()?;
        }
        Ok(v)
    }
    fn vecs(&mut self) -> io::Result<Vec<DVector<f64>>> {
        let n = self.u32()?;
        (0..n).map(|_| self.vec()).collect()
    }
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn wave_byte(w: Wave) -> u8 {
    match w {
        Wave::Plain => 0,
        Wave::Trial => 1,
    }
}

fn wave_from(b: u8) -> io::Result<Wave> {
    match b {
        0 => Ok(Wave::Plain),
        1 => Ok(Wave::Trial),
        _ => Err(bad("unknown wave tag")),
    }
}

pub fn encode_to_agent(msg: &ToAgent) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        ToAgent::Init { x } => {
            w.u8(TO_INIT);
            w.vec(x);
        }
        ToAgent::Solve(req) => {
            w.u8(TO_SOLVE);
            w.u8(wave_byte(req.wave));
            w.f64(req.rho);
            w.f64(req.barrier);
            w.f64(req.eps4);
            w.f64(req.eps5);
            w.vecs(&req.offsets);
        }
        ToAgent::Snapshot => w.u8(TO_SNAPSHOT),
        ToAgent::Shutdown => w.u8(TO_SHUTDOWN),
    }
    w.0
}

pub fn decode_to_agent(buf: &[u8]) -> io::Result<ToAgent> {
    let mut r = Reader(buf);
    let msg = match r.u8()? {
        TO_INIT => ToAgent::Init { x: r.vec()? },
        TO_SOLVE => {
            let wave = wave_from(r.u8()?)?;
            ToAgent::Solve(SolveRequest {
                wave,
                rho: r.f64()?,
                barrier: r.f64()?,
                eps4: r.f64()?,
                eps5: r.f64()?,
                offsets: r.vecs()?,
            })
        }
        TO_SNAPSHOT => ToAgent::Snapshot,
        TO_SHUTDOWN => ToAgent::Shutdown,
        _ => return Err(bad("unknown to-agent tag")),
    };
    if !r.0.is_empty() {
        return Err(bad("trailing bytes in frame"));
    }
    Ok(msg)
}

pub fn encode_from_agent(msg: &FromAgent) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        FromAgent::Report(rep) => {
            w.u8(FROM_REPORT);
            w.u8(wave_byte(rep.wave));
            w.vecs(&rep.blocks);
            w.f64(rep.d4);
            w.f64(rep.d5);
            w.f64(rep.objective);
            w.f64(rep.log_barrier);
            w.u32(rep.iterations);
            match &rep.failure {
                None => w.u8(0),
                Some(text) => {
                    w.u8(1);
                    w.u32(text.len());
                    w.0.extend_from_slice(text.as_bytes());
                }
            }
        }
        FromAgent::State(x) => {
            w.u8(FROM_STATE);
            w.vec(x);
        }
        FromAgent::Closed => w.u8(FROM_CLOSED),
    }
    w.0
}

pub fn decode_from_agent(buf: &[u8]) -> io::Result<FromAgent> {
    let mut r = Reader(buf);
    let msg = match r.u8()? {
        FROM_REPORT => {
            let wave = wave_from(r.u8()?)?;
            let blocks = r.vecs()?;
            let d4 = r.f64()?;
            let d5 = r.f64()?;
            let objective = r.f64()?;
            let log_barrier = r.f64()?;
            let iterations = r.u32()?;
            let failure = match r.u8()? {
                0 => None,
                1 => {
                    let n = r.u32()?;
                    let bytes = r.take(n)?;
                    Some(String::from_utf8_lossy(bytes).into_owned())
                }
                _ => return Err(bad("bad failure flag")),
            };
            FromAgent::Report(AgentReport {
                wave,
                blocks,
                d4,
                d5,
                objective,
                log_barrier,
                iterations,
                failure,
            })
        }
        FROM_STATE => FromAgent::State(r.vec()?),
        FROM_CLOSED => FromAgent::Closed,
        _ => return Err(bad("unknown from-agent tag")),
    };
    if !r.0.is_empty() {
        return Err(bad("trailing bytes in frame"));
    }
    Ok(msg)
}

pub fn write_frame(out: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| bad("frame too large"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(payload)?;
    out.flush()
}

pub fn read_frame(input: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(bad("frame length over limit"));
    }
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_request_round_trips() {
        let msg = ToAgent::Solve(SolveRequest {
            wave: Wave::Trial,
            rho: 2.5,
            barrier: 1e-4,
            eps4: 0.3,
            eps5: 3e-4,
            offsets: vec![DVector::from_vec(vec![1.0, -2.0]), DVector::zeros(0)],
        });
        let bytes = encode_to_agent(&msg);
        assert_eq!(decode_to_agent(&bytes).unwrap(), msg);
    }

    #[test]
    fn report_round_trips_with_failure_text() {
        let msg = FromAgent::Report(AgentReport {
            wave: Wave::Plain,
            blocks: vec![DVector::from_vec(vec![f64::MIN_POSITIVE, 1e300])],
            d4: 1e-9,
            d5: 0.0,
            objective: -3.0,
            log_barrier: 12.0,
            iterations: 7,
            failure: Some("line search stalled".into()),
        });
        let bytes = encode_from_agent(&msg);
        assert_eq!(decode_from_agent(&bytes).unwrap(), msg);
    }

    #[test]
    fn frames_are_length_prefixed_le() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &[9, 8, 7]).unwrap();
        assert_eq!(buf, vec![3, 0, 0, 0, 9, 8, 7]);
        let mut cur = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap(), vec![9, 8, 7]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_to_agent(&ToAgent::Init {
            x: DVector::from_element(3, 1.0),
        });
        assert!(decode_to_agent(&bytes[..bytes.len() - 1]).is_err());
    }
}
