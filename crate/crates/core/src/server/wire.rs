//! Length-prefixed request/response framing over a byte stream, and a
//! thread-per-connection TCP front end.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use crate::codec::StreamReader;
use crate::error::{Error, Result};
use crate::package::ModuleId;
use crate::server::Server;

pub const REQUEST_MAGIC: &[u8; 8] = b"IMUPREQ1";
pub const RESPONSE_MAGIC: &[u8; 8] = b"IMUPRSP1";

/// Largest image a client will accept from the wire.
const MAX_IMAGE_LEN: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Oversize = 1,
    UnknownModule = 2,
}

impl Status {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Status::Ok),
            1 => Ok(Status::Oversize),
            2 => Ok(Status::UnknownModule),
            _ => Err(Error::Malformed("response status")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub hit: bool,
    pub image: Vec<u8>,
}

pub fn encode_request(ids: &BTreeSet<ModuleId>) -> Result<Vec<u8>> {
    let count = u16::try_from(ids.len()).map_err(|_| Error::InvalidParameter("too many modules".into()))?;
    let mut out = REQUEST_MAGIC.to_vec();
    out.extend_from_slice(&count.to_be_bytes());
    for id in ids {
        out.extend_from_slice(&id.0.to_be_bytes());
    }
    Ok(out)
}

pub fn read_request(reader: impl Read) -> Result<BTreeSet<ModuleId>> {
    let mut s = StreamReader::new(reader);
    if &s.exact::<8>()? != REQUEST_MAGIC {
        return Err(Error::Malformed("request magic"));
    }
    let count = s.u16()?;
    let mut ids = BTreeSet::new();
    let mut prev = None;
    for _ in 0..count {
        let id = ModuleId(s.u32()?);
        if prev.is_some_and(|p| p >= id) {
            return Err(Error::Malformed("request ids not strictly increasing"));
        }
        prev = Some(id);
        ids.insert(id);
    }
    Ok(ids)
}

pub fn write_response(mut w: impl Write, resp: &Response) -> Result<()> {
    w.write_all(RESPONSE_MAGIC)?;
    w.write_all(&[resp.status as u8, resp.hit as u8])?;
    w.write_all(&(resp.image.len() as u64).to_be_bytes())?;
    w.write_all(&resp.image)?;
    w.flush()?;
    Ok(())
}

pub fn read_response(reader: impl Read) -> Result<Response> {
    let mut s = StreamReader::new(reader);
    if &s.exact::<8>()? != RESPONSE_MAGIC {
        return Err(Error::Malformed("response magic"));
    }
    let status = Status::from_byte(s.u8()?)?;
    let hit = match s.u8()? {
        0 => false,
        1 => true,
        _ => return Err(Error::Malformed("hit flag")),
    };
    let len = s.u64()?;
    if len > MAX_IMAGE_LEN {
        return Err(Error::Malformed("image length over limit"));
    }
    let image = s.vec(len as usize)?;
    Ok(Response { status, hit, image })
}

/// Answers one request using `server`.
pub fn respond(server: &Server, ids: &BTreeSet<ModuleId>) -> Result<Response> {
    match server.handle_request(ids) {
        Ok(served) => Ok(Response {
            status: Status::Ok,
            hit: served.hit,
            image: served.image.read_bytes()?,
        }),
        Err(Error::Oversize { .. }) => Ok(Response {
            status: Status::Oversize,
            hit: false,
            image: Vec::new(),
        }),
        Err(Error::UnknownModule(_)) => Ok(Response {
            status: Status::UnknownModule,
            hit: false,
            image: Vec::new(),
        }),
        Err(e) => Err(e),
    }
}

fn handle_connection(server: &Server, mut stream: TcpStream) -> Result<()> {
    let ids = read_request(&mut stream)?;
    let resp = respond(server, &ids)?;
    write_response(&mut stream, &resp)
}

/// Accepts connections forever, one thread per connection.
pub fn serve(server: Arc<Server>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let server = server.clone();
        thread::spawn(move || {
            if let Err(e) = handle_connection(&server, stream) {
                eprintln!("connection error: {e}");
            }
        });
    }
    Ok(())
}

pub fn request(addr: impl ToSocketAddrs, ids: &BTreeSet<ModuleId>) -> Result<Response> {
    let mut stream = TcpStream::connect(addr)?;
    stream.write_all(&encode_request(ids)?)?;
    stream.flush()?;
    read_response(&mut stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip_and_order_check() {
        let ids: BTreeSet<_> = [ModuleId(3), ModuleId(9)].into();
        let bytes = encode_request(&ids).unwrap();
        assert_eq!(read_request(bytes.as_slice()).unwrap(), ids);
        let mut bad = REQUEST_MAGIC.to_vec();
        bad.extend_from_slice(&[0, 2, 0, 0, 0, 9, 0, 0, 0, 3]);
        assert!(read_request(bad.as_slice()).is_err());
    }

    #[test]
    fn response_round_trip() {
        let resp = Response {
            status: Status::Ok,
            hit: true,
            image: vec![1, 2, 3],
        };
        let mut buf = Vec::new();
        write_response(&mut buf, &resp).unwrap();
        assert_eq!(read_response(buf.as_slice()).unwrap(), resp);
    }
}
