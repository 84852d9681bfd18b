//! Just enough BER (definite lengths, single-byte tags) for LDAPv3 bind and
//! search.

use thiserror::Error;

pub const BOOLEAN: u8 = 0x01;
pub const INTEGER: u8 = 0x02;
pub const OCTET_STRING: u8 = 0x04;
pub const ENUMERATED: u8 = 0x0a;
pub const SEQUENCE: u8 = 0x30;
pub const SET: u8 = 0x31;

pub const fn application(n: u8, constructed: bool) -> u8 {
    0x40 | if constructed { 0x20 } else { 0 } | n
}

pub const fn context(n: u8, constructed: bool) -> u8 {
    0x80 | if constructed { 0x20 } else { 0 } | n
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BerError {
    #[error("truncated BER element")]
    Truncated,
    #[error("unsupported BER length encoding")]
    BadLength,
    #[error("expected tag {expected:#04x}, found {found:#04x}")]
    UnexpectedTag { expected: u8, found: u8 },
    #[error("integer out of range")]
    BadInteger,
}

pub fn encode_length(len: usize, out: &mut Vec<u8>) {
    if len < 0x80 {
        out.push(len as u8);
    } else {
        let bytes = len.to_be_bytes();
        let skip = bytes.iter().take_while(|&&b| b == 0).count();
        out.push(0x80 | (bytes.len() - skip) as u8);
        out.extend_from_slice(&bytes[skip..]);
    }
}

pub fn tlv(tag: u8, content: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(content.len() + 6);
    out.push(tag);
    encode_length(content.len(), &mut out);
    out.extend_from_slice(content);
    out
}

pub fn integer(tag: u8, value: i64) -> Vec<u8> {
    let bytes = value.to_be_bytes();
    let mut start = 0;
    while start < 7 {
        let (b, next) = (bytes[start], bytes[start + 1]);
        if (b == 0 && next & 0x80 == 0) || (b == 0xff && next & 0x80 != 0) {
            start += 1;
        } else {
            break;
        }
    }
    tlv(tag, &bytes[start..])
}

pub fn octets(tag: u8, value: &[u8]) -> Vec<u8> {
    tlv(tag, value)
}

pub fn constructed(tag: u8, parts: &[Vec<u8>]) -> Vec<u8> {
    tlv(tag, &parts.concat())
}

/// One decoded element borrowing from the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tlv<'a> {
    pub tag: u8,
    pub content: &'a [u8],
}

impl<'a> Tlv<'a> {
    pub fn expect(self, tag: u8) -> Result<Self, BerError> {
        if self.tag == tag {
            Ok(self)
        } else {
            Err(BerError::UnexpectedTag {
                expected: tag,
                found: self.tag,
            })
        }
    }

    pub fn children(self) -> Children<'a> {
        Children { rest: self.content }
    }

    pub fn as_i64(self) -> Result<i64, BerError> {
        if self.content.is_empty() || self.content.len() > 8 {
            return Err(BerError::BadInteger);
        }
        let mut v: i64 = if self.content[0] & 0x80 != 0 { -1 } else { 0 };
        for &b in self.content {
            v = (v << 8) | i64::from(b);
        }
        Ok(v)
    }
}

pub struct Children<'a> {
    rest: &'a [u8],
}

impl<'a> Children<'a> {
    pub fn next_tlv(&mut self) -> Result<Tlv<'a>, BerError> {
        let (t, rest) = parse(self.rest)?;
        self.rest = rest;
        Ok(t)
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }
}

impl<'a> Iterator for Children<'a> {
    type Item = Result<Tlv<'a>, BerError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.rest.is_empty() {
            None
        } else {
            let r = self.next_tlv();
            if r.is_err() {
                self.rest = &[];
            }
            Some(r)
        }
    }
}

/// Header length and content length of the element at the start of `buf`,
/// or `None` if more bytes are needed to tell.
pub fn peek_lengths(buf: &[u8]) -> Result<Option<(usize, usize)>, BerError> {
    if buf.len() < 2 {
        return Ok(None);
    }
    let first = buf[1];
    if first & 0x80 == 0 {
        return Ok(Some((2, first as usize)));
    }
    let n = (first & 0x7f) as usize;
    if n == 0 || n > 4 {
        return Err(BerError::BadLength);
    }
    if buf.len() < 2 + n {
        return Ok(None);
    }
    let len = buf[2..2 + n].iter().fold(0usize, |acc, &b| (acc << 8) | b as usize);
    Ok(Some((2 + n, len)))
}

pub fn parse(buf: &[u8]) -> Result<(Tlv<'_>, &[u8]), BerError> {
    let (hdr, len) = peek_lengths(buf)?.ok_or(BerError::Truncated)?;
    let end = hdr.checked_add(len).ok_or(BerError::BadLength)?;
    if buf.len() < end {
        return Err(BerError::Truncated);
    }
    Ok((
        Tlv {
            tag: buf[0],
            content: &buf[hdr..end],
        },
        &buf[end..],
    ))
}
