//! Canonical tag-length-value encoding.
//!
//! Every structure is encoded as its fields in declaration order, each as
//! `(1-byte field tag, 4-byte big-endian length, bytes)`. Tags are assigned
//! sequentially from 1 by [`Writer`] and checked in the same order by
//! [`Reader`], so a given value has exactly one encoding.
//!
//! Scalars are fixed-width big-endian. Nested structures are the canonical
//! encoding of the inner value. Lists are a sequence of `(4-byte length,
//! item)` records. Optional values are a `0x00` byte when absent and `0x01`
//! followed by the value when present.

use thiserror::Error;

/// Format version carried by every versioned envelope in the crate.
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("expected field tag {expected}, found {found}")]
    UnexpectedTag { expected: u8, found: u8 },
    #[error("field {tag} is malformed: {reason}")]
    Malformed { tag: u8, reason: &'static str },
    #[error("{0} trailing bytes after value")]
    Trailing(usize),
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("unknown variant {value} for {what}")]
    UnknownVariant { what: &'static str, value: u8 },
}

pub type CodecResult<T> = Result<T, CodecError>;

/// A type with a single canonical byte encoding.
pub trait Canonical: Sized {
    fn write(&self, w: &mut Writer);
    fn read(r: &mut Reader<'_>) -> CodecResult<Self>;

    fn to_canonical(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    fn from_canonical(bytes: &[u8]) -> CodecResult<Self> {
        let mut r = Reader::new(bytes);
        let value = Self::read(&mut r)?;
        r.finish()?;
        Ok(value)
    }
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
    next_tag: u8,
}

impl Writer {
    pub fn new() -> Self {
        Self {
            buf: Vec::new(),
            next_tag: 1,
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, value: &[u8]) -> &mut Self {
        let len = u32::try_from(value.len()).expect("field longer than 4 GiB");
        self.buf.push(self.next_tag);
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(value);
        self.next_tag = self.next_tag.checked_add(1).expect("more than 255 fields");
        self
    }

    pub fn u8(&mut self, value: u8) -> &mut Self {
        self.bytes(&[value])
    }

    pub fn bool(&mut self, value: bool) -> &mut Self {
        self.u8(u8::from(value))
    }

    pub fn u32(&mut self, value: u32) -> &mut Self {
        self.bytes(&value.to_be_bytes())
    }

    pub fn u64(&mut self, value: u64) -> &mut Self {
        self.bytes(&value.to_be_bytes())
    }

    pub fn str(&mut self, value: &str) -> &mut Self {
        self.bytes(value.as_bytes())
    }

    pub fn nested<T: Canonical>(&mut self, value: &T) -> &mut Self {
        self.bytes(&value.to_canonical())
    }

    pub fn option<T: Canonical>(&mut self, value: Option<&T>) -> &mut Self {
        match value {
            None => self.bytes(&[0]),
            Some(v) => {
                let mut inner = vec![1];
                inner.extend_from_slice(&v.to_canonical());
                self.bytes(&inner)
            }
        }
    }

    pub fn list<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.list_with(items, |w, item| {
            item.write(w);
        })
    }

    pub fn list_with<T>(
        &mut self,
        items: &[T],
        mut each: impl FnMut(&mut Writer, &T),
    ) -> &mut Self {
        let mut out = Vec::new();
        for item in items {
            let mut w = Writer::new();
            each(&mut w, item);
            let bytes = w.finish();
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        self.bytes(&out)
    }

    pub fn str_list(&mut self, items: &[String]) -> &mut Self {
        self.list_with(items, |w, s| {
            w.str(s);
        })
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    input: &'a [u8],
    next_tag: u8,
}

impl<'a> Reader<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Self { input, next_tag: 1 }
    }

    pub fn finish(&self) -> CodecResult<()> {
        if self.input.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Trailing(self.input.len()))
        }
    }

    pub fn bytes(&mut self) -> CodecResult<&'a [u8]> {
        let tag = self.next_tag;
        let (&found, rest) = self.input.split_first().ok_or(CodecError::Truncated)?;
        if found != tag {
            return Err(CodecError::UnexpectedTag {
                expected: tag,
                found,
            });
        }
        if rest.len() < 4 {
            return Err(CodecError::Truncated);
        }
        let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() < len {
            return Err(CodecError::Truncated);
        }
        let (value, rest) = rest.split_at(len);
        self.input = rest;
        self.next_tag = self.next_tag.wrapping_add(1);
        Ok(value)
    }

    fn fixed<const N: usize>(&mut self) -> CodecResult<[u8; N]> {
        let tag = self.next_tag;
        let value = self.bytes()?;
        value.try_into().map_err(|_| CodecError::Malformed {
            tag,
            reason: "wrong fixed width",
        })
    }

    pub fn array32(&mut self) -> CodecResult<[u8; 32]> {
        self.fixed::<32>()
    }

    pub fn u8(&mut self) -> CodecResult<u8> {
        Ok(self.fixed::<1>()?[0])
    }

    pub fn bool(&mut self) -> CodecResult<bool> {
        let tag = self.next_tag;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CodecError::Malformed {
                tag,
                reason: "boolean must be 0 or 1",
            }),
        }
    }

    pub fn u32(&mut self) -> CodecResult<u32> {
        Ok(u32::from_be_bytes(self.fixed::<4>()?))
    }

    pub fn u64(&mut self) -> CodecResult<u64> {
        Ok(u64::from_be_bytes(self.fixed::<8>()?))
    }

    pub fn string(&mut self) -> CodecResult<String> {
        let tag = self.next_tag;
        let value = self.bytes()?;
        String::from_utf8(value.to_vec()).map_err(|_| CodecError::Malformed {
            tag,
            reason: "invalid utf-8",
        })
    }

    pub fn vec(&mut self) -> CodecResult<Vec<u8>> {
        Ok(self.bytes()?.to_vec())
    }

    pub fn nested<T: Canonical>(&mut self) -> CodecResult<T> {
        T::from_canonical(self.bytes()?)
    }

    pub fn option<T: Canonical>(&mut self) -> CodecResult<Option<T>> {
        let tag = self.next_tag;
        match self.bytes()?.split_first() {
            Some((0, [])) => Ok(None),
            Some((1, rest)) => T::from_canonical(rest).map(Some),
            _ => Err(CodecError::Malformed {
                tag,
                reason: "bad option marker",
            }),
        }
    }

    pub fn list<T: Canonical>(&mut self) -> CodecResult<Vec<T>> {
        self.list_with(T::read)
    }

    pub fn list_with<T>(
        &mut self,
        mut each: impl FnMut(&mut Reader<'_>) -> CodecResult<T>,
    ) -> CodecResult<Vec<T>> {
        let mut body = self.bytes()?;
        let mut out = Vec::new();
        while !body.is_empty() {
            if body.len() < 4 {
                return Err(CodecError::Truncated);
            }
            let len = u32::from_be_bytes(body[..4].try_into().unwrap()) as usize;
            body = &body[4..];
            if body.len() < len {
                return Err(CodecError::Truncated);
            }
            let (item, rest) = body.split_at(len);
            let mut r = Reader::new(item);
            out.push(each(&mut r)?);
            r.finish()?;
            body = rest;
        }
        Ok(out)
    }

    pub fn str_list(&mut self) -> CodecResult<Vec<String>> {
        self.list_with(|r| r.string())
    }
}
