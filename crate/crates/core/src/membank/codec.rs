//! Little-endian framing shared by the bank and feature-grid files:
//! 4-byte magic, u16 version, body, CRC32 of everything before it.

use super::MembankError;

pub(super) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], MembankError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or(MembankError::Truncated)?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, MembankError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, MembankError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String, MembankError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| MembankError::Format("name is not UTF-8".into()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, MembankError> {
        let bytes = self.take(n.checked_mul(8).ok_or(MembankError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>, MembankError> {
        let bytes = self.take(n.checked_mul(4).ok_or(MembankError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn finish(&self) -> Result<(), MembankError> {
        if self.pos != self.buf.len() {
            return Err(MembankError::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(super) fn finish_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Checks magic, version and CRC in that order and returns the body between
/// the version and the CRC. On a CRC mismatch, `parse` decides whether the
/// body is short (`Truncated`) or corrupt (`Checksum`).
pub(super) fn verify_crc<'a, T>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u16,
    parse: impl Fn(&[u8]) -> Result<T, MembankError>,
) -> Result<&'a [u8], MembankError> {
    if bytes.len() < 4 {
        return Err(if magic.starts_with(bytes) {
            MembankError::Truncated
        } else {
            MembankError::BadMagic
        });
    }
    if &bytes[..4] != magic {
        return Err(MembankError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(MembankError::Truncated);
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(MembankError::Version {
            found,
            expected: version,
        });
    }
    if bytes.len() < 10 {
        return Err(MembankError::Truncated);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(match parse(&payload[6..]) {
            Err(MembankError::Truncated) => MembankError::Truncated,
            _ => MembankError::Checksum { stored, computed },
        });
    }
    Ok(&payload[6..])
}
