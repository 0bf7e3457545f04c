//! Field serialization: CSV with a comment header, and a little-endian
//! binary format.
//!
//! Binary layout: magic `G2FD`, `u32` version, `u32` cutoff `N`, `f64` side
//! `L`, `f64` alpha, `u32` row count, then rows of
//! `(i32 k1, i32 k2, f64 re, f64 im)`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{wavenumbers, FluidParams, SpectralField};

const MAGIC: &[u8; 4] = b"G2FD";
const VERSION: u32 = 1;

/// A field together with the header metadata it was stored with.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredField {
    pub field: SpectralField,
    pub domain_side: f64,
    pub alpha: f64,
}

pub fn field_to_csv(u: &SpectralField, p: &FluidParams) -> String {
    let mut out = format!(
        "# N={}\n# L={:e}\n# alpha={:e}\nk1,k2,re,im\n",
        u.cutoff(),
        p.domain_side,
        p.alpha
    );
    for (k, c) in u.modes() {
        out.push_str(&format!("{},{},{:e},{:e}\n", k.0, k.1, c.re, c.im));
    }
    out
}

fn header_value(line: &str, key: &str) -> Option<String> {
    let rest = line.strip_prefix('#')?.trim();
    let (k, v) = rest.split_once('=')?;
    (k.trim() == key).then(|| v.trim().to_string())
}

pub fn field_from_csv(text: &str) -> Result<StoredField> {
    let (mut n, mut l, mut alpha) = (None, None, None);
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        n = n.or_else(|| header_value(line, "N"));
        l = l.or_else(|| header_value(line, "L"));
        alpha = alpha.or_else(|| header_value(line, "alpha"));
    }
    let num = |v: Option<String>, key: &str| -> Result<f64> {
        v.ok_or_else(|| Error::parse("field csv", format!("missing header {key}")))?
            .parse::<f64>()
            .map_err(|e| Error::parse("field csv", format!("header {key}: {e}")))
    };
    let cutoff = n
        .ok_or_else(|| Error::parse("field csv", "missing header N"))?
        .parse::<usize>()
        .map_err(|e| Error::parse("field csv", format!("header N: {e}")))?;
    let domain_side = num(l, "L")?;
    let alpha = num(alpha, "alpha")?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut field = SpectralField::zeros(cutoff);
    for row in rdr.deserialize() {
        let (k1, k2, re, im): (i64, i64, f64, f64) = row?;
        set_checked(&mut field, (k1, k2), Complex64::new(re, im))?;
    }
    Ok(StoredField {
        field,
        domain_side,
        alpha,
    })
}

fn set_checked(u: &mut SpectralField, k: (i64, i64), c: Complex64) -> Result<()> {
    let n = u.cutoff() as i64;
    if k == (0, 0) || k.0.abs() > n || k.1.abs() > n {
        return Err(Error::parse("field", format!("wavenumber {k:?} outside cutoff {n}")));
    }
    u.set_mode(k, c);
    Ok(())
}

pub fn field_to_bytes(u: &SpectralField, p: &FluidParams) -> Vec<u8> {
    let count = wavenumbers(u.cutoff()).count();
    let mut out = Vec::with_capacity(32 + 24 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(u.cutoff() as u32).to_le_bytes());
    out.extend_from_slice(&p.domain_side.to_le_bytes());
    out.extend_from_slice(&p.alpha.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (k, c) in u.modes() {
        out.extend_from_slice(&(k.0 as i32).to_le_bytes());
        out.extend_from_slice(&(k.1 as i32).to_le_bytes());
        out.extend_from_slice(&c.re.to_le_bytes());
        out.extend_from_slice(&c.im.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const K: usize>(&mut self) -> Result<[u8; K]> {
        let end = self.pos + K;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::parse("field binary", "truncated input"))?;
        self.pos = end;
        Ok(bytes.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn field_from_bytes(buf: &[u8]) -> Result<StoredField> {
    let mut c = Cursor { buf, pos: 0 };
    if &c.take::<4>()? != MAGIC {
        return Err(Error::parse("field binary", "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::parse("field binary", format!("unsupported version {version}")));
    }
    let cutoff = c.u32()? as usize;
    let domain_side = c.f64()?;
    let alpha = c.f64()?;
    let count = c.u32()? as usize;
    let mut field = SpectralField::zeros(cutoff);
    for _ in 0..count {
        let k = (c.i32()? as i64, c.i32()? as i64);
        let z = Complex64::new(c.f64()?, c.f64()?);
        set_checked(&mut field, k, z)?;
    }
    if c.pos != buf.len() {
        return Err(Error::parse("field binary", "trailing bytes"));
    }
    Ok(StoredField {
        field,
        domain_side,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_and_binary_roundtrip_exactly() {
        let p = FluidParams::default().with_cutoff(3);
        let u = SpectralField::random(3, &mut ChaCha8Rng::seed_from_u64(1), 1.0);
        let text = field_to_csv(&u, &p);
        assert!(text.starts_with("# N=3\n"));
        let back = field_from_csv(&text).unwrap();
        assert_eq!(back.field, u);
        assert_eq!(back.alpha, p.alpha);
        assert_eq!(back.domain_side, p.domain_side);
        let bytes = field_to_bytes(&u, &p);
        assert_eq!(&bytes[..4], b"G2FD");
        assert_eq!(bytes.len(), 32 + 24 * 48);
        assert_eq!(field_from_bytes(&bytes).unwrap().field, u);
    }

    #[test]
    fn malformed_inputs_rejected() {
        let p = FluidParams::default().with_cutoff(2);
        let u = SpectralField::zeros(2);
        let bytes = field_to_bytes(&u, &p);
        assert!(field_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(field_from_bytes(b"XXXX").is_err());
        assert!(field_from_csv("# N=2\n# L=1\n# alpha=1\nk1,k2,re,im\n5,0,1,0\n").is_err());
        assert!(field_from_csv("k1,k2,re,im\n").is_err());
    }
}
