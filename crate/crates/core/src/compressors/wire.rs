//! Framed binary encoding of payloads.
//!
//! A record is a 1-byte variant tag, the body length as a little-endian
//! `u64`, then the body. All integers are little-endian `u64`, all reals
//! little-endian IEEE-754 `f64`, and sign bits are packed LSB-first into
//! bytes (bit set = negative).
//!
//! | tag | variant   | body                                                        |
//! |-----|-----------|-------------------------------------------------------------|
//! | 0   | dense     | dim, dim reals                                              |
//! | 1   | sparse    | dim, k, k indices, k reals                                  |
//! | 2   | sign      | dim, scale, ceil(dim/8) sign bytes                          |
//! | 3   | ternary   | dim, k, magnitude, k indices, ceil(k/8) sign bytes          |
//! | 4   | synthetic | rows, feature dim, label dim, scale, features, labels       |

use super::{Payload, SyntheticBatch, SyntheticPayload};
use crate::error::{Error, Result};
use crate::models::ParamVector;
use crate::scalar::Scalar;

const TAG_DENSE: u8 = 0;
const TAG_SPARSE: u8 = 1;
const TAG_SIGN: u8 = 2;
const TAG_TERNARY: u8 = 3;
const TAG_SYNTHETIC: u8 = 4;

fn put_u64(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u64).to_le_bytes());
}

fn put_real<T: Scalar>(out: &mut Vec<u8>, x: T) {
    out.extend_from_slice(&x.as_f64().to_le_bytes());
}

fn put_bits(out: &mut Vec<u8>, bits: &[bool]) {
    for chunk in bits.chunks(8) {
        let mut b = 0u8;
        for (j, &bit) in chunk.iter().enumerate() {
            if bit {
                b |= 1 << j;
            }
        }
        out.push(b);
    }
}

pub fn encode<T: Scalar>(payload: &Payload<T>) -> Vec<u8> {
    let mut body = Vec::new();
    let tag = match payload {
        Payload::Dense(v) => {
            put_u64(&mut body, v.dim());
            v.as_slice().iter().for_each(|x| put_real(&mut body, *x));
            TAG_DENSE
        }
        Payload::Sparse { dim, indices, values } => {
            put_u64(&mut body, *dim);
            put_u64(&mut body, indices.len());
            indices.iter().for_each(|i| put_u64(&mut body, *i));
            values.iter().for_each(|x| put_real(&mut body, *x));
            TAG_SPARSE
        }
        Payload::Sign { scale, negative } => {
            put_u64(&mut body, negative.len());
            put_real(&mut body, *scale);
            put_bits(&mut body, negative);
            TAG_SIGN
        }
        Payload::Ternary {
            dim,
            indices,
            negative,
            magnitude,
        } => {
            put_u64(&mut body, *dim);
            put_u64(&mut body, indices.len());
            put_real(&mut body, *magnitude);
            indices.iter().for_each(|i| put_u64(&mut body, *i));
            put_bits(&mut body, negative);
            TAG_TERNARY
        }
        Payload::Synthetic(p) => {
            let b = &p.batch;
            put_u64(&mut body, b.rows);
            put_u64(&mut body, b.feature_dim);
            put_u64(&mut body, b.label_dim);
            put_real(&mut body, p.scale);
            b.features.iter().chain(&b.labels).for_each(|x| put_real(&mut body, *x));
            TAG_SYNTHETIC
        }
    };
    let mut out = Vec::with_capacity(9 + body.len());
    out.push(tag);
    put_u64(&mut out, body.len());
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Wire(format!("need {n} bytes at offset {}, have {}", self.pos, self.buf.len() - self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Wire(format!("length {v} overflows usize")))
    }

    fn real<T: Scalar>(&mut self) -> Result<T> {
        let b = self.take(8)?;
        Ok(T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
    }

    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        self.check_remaining(n, 8)?;
        (0..n).map(|_| self.real()).collect()
    }

    fn indices(&mut self, n: usize, dim: usize) -> Result<Vec<usize>> {
        self.check_remaining(n, 8)?;
        (0..n)
            .map(|_| {
                let i = self.u64()?;
                if i >= dim {
                    return Err(Error::Wire(format!("index {i} out of range {dim}")));
                }
                Ok(i)
            })
            .collect()
    }

    fn bits(&mut self, n: usize) -> Result<Vec<bool>> {
        let bytes = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect())
    }

    fn check_remaining(&self, n: usize, width: usize) -> Result<()> {
        let need = n.checked_mul(width).ok_or_else(|| Error::Wire("length overflow".into()))?;
        if need > self.buf.len() - self.pos {
            return Err(Error::Wire(format!("need {need} bytes, have {}", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Decodes one record from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Payload<T>, usize)> {
    let mut head = Reader { buf: bytes, pos: 0 };
    let tag = head.take(1)?[0];
    let len = head.u64()?;
    let body = head.take(len)?;
    let consumed = head.pos;
    let mut r = Reader { buf: body, pos: 0 };
    let payload = match tag {
        TAG_DENSE => {
            let dim = r.u64()?;
            Payload::Dense(ParamVector::from_vec(r.reals(dim)?))
        }
        TAG_SPARSE => {
            let dim = r.u64()?;
            let k = r.u64()?;
            let indices = r.indices(k, dim)?;
            let values = r.reals(k)?;
            Payload::Sparse { dim, indices, values }
        }
        TAG_SIGN => {
            let dim = r.u64()?;
            let scale = r.real()?;
            Payload::Sign {
                scale,
                negative: r.bits(dim)?,
            }
        }
        TAG_TERNARY => {
            let dim = r.u64()?;
            let k = r.u64()?;
            let magnitude = r.real()?;
            let indices = r.indices(k, dim)?;
            let negative = r.bits(k)?;
            Payload::Ternary {
                dim,
                indices,
                negative,
                magnitude,
            }
        }
        TAG_SYNTHETIC => {
            let rows = r.u64()?;
            let feature_dim = r.u64()?;
            let label_dim = r.u64()?;
            let scale = r.real()?;
            let nf = rows.checked_mul(feature_dim).ok_or_else(|| Error::Wire("length overflow".into()))?;
            let nl = rows.checked_mul(label_dim).ok_or_else(|| Error::Wire("length overflow".into()))?;
            let features = r.reals(nf)?;
            let labels = r.reals(nl)?;
            Payload::Synthetic(SyntheticPayload {
                batch: SyntheticBatch {
                    rows,
                    feature_dim,
                    label_dim,
                    features,
                    labels,
                },
                scale,
            })
        }
        t => return Err(Error::Wire(format!("unknown variant tag {t}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Wire(format!("{} trailing bytes in record body", body.len() - r.pos)));
    }
    Ok((payload, consumed))
}
