//! User-side encoding: codebooks, 1-bit compression, randomized response,
//! and the per-message debiased codeword estimate used by the server.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::lattice::{Dither, LatticeSpec, NestedPair};
use crate::stream::{Purpose, StreamKey};

/// A transmitted bit, `+1` or `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bit {
    Plus,
    Minus,
}

impl Bit {
    pub fn from_sign(v: f64) -> Bit {
        if v >= 0.0 {
            Bit::Plus
        } else {
            Bit::Minus
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Bit::Plus => 1.0,
            Bit::Minus => -1.0,
        }
    }

    pub fn flipped(self) -> Bit {
        match self {
            Bit::Plus => Bit::Minus,
            Bit::Minus => Bit::Plus,
        }
    }
}

/// Where a codeword belongs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodewordOrigin {
    pub user_id: u32,
    pub round: u32,
    pub subvec: u32,
}

/// Balanced `±1` word over the lattice points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codeword {
    entries: Vec<i8>,
    origin: Option<CodewordOrigin>,
}

impl Codeword {
    /// Build from explicit entries; they must be `±1` and balanced.
    pub fn from_entries(entries: Vec<i8>) -> Result<Self> {
        if entries.is_empty() || !entries.len().is_multiple_of(2) {
            return Err(Error::OddCodewordSize(entries.len()));
        }
        let plus = entries.iter().filter(|&&e| e == 1).count();
        if plus * 2 != entries.len() || entries.iter().any(|&e| e != 1 && e != -1) {
            return Err(Error::Wire("codeword entries must be balanced ±1".into()));
        }
        Ok(Codeword {
            entries,
            origin: None,
        })
    }

    pub fn with_origin(mut self, origin: CodewordOrigin) -> Self {
        self.origin = Some(origin);
        self
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn origin(&self) -> Option<CodewordOrigin> {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices whose entry is `+1`: the preimage of a `+1` bit.
    pub fn plus_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &e)| e == 1)
            .map(|(i, _)| i)
    }
}

/// Uniformly random balanced codeword of `size` entries.
pub fn make_codeword<R: RngCore + ?Sized>(rng: &mut R, size: usize) -> Result<Codeword> {
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::OddCodewordSize(size));
    }
    let mut entries = vec![0; size];
    fill_codeword(rng, &mut entries);
    Ok(Codeword {
        entries,
        origin: None,
    })
}

/// Write a uniformly random balanced `±1` word into `out`, whose length
/// must be even. Same draws as [`make_codeword`].
pub fn fill_codeword<R: RngCore + ?Sized>(rng: &mut R, out: &mut [i8]) {
    debug_assert!(out.len().is_multiple_of(2));
    let half = out.len() / 2;
    for (i, e) in out.iter_mut().enumerate() {
        *e = if i < half { 1 } else { -1 };
    }
    out.shuffle(rng);
}

/// Codeword for `subvec` drawn from an already derived key.
pub fn keyed_codeword(key: &StreamKey, subvec: usize, size: usize) -> Codeword {
    make_codeword(&mut key.stream(subvec as u64), size).expect("lattice sizes are even")
}

/// Entry `index` of the keyed codeword for `subvec`, generated into `buf`.
fn keyed_bit(key: &StreamKey, subvec: usize, buf: &mut [i8], index: usize) -> Bit {
    fill_codeword(&mut key.stream(subvec as u64), buf);
    if buf[index] == 1 {
        Bit::Plus
    } else {
        Bit::Minus
    }
}

/// The bit a user conveys for lattice index `index`.
pub fn compress_to_bit(cw: &Codeword, index: usize) -> Result<Bit> {
    match cw.entries.get(index) {
        Some(1) => Ok(Bit::Plus),
        Some(_) => Ok(Bit::Minus),
        None => Err(Error::IndexOutOfRange {
            index,
            size: cw.len(),
        }),
    }
}

/// `p = e^ε / (1 + e^ε)`.
pub fn rr_probability(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    Ok(1.0 / (1.0 + (-epsilon).exp()))
}

/// Keep `bit` with probability `p`, flip it otherwise.
pub fn randomized_response<R: RngCore + ?Sized>(bit: Bit, p: f64, rng: &mut R) -> Bit {
    if p >= 1.0 {
        return bit;
    }
    let u: f64 = rng.random();
    if u < p {
        bit
    } else {
        bit.flipped()
    }
}

/// Debiased codeword estimate `±cw / (2p - 1)`.
pub fn estimate_codeword(received: Bit, cw: &Codeword, p: f64) -> Result<Vec<f64>> {
    let scale = debias_scale(p)?;
    let s = received.value() * scale;
    Ok(cw.entries.iter().map(|&e| s * e as f64).collect())
}

/// `1 / (2p - 1)`, rejecting `p ≤ 1/2`.
pub fn debias_scale(p: f64) -> Result<f64> {
    if !(p > 0.5 && p <= 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(1.0 / (2.0 * p - 1.0))
}

/// Per-round local privacy parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    /// `None` disables randomized response (`ε → ∞`, `p = 1`).
    pub epsilon: Option<f64>,
    pub p: f64,
    /// Anonymity degree `2^(LR-1)`.
    pub k: usize,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, lat: &LatticeSpec) -> Result<Self> {
        Ok(PrivacyParams {
            epsilon: Some(epsilon),
            p: rr_probability(epsilon)?,
            k: lat.num_points() / 2,
        })
    }

    /// The "without randomized response" configuration.
    pub fn without_rr(lat: &LatticeSpec) -> Self {
        PrivacyParams {
            epsilon: None,
            p: 1.0,
            k: lat.num_points() / 2,
        }
    }
}

/// Which encoder produced a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeTag {
    OneBit = 0,
    Nested = 1,
}

impl SchemeTag {
    pub fn bits_per_subvec(self) -> usize {
        match self {
            SchemeTag::OneBit => 1,
            SchemeTag::Nested => 2,
        }
    }
}

/// One user's transmission for a round. Nested messages interleave the
/// coarse bit and the nested bit of each sub-vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMessage {
    pub user_id: u32,
    pub round: u32,
    pub scheme: SchemeTag,
    pub bits: Vec<Bit>,
}

const HEADER_LEN: usize = 4 + 4 + 1 + 4;

impl BitMessage {
    pub fn num_subvecs(&self) -> usize {
        self.bits.len() / self.scheme.bits_per_subvec()
    }

    /// Little-endian header (`user_id`, `round`, scheme tag, bit count)
    /// followed by the bits packed LSB-first, `+1 → 1`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.bits.len().div_ceil(8));
        out.extend_from_slice(&self.user_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(self.scheme as u8);
        out.extend_from_slice(&(self.bits.len() as u32).to_le_bytes());
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, b) in self.bits.iter().enumerate() {
            if *b == Bit::Plus {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Wire(format!(
                "header needs {HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let user_id = u32_at(0);
        let round = u32_at(4);
        let scheme = match bytes[8] {
            0 => SchemeTag::OneBit,
            1 => SchemeTag::Nested,
            t => return Err(Error::Wire(format!("unknown scheme tag {t}"))),
        };
        let count = u32_at(9) as usize;
        if !count.is_multiple_of(scheme.bits_per_subvec()) {
            return Err(Error::Wire(format!(
                "{count} bits is not a whole number of nested sub-vectors"
            )));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != count.div_ceil(8) {
            return Err(Error::Wire(format!(
                "{count} bits need {} payload bytes, got {}",
                count.div_ceil(8),
                body.len()
            )));
        }
        let bits = (0..count)
            .map(|i| {
                if body[i / 8] >> (i % 8) & 1 == 1 {
                    Bit::Plus
                } else {
                    Bit::Minus
                }
            })
            .collect();
        Ok(BitMessage {
            user_id,
            round,
            scheme,
            bits,
        })
    }
}

/// Number of `L`-dimensional sub-vectors covering `d` entries.
pub fn num_subvecs(d: usize, dim: usize) -> usize {
    d.div_ceil(dim)
}

/// Copy sub-vector `i` of `h` into `out`, zero-padding past the end.
pub fn subvector(h: &[f64], i: usize, out: &mut [f64]) {
    let dim = out.len();
    for (a, o) in out.iter_mut().enumerate() {
        *o = h.get(i * dim + a).copied().unwrap_or(0.0);
    }
}

/// Seeds shared between one user and the server for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeSeeds {
    pub master_seed: u64,
    pub user_id: u32,
    pub round: u32,
}

impl EncodeSeeds {
    pub fn key(&self, purpose: Purpose) -> StreamKey {
        StreamKey::new(self.master_seed, self.user_id, self.round, purpose)
    }

    /// The codeword the server regenerates for `subvec`.
    pub fn codeword(&self, purpose: Purpose, subvec: usize, size: usize) -> Codeword {
        keyed_codeword(&self.key(purpose), subvec, size).with_origin(CodewordOrigin {
            user_id: self.user_id,
            round: self.round,
            subvec: subvec as u32,
        })
    }
}

/// A message plus the encoder-side overload count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub message: BitMessage,
    pub overloads: usize,
}

/// Encode a model update with 1-bit compression: quantize every sub-vector,
/// read its codeword entry, apply randomized response.
pub fn encode_update(
    h: &[f64],
    lat: &LatticeSpec,
    params: &PrivacyParams,
    seeds: &EncodeSeeds,
    dither: Dither,
) -> Encoded {
    let dim = lat.dim();
    let m = num_subvecs(h.len(), dim);
    let dither_key = seeds.key(Purpose::Dither);
    let rr_key = seeds.key(Purpose::Response);
    let cb_key = seeds.key(Purpose::Codebook);
    let mut x = vec![0.0; dim];
    let mut u = vec![0.0; dim];
    let mut bits = Vec::with_capacity(m);
    let mut buf = vec![0i8; lat.num_points()];
    let mut overloads = 0;
    for i in 0..m {
        subvector(h, i, &mut x);
        if dither == Dither::Uniform {
            lat.fill_dither(&mut dither_key.stream(i as u64), &mut u);
        }
        let q = lat.quantize_with_dither(&x, &u);
        overloads += q.overloaded as usize;
        let bit = keyed_bit(&cb_key, i, &mut buf, q.index);
        bits.push(randomized_response(
            bit,
            params.p,
            &mut rr_key.stream(i as u64),
        ));
    }
    Encoded {
        message: BitMessage {
            user_id: seeds.user_id,
            round: seeds.round,
            scheme: SchemeTag::OneBit,
            bits,
        },
        overloads,
    }
}

/// Encode with the two-stage nested quantizer: a coarse bit and a nested
/// bit per sub-vector, each from its own codeword and response draw.
pub fn encode_update_nested(
    h: &[f64],
    pair: &NestedPair,
    params: &PrivacyParams,
    seeds: &EncodeSeeds,
    dither: Dither,
) -> Encoded {
    let dim = pair.fine().dim();
    let m = num_subvecs(h.len(), dim);
    let dither_key = seeds.key(Purpose::Dither);
    let rr_key = seeds.key(Purpose::Response);
    let nested_rr_key = seeds.key(Purpose::NestedResponse);
    let cb_key = seeds.key(Purpose::Codebook);
    let nested_cb_key = seeds.key(Purpose::NestedCodebook);
    let mut x = vec![0.0; dim];
    let mut u = vec![0.0; dim];
    let mut bits = Vec::with_capacity(2 * m);
    let mut buf_c = vec![0i8; pair.coarse().num_points()];
    let mut buf_n = vec![0i8; pair.nested().num_points()];
    let mut overloads = 0;
    for i in 0..m {
        subvector(h, i, &mut x);
        if dither == Dither::Uniform {
            pair.fine()
                .fill_dither(&mut dither_key.stream(i as u64), &mut u);
        }
        let q = pair.quantize_with_dither(&x, &u);
        overloads += q.overloaded as usize;
        let b_c = keyed_bit(&cb_key, i, &mut buf_c, q.coarse);
        let b_n = keyed_bit(&nested_cb_key, i, &mut buf_n, q.nested);
        bits.push(randomized_response(
            b_c,
            params.p,
            &mut rr_key.stream(i as u64),
        ));
        bits.push(randomized_response(
            b_n,
            params.p,
            &mut nested_rr_key.stream(i as u64),
        ));
    }
    Encoded {
        message: BitMessage {
            user_id: seeds.user_id,
            round: seeds.round,
            scheme: SchemeTag::Nested,
            bits,
        },
        overloads,
    }
}
