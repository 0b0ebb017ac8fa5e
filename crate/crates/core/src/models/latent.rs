use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A latent space: autoencoder compression `f`, transformer patch size `p`,
/// latent channel count `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub f: usize,
    pub p: usize,
    pub c: usize,
}

impl LatentSpec {
    pub fn new(f: usize, p: usize, c: usize) -> Result<Self> {
        if f == 0 || p == 0 || c == 0 {
            return Err(Error::SpecMismatch(format!(
                "latent spec extents must be positive (f={f}, p={p}, c={c})"
            )));
        }
        Ok(Self { f, p, c })
    }

    /// Values folded into one token.
    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }

    /// Pixels per token side.
    pub fn stride(&self) -> usize {
        self.f * self.p
    }

    /// Latent extents `(H/f, W/f)`; the image must also tile into patches.
    pub fn latent_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.token_grid(h, w)?;
        Ok((h / self.f, w / self.f))
    }

    /// Token grid `(H/(f·p), W/(f·p))`.
    pub fn token_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::SpecMismatch(format!(
                "{h}x{w} image is not divisible by f·p = {s} for {self}"
            )));
        }
        Ok((h / s, w / s))
    }

    pub fn latent_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        let (lh, lw) = self.latent_hw(h, w)?;
        Ok([self.c, lh, lw])
    }
}

/// Number of transformer tokens for an `H×W` image: `(H/(f·p))·(W/(f·p))`.
pub fn token_count(h: usize, w: usize, spec: &LatentSpec) -> Result<usize> {
    let (gh, gw) = spec.token_grid(h, w)?;
    Ok(gh * gw)
}

impl fmt::Display for LatentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}p{}c{}", self.f, self.p, self.c)
    }
}

impl FromStr for LatentSpec {
    type Err = Error;

    /// Parses `f8p2` or `f8p2c16`; channels default to 4.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse latent spec `{s}` (expected e.g. f8p2c16)"));
        let rest = s.strip_prefix('f').ok_or_else(bad)?;
        let (f, rest) = rest.split_once('p').ok_or_else(bad)?;
        let (p, c) = match rest.split_once('c') {
            Some((p, c)) => (p, c),
            None => (rest, "4"),
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        LatentSpec::new(num(f)?, num(p)?, num(c)?)
    }
}

/// Gather index folding `[B, C, H, W]` into `[B, (H/p)·(W/p), p·p·C]`.
///
/// Token order is row-major over the patch grid; inside a token the layout is
/// `(py, px, channel)`.
pub fn patchify_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> Arc<[usize]> {
    let (gh, gw) = (h / p, w / p);
    let pd = p * p * c;
    let mut idx = vec![0usize; b * gh * gw * pd];
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = (bi * gh + ty) * gw + tx;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let dst = tok * pd + (py * p + px) * c + ch;
                            idx[dst] = ((bi * c + ch) * h + ty * p + py) * w + tx * p + px;
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`patchify_index`]: tokens back to `[B, C, H, W]`.
pub fn unpatchify_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> Arc<[usize]> {
    let fwd = patchify_index(b, c, h, w, p);
    let mut inv = vec![0usize; fwd.len()];
    for (tok_pos, &img_pos) in fwd.iter().enumerate() {
        inv[img_pos] = tok_pos;
    }
    inv.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_examples() {
        let f8p2 = LatentSpec::new(8, 2, 4).unwrap();
        assert_eq!(token_count(1024, 1024, &f8p2).unwrap(), 4096);
        let f32p1 = LatentSpec::new(32, 1, 32).unwrap();
        assert_eq!(token_count(1024, 1024, &f32p1).unwrap(), 1024);
        let f4p2 = LatentSpec::new(4, 2, 4).unwrap();
        assert_eq!(token_count(32, 32, &f4p2).unwrap(), 16);
        assert!(matches!(token_count(30, 32, &f4p2), Err(Error::SpecMismatch(_))));
    }

    #[test]
    fn parse_spec_strings() {
        assert_eq!(
            "f8p2c16".parse::<LatentSpec>().unwrap(),
            LatentSpec::new(8, 2, 16).unwrap()
        );
        assert_eq!("f8p2".parse::<LatentSpec>().unwrap().c, 4);
        assert!("8p2".parse::<LatentSpec>().is_err());
        assert!("f0p2".parse::<LatentSpec>().is_err());
    }

    #[test]
    fn patchify_round_trips() {
        let (b, c, h, w, p) = (2, 3, 4, 6, 2);
        let fwd = patchify_index(b, c, h, w, p);
        let inv = unpatchify_index(b, c, h, w, p);
        let src: Vec<usize> = (0..b * c * h * w).collect();
        let tokens: Vec<usize> = fwd.iter().map(|&i| src[i]).collect();
        let back: Vec<usize> = inv.iter().map(|&i| tokens[i]).collect();
        assert_eq!(back, src);
    }
}
