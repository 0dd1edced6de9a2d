//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::{BigInt, Sign};
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;

/// Fractional bits of [`Fixed`].
const FRAC: u32 = 256;

/// Binary fixed-point number with [`FRAC`] fractional bits.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fixed(BigInt);

impl Fixed {
    pub fn zero() -> Self {
        Fixed(BigInt::zero())
    }

    pub fn one() -> Self {
        Fixed(BigInt::one() << FRAC)
    }

    pub fn from_int(v: i64) -> Self {
        Fixed(BigInt::from(v) << FRAC)
    }

    /// Exact for every finite `f64` whose lowest set bit is at or above
    /// `2^-FRAC`.
    pub fn from_f64(v: f64) -> Self {
        assert!(v.is_finite());
        if v == 0.0 {
            return Self::zero();
        }
        let bits = v.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), exp - 1075)
        };
        let mut m = BigInt::from(mant);
        let shift = e + FRAC as i64;
        m = if shift >= 0 {
            m << shift as u32
        } else {
            m >> (-shift) as u32
        };
        if v < 0.0 {
            m = -m;
        }
        Fixed(m)
    }

    pub fn to_f64(&self) -> f64 {
        // Keep 64 significant bits before the conversion.
        let bits = self.0.bits() as i64;
        let drop = (bits - 64).max(0);
        let top = (&self.0 >> drop as u32).to_f64().expect("fits after shifting");
        top * 2f64.powi((drop - FRAC as i64) as i32)
    }

    pub fn abs(&self) -> Self {
        Fixed(self.0.abs())
    }

    pub fn is_positive(&self) -> bool {
        self.0.sign() == Sign::Plus
    }

    fn ln2() -> Self {
        // ln 2 = sum_{k>=1} 1 / (k 2^k)
        let mut acc = BigInt::zero();
        for k in 1..=(FRAC + 8) {
            acc += (BigInt::one() << (FRAC + 8 - k)) / BigInt::from(k);
        }
        Fixed(acc >> 8)
    }

    pub fn exp(&self) -> Self {
        let ln2 = Self::ln2();
        // x = n ln2 + r with |r| <= ln2 / 2
        let n = (self.clone() / ln2.clone()).round_to_int();
        let r = self.clone() - ln2 * Fixed::from_int(n);
        let mut term = Fixed::one();
        let mut sum = Fixed::one();
        for k in 1..200 {
            term = term * r.clone() / Fixed::from_int(k);
            if term.0.is_zero() {
                break;
            }
            sum = sum + term.clone();
        }
        if n >= 0 {
            Fixed(sum.0 << n as u32)
        } else {
            Fixed(sum.0 >> (-n) as u32)
        }
    }

    pub fn ln(&self) -> Self {
        assert!(self.is_positive(), "log of a non-positive number");
        // self = m 2^n with m in [1, 2)
        let n = self.0.bits() as i64 - 1 - FRAC as i64;
        let m = if n >= 0 {
            Fixed(&self.0 >> n as u32)
        } else {
            Fixed(&self.0 << (-n) as u32)
        };
        // ln m = 2 atanh(z), z = (m - 1) / (m + 1)
        let z = (m.clone() - Fixed::one()) / (m + Fixed::one());
        let z2 = z.clone() * z.clone();
        let mut power = z;
        let mut sum = Fixed::zero();
        for k in 0..400 {
            let t = power.clone() / Fixed::from_int(2 * k + 1);
            if t.0.is_zero() {
                break;
            }
            sum = sum + t;
            power = power * z2.clone();
        }
        Fixed::from_int(2) * sum + Self::ln2() * Fixed::from_int(n)
    }

    pub fn sqrt(&self) -> Self {
        assert!(!self.0.is_negative());
        Fixed((&self.0 << FRAC).sqrt())
    }

    fn round_to_int(&self) -> i64 {
        let half = BigInt::one() << (FRAC - 1);
        let v = if self.0.is_negative() {
            &self.0 - &half
        } else {
            &self.0 + &half
        };
        (v / (BigInt::one() << FRAC)).to_i64().expect("small integer")
    }

    pub fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, o: Fixed) -> Fixed {
        Fixed(self.0 + o.0)
    }
}

impl Sub for Fixed {
    type Output = Fixed;
    fn sub(self, o: Fixed) -> Fixed {
        Fixed(self.0 - o.0)
    }
}

impl Mul for Fixed {
    type Output = Fixed;
    fn mul(self, o: Fixed) -> Fixed {
        Fixed((self.0 * o.0) >> FRAC)
    }
}

impl Div for Fixed {
    type Output = Fixed;
    fn div(self, o: Fixed) -> Fixed {
        Fixed((self.0 << FRAC) / o.0)
    }
}

impl Neg for Fixed {
    type Output = Fixed;
    fn neg(self) -> Fixed {
        Fixed(-self.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Fixed {
    a.iter().zip(b).fold(Fixed::zero(), |acc, (&x, &y)| {
        acc + Fixed::from_f64(x) * Fixed::from_f64(y)
    })
}

pub fn norm(a: &[f64]) -> Fixed {
    dot(a, a).sqrt()
}

/// `-log(e^{p/tau} / (e^{p/tau} + sum_n e^{n_i/tau}))` from exact dot
/// products.
pub fn info_nce(pos: Fixed, negs: &[Fixed], tau: f64) -> Fixed {
    let t = Fixed::from_f64(tau);
    let num = (pos.clone() / t.clone()).exp();
    let den = negs
        .iter()
        .fold(num.clone(), |acc, n| acc + (n.clone() / t.clone()).exp());
    -(num / den).ln()
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

pub fn random_unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / s).collect()
}

/// Straightforward graph segmentation: every pixel carries a component id,
/// merging rewrites ids across the whole grid, and each component tracks
/// its size and largest internal edge.
pub fn naive_felzenszwalb(plane: &[f64], h: usize, w: usize, k: f64, min_size: usize) -> Vec<usize> {
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            if x + 1 < w {
                edges.push((a, a + 1, (plane[a] - plane[a + 1]).abs()));
            }
            if y + 1 < h {
                edges.push((a, a + w, (plane[a] - plane[a + w]).abs()));
            }
        }
    }
    // Insertion sort keeps equal weights in generation order.
    for i in 1..edges.len() {
        let mut j = i;
        while j > 0 && edges[j - 1].2.partial_cmp(&edges[j].2) == Some(Ordering::Greater) {
            edges.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut comp: Vec<usize> = (0..h * w).collect();
    let mut internal = vec![0.0f64; h * w];
    let size_of = |comp: &[usize], c: usize| comp.iter().filter(|&&v| v == c).count();
    let relabel = |comp: &mut Vec<usize>, from: usize, to: usize| {
        for v in comp.iter_mut() {
            if *v == from {
                *v = to;
            }
        }
    };
    for &(a, b, wgt) in &edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca == cb {
            continue;
        }
        let (na, nb) = (size_of(&comp, ca), size_of(&comp, cb));
        let ta = internal[ca] + k / na as f64;
        let tb = internal[cb] + k / nb as f64;
        if wgt <= ta && wgt <= tb {
            relabel(&mut comp, cb, ca);
            internal[ca] = internal[ca].max(internal[cb]).max(wgt);
        }
    }
    for &(a, b, _) in &edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca != cb && (size_of(&comp, ca) < min_size || size_of(&comp, cb) < min_size) {
            relabel(&mut comp, cb, ca);
        }
    }
    canonical(&comp)
}

/// Renumbers ids by first appearance in raster order.
pub fn canonical(ids: &[impl Copy + Eq + std::hash::Hash]) -> Vec<usize> {
    let mut seen = std::collections::HashMap::new();
    ids.iter()
        .map(|id| {
            let next = seen.len();
            *seen.entry(*id).or_insert(next)
        })
        .collect()
}
