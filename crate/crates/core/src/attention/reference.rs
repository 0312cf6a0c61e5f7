//! Extended-precision reference attention.
//!
//! Direct single-pass softmax attention carried out in double-double
//! arithmetic (~106-bit significands). It shares no code with the partial /
//! aggregate path and is used as the ground truth the blockwise path is
//! checked against.

use super::{AttentionConfig, KvSegment, QueryVector};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd {
        hi: s,
        lo: (a - (s - bb)) + (b - bb),
    }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd {
        hi: p,
        lo: a.mul_add(b, -p),
    }
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn mul_f64(self, b: f64) -> Dd {
        let p = two_prod(self.hi, b);
        quick_two_sum(p.hi, p.lo + self.lo * b)
    }

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.add(o.mul_f64(q1).neg());
        let q2 = r.hi / o.hi;
        let r = r.add(o.mul_f64(q2).neg());
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd { hi: q3, lo: 0.0 })
    }

    fn gt(self, o: Dd) -> bool {
        self.hi > o.hi || (self.hi == o.hi && self.lo > o.lo)
    }

    /// `exp(hi + lo)` as a double-double; `lo` is tiny so `exp(lo) ~ 1 + lo`.
    fn exp(self) -> Dd {
        let e = self.hi.exp();
        quick_two_sum(e, e * self.lo)
    }
}

/// Softmax attention of `q` over `segment`, evaluated in double-double.
///
/// Shapes are assumed consistent with `cfg`.
pub fn extended_attention(q: &QueryVector, segment: &KvSegment, cfg: &AttentionConfig) -> Vec<f64> {
    let n = segment.seq_len();
    let logits: Vec<Dd> = (0..n)
        .map(|i| {
            q.as_slice()
                .iter()
                .zip(segment.key(i))
                .fold(Dd::ZERO, |acc, (a, b)| acc.add(two_prod(*a, *b)))
                .mul_f64(cfg.scale)
        })
        .collect();
    let max = logits
        .iter()
        .copied()
        .reduce(|a, b| if b.gt(a) { b } else { a })
        .expect("segment is non-empty");
    let mut denom = Dd::ZERO;
    let mut num = vec![Dd::ZERO; cfg.head_dim];
    for (i, l) in logits.iter().enumerate() {
        let w = l.add(max.neg()).exp();
        denom = denom.add(w);
        for (acc, v) in num.iter_mut().zip(segment.value(i)) {
            *acc = acc.add(w.mul_f64(*v));
        }
    }
    num.into_iter().map(|x| x.div(denom).hi).collect()
}

/// Norm-wise relative error `max|got - want| / max|want|`.
///
/// Returns the absolute error when `want` is identically zero.
pub fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "relative_error on different widths");
    let diff = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = want.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dd_recovers_cancelled_bits() {
        let a = Dd { hi: 1.0, lo: 0.0 }.add(Dd { hi: 1e-20, lo: 0.0 });
        let b = a.add(Dd { hi: -1.0, lo: 0.0 });
        assert_eq!(b.hi, 1e-20);
        let third = Dd { hi: 1.0, lo: 0.0 }.div(Dd { hi: 3.0, lo: 0.0 });
        let back = third.mul_f64(3.0).add(Dd { hi: -1.0, lo: 0.0 });
        assert!(back.hi.abs() < 1e-30);
    }

    #[test]
    fn matches_hand_computed_two_token_softmax() {
        let seg = KvSegment::new(vec![vec![1.0], vec![0.0]], vec![vec![1.0], vec![0.0]]).unwrap();
        let q = QueryVector::new(vec![1.0]).unwrap();
        let cfg = AttentionConfig::new(1, 1, 1).unwrap();
        let out = extended_attention(&q, &seg, &cfg);
        let want = 1.0_f64.exp() / (1.0_f64.exp() + 1.0);
        assert!((out[0] - want).abs() < 1e-15);
    }

    #[test]
    fn relative_error_is_normwise() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[1.5, 2.0], &[1.0, 2.0]), 0.25);
        assert_eq!(relative_error(&[0.5], &[0.0]), 0.5);
    }
}
