//! Exact blockwise decomposition of single-query (decode) attention.
//!
//! A KV sequence can be cut into any number of contiguous segments. Each
//! segment is reduced on its own to an [`AttentionPartial`], a running
//! `(max logit, shifted exp-sum, unnormalized weighted value sum)` triple,
//! and the partials are merged back into the exact softmax-attention output.
//! The merge only needs the partials, so a segment can live on a remote
//! instance and ship back `head_dim + 2` scalars instead of its keys/values.

use thiserror::Error;

pub mod reference;
pub mod verify;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("segment must contain at least one token")]
    EmptySegment,
    #[error("no attention partials to aggregate")]
    NoPartials,
    #[error("query head {head} out of range for {num_q_heads} query heads")]
    HeadOutOfRange { head: usize, num_q_heads: usize },
    #[error("invalid attention config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// How query heads share KV heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadLayout {
    MultiHead,
    MultiQuery,
    GroupedQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub head_dim: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    /// Multiplier applied to every `q . k` logit.
    pub scale: f64,
}

impl AttentionConfig {
    /// Config with the standard `1 / sqrt(head_dim)` temperature.
    pub fn new(head_dim: usize, num_q_heads: usize, num_kv_heads: usize) -> Result<Self> {
        let cfg = Self {
            head_dim,
            num_q_heads,
            num_kv_heads,
            scale: 1.0 / (head_dim.max(1) as f64).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.num_q_heads == 0 || self.num_kv_heads == 0 {
            return Err(AttentionError::InvalidConfig(
                "head_dim, num_q_heads and num_kv_heads must be positive".into(),
            ));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(AttentionError::InvalidConfig(format!(
                "num_kv_heads ({}) must divide num_q_heads ({})",
                self.num_kv_heads, self.num_q_heads
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(AttentionError::InvalidConfig(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> HeadLayout {
        if self.num_kv_heads == self.num_q_heads {
            HeadLayout::MultiHead
        } else if self.num_kv_heads == 1 {
            HeadLayout::MultiQuery
        } else {
            HeadLayout::GroupedQuery
        }
    }

    /// Number of query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }
}

/// KV head serving query head `q_head`.
pub fn gqa_kv_head(q_head: usize, cfg: &AttentionConfig) -> Result<usize> {
    if q_head >= cfg.num_q_heads {
        return Err(AttentionError::HeadOutOfRange {
            head: q_head,
            num_q_heads: cfg.num_q_heads,
        });
    }
    Ok(q_head / cfg.group_size())
}

/// Single-token query for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("query"));
        }
        Ok(Self(q))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Contiguous run of cached keys and values for one KV head, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSegment {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KvSegment {
    pub fn new(keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> Result<Self> {
        let head_dim = keys.first().map(Vec::len).unwrap_or(0);
        if keys.len() != values.len() {
            return Err(AttentionError::ShapeMismatch(format!(
                "{} keys but {} values",
                keys.len(),
                values.len()
            )));
        }
        if let Some(bad) = keys.iter().chain(values.iter()).find(|r| r.len() != head_dim) {
            return Err(AttentionError::ShapeMismatch(format!(
                "row of width {} in segment of head_dim {}",
                bad.len(),
                head_dim
            )));
        }
        Self::from_flat(
            head_dim,
            keys.into_iter().flatten().collect(),
            values.into_iter().flatten().collect(),
        )
    }

    pub fn from_flat(head_dim: usize, keys: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if head_dim == 0 || keys.is_empty() {
            return Err(AttentionError::EmptySegment);
        }
        if keys.len() != values.len() || !keys.len().is_multiple_of(head_dim) {
            return Err(AttentionError::ShapeMismatch(format!(
                "flat keys ({}) / values ({}) are not whole rows of width {}",
                keys.len(),
                values.len(),
                head_dim
            )));
        }
        if keys.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("keys"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("values"));
        }
        Ok(Self {
            head_dim,
            keys,
            values,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn seq_len(&self) -> usize {
        self.keys.len() / self.head_dim
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }

    /// Copy of tokens `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.seq_len() {
            return Err(AttentionError::ShapeMismatch(format!(
                "slice {start}..{end} of a {}-token segment",
                self.seq_len()
            )));
        }
        let (a, b) = (start * self.head_dim, end * self.head_dim);
        Ok(Self {
            head_dim: self.head_dim,
            keys: self.keys[a..b].to_vec(),
            values: self.values[a..b].to_vec(),
        })
    }

    /// Splits at the given strictly increasing interior cut points.
    pub fn split_at_cuts(&self, cuts: &[usize]) -> Result<Vec<Self>> {
        let mut bounds = Vec::with_capacity(cuts.len() + 2);
        bounds.push(0);
        bounds.extend_from_slice(cuts);
        bounds.push(self.seq_len());
        bounds.windows(2).map(|w| self.slice(w[0], w[1])).collect()
    }

    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(AttentionError::EmptySegment)?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for p in parts {
            if p.head_dim != first.head_dim {
                return Err(AttentionError::ShapeMismatch(
                    "concatenating segments of different head_dim".into(),
                ));
            }
            keys.extend_from_slice(&p.keys);
            values.extend_from_slice(&p.values);
        }
        Self::from_flat(first.head_dim, keys, values)
    }
}

/// Per-segment reduction of attention for one query head.
///
/// `m` is the segment's largest scaled logit, `e = sum exp(l_i - m)` and
/// `ma = sum exp(l_i - m) * v_i`. The empty partial (`m = -inf`, `e = 0`,
/// `ma = 0`, no tokens) is the identity of [`combine_partials`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartial {
    m: f64,
    e: f64,
    ma: Vec<f64>,
    seq_p: usize,
}

impl AttentionPartial {
    pub fn empty(head_dim: usize) -> Self {
        Self {
            m: f64::NEG_INFINITY,
            e: 0.0,
            ma: vec![0.0; head_dim],
            seq_p: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.seq_p == 0
    }

    pub fn max_logit(&self) -> f64 {
        self.m
    }

    pub fn exp_sum(&self) -> f64 {
        self.e
    }

    pub fn weighted_values(&self) -> &[f64] {
        &self.ma
    }

    pub fn seq_p(&self) -> usize {
        self.seq_p
    }

    pub fn head_dim(&self) -> usize {
        self.ma.len()
    }

    /// Normalized output of this partial alone.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        aggregate_partials(std::slice::from_ref(self))
    }

    /// Number of `f64` scalars a remote holder returns for this partial.
    pub fn payload_scalars(&self) -> usize {
        self.ma.len() + 2
    }

    /// Little-endian wire encoding: `m`, `e`, then `ma`. The token count is
    /// bookkeeping known to the requester and is not shipped.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.payload_scalars());
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.e.to_le_bytes());
        for x in &self.ma {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode_payload(bytes: &[u8], seq_p: usize) -> Result<Self> {
        if bytes.len() < 16 || !bytes.len().is_multiple_of(8) {
            return Err(AttentionError::ShapeMismatch(format!(
                "payload of {} bytes",
                bytes.len()
            )));
        }
        let mut scalars = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let m = scalars.next().expect("length checked");
        let e = scalars.next().expect("length checked");
        let ma: Vec<f64> = scalars.collect();
        if seq_p == 0 {
            return Ok(Self::empty(ma.len()));
        }
        if !m.is_finite() || !e.is_finite() || e < 1.0 || ma.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("attention partial payload"));
        }
        Ok(Self { m, e, ma, seq_p })
    }
}

fn check_shapes(q: &QueryVector, segment: &KvSegment, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    if q.len() != cfg.head_dim || segment.head_dim() != cfg.head_dim {
        return Err(AttentionError::ShapeMismatch(format!(
            "query width {}, segment head_dim {}, config head_dim {}",
            q.len(),
            segment.head_dim(),
            cfg.head_dim
        )));
    }
    Ok(())
}

fn logits(q: &QueryVector, segment: &KvSegment, scale: f64) -> Vec<f64> {
    (0..segment.seq_len())
        .map(|i| {
            let dot: f64 = q
                .as_slice()
                .iter()
                .zip(segment.key(i))
                .map(|(a, b)| a * b)
                .sum();
            scale * dot
        })
        .collect()
}

fn reduce_segment(q: &QueryVector, segment: &KvSegment, cfg: &AttentionConfig) -> AttentionPartial {
    let logits = logits(q, segment, cfg.scale);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = 0.0;
    let mut ma = vec![0.0; cfg.head_dim];
    for (i, l) in logits.iter().enumerate() {
        let w = (l - m).exp();
        e += w;
        for (acc, v) in ma.iter_mut().zip(segment.value(i)) {
            *acc += w * v;
        }
    }
    AttentionPartial {
        m,
        e,
        ma,
        seq_p: segment.seq_len(),
    }
}

/// Softmax attention of one query over a whole segment, shifted by the
/// segment-wide maximum logit.
pub fn naive_attention(
    q: &QueryVector,
    segment: &KvSegment,
    cfg: &AttentionConfig,
) -> Result<Vec<f64>> {
    check_shapes(q, segment, cfg)?;
    let p = reduce_segment(q, segment, cfg);
    Ok(p.ma.iter().map(|x| x / p.e).collect())
}

pub fn compute_micro_attention(
    q: &QueryVector,
    segment: &KvSegment,
    cfg: &AttentionConfig,
) -> Result<AttentionPartial> {
    check_shapes(q, segment, cfg)?;
    Ok(reduce_segment(q, segment, cfg))
}

/// Merges two partials into the partial of the concatenated segments.
pub fn combine_partials(a: &AttentionPartial, b: &AttentionPartial) -> Result<AttentionPartial> {
    if a.head_dim() != b.head_dim() {
        return Err(AttentionError::ShapeMismatch(format!(
            "combining partials of head_dim {} and {}",
            a.head_dim(),
            b.head_dim()
        )));
    }
    for p in [a, b] {
        if !p.is_empty() && (!p.m.is_finite() || !p.e.is_finite()) {
            return Err(AttentionError::NonFinite("attention partial"));
        }
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    let m = a.m.max(b.m);
    let (sa, sb) = ((a.m - m).exp(), (b.m - m).exp());
    Ok(AttentionPartial {
        m,
        e: a.e * sa + b.e * sb,
        ma: a
            .ma
            .iter()
            .zip(&b.ma)
            .map(|(x, y)| x * sa + y * sb)
            .collect(),
        seq_p: a.seq_p + b.seq_p,
    })
}

/// Final attention output from the partials of all segments.
pub fn aggregate_partials(partials: &[AttentionPartial]) -> Result<Vec<f64>> {
    let first = partials.first().ok_or(AttentionError::NoPartials)?;
    let head_dim = first.head_dim();
    if partials.iter().any(|p| p.head_dim() != head_dim) {
        return Err(AttentionError::ShapeMismatch(
            "aggregating partials of different head_dim".into(),
        ));
    }
    let live: Vec<&AttentionPartial> = partials.iter().filter(|p| !p.is_empty()).collect();
    if live.is_empty() {
        return Err(AttentionError::EmptySegment);
    }
    let m_g = live.iter().map(|p| p.m).fold(f64::NEG_INFINITY, f64::max);
    let mut e_g = 0.0;
    let mut out = vec![0.0; head_dim];
    for p in live {
        let s = (p.m - m_g).exp();
        e_g += p.e * s;
        for (o, x) in out.iter_mut().zip(&p.ma) {
            *o += x * s;
        }
    }
    out.iter_mut().for_each(|o| *o /= e_g);
    Ok(out)
}

fn check_heads(queries: &[QueryVector], kv: &[KvSegment], cfg: &AttentionConfig) -> Result<()> {
    if queries.len() != cfg.num_q_heads || kv.len() != cfg.num_kv_heads {
        return Err(AttentionError::ShapeMismatch(format!(
            "{} query heads / {} kv heads for config {}/{}",
            queries.len(),
            kv.len(),
            cfg.num_q_heads,
            cfg.num_kv_heads
        )));
    }
    Ok(())
}

/// [`naive_attention`] for every query head, each against its shared KV head.
pub fn naive_attention_heads(
    queries: &[QueryVector],
    kv: &[KvSegment],
    cfg: &AttentionConfig,
) -> Result<Vec<Vec<f64>>> {
    check_heads(queries, kv, cfg)?;
    queries
        .iter()
        .enumerate()
        .map(|(h, q)| naive_attention(q, &kv[gqa_kv_head(h, cfg)?], cfg))
        .collect()
}

/// One partial per query head for a KV segment (one [`KvSegment`] per KV head).
pub fn micro_attention_heads(
    queries: &[QueryVector],
    kv: &[KvSegment],
    cfg: &AttentionConfig,
) -> Result<Vec<AttentionPartial>> {
    check_heads(queries, kv, cfg)?;
    queries
        .iter()
        .enumerate()
        .map(|(h, q)| compute_micro_attention(q, &kv[gqa_kv_head(h, cfg)?], cfg))
        .collect()
}

/// Aggregates per-segment head partials (`per_segment[j][head]`) per head.
pub fn aggregate_heads(per_segment: &[Vec<AttentionPartial>]) -> Result<Vec<Vec<f64>>> {
    let heads = per_segment.first().ok_or(AttentionError::NoPartials)?.len();
    if per_segment.iter().any(|s| s.len() != heads) {
        return Err(AttentionError::ShapeMismatch(
            "segments disagree on head count".into(),
        ));
    }
    (0..heads)
        .map(|h| {
            let column: Vec<AttentionPartial> =
                per_segment.iter().map(|s| s[h].clone()).collect();
            aggregate_partials(&column)
        })
        .collect()
}
