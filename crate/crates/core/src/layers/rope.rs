pub const ROPE_BASE: f32 = 10_000.0;

/// Rotary position embedding over interleaved pairs `(x[2i], x[2i+1])`.
#[derive(Clone, Debug)]
pub struct Rope {
    head_dim: usize,
    max_len: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Rope {
    pub fn new(head_dim: usize, max_len: usize) -> Self {
        assert!(head_dim % 2 == 0, "rotary head dim must be even");
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * pairs);
        let mut sin = Vec::with_capacity(max_len * pairs);
        for pos in 0..max_len {
            for i in 0..pairs {
                let freq = (ROPE_BASE as f64).powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Rope {
            head_dim,
            max_len,
            cos,
            sin,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Rotates one head vector at position `pos`; `inverse` applies the
    /// transpose, which is also the backward map.
    pub fn rotate(&self, v: &mut [f32], pos: usize, inverse: bool) {
        debug_assert_eq!(v.len(), self.head_dim);
        let pairs = self.head_dim / 2;
        let cos = &self.cos[pos * pairs..(pos + 1) * pairs];
        let sin = &self.sin[pos * pairs..(pos + 1) * pairs];
        for (i, pair) in v.chunks_exact_mut(2).enumerate() {
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}
