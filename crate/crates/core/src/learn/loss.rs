use super::LearnError;
use rand::Rng;

/// Loss value and its gradients with respect to both members of the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of picking `m_j` for `m_i` among `m_j` and the negatives,
/// with similarities `m_i . x / tau`. When `include_positive` is false the
/// denominator sums over the negatives only.
pub fn contrastive_loss(
    m_i: &[f64],
    m_j: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    include_positive: bool,
) -> Result<ContrastiveOutput, LearnError> {
    if negatives.is_empty() {
        return Err(LearnError::EmptyNegatives);
    }
    if m_i.len() != m_j.len() || negatives.iter().any(|n| n.len() != m_i.len()) {
        return Err(LearnError::ShapeMismatch("feature lengths differ".into()));
    }
    let s_pos = dot(m_i, m_j) / tau;
    let s_neg: Vec<f64> = negatives.iter().map(|n| dot(m_i, n) / tau).collect();
    let mut max = s_neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if include_positive {
        max = max.max(s_pos);
    }
    let mut z = s_neg.iter().map(|s| (s - max).exp()).sum::<f64>();
    let e_pos = (s_pos - max).exp();
    if include_positive {
        z += e_pos;
    }
    let lse = max + z.ln();
    let loss = lse - s_pos;

    let p_pos = if include_positive { e_pos / z } else { 0.0 };
    let coef_j = (p_pos - 1.0) / tau;
    let mut grad_i: Vec<f64> = m_j.iter().map(|v| v * coef_j).collect();
    for (n, s) in negatives.iter().zip(&s_neg) {
        let p = (s - max).exp() / z / tau;
        for (g, v) in grad_i.iter_mut().zip(n.iter()) {
            *g += p * v;
        }
    }
    let grad_j = m_i.iter().map(|v| v * coef_j).collect();
    Ok(ContrastiveOutput { loss, grad_i, grad_j })
}

/// Fixed-capacity FIFO of feature vectors, stored as one ring buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeDictionary {
    dim: usize,
    capacity: usize,
    data: Vec<f64>,
    /// Slot of the oldest entry.
    head: usize,
    len: usize,
}

impl NegativeDictionary {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeDictionary { dim, capacity, data: vec![0.0; capacity * dim], head: 0, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends one vector, evicting the oldest at capacity.
    pub fn push(&mut self, v: &[f64]) -> Result<(), LearnError> {
        if v.len() != self.dim {
            return Err(LearnError::ShapeMismatch(format!("dictionary holds {}-vectors, got {}", self.dim, v.len())));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let slot = if self.len < self.capacity {
            self.len += 1;
            (self.head + self.len - 1) % self.capacity
        } else {
            let s = self.head;
            self.head = (self.head + 1) % self.capacity;
            s
        };
        self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(v);
        Ok(())
    }

    /// Entry `i` in insertion order, `0` being the oldest.
    pub fn get(&self, i: usize) -> &[f64] {
        assert!(i < self.len, "dictionary index {i} out of range");
        let slot = (self.head + i) % self.capacity;
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// `n` entries drawn uniformly with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<&[f64]>, LearnError> {
        if self.len == 0 {
            return Err(LearnError::EmptyDictionary);
        }
        Ok((0..n).map(|_| self.get(rng.gen_range(0..self.len))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn near_perfect_match_has_tiny_loss() {
        let m = [1.0, 0.0, 0.0];
        let n = [0.0, 1.0, 0.0];
        let out = contrastive_loss(&m, &m, &[&n], 0.07, true).unwrap();
        let expected = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 6.2e-7).abs() < 0.05e-7);
    }

    #[test]
    fn negative_equal_to_positive_gives_log2() {
        let m = [0.6, 0.8];
        for tau in [0.07, 0.5, 3.0] {
            let out = contrastive_loss(&m, &m, &[&m], tau, true).unwrap();
            assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_similarities_give_log_n_plus_one() {
        let m = [1.0, 0.0];
        let negs = [[1.0, 0.0]; 9];
        let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
        let out = contrastive_loss(&m, &m, &refs, 0.07, true).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_negatives_rejected() {
        let m = [1.0];
        assert!(matches!(contrastive_loss(&m, &m, &[], 0.1, true), Err(LearnError::EmptyNegatives)));
    }

    #[test]
    fn dictionary_fifo_eviction() {
        let mut d = NegativeDictionary::new(4, 1);
        for i in 0..6 {
            d.push(&[i as f64]).unwrap();
        }
        assert_eq!(d.len(), 4);
        let got: Vec<f64> = d.iter().map(|v| v[0]).collect();
        assert_eq!(got, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn singleton_sampling_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = NegativeDictionary::new(3, 2);
        assert!(matches!(d.sample(1, &mut rng), Err(LearnError::EmptyDictionary)));
        d.push(&[0.6, 0.8]).unwrap();
        let s = d.sample(5, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|v| *v == [0.6, 0.8]));
    }

    #[test]
    fn sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut d = NegativeDictionary::new(10, 1);
        for i in 0..10 {
            d.push(&[i as f64]).unwrap();
        }
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for v in d.sample(draws, &mut rng).unwrap() {
            counts[v[0] as usize] += 1;
        }
        let mean = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
        }
    }
}
