//! Prioritized experience replay: a sum-tree over transition priorities
//! with proportional (stratified) sampling and importance-sampling
//! weight correction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scenario::CoverageBitmap;

/// Additive floor so zero-TD-error transitions stay sampleable.
pub const PRIORITY_FLOOR: f64 = 1e-6;

/// Complete binary tree whose internal nodes hold the sum of their
/// children; leaves hold sampling masses. O(log n) update and retrieval.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.next_power_of_two().max(1);
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity - 1],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[0]
    }

    pub fn leaf(&self, index: usize) -> f64 {
        self.nodes[index + self.capacity - 1]
    }

    /// Sets the mass at `index`, propagating the change to the root.
    pub fn set(&mut self, index: usize, value: f64) {
        debug_assert!(index < self.capacity);
        debug_assert!(value >= 0.0 && value.is_finite());
        let mut node = index + self.capacity - 1;
        let change = value - self.nodes[node];
        self.nodes[node] = value;
        while node > 0 {
            node = (node - 1) / 2;
            self.nodes[node] += change;
        }
    }

    /// Finds the leaf where the prefix sum first exceeds `mass`.
    pub fn find(&self, mass: f64) -> usize {
        let mut node = 0;
        let mut remaining = mass;
        while node < self.capacity - 1 {
            let left = 2 * node + 1;
            if remaining <= self.nodes[left] {
                node = left;
            } else {
                remaining -= self.nodes[left];
                node = left + 1;
            }
        }
        node - (self.capacity - 1)
    }

    /// Recomputes the root bottom-up; used to check the incremental sums.
    #[cfg(test)]
    fn leaf_sum(&self) -> f64 {
        self.nodes[self.capacity - 1..].iter().sum()
    }
}

/// One stored interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: CoverageBitmap,
    pub action: usize,
    pub reward: f64,
    pub next_state: CoverageBitmap,
    pub terminal: bool,
}

/// A sampled transition with its buffer slot and importance weight.
#[derive(Debug, Clone)]
pub struct SampleEntry {
    pub index: usize,
    pub transition: Transition,
    pub weight: f64,
}

/// Ring buffer of transitions with proportional prioritized sampling.
///
/// Sampling mass for slot `j` is `p_j^mu` where `p_j` is the raw
/// priority (|TD error| plus a small floor); importance weights are
/// `(|H| * P(j))^-nu`, normalized so the largest weight in each sampled
/// batch is exactly 1.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    head: usize,
    tree: SumTree,
    priorities: Vec<f64>,
    max_priority: f64,
    priority_exponent: f64,
    correction_exponent: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, priority_exponent: f64, correction_exponent: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParam("replay capacity must be >= 1".into()));
        }
        for (name, v) in [
            ("priority exponent", priority_exponent),
            ("correction exponent", correction_exponent),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParam(format!(
                    "{name} must lie in [0,1], got {v}"
                )));
            }
        }
        Ok(Self {
            capacity,
            storage: Vec::with_capacity(capacity),
            head: 0,
            tree: SumTree::new(capacity),
            priorities: vec![0.0; capacity],
            max_priority: 1.0,
            priority_exponent,
            correction_exponent,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.storage.len() == self.capacity
    }

    pub fn priority(&self, index: usize) -> f64 {
        self.priorities[index]
    }

    /// Stores a transition with the maximal priority seen so far (1 while
    /// nothing has been updated), overwriting the oldest when full.
    pub fn push(&mut self, transition: Transition) {
        let slot = self.head;
        if self.storage.len() < self.capacity {
            self.storage.push(transition);
        } else {
            self.storage[slot] = transition;
        }
        self.head = (self.head + 1) % self.capacity;
        self.set_priority(slot, self.max_priority);
    }

    fn set_priority(&mut self, slot: usize, priority: f64) {
        self.priorities[slot] = priority;
        self.tree.set(slot, priority.powf(self.priority_exponent));
    }

    /// Draws `batch` transitions by stratified proportional sampling:
    /// one uniform draw within each of `batch` equal segments of the
    /// total mass. The marginal distribution of each draw matches the
    /// proportional law.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<SampleEntry>> {
        if !self.is_full() {
            return Err(Error::ReplayNotFull {
                len: self.storage.len(),
                capacity: self.capacity,
            });
        }
        let total = self.tree.total();
        debug_assert!(total > 0.0);
        let n = self.capacity as f64;
        let segment = total / batch as f64;

        let mut entries = Vec::with_capacity(batch);
        let mut max_weight = 0.0f64;
        for i in 0..batch {
            let lo = segment * i as f64;
            let mass = lo + rng.gen::<f64>() * segment;
            let index = self.tree.find(mass.min(total * (1.0 - 1e-12)));
            let probability = self.tree.leaf(index) / total;
            let weight = (n * probability).powf(-self.correction_exponent);
            max_weight = max_weight.max(weight);
            entries.push(SampleEntry {
                index,
                transition: self.storage[index].clone(),
                weight,
            });
        }
        for e in &mut entries {
            e.weight /= max_weight;
        }
        Ok(entries)
    }

    /// Resets the priorities of the given slots to the magnitude of
    /// their fresh TD errors (plus the floor).
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) {
        debug_assert_eq!(indices.len(), td_errors.len());
        for (&index, &delta) in indices.iter().zip(td_errors) {
            debug_assert!(index < self.storage.len());
            let priority = delta.abs() + PRIORITY_FLOOR;
            self.set_priority(index, priority);
            self.max_priority = self.max_priority.max(priority);
        }
    }

    /// Serializes the buffer (versioned, little-endian) for resumable
    /// training.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ABSREPLY");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        out.extend_from_slice(&(self.storage.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.head as u64).to_le_bytes());
        out.extend_from_slice(&self.max_priority.to_le_bytes());
        out.extend_from_slice(&self.priority_exponent.to_le_bytes());
        out.extend_from_slice(&self.correction_exponent.to_le_bytes());
        for (slot, t) in self.storage.iter().enumerate() {
            out.extend_from_slice(&self.priorities[slot].to_le_bytes());
            write_bitmap(&mut out, &t.state);
            out.extend_from_slice(&(t.action as u64).to_le_bytes());
            out.extend_from_slice(&t.reward.to_le_bytes());
            write_bitmap(&mut out, &t.next_state);
            out.push(t.terminal as u8);
        }
        // Tree nodes verbatim: incremental updates accumulate rounding,
        // so a rebuild would not reproduce sampling bit-for-bit.
        out.extend_from_slice(&(self.tree.nodes.len() as u64).to_le_bytes());
        for &node in &self.tree.nodes {
            out.extend_from_slice(&node.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "replay snapshot");
        let magic = r.take(8)?;
        if magic != b"ABSREPLY" {
            return Err(malformed("replay snapshot", "bad magic"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(malformed(
                "replay snapshot",
                format!("unsupported version {version}"),
            ));
        }
        let capacity = r.u64()? as usize;
        let len = r.u64()? as usize;
        let head = r.u64()? as usize;
        let max_priority = r.f64()?;
        let mu = r.f64()?;
        let nu = r.f64()?;
        if len > capacity || head >= capacity.max(1) {
            return Err(malformed("replay snapshot", "inconsistent sizes"));
        }
        let mut buffer = ReplayBuffer::new(capacity, mu, nu)?;
        buffer.head = head;
        buffer.max_priority = max_priority;
        for slot in 0..len {
            let priority = r.f64()?;
            let state = read_bitmap(&mut r)?;
            let action = r.u64()? as usize;
            let reward = r.f64()?;
            let next_state = read_bitmap(&mut r)?;
            let terminal = r.u8()? != 0;
            buffer.storage.push(Transition {
                state,
                action,
                reward,
                next_state,
                terminal,
            });
            buffer.priorities[slot] = priority;
        }
        let n_nodes = r.u64()? as usize;
        if n_nodes != buffer.tree.nodes.len() {
            return Err(malformed("replay snapshot", "tree size mismatch"));
        }
        for node in buffer.tree.nodes.iter_mut() {
            *node = r.f64()?;
        }
        Ok(buffer)
    }
}

fn write_bitmap(out: &mut Vec<u8>, bitmap: &CoverageBitmap) {
    out.extend_from_slice(&(bitmap.k() as u32).to_le_bytes());
    for &c in bitmap.as_slice() {
        out.extend_from_slice(&c.to_le_bytes());
    }
}

fn read_bitmap(r: &mut Reader) -> Result<CoverageBitmap> {
    let k = r.u32()? as usize;
    let mut bitmap = CoverageBitmap::zeros(k);
    let counts = bitmap.counts_mut();
    for c in counts.iter_mut() {
        *c = r.u32()?;
    }
    Ok(bitmap)
}

fn malformed(what: &'static str, detail: impl Into<String>) -> Error {
    Error::MalformedFile {
        what,
        detail: detail.into(),
    }
}

/// Minimal little-endian cursor shared by the binary format readers.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(malformed(self.what, "truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(tag: usize) -> Transition {
        let mut state = CoverageBitmap::zeros(3);
        state.counts_mut()[tag % 9] = tag as u32;
        Transition {
            state: state.clone(),
            action: tag % 4,
            reward: -0.5,
            next_state: state,
            terminal: false,
        }
    }

    fn filled(capacity: usize, mu: f64, nu: f64) -> ReplayBuffer {
        let mut buffer = ReplayBuffer::new(capacity, mu, nu).unwrap();
        for i in 0..capacity {
            buffer.push(transition(i));
        }
        buffer
    }

    #[test]
    fn push_starts_at_priority_one() {
        let mut buffer = ReplayBuffer::new(8, 0.6, 0.4).unwrap();
        buffer.push(transition(0));
        assert_eq!(buffer.priority(0), 1.0);
    }

    #[test]
    fn push_uses_running_max_priority() {
        let mut buffer = filled(4, 0.6, 0.4);
        buffer.update_priorities(&[2], &[5.0]);
        buffer.push(transition(9));
        // Ring head wrapped to slot 0; new item takes the max.
        assert!((buffer.priority(0) - (5.0 + PRIORITY_FLOOR)).abs() < 1e-12);
    }

    #[test]
    fn ring_overwrites_oldest_and_keeps_sums() {
        let mut buffer = filled(4, 1.0, 0.0);
        for i in 0..5 {
            buffer.push(transition(100 + i));
        }
        assert_eq!(buffer.len(), 4);
        assert!((buffer.tree.total() - buffer.tree.leaf_sum()).abs() < 1e-9);
        // Oldest (slot 0) now holds the most recent push.
        assert_eq!(buffer.storage[0].state.as_slice().iter().sum::<u32>(), 104);
    }

    #[test]
    fn sample_requires_full_buffer() {
        let mut buffer = ReplayBuffer::new(8, 0.6, 0.4).unwrap();
        buffer.push(transition(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buffer.sample(2, &mut rng),
            Err(Error::ReplayNotFull { .. })
        ));
    }

    #[test]
    fn proportional_masses_follow_the_exponent() {
        let mut buffer = filled(2, 1.0, 0.0);
        buffer.update_priorities(&[0, 1], &[2.0, 1.0]);
        let total = buffer.tree.total();
        let p0 = buffer.tree.leaf(0) / total;
        assert!((p0 - 2.0 / 3.0).abs() < 1e-5);

        let mut buffer = filled(2, 0.6, 0.0);
        buffer.update_priorities(&[0, 1], &[2.0, 1.0]);
        let total = buffer.tree.total();
        let p0 = buffer.tree.leaf(0) / total;
        let expect = 2f64.powf(0.6) / (2f64.powf(0.6) + 1.0);
        assert!((p0 - expect).abs() < 1e-5, "p0={p0} expect={expect}");
        assert!((expect - 0.6025).abs() < 1e-3);
    }

    #[test]
    fn equal_priorities_give_unit_weights() {
        let buffer = filled(8, 0.6, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = buffer.sample(6, &mut rng).unwrap();
        for e in &batch {
            assert!((e.weight - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_bounded_by_one_with_max_exactly_one() {
        let mut buffer = filled(8, 0.6, 0.4);
        let deltas: Vec<f64> = (0..8).map(|i| 0.1 + i as f64).collect();
        let indices: Vec<usize> = (0..8).collect();
        buffer.update_priorities(&indices, &deltas);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let batch = buffer.sample(5, &mut rng).unwrap();
            let max = batch.iter().map(|e| e.weight).fold(0.0f64, f64::max);
            assert_eq!(max, 1.0);
            for e in &batch {
                assert!(e.weight <= 1.0);
                // Weight non-increasing in sampling probability.
                for other in &batch {
                    let p_e = buffer.tree.leaf(e.index);
                    let p_o = buffer.tree.leaf(other.index);
                    if p_e < p_o {
                        assert!(e.weight >= other.weight - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_correction_exponent_disables_weighting() {
        let mut buffer = filled(8, 0.6, 0.0);
        let indices: Vec<usize> = (0..8).collect();
        let deltas: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        buffer.update_priorities(&indices, &deltas);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = buffer.sample(8, &mut rng).unwrap();
        assert!(batch.iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn zero_priority_exponent_is_uniform() {
        let mut buffer = filled(16, 0.0, 0.0);
        let indices: Vec<usize> = (0..16).collect();
        let deltas: Vec<f64> = (0..16).map(|i| (i * i) as f64).collect();
        buffer.update_priorities(&indices, &deltas);
        let total = buffer.tree.total();
        for i in 0..16 {
            assert!((buffer.tree.leaf(i) / total - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn update_floor_and_absolute_value() {
        let mut buffer = filled(4, 1.0, 0.0);
        buffer.update_priorities(&[0, 1], &[0.0, -3.0]);
        assert_eq!(buffer.priority(0), PRIORITY_FLOOR);
        assert!((buffer.priority(1) - (3.0 + PRIORITY_FLOOR)).abs() < 1e-12);
        assert!((buffer.tree.total() - buffer.tree.leaf_sum()).abs() < 1e-9);
    }

    #[test]
    fn tree_sums_stay_consistent_under_churn() {
        let mut buffer = filled(64, 0.6, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for step in 0..10_000 {
            if step % 3 == 0 {
                buffer.push(transition(step));
            } else {
                let idx = rng.gen_range(0..64);
                let delta = rng.gen_range(-5.0..5.0);
                buffer.update_priorities(&[idx], &[delta]);
            }
        }
        let total = buffer.tree.total();
        let direct = buffer.tree.leaf_sum();
        assert!((total - direct).abs() / direct < 1e-6);
    }

    #[test]
    fn empirical_frequencies_match_proportional_law() {
        let mut buffer = filled(16, 0.6, 0.4);
        let indices: Vec<usize> = (0..16).collect();
        let deltas: Vec<f64> = (0..16).map(|i| 0.05 + 0.35 * i as f64).collect();
        buffer.update_priorities(&indices, &deltas);

        let total = buffer.tree.total();
        let expected: Vec<f64> = (0..16).map(|i| buffer.tree.leaf(i) / total).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0u64; 16];
        let draws = 100_000;
        let batch = 8;
        for _ in 0..draws / batch {
            for e in buffer.sample(batch, &mut rng).unwrap() {
                counts[e.index] += 1;
            }
        }
        for i in 0..16 {
            let freq = counts[i] as f64 / draws as f64;
            assert!(
                (freq - expected[i]).abs() < 0.02,
                "leaf {i}: {freq} vs {}",
                expected[i]
            );
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut buffer = filled(8, 0.6, 0.4);
        buffer.update_priorities(&[1, 5], &[2.5, 0.25]);
        buffer.push(transition(42));
        let bytes = buffer.to_bytes();
        let restored = ReplayBuffer::from_bytes(&bytes).unwrap();
        assert_eq!(restored.len(), buffer.len());
        assert_eq!(restored.head, buffer.head);
        assert_eq!(restored.storage, buffer.storage);
        for i in 0..8 {
            assert_eq!(restored.priority(i), buffer.priority(i));
        }
        // Same RNG, same draws.
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let sa = buffer.sample(4, &mut a).unwrap();
        let sb = restored.sample(4, &mut b).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            assert_eq!(x.index, y.index);
            assert_eq!(x.weight, y.weight);
        }
    }
}
