//! Fixed-capacity FIFO of key embeddings serving as InfoNCE negatives.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Entries are gradient-free snapshots; eviction is strictly FIFO and the
/// size never exceeds the capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue<T: Scalar> {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<T>>,
}

impl<T: Scalar> NegativeQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue capacity ({capacity}) and dim ({dim}) must be positive"
            )));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            entries: VecDeque::new(),
        })
    }

    /// Pre-filled with L2-normalized random unit vectors so step 0 is
    /// well-defined.
    pub fn init_random(capacity: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut q = NegativeQueue::new(capacity, dim)?;
        for _ in 0..capacity {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            for x in v.iter_mut() {
                *x /= norm;
            }
            q.entries.push_back(v.into_iter().map(T::from_f64).collect());
        }
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Append a batch of keys, evicting the oldest entries once the
    /// capacity is exceeded. Batches larger than the capacity are rejected.
    pub fn enqueue_dequeue(&mut self, keys: &Tensor<T>) -> Result<()> {
        let s = keys.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::dimension(
                "enqueue_dequeue",
                format!("keys {s:?} do not match queue dim {}", self.dim),
            ));
        }
        if s[0] > self.capacity {
            return Err(Error::Config(format!(
                "batch of {} exceeds queue capacity {}",
                s[0], self.capacity
            )));
        }
        for row in keys.data().chunks(self.dim) {
            self.entries.push_back(row.to_vec());
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Queue contents as a (len x dim) tensor, oldest entry first.
    pub fn as_tensor(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for row in &self.entries {
            data.extend_from_slice(row);
        }
        Tensor::new(&[self.entries.len(), self.dim], data).expect("rows are dim-long")
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        self.as_tensor().write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let read_err = |e: std::io::Error| Error::Data(format!("queue read failed: {e}"));
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(read_err)?;
        let capacity = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(read_err)?;
        let dim = u64::from_le_bytes(b8) as usize;
        let t = Tensor::<T>::read_from(r)?;
        let mut q = NegativeQueue::new(capacity, dim)?;
        if t.shape().len() != 2 || t.shape()[1] != dim || t.shape()[0] > capacity {
            return Err(Error::Data("queue tensor inconsistent with header".into()));
        }
        for row in t.data().chunks(dim) {
            q.entries.push_back(row.to_vec());
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn warmup_grows_without_eviction() {
        let mut q = NegativeQueue::<f64>::new(4, 2).unwrap();
        q.enqueue_dequeue(&keys(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])).unwrap();
        assert_eq!(q.len(), 3);
        let t = q.as_tensor();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(&t.data()[..2], &[1.0, 0.0]);
    }

    #[test]
    fn fifo_eviction_order() {
        let mut q = NegativeQueue::<f64>::new(4, 2).unwrap();
        q.enqueue_dequeue(&keys(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])).unwrap();
        q.enqueue_dequeue(&keys(&[[5.0, 5.0]])).unwrap();
        let t = q.as_tensor();
        assert_eq!(t.data(), &[2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 5.0]);
    }

    #[test]
    fn enqueue_twice_capacity_leaves_second_batch_in_order() {
        // list-oracle: after pushing K then K more, contents equal the
        // second batch in order
        let k = 4;
        let mut q = NegativeQueue::<f64>::new(k, 2).unwrap();
        let first: Vec<[f64; 2]> = (0..k).map(|i| [i as f64, 0.0]).collect();
        let second: Vec<[f64; 2]> = (0..k).map(|i| [100.0 + i as f64, 1.0]).collect();
        let mut oracle: Vec<[f64; 2]> = Vec::new();
        for batch in [&first, &second] {
            for row in batch.iter() {
                oracle.push(*row);
            }
            while oracle.len() > k {
                oracle.remove(0);
            }
            q.enqueue_dequeue(&keys(batch)).unwrap();
        }
        let t = q.as_tensor();
        let flat: Vec<f64> = oracle.iter().flatten().copied().collect();
        assert_eq!(t.data(), flat.as_slice());
    }

    #[test]
    fn oversized_batch_rejected() {
        let mut q = NegativeQueue::<f64>::new(2, 2).unwrap();
        let err = q
            .enqueue_dequeue(&keys(&[[0.0; 2], [0.0; 2], [0.0; 2]]))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn size_law_under_random_schedules() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(50, &[9]);
        for _ in 0..20 {
            let k = rng.gen_range(2..32);
            let b = rng.gen_range(1..=k);
            let mut q = NegativeQueue::<f64>::new(k, 3).unwrap();
            for t in 1..=12u64 {
                let batch =
                    Tensor::new(&[b, 3], (0..b * 3).map(|v| v as f64).collect()).unwrap();
                q.enqueue_dequeue(&batch).unwrap();
                assert_eq!(q.len(), (t as usize * b).min(k), "size law violated");
            }
        }
    }

    #[test]
    fn random_init_is_unit_norm_and_full() {
        let mut rng = crate::rng::derive_rng(51, &[10]);
        let q = NegativeQueue::<f64>::init_random(8, 5, &mut rng).unwrap();
        assert_eq!(q.len(), 8);
        for row in q.as_tensor().data().chunks(5) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_roundtrip() {
        let mut rng = crate::rng::derive_rng(52, &[11]);
        let mut q = NegativeQueue::<f32>::init_random(6, 4, &mut rng).unwrap();
        q.enqueue_dequeue(&Tensor::new(&[2, 4], vec![0.5; 8]).unwrap()).unwrap();
        let mut buf = Vec::new();
        q.write_to(&mut buf).unwrap();
        let back = NegativeQueue::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, q);
    }
}
