//! External memory `M = [A; C]`: a fixed sparse random address block and a
//! differentiable content block written with projected hidden states.
//!
//! A [`MemoryState`] holds `batch` independent memories stacked row-wise,
//! so cell `i` of episode `b` is row `b·k + i`. All episodes of a batch
//! advance in lockstep and therefore share the write cursor.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryConfig {
    /// Number of cells.
    pub k: usize,
    /// Address width.
    pub a: usize,
    /// Content width (the micro-state size).
    pub c: usize,
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.a == 0 || self.c == 0 {
            return Err(Error::invalid(
                "init_memory",
                format!("k, a and c must be positive, got {self:?}"),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.a + self.c
    }
}

/// `k × a` addresses, each row with exactly `⌈a/4⌉` entries of ±1 at
/// distinct uniformly chosen columns.
pub fn sparse_addresses<R: Rng + ?Sized>(k: usize, a: usize, rng: &mut R) -> Tensor {
    let nnz = a.div_ceil(4);
    let mut t = Tensor::zeros(&[k, a]);
    for i in 0..k {
        let cols = rand::seq::index::sample(rng, a, nnz);
        let row = t.row_mut(i);
        for c in cols.iter() {
            row[c] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct MemoryState {
    pub config: MemoryConfig,
    pub batch: usize,
    /// `(batch·k) × a`, never differentiated.
    pub addresses: Var,
    /// `(batch·k) × c`.
    pub content: Var,
    /// Per-episode read counts, `batch × k`, row-major.
    pub usage_counts: Vec<u32>,
    /// Next sequential slot; stops at `k`.
    pub write_cursor: usize,
    pub last_read: Vec<Option<usize>>,
    /// Total reads so far per episode.
    pub reads: usize,
}

/// Fresh memory for `batch` episodes sharing the address block `addresses`
/// (`k × a`). Content starts at zero.
pub fn init_memory(g: &mut Graph, config: MemoryConfig, addresses: &Tensor, batch: usize) -> Result<MemoryState> {
    config.validate()?;
    if addresses.shape() != [config.k, config.a] {
        return Err(Error::shape("init_memory", addresses.shape(), &[config.k, config.a]));
    }
    let mut stacked = Vec::with_capacity(batch * config.k * config.a);
    for _ in 0..batch {
        stacked.extend_from_slice(addresses.data());
    }
    let addresses = g.constant(Tensor::new(vec![batch * config.k, config.a], stacked)?);
    let content = g.constant(Tensor::zeros(&[batch * config.k, config.c]));
    Ok(MemoryState {
        config,
        batch,
        addresses,
        content,
        usage_counts: vec![0; batch * config.k],
        write_cursor: 0,
        last_read: vec![None; batch],
        reads: 0,
    })
}

/// Algorithm-level write policy: sequential fill for the first `k` steps,
/// afterwards the write head follows the read head. `t` is 1-based.
pub fn select_write_slot(k: usize, t: usize, read_index: usize) -> usize {
    if t <= k {
        t - 1
    } else {
        read_index
    }
}

fn check_one_hot(op: &'static str, w: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (rows, cols) = w.as_matrix();
    if cols != k {
        return Err(Error::shape(op, w.shape(), &[rows, k]));
    }
    (0..rows)
        .map(|r| {
            let row = w.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones == 1 && zeros == k - 1 {
                Ok(row.iter().position(|&v| v == 1.0).unwrap())
            } else {
                Err(Error::invalid(op, format!("row {r} is not one-hot: {row:?}")))
            }
        })
        .collect()
}

impl MemoryState {
    /// `M = [A; C]` as one `(batch·k) × (a+c)` node.
    pub fn matrix(&self, g: &mut Graph) -> Result<Var> {
        g.concat(&[self.addresses, self.content])
    }

    /// Discrete read with a one-hot `batch × k` weight matrix (a `k`-vector
    /// when `batch == 1` is also accepted). Returns `batch × (a+c)`.
    pub fn read(&self, g: &mut Graph, w_onehot: &Tensor) -> Result<Var> {
        check_one_hot("read", w_onehot, self.config.k)?;
        let w = if w_onehot.rank() == 1 {
            w_onehot.clone().reshaped(vec![1, self.config.k])?
        } else {
            w_onehot.clone()
        };
        if w.shape()[0] != self.batch {
            return Err(Error::shape("read", w.shape(), &[self.batch, self.config.k]));
        }
        let m = self.matrix(g)?;
        let wv = g.constant(w);
        g.mix_rows(wv, m)
    }

    /// Read with arbitrary (possibly straight-through) weights over a
    /// precomputed memory matrix.
    pub fn read_weighted(&self, g: &mut Graph, weights: Var, matrix: Var) -> Result<Var> {
        g.mix_rows(weights, matrix)
    }

    /// Records this step's reads: bumps usage counts and the last-read index.
    pub fn record_reads(&mut self, indices: &[usize]) {
        let k = self.config.k;
        for (b, &i) in indices.iter().enumerate() {
            self.usage_counts[b * k + i] += 1;
            self.last_read[b] = Some(i);
        }
        self.reads += 1;
    }

    /// Slots for step `t` (1-based) given each episode's read index; advances
    /// the write cursor during the fill phase.
    pub fn select_write_slots(&mut self, t: usize, read_indices: &[usize]) -> Vec<usize> {
        let k = self.config.k;
        if t <= k {
            debug_assert_eq!(self.write_cursor, t - 1);
            self.write_cursor = t;
        }
        read_indices
            .iter()
            .map(|&r| select_write_slot(k, t, r))
            .collect()
    }

    /// `C[slot_b] ← h_b · W_m` for every episode `b`. `h` is `batch × d_h`,
    /// `w_m` is `d_h × c`. Returns the new state; `self` is untouched.
    pub fn write(&self, g: &mut Graph, slots: &[usize], h: Var, w_m: Var) -> Result<MemoryState> {
        let k = self.config.k;
        if slots.len() != self.batch {
            return Err(Error::invalid(
                "write",
                format!("{} slots for batch {}", slots.len(), self.batch),
            ));
        }
        if let Some(&bad) = slots.iter().find(|&&s| s >= k) {
            return Err(Error::invalid("write", format!("slot {bad} out of range 0..{k}")));
        }
        let projected = g.matmul(h, w_m)?;
        let ps = g.shape(projected).to_vec();
        let projected = if ps.len() == 1 {
            g.reshape(projected, vec![1, ps[0]])?
        } else {
            projected
        };
        if g.shape(projected) != [self.batch, self.config.c] {
            return Err(Error::shape("write", g.shape(projected), &[self.batch, self.config.c]));
        }
        let rows: Vec<usize> = slots.iter().enumerate().map(|(b, &s)| b * k + s).collect();
        let content = g.scatter_rows(self.content, &rows, projected)?;
        let mut next = self.clone();
        next.content = content;
        Ok(next)
    }

    pub fn usage_row(&self, b: usize) -> &[u32] {
        let k = self.config.k;
        &self.usage_counts[b * k..(b + 1) * k]
    }
}
